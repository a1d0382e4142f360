use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "tiny"
protocol = "base_to_new"
learners = ["coop", "coop+vpt"]
seeds = [1, 2]

[dataset]
classes = 6
examples_per_class = 30

[episode]
shots = 4
eval_reserve = 10

[train]
epochs = 2

[sampler]
k = 3
"#;

fn vprompt(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vprompt"));
    cmd.args(args).env_remove("VPROMPT_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn run_then_report_prints_the_same_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("res");
    let o = vprompt(&["run", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    assert!(stdout(&o).starts_with(&table));
    assert!(table.contains("coop+vpt"));

    let r = vprompt(&["report", out.to_str().unwrap()], &[]);
    assert!(r.status.success());
    assert_eq!(stdout(&r), table);
    assert_eq!(std::fs::read_dir(out.join("checkpoints")).unwrap().count(), 4);
}

#[test]
fn seed_and_learner_flags_narrow_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("res");
    let o = vprompt(&["run", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--learner", "coop", "--k", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpts: Vec<_> = std::fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(ckpts, ["coop-seed7.ckpt"]);
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seeds = [7]"));
    assert!(saved.contains("k = 2"));
}

#[test]
fn env_output_dir_applies_unless_out_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");

    let o = vprompt(&["run", &cfg, "--learner", "coop", "--seed", "1"], &[("VPROMPT_OUT", &env_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("results.json").is_file());

    let o = vprompt(
        &["run", &cfg, "--learner", "coop", "--seed", "1", "--out", flag_dir.to_str().unwrap()],
        &[("VPROMPT_OUT", &env_dir.join("unused"))],
    );
    assert!(o.status.success());
    assert!(flag_dir.join("results.json").is_file());
    assert!(!env_dir.join("unused").exists());
}

#[test]
fn emitted_preset_config_runs_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let o = vprompt(&["preset", "ablation_mc", "--emit-config"], &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("protocol = \"ablation_mc\""));
    assert!(text.contains("ks = [1, 2, 5, 10, 20]"));

    // Shrink the training budget and run the emitted file.
    let text = text.replace("epochs = 40", "epochs = 1").replace("seeds = [1, 2, 3]", "seeds = [1]");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("res");
    let o = vprompt(&["run", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in ["K=1", "K=2", "K=5", "K=10", "K=20"] {
        assert!(stdout(&o).contains(k), "{k}");
    }
}

#[test]
fn unknown_preset_lists_the_known_ones() {
    let o = vprompt(&["preset", "imagenet"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("imagenet"));
    for p in ["base_to_new", "cross_dataset", "domain_shift", "ablation_posterior", "ablation_mc", "ablation_init"] {
        assert!(e.contains(p), "{p} missing from: {e}");
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("seeds = [1, 2]", "seeds = []"));
    let o = vprompt(&["run", &cfg, "--out", dir.path().join("res").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`seeds`"), "{}", stderr(&o));
    assert!(!dir.path().join("res").exists());

    let cfg = write_config(dir.path(), &SMALL.replace("[train]", "[train]\nlearning_rate = 1.0"));
    let o = vprompt(&["run", &cfg], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = vprompt(&["run", &cfg, "--learner", "clip"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn partial_run_exits_two_and_keeps_results() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL
        .replace("protocol = \"base_to_new\"", "protocol = \"ablation_init\"")
        .replace("learners = [\"coop\", \"coop+vpt\"]", "learners = [\"coop\"]")
        .replace(
            "seeds = [1, 2]",
            "seeds = [1]\ninits = [{ mode = \"random\" }, { mode = \"template\", text = \"a nonexistentword {class}\" }]",
        );
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("res");
    let o = vprompt(&["run", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).contains("INCOMPLETE"));
    assert!(out.join("INCOMPLETE").is_file());
    assert!(out.join("results.json").is_file());
}

#[test]
fn eval_reproduces_and_checks_the_learner() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("res");
    assert!(vprompt(&["run", &cfg, "--out", out.to_str().unwrap(), "--seed", "1"], &[]).status.success());
    let ckpt = out.join("checkpoints/vpt_global-seed1.ckpt");
    let ds = out.join("datasets/synthetic.txt");
    let (c, d) = (ckpt.to_str().unwrap(), ds.to_str().unwrap());

    let eval_out = dir.path().join("eval");
    let a = vprompt(&["eval", c, d, "--k", "4", "--seed", "9", "--out", eval_out.to_str().unwrap()], &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("% on synthetic (180 examples)"), "{}", stdout(&a));
    let b = vprompt(&["eval", c, d, "--k", "4", "--seed", "9"], &[]);
    assert_eq!(stdout(&a), stdout(&b));
    let json = std::fs::read_to_string(eval_out.join("eval.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["examples"], 180);
    assert_eq!(v["k"], 4);

    let wrong = vprompt(&["eval", c, d, "--learner", "cocoop"], &[]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(stderr(&wrong).contains("cocoop"), "{}", stderr(&wrong));

    let missing = vprompt(&["eval", c, dir.path().join("nope.txt").to_str().unwrap()], &[]);
    assert_eq!(missing.status.code(), Some(1));
}
