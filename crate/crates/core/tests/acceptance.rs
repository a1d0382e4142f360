//! Acceptance criteria. Each prints one `PASS`/`FAIL` line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use vprompt::autodiff::Tensor;
use vprompt::data::{generate_dataset, harmonic_mean, make_episode, Split};
use vprompt::encoders::{Backbone, EncoderDims};
use vprompt::experiment::{
    load_checkpoint, preset, run_experiment, save_checkpoint, EncoderRef, ExperimentConfig, RunResult,
    DEFAULT_ENCODER_SEED,
};
use vprompt::inference::{Predictor, SamplerFamily, SamplerSpec};
use vprompt::learners::{
    kl_to_standard_normal, ClassSet, Classifier, LearnerConfig, LearnerKind, PosteriorParams, PromptState, StepNoise,
};
use vprompt::rng;
use vprompt::trainer::train;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Checksums seen by every training run in this process.
#[derive(Default)]
struct Ledger {
    checksums: Vec<(String, String)>,
}

impl Ledger {
    fn record_run(&mut self, what: &str, r: &RunResult) {
        self.checksums.push((what.into(), r.encoder_checksum.clone()));
    }

    fn record(&mut self, what: &str, b: &Backbone) {
        self.checksums.push((what.into(), format!("{:016x}", b.checksum())));
    }
}

fn backbone() -> Backbone {
    Backbone::new(DEFAULT_ENCODER_SEED, EncoderDims::default()).unwrap()
}

fn class_set(b: &Backbone, n: usize) -> ClassSet {
    let names: Vec<String> = (0..n).map(|i| format!("class{i:02}")).collect();
    ClassSet::new(b, &names).unwrap()
}

fn random_image(b: &Backbone, r: &mut rng::Rng) -> Vec<f64> {
    b.encoders.encode_image(&rng::normal_vec(r, b.dims().image_dim)).unwrap()
}

/// A seeded state with every parameter moved off its initial value.
fn jittered(kind: LearnerKind, b: &Backbone, seed: u64) -> PromptState {
    let mut s = PromptState::init(kind, b, &LearnerConfig::default(), seed).unwrap();
    let mut r = rng::stream(seed, 1001, 0);
    let names: Vec<String> = s.params().keys().cloned().collect();
    for n in names {
        let p = s.params()[&n].clone();
        let noise = rng::normal_tensor(&mut r, p.rows(), p.cols(), 0.05);
        s.set_param(&n, p.zip_map(&noise, |a, c| a + c)).unwrap();
    }
    s
}

fn frozen_noise(kind: LearnerKind, b: &Backbone, classes: usize, r: &mut rng::Rng) -> StepNoise {
    let e = b.dims().token_dim;
    match kind {
        LearnerKind::VptGlobal | LearnerKind::VptConditional => {
            StepNoise::Residual((0..2).map(|_| rng::normal_tensor(r, 1, e, 1.0)).collect())
        }
        LearnerKind::Proda => {
            StepNoise::Weights((0..4).map(|_| rng::normal_tensor(r, classes, b.dims().embed_dim, 1.0)).collect())
        }
        _ => StepNoise::None,
    }
}

/// Analytic gradients against central differences of the loss value,
/// `|a − n| / max(1, |a|)` per entry.
fn c1_gradient_fidelity(ledger: &mut Ledger) -> Outcome {
    let start = Instant::now();
    let b = backbone();
    let classes = class_set(&b, 5);
    let clf = Classifier::new(&b, &classes, 10.0);
    let h = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for kind in [LearnerKind::Coop, LearnerKind::Cocoop, LearnerKind::VptConditional, LearnerKind::VptGlobal, LearnerKind::Proda] {
        let name = match kind {
            LearnerKind::Coop => "coop_loss",
            LearnerKind::Cocoop => "cocoop",
            LearnerKind::Proda => "proda_loss",
            LearnerKind::VptGlobal => "elbo_loss(global)",
            _ => "elbo_loss(conditional)",
        };
        for point in 0..20u64 {
            let state = jittered(kind, &b, 100 + point);
            let mut r = rng::stream(point, 1002, kind as u64);
            let image = random_image(&b, &mut r);
            let label = point as usize % classes.len();
            let noise = frozen_noise(kind, &b, classes.len(), &mut r);
            let (_, grads) = state.loss_and_grads(&clf, &image, label, &noise, 1.0).unwrap();
            let value = |s: &PromptState| s.loss_and_grads(&clf, &image, label, &noise, 1.0).unwrap().0;
            let mut probe = state.clone();
            let mut err = 0.0f64;
            for (group, analytic) in &grads {
                let orig = state.params()[group].clone();
                for i in 0..orig.len() {
                    let mut t = orig.clone();
                    t.data_mut()[i] += h;
                    probe.set_param(group, t.clone()).unwrap();
                    let plus = value(&probe);
                    t.data_mut()[i] -= 2.0 * h;
                    probe.set_param(group, t).unwrap();
                    let minus = value(&probe);
                    let numeric = (plus - minus) / (2.0 * h);
                    let a = analytic.data()[i];
                    err = err.max((a - numeric).abs() / a.abs().max(1.0));
                }
                probe.set_param(group, orig).unwrap();
            }
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
        }
    }
    ledger.record("gradient checks", &b);
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(max < 1e-4 && secs < 120.0, format!("max rel err {max:.1e} [{}], {secs:.1}s", parts.join(", ")))
}

/// `∫ q ln(q/p)` per coordinate by composite Simpson over `μ ± 14σ`.
fn kl_by_quadrature(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi) = (mu - 14.0 * sd, mu + 14.0 * sd);
    let n = 20_000;
    let dx = (hi - lo) / n as f64;
    let f = |x: f64| {
        let log_q = -0.5 * (x - mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        sum += f(lo + i as f64 * dx) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * dx / 3.0
}

fn c2_kl_oracle() -> Outcome {
    let mut r = rng::stream(2, 1003, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let z = rng::normal_vec(&mut r, 2);
        let (mu, log_var) = (1.5 * z[0], 1.5 * z[1]);
        let analytic = kl_to_standard_normal(&PosteriorParams::new(vec![mu], vec![log_var]).unwrap()).unwrap();
        worst = worst.max((analytic - kl_by_quadrature(mu, log_var.exp())).abs());
    }
    outcome(worst < 1e-6, format!("max abs err {worst:.1e} over 50 pairs"))
}

fn c3_metric_exactness() -> Outcome {
    let cases = [((82.66, 63.22), 71.65), ((80.47, 71.69), 75.83)];
    let mut parts = Vec::new();
    let mut pass = true;
    for ((base, new), want) in cases {
        let h = harmonic_mean(base, new).unwrap();
        pass &= (h - want).abs() <= 0.01;
        parts.push(format!("H({base}, {new}) = {h:.4} vs {want}"));
    }
    outcome(pass, parts.join("; "))
}

/// Zero-noise, β = 0 ELBO against the deterministic learner built from the
/// same parameters.
fn c4_degeneracy(ledger: &mut Ledger) -> Outcome {
    let b = backbone();
    let classes = class_set(&b, 5);
    let clf = Classifier::new(&b, &classes, 10.0);
    let e = b.dims().token_dim;
    let zero = StepNoise::Residual(vec![Tensor::zeros(1, e)]);
    let (mut cond, mut glob) = (0.0f64, 0.0f64);
    for point in 0..20u64 {
        let mut r = rng::stream(point, 1004, 0);
        let image = random_image(&b, &mut r);
        let label = point as usize % classes.len();

        let vpt = jittered(LearnerKind::VptConditional, &b, 200 + point);
        let mut p: BTreeMap<String, Tensor> = vpt
            .params()
            .iter()
            .filter(|(k, _)| k.as_str() == "context" || k.starts_with("metanet."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        p.insert("residual.w".into(), vpt.params()["mean_head.w"].clone());
        p.insert("residual.b".into(), vpt.params()["mean_head.b"].clone());
        let cocoop = PromptState::from_params(LearnerKind::Cocoop, p).unwrap();
        let a = vpt.loss_and_grads(&clf, &image, label, &zero, 0.0).unwrap().0;
        let c = cocoop.loss_and_grads(&clf, &image, label, &StepNoise::None, 0.0).unwrap().0;
        cond = cond.max((a - c).abs());

        let vpt = jittered(LearnerKind::VptGlobal, &b, 300 + point);
        let mu = vpt.params()["global.mean"].clone();
        let mut folded = vpt.context().clone();
        for row in 0..folded.rows() {
            for col in 0..e {
                folded.set(row, col, folded.get(row, col) + mu.get(0, col));
            }
        }
        let coop = PromptState::from_params(LearnerKind::Coop, BTreeMap::from([("context".to_string(), folded)])).unwrap();
        let a = vpt.loss_and_grads(&clf, &image, label, &zero, 0.0).unwrap().0;
        let c = coop.loss_and_grads(&clf, &image, label, &StepNoise::None, 0.0).unwrap().0;
        glob = glob.max((a - c).abs());
    }
    ledger.record("degeneracy", &b);
    outcome(
        cond < 1e-10 && glob < 1e-10,
        format!("conditional vs cocoop {cond:.1e}, global vs coop {glob:.1e}"),
    )
}

/// Least-squares slope of `ln sd` on `ln K`.
fn loglog_slope(ks: &[usize], sds: &[f64]) -> f64 {
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = sds.iter().map(|s| s.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn c5_inference_averaging() -> Outcome {
    let start = Instant::now();
    let b = backbone();
    let classes = class_set(&b, 5);
    let clf = Classifier::new(&b, &classes, 10.0);
    let state = jittered(LearnerKind::VptConditional, &b, 7);
    let predictor = Predictor::new(clf, &state).unwrap();
    let mut r = rng::stream(5, 1005, 0);
    let image = random_image(&b, &mut r);
    let ks = [1usize, 4, 16, 64];
    let mut sum_err = 0.0f64;
    let mut sds = Vec::new();
    for &k in &ks {
        let draws: Vec<f64> = (0..200u64)
            .map(|rep| {
                let spec = SamplerSpec { family: SamplerFamily::PosteriorFull, k, seed: 1000 + rep };
                let p = predictor.predict_mc(&image, &spec, 0).unwrap();
                sum_err = sum_err.max((p.probs.iter().sum::<f64>() - 1.0).abs());
                p.probs[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        sds.push(var.sqrt());
    }
    let slope = loglog_slope(&ks, &sds);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        sum_err < 1e-9 && (slope + 0.5).abs() <= 0.1 && secs < 300.0,
        format!(
            "max |Σp − 1| {sum_err:.1e}; sd {:?}; slope {slope:.3}; {secs:.1}s",
            sds.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn five_seeds(name: &str) -> ExperimentConfig {
    let mut cfg = preset(name).unwrap();
    cfg.seeds = SEEDS.to_vec();
    cfg
}

fn new_acc(r: &RunResult, variant: &str) -> Vec<f64> {
    let col = r.column("new").unwrap();
    r.row(variant).unwrap().per_seed.iter().map(|s| s.values[col]).collect()
}

fn c6_posterior_family(ledger: &mut Ledger) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = five_seeds("ablation_posterior");
    cfg.sampler.k = 1;
    let r = run_experiment(&cfg, dir.path()).unwrap();
    ledger.record_run("ablation_posterior", &r);
    let full = new_acc(&r, SamplerFamily::PosteriorFull.name());
    let uni = new_acc(&r, SamplerFamily::Uniform01.name());
    let nor = new_acc(&r, SamplerFamily::StandardNormal.name());
    let wins = (0..SEEDS.len()).filter(|&i| full[i] > uni[i] && full[i] > nor[i]).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    outcome(
        wins >= 4,
        format!("full beats U and N on {wins}/5 seeds (new acc full {}, U {}, N {})", fmt(&full), fmt(&uni), fmt(&nor)),
    )
}

fn c7_mc_trend(ledger: &mut Ledger) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = five_seeds("ablation_mc");
    cfg.ks = (1..=10).collect();
    let r = run_experiment(&cfg, dir.path()).unwrap();
    ledger.record_run("ablation_mc", &r);
    let col = r.column("new").unwrap();
    let curve: Vec<f64> = cfg.ks.iter().map(|k| r.row(&format!("K={k}")).unwrap().mean[col]).collect();
    let endpoint = curve[9] >= curve[0] - 0.5;
    // Each point may sit at most 0.5 below the best point before it.
    let mut best = f64::NEG_INFINITY;
    let mut banded = true;
    for &v in &curve {
        banded &= v >= best - 0.5;
        best = best.max(v);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        endpoint && banded && secs < 600.0,
        format!(
            "mean new acc K=1..10: {}; {secs:.1}s",
            curve.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn c8_base_to_new(ledger: &mut Ledger) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = five_seeds("base_to_new");
    cfg.learners = vec![LearnerKind::Coop, LearnerKind::VptGlobal, LearnerKind::Cocoop, LearnerKind::VptConditional];
    let r = run_experiment(&cfg, dir.path()).unwrap();
    ledger.record_run("base_to_new", &r);
    let h = r.column("H").unwrap();
    let per = |v: &str, c: usize| -> Vec<f64> { r.row(v).unwrap().per_seed.iter().map(|s| s.values[c]).collect() };
    let mean = |v: &str, c: usize| r.row(v).unwrap().mean[c];
    let (coop_h, vpt_h) = (per("coop", h), per("coop+vpt", h));
    let (co_new, cv_new) = (new_acc(&r, "cocoop"), new_acc(&r, "cocoop+vpt"));
    let a_wins = (0..5).filter(|&i| vpt_h[i] >= coop_h[i]).count();
    let b_wins = (0..5).filter(|&i| cv_new[i] >= co_new[i]).count();
    let new = r.column("new").unwrap();
    let a = mean("coop+vpt", h) >= mean("coop", h) && a_wins >= 4;
    let b = mean("cocoop+vpt", new) >= mean("cocoop", new) && b_wins >= 4;
    outcome(
        a && b,
        format!(
            "H coop+vpt {:.2} vs coop {:.2} ({a_wins}/5); new cocoop+vpt {:.2} vs cocoop {:.2} ({b_wins}/5)",
            mean("coop+vpt", h),
            mean("coop", h),
            mean("cocoop+vpt", new),
            mean("cocoop", new)
        ),
    )
}

fn c9_determinism(ledger: &mut Ledger) -> Outcome {
    let mut cfg = preset("base_to_new").unwrap();
    cfg.learners = vec![LearnerKind::Coop, LearnerKind::VptConditional, LearnerKind::Proda];
    cfg.seeds = vec![4];
    let (a, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ledger.record_run("determinism a", &run_experiment(&cfg, a.path()).unwrap());
    ledger.record_run("determinism b", &run_experiment(&cfg, c.path()).unwrap());
    let same = std::fs::read(a.path().join("results.json")).unwrap() == std::fs::read(c.path().join("results.json")).unwrap();

    let b = backbone();
    let ds = generate_dataset(&cfg.dataset, &b).unwrap();
    let ep = make_episode(&ds, &cfg.episode).unwrap();
    let tc = vprompt::trainer::TrainConfig { learner: LearnerKind::VptConditional, ..cfg.train.clone() };
    let state = train(&b, &ep.view(&ds, Split::Support), &tc).unwrap().state;
    ledger.record("checkpoint training", &b);
    let path = a.path().join("roundtrip.ckpt");
    save_checkpoint(&path, &state, Some(&EncoderRef::of(&b, DEFAULT_ENCODER_SEED, tc.tau))).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let rebuilt = loaded.encoder.as_ref().unwrap().rebuild().unwrap();

    let view = ep.view(&ds, Split::NewEval);
    let classes = ClassSet::new(&b, &view.class_names).unwrap();
    let live = Predictor::new(Classifier::new(&b, &classes, tc.tau), &state).unwrap();
    let restored = Predictor::new(Classifier::new(&rebuilt, &classes, tc.tau), &loaded.state).unwrap();
    let spec = SamplerSpec::default();
    let matching = view
        .features
        .iter()
        .take(20)
        .enumerate()
        .filter(|(i, x)| {
            let f = b.encoders.encode_image(x).unwrap();
            live.predict_mc(&f, &spec, *i as u64).unwrap() == restored.predict_mc(&f, &spec, *i as u64).unwrap()
        })
        .count();
    outcome(
        same && matching == 20,
        format!("results.json identical: {same}; checkpoint predictions identical on {matching}/20 inputs"),
    )
}

fn c10_frozen_backbone(ledger: &Ledger) -> Outcome {
    let want = format!("{:016x}", backbone().checksum());
    let bad: Vec<&str> = ledger.checksums.iter().filter(|(_, c)| *c != want).map(|(w, _)| w.as_str()).collect();
    outcome(
        bad.is_empty() && !ledger.checksums.is_empty(),
        format!("{} runs checked against {want}; changed: {bad:?}", ledger.checksums.len()),
    )
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name:<24} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report(1, "gradient fidelity", c1_gradient_fidelity(&mut ledger));
    report(2, "KL oracle", c2_kl_oracle());
    report(3, "metric exactness", c3_metric_exactness());
    report(4, "degeneracy", c4_degeneracy(&mut ledger));
    report(5, "inference averaging", c5_inference_averaging());
    report(6, "posterior family trend", c6_posterior_family(&mut ledger));
    report(7, "MC sample trend", c7_mc_trend(&mut ledger));
    report(8, "base-to-new direction", c8_base_to_new(&mut ledger));
    report(9, "determinism", c9_determinism(&mut ledger));
    report(10, "frozen backbone", c10_frozen_backbone(&ledger));
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
