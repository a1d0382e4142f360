use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::{save_checkpoint, EncoderRef};
use super::protocols::{cross_dataset_eval, domain_shift_eval, evaluate_view};
use super::results::{render_csv, render_seeds_csv, render_text, CellFailure, ResultRow, RunResult, RunStatus, SeedValues};
use super::{ExperimentConfig, Protocol};
use crate::data::{generate_dataset, harmonic_mean, make_episode, write_dataset, Dataset, EpisodeConfig, Split};
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::inference::SamplerSpec;
use crate::learners::{ContextInit, LearnerKind, PromptState};
use crate::trainer::{train, write_history_csv, EpochRecord, TrainConfig};

/// Written next to the results when any cell failed.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// One training run.
#[derive(Clone, Debug)]
struct Cell {
    learner: LearnerKind,
    /// Index into `inits` for `ablation_init`.
    init: Option<usize>,
    seed: u64,
}

struct CellOutput {
    state: PromptState,
    history: Vec<EpochRecord>,
    /// `(variant, values)` in column order.
    rows: Vec<(String, Vec<f64>)>,
}

struct Prepared {
    source: Dataset,
    targets: Vec<Dataset>,
}

fn init_label(init: &ContextInit) -> String {
    match init {
        ContextInit::Random => "random".into(),
        ContextInit::Template(t) => t.clone(),
    }
}

impl Cell {
    fn stem(&self) -> String {
        match self.init {
            Some(i) => format!("{}-init{i}-seed{}", self.learner.tag(), self.seed),
            None => format!("{}-seed{}", self.learner.tag(), self.seed),
        }
    }

    fn label(&self, cfg: &ExperimentConfig) -> String {
        match self.init {
            Some(i) => format!("{}/{}", self.learner.table_name(), init_label(&cfg.inits[i])),
            None => self.learner.table_name().into(),
        }
    }
}

fn columns(cfg: &ExperimentConfig) -> Vec<String> {
    match cfg.protocol {
        Protocol::CrossDataset => {
            let mut c = vec!["source".to_string()];
            c.extend(cfg.targets.iter().map(|t| t.name.clone()));
            if !cfg.targets.is_empty() {
                c.push("average".into());
            }
            c
        }
        Protocol::DomainShift => cfg.severities.iter().map(|s| format!("s={s}")).collect(),
        _ => ["base", "new", "H"].map(String::from).to_vec(),
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &learner in &cfg.learners {
        let inits: Vec<Option<usize>> = if cfg.protocol == Protocol::AblationInit {
            (0..cfg.inits.len()).map(Some).collect()
        } else {
            vec![None]
        };
        for init in inits {
            for &seed in &cfg.seeds {
                out.push(Cell { learner, init, seed });
            }
        }
    }
    out
}

fn base_new_h(backbone: &Backbone, state: &PromptState, tau: f64, ds: &Dataset, ep: &crate::data::Episode, spec: &SamplerSpec) -> Result<Vec<f64>> {
    let base = evaluate_view(backbone, state, &ep.view(ds, Split::BaseEval), tau, spec)?;
    let new = evaluate_view(backbone, state, &ep.view(ds, Split::NewEval), tau, spec)?;
    let h = harmonic_mean(base, new).unwrap_or(0.0);
    Ok(vec![base, new, h])
}

fn run_cell(cfg: &ExperimentConfig, backbone: &Backbone, data: &Prepared, cell: &Cell) -> Result<CellOutput> {
    let episode_cfg = EpisodeConfig {
        seed: cell.seed,
        ..cfg.episode.clone()
    };
    let mut tc = TrainConfig {
        learner: cell.learner,
        seed: cell.seed,
        ..cfg.train.clone()
    };
    if let Some(i) = cell.init {
        tc.init = cfg.inits[i].clone();
    }
    let spec = SamplerSpec {
        seed: cell.seed,
        ..cfg.sampler
    };
    let src = &data.source;
    let ep = make_episode(src, &episode_cfg)?;
    let out = train(backbone, &ep.view(src, Split::Support), &tc)?;
    let (state, tau) = (&out.state, tc.tau);
    let prefix = |v: &str| {
        if cfg.learners.len() > 1 {
            format!("{}/{v}", cell.learner.table_name())
        } else {
            v.to_string()
        }
    };
    let rows = match cfg.protocol {
        Protocol::BaseToNew | Protocol::AblationInit => {
            vec![(cell.label(cfg), base_new_h(backbone, state, tau, src, &ep, &spec)?)]
        }
        Protocol::AblationPosterior => cfg
            .families
            .iter()
            .map(|&family| {
                let s = SamplerSpec { family, ..spec };
                Ok((prefix(family.name()), base_new_h(backbone, state, tau, src, &ep, &s)?))
            })
            .collect::<Result<_>>()?,
        Protocol::AblationMc => cfg
            .ks
            .iter()
            .map(|&k| {
                let s = SamplerSpec { k, ..spec };
                Ok((prefix(&format!("K={k}")), base_new_h(backbone, state, tau, src, &ep, &s)?))
            })
            .collect::<Result<_>>()?,
        Protocol::CrossDataset => {
            let r = cross_dataset_eval(backbone, state, tau, src, &data.targets, &episode_cfg, &spec)?;
            let mut v = vec![r.source];
            v.extend(r.targets.iter().map(|t| t.1));
            v.extend(r.average());
            vec![(cell.label(cfg), v)]
        }
        Protocol::DomainShift => {
            let c = domain_shift_eval(backbone, state, tau, src, &cfg.dataset, &cfg.severities, &episode_cfg, &spec)?;
            vec![(cell.label(cfg), c.points.iter().map(|p| p.1).collect())]
        }
    };
    Ok(CellOutput {
        state: out.state,
        history: out.history,
        rows,
    })
}

fn baselines(cfg: &ExperimentConfig, rows: &mut [ResultRow]) {
    let ablation = matches!(
        cfg.protocol,
        Protocol::AblationPosterior | Protocol::AblationMc | Protocol::AblationInit
    );
    for i in 0..rows.len() {
        let learner = rows[i].learner;
        let base = if ablation {
            rows.iter().find(|r| r.learner == learner).map(|r| r.variant.clone())
        } else {
            let b = match cfg.baseline {
                Some(b) => Some(b),
                None => learner.deterministic_counterpart(),
            };
            b.and_then(|b| rows.iter().find(|r| r.learner == b)).map(|r| r.variant.clone())
        };
        let Some(base) = base.filter(|b| *b != rows[i].variant) else {
            continue;
        };
        let bmean = rows.iter().find(|r| r.variant == base).unwrap().mean.clone();
        rows[i].delta = Some(rows[i].mean.iter().zip(&bmean).map(|(a, b)| a - b).collect());
        rows[i].baseline = Some(base);
    }
}

fn aggregate(cfg: &ExperimentConfig, outputs: &[(Cell, Result<CellOutput>)]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = Vec::new();
    for (cell, out) in outputs {
        let Ok(out) = out else { continue };
        for (variant, values) in &out.rows {
            let sv = SeedValues {
                seed: cell.seed,
                values: values.clone(),
            };
            match rows.iter_mut().find(|r| &r.variant == variant) {
                Some(r) => r.per_seed.push(sv),
                None => rows.push(ResultRow {
                    variant: variant.clone(),
                    learner: cell.learner,
                    per_seed: vec![sv],
                    mean: Vec::new(),
                    baseline: None,
                    delta: None,
                }),
            }
        }
    }
    for r in &mut rows {
        let n = r.per_seed.len() as f64;
        let width = r.per_seed[0].values.len();
        r.mean = (0..width)
            .map(|c| r.per_seed.iter().map(|s| s.values[c]).sum::<f64>() / n)
            .collect();
    }
    baselines(cfg, &mut rows);
    rows
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `table.csv`, `seeds.csv` and `table.txt`, and
/// sets or clears the incomplete marker.
pub fn write_results(dir: impl AsRef<Path>, r: &RunResult) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_file(&dir.join("results.json"), r.to_json())?;
    write_file(&dir.join("table.csv"), render_csv(r))?;
    write_file(&dir.join("seeds.csv"), render_seeds_csv(r))?;
    write_file(&dir.join("table.txt"), render_text(r))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    match r.status {
        RunStatus::Partial => {
            let body: String = r
                .failures
                .iter()
                .map(|f| format!("{} seed {}: {}\n", f.cell, f.seed, f.error))
                .collect();
            write_file(&marker, body)
        }
        RunStatus::Complete if marker.exists() => std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e)),
        RunStatus::Complete => Ok(()),
    }
}

/// Runs every (learner, seed) cell of `cfg` in parallel and writes results,
/// checkpoints and loss histories under `out_dir`. Cell failures are
/// recorded and the remaining cells still run; only setup errors (bad
/// encoder or dataset specs, IO) abort.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunResult> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    let backbone = Backbone::new(cfg.encoder_seed, cfg.encoder)?;
    let checksum = backbone.checksum();
    let source = generate_dataset(&cfg.dataset, &backbone)?;
    let targets = if cfg.protocol == Protocol::CrossDataset {
        cfg.targets
            .iter()
            .map(|t| generate_dataset(t, &backbone))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let data = Prepared { source, targets };

    for sub in ["checkpoints", "histories", "datasets"] {
        create_dir(&dir.join(sub))?;
    }
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    for ds in std::iter::once(&data.source).chain(&data.targets) {
        write_dataset(ds, dir.join("datasets").join(format!("{}.txt", ds.name)))?;
    }

    let outputs: Vec<(Cell, Result<CellOutput>)> = cells(cfg)
        .into_par_iter()
        .map(|c| {
            let r = run_cell(cfg, &backbone, &data, &c);
            (c, r)
        })
        .collect();

    let enc = EncoderRef::of(&backbone, cfg.encoder_seed, cfg.train.tau);
    let mut failures = Vec::new();
    for (cell, out) in &outputs {
        match out {
            Ok(o) => {
                let stem = cell.stem();
                save_checkpoint(dir.join("checkpoints").join(format!("{stem}.ckpt")), &o.state, Some(&enc))?;
                write_history_csv(&o.history, dir.join("histories").join(format!("{stem}.csv")))?;
            }
            Err(e) => failures.push(CellFailure {
                cell: cell.label(cfg),
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }
    if backbone.checksum() != checksum {
        return Err(Error::Config("frozen encoder weights changed during the run".into()));
    }

    let result = RunResult {
        name: cfg.name.clone(),
        protocol: cfg.protocol,
        status: if failures.is_empty() { RunStatus::Complete } else { RunStatus::Partial },
        seeds: cfg.seeds.clone(),
        encoder_checksum: format!("{checksum:016x}"),
        columns: columns(cfg),
        rows: aggregate(cfg, &outputs),
        failures,
    };
    write_results(dir, &result)?;
    Ok(result)
}
