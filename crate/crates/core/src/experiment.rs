//! Conditioning ablation: per seed, train the full model (also evaluated
//! with zero maps), a relation-bypassed model and a model without the loss
//! mask, then evaluate all of them on the same clips with paired seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::entity_rep::ConditioningMode;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_modes, EvalOptions, EvalReport};
use crate::pipeline::{self, TrainSummary};
use crate::synth::Dataset;

pub const REPORT_JSON: &str = "experiment.json";
pub const REPORT_MD: &str = "experiment.md";

/// Required ratio of full to unconditioned ObjMC.
pub const EFFICACY_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model sampled with all-zero maps.
    Unconditioned,
    NoPosition,
    Full,
    /// Full conditioning, trained with `lambda_bg = 1`.
    NoLossMask,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unconditioned => "unconditioned",
            Variant::NoPosition => "no_position",
            Variant::Full => "full",
            Variant::NoLossMask => "no_loss_mask",
        }
    }

    pub fn mode(self) -> ConditioningMode {
        match self {
            Variant::Unconditioned => ConditioningMode::None,
            Variant::NoPosition => ConditioningMode::NoPosition,
            Variant::Full | Variant::NoLossMask => ConditioningMode::Full,
        }
    }

    fn checkpoint_dir(self) -> &'static str {
        match self {
            Variant::Unconditioned | Variant::Full => "full",
            Variant::NoPosition => "no_position",
            Variant::NoLossMask => "no_loss_mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub per_seed: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub training: Vec<(Variant, TrainSummary)>,
    /// One mode entry per variant, in `variants` order.
    pub variants: Vec<Variant>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset_digest: String,
    pub runs: Vec<SeedRun>,
    pub rows: Vec<VariantRow>,
    pub criteria: Vec<Criterion>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let s = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(s))
}

impl ExperimentReport {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Builds rows and criteria from the per-seed runs.
    pub fn summarize(dataset_digest: String, runs: Vec<SeedRun>) -> Self {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &runs {
            for v in &r.variants {
                if !variants.contains(v) {
                    variants.push(*v);
                }
            }
        }
        let rows: Vec<VariantRow> = variants
            .iter()
            .map(|&v| {
                let per_seed: Vec<Option<f64>> = runs
                    .iter()
                    .map(|r| {
                        r.variants
                            .iter()
                            .position(|x| *x == v)
                            .and_then(|i| r.report.modes[i].mean_objmc)
                    })
                    .collect();
                let vals: Vec<f64> = per_seed.iter().flatten().copied().collect();
                let (mean, std) = mean_std(&vals);
                VariantRow { variant: v, per_seed, mean, std }
            })
            .collect();
        let mut out = Self {
            dataset_digest,
            runs,
            rows,
            criteria: Vec::new(),
        };
        out.criteria = out.evaluate_criteria();
        out
    }

    fn evaluate_criteria(&self) -> Vec<Criterion> {
        let get = |v| self.row(v).and_then(|r| r.mean);
        let fmt = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.3}"));
        let mut c = Vec::new();
        let trusted = self.runs.iter().all(|r| r.report.trusted);
        c.push(Criterion {
            name: "tracker gate".into(),
            passed: trusted && !self.runs.is_empty(),
            detail: format!("{} of {} seed runs trusted", self.runs.iter().filter(|r| r.report.trusted).count(), self.runs.len()),
        });
        let (full, none) = (get(Variant::Full), get(Variant::Unconditioned));
        c.push(Criterion {
            name: "control efficacy".into(),
            passed: matches!((full, none), (Some(f), Some(n)) if f <= EFFICACY_RATIO * n),
            detail: format!("full {} vs {EFFICACY_RATIO} x unconditioned {}", fmt(full), fmt(none)),
        });
        if let Some(np) = self.row(Variant::NoPosition).map(|r| r.mean) {
            c.push(Criterion {
                name: "ablation ordering".into(),
                passed: matches!((full, np, none), (Some(f), Some(p), Some(n)) if f <= p && p <= n),
                detail: format!("full {} <= no_position {} <= unconditioned {}", fmt(full), fmt(np), fmt(none)),
            });
        }
        if let Some(nm) = self.row(Variant::NoLossMask).map(|r| r.mean) {
            c.push(Criterion {
                name: "loss mask".into(),
                passed: matches!((full, nm), (Some(f), Some(m)) if f <= m),
                detail: format!("full {} <= no_loss_mask {}", fmt(full), fmt(nm)),
            });
        }
        c
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{REPORT_JSON}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, dir.join(REPORT_JSON))?;
        std::fs::write(dir.join(REPORT_MD), self.to_markdown())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(REPORT_JSON))?)?)
    }

    pub fn to_markdown(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(s, "# Conditioning ablation\n");
        let _ = writeln!(
            s,
            "Dataset digest `{}`, {} seed(s).\n",
            &self.dataset_digest[..self.dataset_digest.len().min(16)],
            self.runs.len()
        );
        let _ = writeln!(s, "| Entity rep. | Position | ObjMC (px) | std |");
        let _ = writeln!(s, "|---|---|---|---|");
        for (v, e, p) in [
            (Variant::Unconditioned, " ", " "),
            (Variant::NoPosition, "x", " "),
            (Variant::Full, "x", "x"),
        ] {
            if let Some(r) = self.row(v) {
                let _ = writeln!(s, "| {e} | {p} | {} | {} |", f(r.mean), f(r.std));
            }
        }
        if let (Some(full), Some(nm)) = (self.row(Variant::Full), self.row(Variant::NoLossMask)) {
            let _ = writeln!(s, "\n| Loss mask | ObjMC (px) | std |");
            let _ = writeln!(s, "|---|---|---|");
            let _ = writeln!(s, "| off | {} | {} |", f(nm.mean), f(nm.std));
            let _ = writeln!(s, "| on | {} | {} |", f(full.mean), f(full.std));
        }
        let _ = writeln!(s, "\n## Per seed\n");
        let _ = writeln!(s, "| Variant | {} |", self.runs.iter().map(|r| format!("seed {}", r.seed)).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(self.runs.len()));
        for r in &self.rows {
            let cells: Vec<String> = r.per_seed.iter().map(|x| f(*x)).collect();
            let _ = writeln!(s, "| {} | {} |", r.variant.name(), cells.join(" | "));
        }
        let _ = writeln!(s, "\n## Criteria\n");
        for c in &self.criteria {
            let _ = writeln!(s, "- {}: **{}** ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        s
    }
}

/// Variants trained and evaluated under `cfg.experiment`.
pub fn variants(cfg: &Config) -> Vec<Variant> {
    let mut v = vec![Variant::Full, Variant::Unconditioned];
    if cfg.experiment.no_position {
        v.push(Variant::NoPosition);
    }
    if cfg.experiment.no_mask {
        v.push(Variant::NoLossMask);
    }
    v
}

/// Runs the whole ablation under `out`; finished checkpoints are reused.
pub fn run(cfg: &Config, ds: &Dataset, out: &Path) -> Result<ExperimentReport> {
    if cfg.experiment.seeds.is_empty() {
        return Err(Error::Config("experiment.seeds is empty".into()));
    }
    let clips = pipeline::load_split(ds, cfg.eval.split, cfg.eval.clips)?;
    let variants = variants(cfg);
    let mut runs = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        let mut training = Vec::new();
        let mut models = Vec::new();
        for v in &variants {
            if *v == Variant::Unconditioned {
                continue;
            }
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            match v {
                Variant::NoPosition => tc.mode = ConditioningMode::NoPosition,
                Variant::NoLossMask => tc.lambda_bg = 1.0,
                _ => {}
            }
            let dir: PathBuf = seed_dir.join(v.checkpoint_dir());
            log::info!("seed {seed}: training {}", v.name());
            training.push((*v, pipeline::train(ds, &cfg.model, &tc, &dir)?));
            models.push((v.checkpoint_dir(), dir.clone(), pipeline::load_model(&dir, cfg.eval.use_ema)?));
        }
        let runs_for_eval: Vec<_> = variants
            .iter()
            .map(|v| {
                let (_, dir, m) = models.iter().find(|(k, _, _)| *k == v.checkpoint_dir()).expect("trained above");
                (v.mode(), m, Some(dir.display().to_string()))
            })
            .collect();
        let opts = EvalOptions {
            sampling_steps: cfg.eval.sampling_steps,
            seed,
        };
        let report = evaluate_modes(&runs_for_eval, &clips, &opts)?;
        runs.push(SeedRun {
            seed,
            training,
            variants: variants.clone(),
            report,
        });
    }
    let report = ExperimentReport::summarize(ds.digest()?, runs);
    report.save(out)?;
    Ok(report)
}
