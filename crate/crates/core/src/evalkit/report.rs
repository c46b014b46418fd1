use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::mean_median;
use crate::entity_rep::ConditioningMode;
use crate::error::{Error, Result};

/// Tolerance used when checking stored aggregates against recomputation.
const AGGREGATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEval {
    pub entity_id: u32,
    pub objmc: Option<f64>,
    pub valid_frames: usize,
    pub lost_frames: usize,
    pub coasted_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    pub seed: u64,
    /// Pooled over every valid (entity, frame) pair of the clip.
    pub objmc: Option<f64>,
    pub entities: Vec<EntityEval>,
    /// Per-frame PSNR against the held-out frames; `None` marks identical
    /// frames (infinite PSNR).
    pub psnr: Vec<Option<f64>>,
}

impl ClipEval {
    pub fn entity_frames(&self) -> usize {
        self.entities.iter().map(|e| e.valid_frames + e.lost_frames).sum()
    }

    pub fn lost_frames(&self) -> usize {
        self.entities.iter().map(|e| e.lost_frames).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: ConditioningMode,
    /// Which checkpoint produced these clips.
    pub checkpoint: Option<String>,
    pub clips: Vec<ClipEval>,
    pub mean_objmc: Option<f64>,
    pub median_objmc: Option<f64>,
    /// Fraction of (entity, frame) pairs the tracker lost.
    pub tracker_loss_rate: f64,
    /// Mean over finite per-frame PSNR values.
    pub mean_psnr: Option<f64>,
}

impl ModeReport {
    pub fn new(mode: ConditioningMode, checkpoint: Option<String>, clips: Vec<ClipEval>) -> Self {
        let mut r = Self {
            mode,
            checkpoint,
            clips,
            mean_objmc: None,
            median_objmc: None,
            tracker_loss_rate: 0.0,
            mean_psnr: None,
        };
        r.recompute();
        r
    }

    /// Refreshes the aggregates from the per-clip entries.
    pub fn recompute(&mut self) {
        let objmc: Vec<f64> = self.clips.iter().filter_map(|c| c.objmc).collect();
        (self.mean_objmc, self.median_objmc) = mean_median(&objmc);
        let total: usize = self.clips.iter().map(ClipEval::entity_frames).sum();
        let lost: usize = self.clips.iter().map(ClipEval::lost_frames).sum();
        self.tracker_loss_rate = if total == 0 { 0.0 } else { lost as f64 / total as f64 };
        let psnr: Vec<f64> = self.clips.iter().flat_map(|c| c.psnr.iter().flatten().copied()).collect();
        self.mean_psnr = mean_median(&psnr).0;
    }

    fn check(&self) -> Result<()> {
        let mut fresh = self.clone();
        fresh.recompute();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= AGGREGATE_TOL * (1.0 + x.abs()),
            (None, None) => true,
            _ => false,
        };
        if !close(self.mean_objmc, fresh.mean_objmc)
            || !close(self.median_objmc, fresh.median_objmc)
            || !close(Some(self.tracker_loss_rate), Some(fresh.tracker_loss_rate))
            || !close(self.mean_psnr, fresh.mean_psnr)
        {
            return Err(Error::Spec(format!(
                "aggregates of mode `{}` do not match its per-clip entries",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerGate {
    pub clips: usize,
    /// Tracker vs ground truth on the real frames, unoccluded pairs only.
    pub mean_objmc: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub sampling_steps: usize,
    pub seed: u64,
    pub tracker_gate: TrackerGate,
    /// False when the tracker gate failed; ObjMC numbers are then unreliable.
    pub trusted: bool,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, mode: ConditioningMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads a report and checks every aggregate against its clips.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: EvalReport = serde_json::from_slice(&std::fs::read(path)?)?;
        for m in &r.modes {
            m.check()?;
        }
        Ok(r)
    }

    pub fn to_markdown(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(
            s,
            "Fingerprint `{}`, {} sampling steps, seed {}.\n",
            &self.fingerprint[..self.fingerprint.len().min(16)],
            self.sampling_steps,
            self.seed
        );
        let _ = writeln!(
            s,
            "Tracker gate: mean ObjMC {} px on ground-truth frames over {} clips (threshold {:.1}): **{}**.\n",
            f(self.tracker_gate.mean_objmc),
            self.tracker_gate.clips,
            self.tracker_gate.threshold,
            if self.tracker_gate.passed { "passed" } else { "FAILED, results untrusted" }
        );
        let _ = writeln!(s, "## Summary\n");
        let _ = writeln!(s, "| Mode | Clips | ObjMC mean (px) | ObjMC median (px) | PSNR (dB) | Tracker loss |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for m in &self.modes {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.1}% |",
                m.mode,
                m.clips.len(),
                f(m.mean_objmc),
                f(m.median_objmc),
                f(m.mean_psnr),
                100.0 * m.tracker_loss_rate
            );
        }
        let _ = writeln!(s, "\nPSNR and ObjMC here are desk-scale proxies and are not comparable to FID/FVD.\n");
        let _ = writeln!(s, "## Conditioning ablation\n");
        let _ = writeln!(s, "| Entity rep. | Position | ObjMC (px) |");
        let _ = writeln!(s, "|---|---|---|");
        for (mode, ent, pos) in [
            (ConditioningMode::None, " ", " "),
            (ConditioningMode::NoPosition, "x", " "),
            (ConditioningMode::Full, "x", "x"),
        ] {
            if let Some(m) = self.mode(mode) {
                let _ = writeln!(s, "| {ent} | {pos} | {} |", f(m.mean_objmc));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, objmc: Option<f64>, lost: usize) -> ClipEval {
        ClipEval {
            clip_id: id.into(),
            seed: 0,
            objmc,
            entities: vec![EntityEval {
                entity_id: 1,
                objmc,
                valid_frames: 8 - lost,
                lost_frames: lost,
                coasted_frames: 0,
            }],
            psnr: vec![Some(20.0), None],
        }
    }

    fn report() -> EvalReport {
        EvalReport {
            fingerprint: "abc".into(),
            sampling_steps: 50,
            seed: 0,
            tracker_gate: TrackerGate {
                clips: 2,
                mean_objmc: Some(0.3),
                threshold: 1.0,
                passed: true,
            },
            trusted: true,
            modes: vec![ModeReport::new(
                ConditioningMode::Full,
                None,
                vec![clip("a", Some(2.0), 0), clip("b", Some(4.0), 2), clip("c", None, 8)],
            )],
        }
    }

    #[test]
    fn aggregates_follow_clips() {
        let r = report();
        let m = &r.modes[0];
        assert_eq!(m.mean_objmc, Some(3.0));
        assert_eq!(m.median_objmc, Some(3.0));
        assert!((m.tracker_loss_rate - 10.0 / 24.0).abs() < 1e-12);
        assert_eq!(m.mean_psnr, Some(20.0));
    }

    #[test]
    fn load_checks_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let r = report();
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
        let mut bad = r.clone();
        bad.modes[0].mean_objmc = Some(1.0);
        bad.save(&p).unwrap();
        assert!(matches!(EvalReport::load(&p), Err(Error::Spec(_))));
    }

    #[test]
    fn markdown_has_tables() {
        let md = report().to_markdown();
        assert!(md.contains("| full | 3 | 3.00 | 3.00 | 20.00 | 41.7% |"));
        assert!(md.contains("| x | x | 3.00 |"));
    }
}
