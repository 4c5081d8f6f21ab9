//! Negative-pool ablation: which unlabeled pixels may serve as negatives.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sampling::NegativeFilter;

use super::run;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Unlabeled negatives restricted by the given entropy test.
    Negatives(NegativeFilter),
    /// Labeled loss only (`eta = 0`, `lambda_c = 0`).
    Supervised,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Negatives(NegativeFilter::Unreliable),
        AblationMode::Negatives(NegativeFilter::Reliable),
        AblationMode::Negatives(NegativeFilter::All),
        AblationMode::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Negatives(f) => f.name(),
            AblationMode::Supervised => "supervised",
        }
    }

    pub fn apply(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self {
            AblationMode::Negatives(f) => cfg.negative_filter = f,
            AblationMode::Supervised => {
                cfg.eta = 0.0;
                cfg.lambda_c = 0.0;
            }
        }
        cfg
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(AblationMode::Supervised),
            other => other.parse().map(AblationMode::Negatives),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub mode: AblationMode,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single seed.
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn mean(&self, mode: AblationMode) -> Option<f64> {
        self.summary.iter().find(|s| s.mode == mode).map(|s| s.mean)
    }

    /// `row,mode,seed,miou,std`: one `run` row per (mode, seed), then one
    /// `summary` row per mode carrying the mean in `miou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,mode,seed,miou,std\n");
        for r in &self.rows {
            writeln!(out, "run,{},{},{:.6},", r.mode.name(), r.seed, r.miou).unwrap();
        }
        for s in &self.summary {
            writeln!(out, "summary,{},,{:.6},{:.6}", s.mode.name(), s.mean, s.std).unwrap();
        }
        out
    }
}

pub fn summarize(mode: AblationMode, values: &[f64]) -> AblationSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    AblationSummary {
        mode,
        mean,
        std,
        runs: n,
    }
}

/// Final validation mIoU for every (mode, seed) pair.
pub fn ablate_reliability(base: &RunConfig, modes: &[AblationMode], seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(modes.len() * seeds.len());
    let mut summary = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let miou = run(&mode.apply(base, seed))?.final_miou();
            values.push(miou);
            rows.push(AblationRow { mode, seed, miou });
        }
        summary.push(summarize(mode, &values));
    }
    Ok(AblationTable { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(AblationMode::Supervised, &[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(summarize(AblationMode::Supervised, &[4.0]).std, 0.0);
    }
}
