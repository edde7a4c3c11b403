use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io::write_atomic;

pub const HISTORY_HEADER: &str = "step,epoch,loss,dev_metric,timestamp_ms";

/// One optimizer step. `dev_metric` is set on the last step of each epoch
/// when a dev split is available.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: Option<f64>,
    pub timestamp_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Epoch whose parameters were kept, if a dev split drove selection.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.steps.last().map_or(0, |s| s.epoch + 1)
    }

    /// Mean step loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums = vec![(0.0, 0usize); self.epochs()];
        for s in &self.steps {
            sums[s.epoch].0 += s.loss;
            sums[s.epoch].1 += 1;
        }
        sums.into_iter().map(|(t, n)| t / n.max(1) as f64).collect()
    }

    pub fn dev_metrics(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.dev_metric).collect()
    }

    /// Equality ignoring wall-clock timestamps.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.best_epoch == other.best_epoch
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step
                    && a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.dev_metric.map(f64::to_bits) == b.dev_metric.map(f64::to_bits)
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for s in &self.steps {
            let dev = s.dev_metric.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", s.step, s.epoch, s.loss, dev, s.timestamp_ms);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}
