//! Ablation sweeps over routing and capsule-layer options.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diff::{Real, SquashKind};
use crate::error::{Error, Result};
use crate::experiment::{embeddings_for, evaluate_auto, fit};
use crate::model::{LossKind, ModelConfig};
use crate::text::{build_vocab, DatasetSplits};
use crate::train::prepare_samples;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Iterations,
    Leaky,
    Orphan,
    Amend,
    Shared,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [Toggle::Iterations, Toggle::Leaky, Toggle::Orphan, Toggle::Amend, Toggle::Shared];
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iterations" | "routing" | "routing-iters" => Ok(Toggle::Iterations),
            "leaky" => Ok(Toggle::Leaky),
            "orphan" => Ok(Toggle::Orphan),
            "amend" | "amendment" => Ok(Toggle::Amend),
            "shared" | "shared-weights" => Ok(Toggle::Shared),
            other => Err(Error::Config(format!(
                "unknown ablation toggle {other:?} (expected iterations|leaky|orphan|amend|shared)"
            ))),
        }
    }
}

/// Value lists whose cross product forms the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub iterations: Vec<usize>,
    pub leaky: Vec<bool>,
    pub orphan: Vec<bool>,
    pub amend: Vec<bool>,
    pub shared: Vec<bool>,
    pub losses: Vec<LossKind>,
    pub squashes: Vec<SquashKind>,
}

impl AblationGrid {
    /// Varies the listed toggles ({1,3,5} iterations, on/off otherwise) and
    /// pins everything else to `base`.
    pub fn varying(base: &ModelConfig, toggles: &[Toggle]) -> Self {
        let flag = |t: Toggle, current: bool| if toggles.contains(&t) { vec![true, false] } else { vec![current] };
        AblationGrid {
            iterations: if toggles.contains(&Toggle::Iterations) {
                vec![1, 3, 5]
            } else {
                vec![base.routing.iterations]
            },
            leaky: flag(Toggle::Leaky, base.routing.leaky),
            orphan: flag(Toggle::Orphan, base.orphan),
            amend: flag(Toggle::Amend, base.routing.amend),
            shared: flag(Toggle::Shared, base.shared_weights),
            losses: vec![base.loss],
            squashes: vec![base.squash],
        }
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
            * self.leaky.len()
            * self.orphan.len()
            * self.amend.len()
            * self.shared.len()
            * self.losses.len()
            * self.squashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn configs(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.iterations {
            for &leaky in &self.leaky {
                for &shared in &self.shared {
                    for &orphan in &self.orphan {
                        for &amend in &self.amend {
                            for &loss in &self.losses {
                                for &squash in &self.squashes {
                                    let mut c = base.clone();
                                    c.routing.iterations = r;
                                    c.routing.leaky = leaky;
                                    c.routing.amend = amend;
                                    c.routing.baseline = false;
                                    c.shared_weights = shared;
                                    c.orphan = orphan;
                                    c.loss = loss;
                                    c.squash = squash;
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub iterations: usize,
    pub leaky: bool,
    pub amend: bool,
    pub shared: bool,
    pub orphan: bool,
    pub loss: LossKind,
    pub squash: SquashKind,
    /// Test accuracy, or micro-F1 for multi-label test data.
    pub accuracy: f64,
}

pub const COLUMNS: [&str; 9] =
    ["Index", "Routing", "Leaky", "Amend", "Shared", "OrphanCap", "Loss", "Squash Coefficient", "Accuracy"];

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

impl AblationRow {
    pub fn cells(&self) -> [String; 9] {
        [
            self.index.to_string(),
            self.iterations.to_string(),
            yes_no(self.leaky).into(),
            yes_no(self.amend).into(),
            yes_no(self.shared).into(),
            yes_no(self.orphan).into(),
            self.loss.label().into(),
            self.squash.label().into(),
            format!("{:.1}", 100.0 * self.accuracy),
        ]
    }
}

/// Trains and scores one model per grid point. Runs one configuration at a
/// time unless `jobs > 1`.
pub fn run_ablation<F: Real>(
    run: &RunConfig,
    splits: &DatasetSplits,
    grid: &AblationGrid,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let vocab = build_vocab(&splits.train, run.min_count)?;
    let embeddings = embeddings_for::<F>(run, &vocab)?;
    let configs = grid.configs(&run.model);
    let one = |(i, cfg): (usize, &ModelConfig)| -> Result<AblationRow> {
        let trained = fit(cfg, &run.train, embeddings.clone(), &vocab, splits)?;
        let test = prepare_samples(&trained.model, &vocab, &splits.test)?;
        let report = evaluate_auto(&trained.model, &test, cfg.threshold, false)?;
        Ok(AblationRow {
            index: i + 1,
            iterations: cfg.routing.iterations,
            leaky: cfg.routing.leaky,
            amend: cfg.routing.amend,
            shared: cfg.shared_weights,
            orphan: cfg.orphan,
            loss: cfg.loss,
            squash: cfg.squash,
            accuracy: report.headline(),
        })
    };
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| configs.par_iter().enumerate().map(one).collect())
    } else {
        configs.iter().enumerate().map(one).collect()
    }
}

/// Aligned plain-text table.
pub fn render_table(rows: &[AblationRow]) -> String {
    let cells: Vec<[String; 9]> = rows.iter().map(AblationRow::cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |items: &[String]| {
        let parts: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(&COLUMNS.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&rule));
    for r in &cells {
        out.push_str(&line(r));
    }
    out
}

pub fn render_tsv(rows: &[AblationRow]) -> String {
    let mut out = COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.cells().join("\t"));
    }
    out
}
