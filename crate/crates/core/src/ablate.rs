//! Ablation harness: trains and evaluates one run per setting along a named
//! axis, holding the seed, data, and every unrelated knob fixed.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::metrics::MetricsReport;
use crate::scenegen::{generate_dataset, SceneSample};
use crate::train::{evaluate_full, train, EvalOutput, LossPoint, TrainResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Cumulative architecture build-up: plain decoder -> +mask queries ->
    /// +positional/geometric query guidance -> +denoising.
    Components,
    /// Cross product of the positional-pooling and keypoint-feature paths.
    PqgGfe,
    Denoising,
    MapNoise,
    NS,
    MaxSurvival,
    TauP,
    TauG,
}

pub const ALL_AXES: [Axis; 8] = [
    Axis::Components,
    Axis::PqgGfe,
    Axis::Denoising,
    Axis::MapNoise,
    Axis::NS,
    Axis::MaxSurvival,
    Axis::TauP,
    Axis::TauG,
];

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::PqgGfe => "pqg_gfe",
            Axis::Denoising => "denoising",
            Axis::MapNoise => "map_noise",
            Axis::NS => "n_s",
            Axis::MaxSurvival => "max_survival",
            Axis::TauP => "tau_p",
            Axis::TauG => "tau_g",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Axis> {
        ALL_AXES
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_AXES.iter().map(|a| a.name()).collect();
                CoreError::InvalidConfig(format!(
                    "unknown ablation axis '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// The configs an axis sweeps, in presentation order.
pub fn axis_settings(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let mut rows = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        rows.push((name.to_string(), cfg));
    };
    match axis {
        Axis::Components => {
            // Cumulative rows, each named after the component it adds.
            push("decoder_only", &|c| {
                c.toggles.use_impnet = false;
                c.toggles.use_pqg = false;
                c.toggles.use_gfe = false;
                c.toggles.use_denoising = false;
            });
            push("mask_queries", &|c| {
                c.toggles.use_impnet = true;
                c.toggles.use_pqg = false;
                c.toggles.use_gfe = false;
                c.toggles.use_denoising = false;
            });
            push("query_guidance", &|c| {
                c.toggles.use_impnet = true;
                c.toggles.use_pqg = true;
                c.toggles.use_gfe = true;
                c.toggles.use_denoising = false;
            });
            push("denoising", &|c| {
                c.toggles.use_impnet = true;
                c.toggles.use_pqg = true;
                c.toggles.use_gfe = true;
                c.toggles.use_denoising = true;
            });
        }
        Axis::PqgGfe => {
            for (name, pqg, gfe) in [
                ("neither", false, false),
                ("pqg_only", true, false),
                ("gfe_only", false, true),
                ("both", true, true),
            ] {
                push(name, &move |c| {
                    c.toggles.use_impnet = true;
                    c.toggles.use_pqg = pqg;
                    c.toggles.use_gfe = gfe;
                });
            }
        }
        Axis::Denoising => {
            push("off", &|c| c.toggles.use_denoising = false);
            push("on", &|c| {
                c.toggles.use_impnet = true;
                c.toggles.use_denoising = true;
            });
        }
        Axis::MapNoise => {
            for (name, on) in [("off", false), ("on", true)] {
                push(name, &move |c| {
                    c.toggles.use_impnet = true;
                    c.toggles.use_denoising = true;
                    c.toggles.use_map_noise = on;
                });
            }
        }
        Axis::NS => {
            for n_s in [10usize, 20, 30, 40] {
                push(&n_s.to_string(), &move |c| c.n_s = n_s);
            }
        }
        Axis::MaxSurvival => {
            let g = base.g.max(2);
            push("off", &|c| c.g = 1);
            push("on", &move |c| c.g = g);
        }
        Axis::TauP => {
            for t in [0.1, 0.2, 0.3, 0.4] {
                push(&format!("{t:.1}"), &move |c| c.tau_p = t);
            }
        }
        Axis::TauG => {
            for t in [0.6, 0.7, 0.8, 0.9] {
                push(&format!("{t:.1}"), &move |c| c.tau_g = t);
            }
        }
    }
    rows
}

/// One trained + evaluated setting.
pub struct AblationRun {
    pub name: String,
    pub config: RunConfig,
    pub result: TrainResult,
    pub eval: EvalOutput,
}

/// Summary row for serialization (the full checkpoint stays with the run).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
    pub report: MetricsReport,
    pub final_loss: Option<f64>,
    pub final_util: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

pub fn summarize(axis: Axis, runs: &[AblationRun]) -> AblationTable {
    AblationTable {
        axis: axis.name().to_string(),
        rows: runs
            .iter()
            .map(|r| AblationRow {
                name: r.name.clone(),
                config: r.config.clone(),
                report: r.eval.report.clone(),
                final_loss: r.result.curve.last().map(|p: &LossPoint| p.total),
                final_util: r.result.curve.last().and_then(|p| p.util),
            })
            .collect(),
    }
}

/// Synthesizes the shared train/eval splits for an axis sweep: one
/// contiguous run of scenes split train-first, so every row sees identical
/// data and the eval split never overlaps training.
pub fn ablation_splits(base: &RunConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let mut train_set =
        generate_dataset(&base.scene_config(), base.train_scenes + base.eval_scenes)?;
    let eval_set = train_set.split_off(base.train_scenes);
    Ok((train_set, eval_set))
}

/// Trains and evaluates every setting of `axis`, sharing the seed and both
/// datasets across rows.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    train_set: &[SceneSample],
    eval_set: &[SceneSample],
) -> Result<Vec<AblationRun>> {
    let mut out = Vec::new();
    for (name, cfg) in axis_settings(base, axis) {
        cfg.validate()?;
        let result = train(&cfg, train_set)?;
        let eval = evaluate_full(&cfg, &result.checkpoint.params, eval_set)?;
        out.push(AblationRun {
            name,
            config: cfg,
            result,
            eval,
        });
    }
    Ok(out)
}
