//! Training loop, checkpointing, and evaluation.
//!
//! The loop is deterministic for a fixed config and seed: batches are
//! sequential dataset slices, per-sample noise seeds are drawn from one
//! ChaCha stream before the batch fans out, per-sample work runs via
//! `par_map` (order-preserving), and gradients are reduced in batch order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign_loss::{self, hungarian, map_cost, seg_cost, seg_targets, MatchAssignment};
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::graph::Tape;
use crate::impnet;
use crate::metrics::{self, MetricsReport, ScoredInstance};
use crate::model;
use crate::nn::{global_norm, lr_at, AdamW, Binder, GradMap, OptState, ParamStore};
use crate::par::par_map;
use crate::scenegen::SceneSample;

pub const CHECKPOINT_SCHEMA: &str = "m2m-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub step: usize,
    pub params: ParamStore,
    pub opt: OptState,
    /// Noise-seed stream state, so a resumed run draws the same sequence a
    /// continuous run would.
    pub rng: ChaCha8Rng,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub l_seg: f64,
    pub l_map: f64,
    pub l_dn: f64,
    /// Batch-level two-stage match agreement; `None` when a stage is off.
    pub util: Option<f64>,
    pub grad_norm: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossPoint>,
}

#[derive(Debug)]
struct SampleResult {
    grads: GradMap,
    total: f64,
    l_seg: f64,
    l_map: f64,
    l_dn: f64,
    terms: BTreeMap<String, f64>,
    util_counts: Option<(usize, usize)>,
}

/// One forward/backward pass for a single sample.
fn sample_pass(
    cfg: &RunConfig,
    params: &ParamStore,
    sample: &SceneSample,
    noise_seed: u64,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let mut b = Binder::new(params);
    let input = model::scene_input(&mut tape, sample);
    let dn = if cfg.toggles.use_denoising && cfg.toggles.use_impnet {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Some(impnet::build_denoise_batch(&sample.instances, cfg, &mut rng))
    } else {
        None
    };
    let out = model::forward(&mut tape, &mut b, cfg, input, dn.as_ref())?;
    let loss = assign_loss::total_loss(
        &mut tape,
        cfg,
        out.imp.as_ref(),
        out.mmp.as_ref(),
        &sample.instances,
        dn.as_ref(),
    );
    let total = tape.value(loss.total)[[0, 0]];
    if !total.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            step: 0, // filled in by the caller, which knows the step
            batch_seed: noise_seed,
            detail: format!("sample seed {} produced loss {total}", sample.seed),
        });
    }
    let l_seg = tape.value(loss.l_seg)[[0, 0]];
    let l_map = tape.value(loss.l_map)[[0, 0]];
    let l_dn = tape.value(loss.l_dn)[[0, 0]];
    let terms = loss.terms.values(&tape);
    let util_counts = match (&loss.imp_last_match, &loss.mmp_first_match) {
        (Some(a), Some(b)) if !sample.instances.is_empty() => {
            Some(metrics::util_sample(a, b, sample.instances.len()))
        }
        _ => None,
    };
    let mut grads = tape.backward(loss.total);
    let grads = b.collect_grads(&mut grads);
    Ok(SampleResult {
        grads,
        total,
        l_seg,
        l_map,
        l_dn,
        terms,
        util_counts,
    })
}

/// Mean of per-sample gradient maps, reduced in batch order.
fn mean_grads(results: &[SampleResult]) -> GradMap {
    let scale = 1.0 / results.len() as f64;
    let mut out = GradMap::new();
    for r in results {
        for (name, g) in &r.grads {
            match out.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in out.values_mut() {
        *g *= scale;
    }
    out
}

pub fn train(cfg: &RunConfig, dataset: &[SceneSample]) -> Result<TrainResult> {
    train_from(cfg, dataset, None)
}

/// Runs (or resumes) training to `cfg.steps`. A resumed checkpoint must
/// carry the same config hash.
pub fn train_from(
    cfg: &RunConfig,
    dataset: &[SceneSample],
    resume: Option<Checkpoint>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::InvalidConfig("empty training dataset".into()));
    }
    let config_hash = cfg.hash();
    let (mut params, mut opt, mut rng, start_step) = match resume {
        Some(ck) => {
            if ck.schema != CHECKPOINT_SCHEMA {
                return Err(CoreError::UnsupportedSchema(ck.schema));
            }
            if ck.config_hash != config_hash {
                return Err(CoreError::ConfigHashMismatch);
            }
            (ck.params, ck.opt, ck.rng, ck.step)
        }
        None => (
            model::init_params(cfg, cfg.seed),
            OptState::default(),
            // Decorrelated from the parameter-init stream.
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15),
            0,
        ),
    };
    let adam = AdamW {
        weight_decay: cfg.optimizer.weight_decay,
        ..AdamW::default()
    };
    let mut curve = Vec::new();
    for step in start_step..cfg.steps {
        let batch: Vec<(&SceneSample, u64)> = (0..cfg.batch_size)
            .map(|i| {
                let idx = (step * cfg.batch_size + i) % dataset.len();
                (&dataset[idx], rng.gen::<u64>())
            })
            .collect();
        let results: Vec<Result<SampleResult>> =
            par_map(&batch, |(sample, seed)| sample_pass(cfg, &params, sample, *seed));
        let mut ok = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => ok.push(v),
                Err(CoreError::NonFiniteLoss {
                    batch_seed, detail, ..
                }) => {
                    return Err(CoreError::NonFiniteLoss {
                        step,
                        batch_seed,
                        detail,
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let grads = mean_grads(&ok);
        let lr = lr_at(cfg.optimizer.lr, cfg.optimizer.schedule, step, cfg.steps);
        let gnorm = global_norm(&grads);
        adam.step(&mut params, &grads, &mut opt, lr);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let n = ok.len() as f64;
            let mut terms = BTreeMap::new();
            for r in &ok {
                for (k, v) in &r.terms {
                    *terms.entry(k.clone()).or_insert(0.0) += v / n;
                }
            }
            let util_counts: Vec<(usize, usize)> =
                ok.iter().filter_map(|r| r.util_counts).collect();
            let util = if util_counts.is_empty() {
                None
            } else {
                let agree: usize = util_counts.iter().map(|c| c.0).sum();
                let total: usize = util_counts.iter().map(|c| c.1).sum();
                Some(agree as f64 / total as f64)
            };
            curve.push(LossPoint {
                step,
                lr,
                total: ok.iter().map(|r| r.total).sum::<f64>() / n,
                l_seg: ok.iter().map(|r| r.l_seg).sum::<f64>() / n,
                l_map: ok.iter().map(|r| r.l_map).sum::<f64>() / n,
                l_dn: ok.iter().map(|r| r.l_dn).sum::<f64>() / n,
                util,
                grad_norm: gnorm,
                terms,
            });
        }
    }
    Ok(TrainResult {
        checkpoint: Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            step: cfg.steps,
            params,
            opt,
            rng,
            config_hash,
        },
        curve,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ck.schema != CHECKPOINT_SCHEMA {
        return Err(CoreError::UnsupportedSchema(ck.schema));
    }
    Ok(ck)
}

/// Per-sample inference output.
pub struct InferenceResult {
    pub predictions: Vec<ScoredInstance>,
    pub imp_last_match: Option<MatchAssignment>,
    pub mmp_first_match: Option<MatchAssignment>,
}

/// Inference on one sample: no denoise rows are ever constructed, and the
/// query count is checked against the configured instance-query count.
pub fn infer_sample(
    cfg: &RunConfig,
    params: &ParamStore,
    sample: &SceneSample,
) -> Result<InferenceResult> {
    let mut tape = Tape::new();
    let mut b = Binder::new(params);
    let input = model::scene_input(&mut tape, sample);
    let out = model::forward(&mut tape, &mut b, cfg, input, None)?;
    if let Some(imp) = &out.imp {
        let rows = tape.shape(imp.states.last().unwrap().class_logits).0;
        if rows != cfg.n_i {
            return Err(CoreError::ShapeMismatch(format!(
                "inference must use learnable queries only: got {rows} rows, expected {}",
                cfg.n_i
            )));
        }
    }
    let predictions = match &out.mmp {
        Some(mmp) => {
            let last = mmp.layers.last().expect("decoder has layers");
            model::decode_predictions(
                tape.value(last.class_logits),
                tape.value(last.points),
                cfg.n_p,
            )
        }
        None => Vec::new(),
    };
    let gt = &sample.instances;
    let targets = seg_targets(gt, cfg);
    let imp_last_match = out.imp.as_ref().and_then(|imp| {
        if gt.is_empty() {
            return None;
        }
        let st = imp.states.last().unwrap();
        let masks = tape.value(st.masks).clone();
        let logits = tape.value(st.class_logits).clone();
        Some(hungarian(&seg_cost(&masks, &logits, &targets, &cfg.weights)))
    });
    let mmp_first_match = out.mmp.as_ref().and_then(|mmp| {
        if gt.is_empty() {
            return None;
        }
        let first = &mmp.layers[0];
        let pts = tape.value(first.points).clone();
        let logits = tape.value(first.class_logits).clone();
        Some(hungarian(&map_cost(&pts, cfg.n_p, &logits, gt, &cfg.weights)))
    });
    Ok(InferenceResult {
        predictions,
        imp_last_match,
        mmp_first_match,
    })
}

/// Full evaluation pass: inference on every sample, then the metric suite.
pub fn evaluate(
    cfg: &RunConfig,
    params: &ParamStore,
    dataset: &[SceneSample],
) -> Result<MetricsReport> {
    Ok(evaluate_full(cfg, params, dataset)?.report)
}

/// Evaluation output retaining the per-sample predictions (for PR exports
/// and overlay rendering) alongside the metric report.
#[derive(Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<ScoredInstance>>,
}

pub fn evaluate_full(
    cfg: &RunConfig,
    params: &ParamStore,
    dataset: &[SceneSample],
) -> Result<EvalOutput> {
    cfg.validate()?;
    let results: Vec<Result<InferenceResult>> =
        par_map(dataset, |sample| infer_sample(cfg, params, sample));
    let mut preds = Vec::with_capacity(dataset.len());
    let mut util_samples = Vec::new();
    for (sample, r) in dataset.iter().zip(results) {
        let r = r?;
        preds.push(r.predictions);
        if let (Some(a), Some(b)) = (r.imp_last_match, r.mmp_first_match) {
            util_samples.push((a, b, sample.instances.len()));
        }
    }
    let gts: Vec<Vec<crate::geometry::MapInstance>> =
        dataset.iter().map(|s| s.instances.clone()).collect();
    let util_value = metrics::util(&util_samples);
    let report = metrics::compute_report(
        &preds,
        &gts,
        &cfg.grid,
        cfg.metric_stroke_px,
        util_value,
    );
    Ok(EvalOutput {
        report,
        predictions: preds,
    })
}

/// Evaluates a checkpoint, enforcing the config-hash compatibility contract.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ck: &Checkpoint,
    dataset: &[SceneSample],
) -> Result<MetricsReport> {
    if ck.config_hash != cfg.hash() {
        return Err(CoreError::ConfigHashMismatch);
    }
    evaluate(cfg, &ck.params, dataset)
}
