//! Full two-stage model: BEV encoder -> mask-aware query stage -> map
//! decoder stage, wired according to the run's toggles, plus eval-time
//! decoding of raw decoder outputs into scored map instances.

use ndarray::Array2;

use crate::bevenc;
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{ClassId, MapInstance, NUM_CLASSES};
use crate::graph::{Tape, Var};
use crate::impnet::{self, DenoiseBatch, ImpOutput};
use crate::metrics::ScoredInstance;
use crate::mmpnet::{self, MmpOutput, QuerySource};
use crate::nn::{Binder, ParamInit, ParamStore};
use crate::scenegen::SceneSample;

/// Minimum class score kept at eval time.
pub const SCORE_THRESHOLD: f64 = 0.05;
/// Maximum predictions kept per sample at eval time.
pub const TOP_K: usize = 50;

/// Initializes every parameter the architecture can use, regardless of
/// toggles, in a fixed creation order. Disabled paths leave their parameters
/// untouched (they receive no gradients), so runs that differ only in
/// toggles start from identical shared weights.
pub fn init_params(cfg: &RunConfig, seed: u64) -> ParamStore {
    let mut init = ParamInit::new(seed);
    bevenc::init_params(&mut init, cfg);
    impnet::init_params(&mut init, cfg);
    mmpnet::init_params(&mut init, cfg);
    init.finish()
}

pub struct ForwardOutput {
    pub imp: Option<ImpOutput>,
    pub mmp: Option<MmpOutput>,
}

/// Flattens a scene's `(C_IN, H, W)` input into the encoder's `(C_IN, H*W)`
/// constant.
pub fn scene_input(tape: &mut Tape, sample: &SceneSample) -> Var {
    let (c, h, w) = sample.input.dim();
    let flat = Array2::from_shape_fn((c, h * w), |(ch, p)| sample.input[[ch, p / w, p % w]]);
    tape.constant(flat)
}

/// Runs the model end to end on one sample. `dn` must be `None` at eval.
pub fn forward(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    input: Var,
    dn: Option<&DenoiseBatch>,
) -> Result<ForwardOutput> {
    let t = &cfg.toggles;
    if dn.is_some() && !(t.use_impnet && t.use_denoising) {
        return Err(CoreError::InvalidConfig(
            "denoise rows require use_impnet and use_denoising".into(),
        ));
    }
    let feats = bevenc::encode(tape, b, cfg, input)?;
    if !t.use_impnet {
        let mmp = mmpnet::forward(tape, b, cfg, &feats, QuerySource::Learnable);
        return Ok(ForwardOutput {
            imp: None,
            mmp: Some(mmp),
        });
    }
    let imp = impnet::forward(tape, b, cfg, &feats, dn);
    if t.impnet_only {
        return Ok(ForwardOutput {
            imp: Some(imp),
            mmp: None,
        });
    }
    let last = imp.states.last().expect("at least one refinement state");
    let mmp = mmpnet::forward(
        tape,
        b,
        cfg,
        &feats,
        QuerySource::MaskQueries {
            queries: last.queries,
            masks: last.masks,
            dn,
        },
    );
    Ok(ForwardOutput {
        imp: Some(imp),
        mmp: Some(mmp),
    })
}

/// Decodes the final decoder layer into scored instances: per query, score =
/// max non-background softmax probability; keep scores >= 0.05, then the top
/// 50 by score. Ties break by query index for determinism.
pub fn decode_predictions(
    class_logits: &Array2<f64>,
    points: &Array2<f64>,
    n_p: usize,
) -> Vec<ScoredInstance> {
    let n = class_logits.nrows();
    assert_eq!(class_logits.ncols(), NUM_CLASSES + 1);
    assert_eq!(points.nrows(), n * n_p);
    let mut picks: Vec<(f64, usize, ClassId)> = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = class_logits.row(i).to_vec();
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
        for c in 0..NUM_CLASSES {
            let p = exps[c] / z;
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        if best_p >= SCORE_THRESHOLD {
            picks.push((best_p, i, ClassId::from_index(best_c).unwrap()));
        }
    }
    picks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    picks.truncate(TOP_K);
    picks
        .into_iter()
        .map(|(score, i, class)| {
            let pts: Vec<[f64; 2]> = (0..n_p)
                .map(|j| {
                    [
                        points[[i * n_p + j, 0]].clamp(0.0, 1.0),
                        points[[i * n_p + j, 1]].clamp(0.0, 1.0),
                    ]
                })
                .collect();
            ScoredInstance {
                instance: MapInstance::new(class, pts),
                score,
            }
        })
        .collect()
}
