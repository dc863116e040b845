//! Run configuration: one JSON-serializable struct covering scene
//! generation, model architecture, losses, optimizer, and ablation toggles.
//!
//! Config files use exactly these field names. Every field lands in emitted
//! reports for provenance, and a SHA-256 over the canonical JSON guards
//! checkpoint/config compatibility.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{GridSpec, NoiseConfig};
use crate::nn::Schedule;
use crate::scenegen::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_pt: f64,
    pub w_dir: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_pt: 5.0,
            w_dir: 0.005,
            w_bce: 5.0,
            w_dice: 5.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        // Base lr is a desk-scale starting point; the full-scale recipe uses
        // 6e-4 with the same decoupled weight decay and cosine schedule.
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            schedule: Schedule::Cosine,
        }
    }
}

/// Ablation switches. `use_impnet` gates the whole first stage (off = plain
/// learnable decoder queries on BEV features); `impnet_only` trains just the
/// segmentation stage; the rest gate individual second-stage components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub use_impnet: bool,
    pub impnet_only: bool,
    pub use_pqg: bool,
    pub use_gfe: bool,
    pub use_denoising: bool,
    pub use_map_noise: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_impnet: true,
            impnet_only: false,
            use_pqg: true,
            use_gfe: true,
            use_denoising: true,
            use_map_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    /// Number of BEV feature scales; scale `l` has resolution `grid / 2^(s-l)`.
    pub s: usize,
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Self-attention layers in the BEV encoder.
    pub enc_layers: usize,
    /// Masked-attention refinement layers (first stage).
    pub m: usize,
    /// Map decoder layers (second stage).
    pub k: usize,
    /// Learnable instance queries.
    pub n_i: usize,
    /// Points per map instance.
    pub n_p: usize,
    /// Keypoints extracted per instance.
    pub n_s: usize,
    /// Local suppression window (pixels) before keypoint sampling.
    pub g: usize,
    /// Mask threshold for attention bias.
    pub tau_m: f64,
    /// Mask threshold for positional pooling.
    pub tau_p: f64,
    /// Mask threshold for keypoint extraction.
    pub tau_g: f64,
    /// Class-flip probability for denoising queries.
    pub lambda: f64,
    /// Number of denoising groups appended during training.
    pub dn_groups: usize,
    /// Stroke width (pixels) when rasterizing GT instances into supervision
    /// masks (polygons are filled regardless).
    pub gt_mask_width_px: usize,
    /// Stroke width (pixels) for rasterized-IoU metric evaluation.
    pub metric_stroke_px: usize,
    /// Perturbation applied to GT instances for denoising queries.
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Interval (steps) for loss/assignment logging.
    pub log_every: usize,
    /// Scenes synthesized per setting when the ablation harness builds its
    /// own training data (standalone training loads data from disk instead).
    pub train_scenes: usize,
    /// Scenes synthesized for the held-out split in the ablation harness.
    pub eval_scenes: usize,
    pub toggles: Toggles,
    /// Scene generator knobs. `grid`, `n_p`, and `seed` inside this section
    /// are ignored: they are always taken from the fields above.
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            s: 3,
            d: 64,
            heads: 4,
            enc_layers: 2,
            m: 3,
            k: 6,
            n_i: 50,
            n_p: 20,
            n_s: 20,
            g: 4,
            tau_m: 0.5,
            tau_p: 0.3,
            tau_g: 0.8,
            lambda: 0.2,
            dn_groups: 1,
            gt_mask_width_px: 2,
            metric_stroke_px: 2,
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            steps: 5000,
            batch_size: 8,
            seed: 0,
            log_every: 50,
            train_scenes: 64,
            eval_scenes: 32,
            toggles: Toggles::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.noise.validate()?;
        self.scene_config().validate()?;
        let err = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.s == 0 {
            return err("s must be >= 1".into());
        }
        let factor = 1usize << (self.s - 1);
        if self.grid.height_px % factor != 0 || self.grid.width_px % factor != 0 {
            return err(format!(
                "grid {}x{} not divisible by 2^(s-1) = {factor}",
                self.grid.height_px, self.grid.width_px
            ));
        }
        if self.d < 4 || self.d % 4 != 0 {
            return err(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("heads = {} must divide d = {}", self.heads, self.d));
        }
        if self.enc_layers == 0 || self.m == 0 || self.k == 0 {
            return err("enc_layers, m, and k must all be >= 1".into());
        }
        if self.n_i == 0 || self.n_s == 0 || self.g == 0 || self.dn_groups == 0 {
            return err("n_i, n_s, g, and dn_groups must all be >= 1".into());
        }
        if self.n_p < 2 {
            return err("n_p must be >= 2".into());
        }
        if self.gt_mask_width_px == 0 || self.metric_stroke_px == 0 {
            return err("gt_mask_width_px and metric_stroke_px must be >= 1".into());
        }
        for (name, v) in [
            ("tau_m", self.tau_m),
            ("tau_p", self.tau_p),
            ("tau_g", self.tau_g),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err(format!("lambda = {} must lie in [0, 1]", self.lambda));
        }
        let w = &self.weights;
        for (name, v) in [
            ("w_cls", w.w_cls),
            ("w_pt", w.w_pt),
            ("w_dir", w.w_dir),
            ("w_bce", w.w_bce),
            ("w_dice", w.w_dice),
            ("focal_gamma", w.focal_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("loss weight {name} = {v} must be finite and >= 0"));
            }
        }
        if !(w.focal_alpha > 0.0 && w.focal_alpha < 1.0) {
            return err(format!("focal_alpha = {} must lie in (0, 1)", w.focal_alpha));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return err(format!("lr = {} must be positive", self.optimizer.lr));
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.weight_decay.is_finite()) {
            return err(format!(
                "weight_decay = {} must be finite and >= 0",
                self.optimizer.weight_decay
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return err("batch_size and log_every must be >= 1".into());
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return err("train_scenes and eval_scenes must be >= 1".into());
        }
        let t = &self.toggles;
        if (t.use_pqg || t.use_gfe || t.impnet_only || t.use_denoising) && !t.use_impnet {
            return err(
                "use_pqg, use_gfe, impnet_only, and use_denoising all require use_impnet".into(),
            );
        }
        Ok(())
    }

    /// Effective scene generator config: grid, points-per-instance, and seed
    /// come from the run-level fields.
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            grid: self.grid,
            n_p: self.n_p,
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    /// `(height, width)` of BEV scale `l` for `l in 1..=s` (1 = coarsest).
    pub fn scale_hw(&self, l: usize) -> (usize, usize) {
        assert!(l >= 1 && l <= self.s, "scale index out of range");
        let f = 1usize << (self.s - l);
        (self.grid.height_px / f, self.grid.width_px / f)
    }

    /// SHA-256 over the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
