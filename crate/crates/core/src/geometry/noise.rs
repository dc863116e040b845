use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{MapInstance, NoiseConfig};

/// Applies Gaussian map noise to one instance: per-point jitter, then a
/// global shift, then an isotropic scale about the shifted centroid.
///
/// The draw order is fixed (jitter x/y per point in sequence, shift x, shift
/// y, scale) so a seeded `rng` reproduces the same perturbation. Coordinates
/// are clamped back to the unit square. Disabled configs return a clone and
/// consume no randomness.
pub fn perturb_instance<R: Rng>(
    inst: &MapInstance,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> MapInstance {
    if !cfg.enabled {
        return inst.clone();
    }
    let mut pts = inst.points.clone();
    for p in pts.iter_mut() {
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        p[0] += cfg.point_jitter_sigma * jx;
        p[1] += cfg.point_jitter_sigma * jy;
    }
    let sx: f64 = rng.sample(StandardNormal);
    let sy: f64 = rng.sample(StandardNormal);
    let shift = [cfg.global_shift_sigma * sx, cfg.global_shift_sigma * sy];
    for p in pts.iter_mut() {
        p[0] += shift[0];
        p[1] += shift[1];
    }
    let g: f64 = rng.sample(StandardNormal);
    let scale = 1.0 + cfg.global_scale_sigma * g;
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in pts.iter_mut() {
        p[0] = (cx + scale * (p[0] - cx)).clamp(0.0, 1.0);
        p[1] = (cy + scale * (p[1] - cy)).clamp(0.0, 1.0);
    }
    MapInstance {
        class_id: inst.class_id,
        points: pts,
        closed: inst.closed,
    }
}
