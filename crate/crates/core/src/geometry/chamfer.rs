use crate::error::{CoreError, Result};
use crate::geometry::dist;

/// Symmetric Chamfer distance: `0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::EmptyPointSet);
    }
    Ok(0.5 * (mean_min(a, b) + mean_min(b, a)))
}

fn mean_min(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| dist(*p, *q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}
