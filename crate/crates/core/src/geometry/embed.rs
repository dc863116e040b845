use ndarray::Array2;

use crate::geometry::GridSpec;

const TEMPERATURE: f64 = 10_000.0;

/// Sinusoidal 2D positional embedding over pixel centers, shape `(H*W, d)`
/// in row-major pixel order. The first `d/2` channels encode `x` (lateral),
/// the rest encode `y`, each as sin/cos pairs at geometrically spaced
/// frequencies. Deterministic in `(grid, d)`.
pub fn sinusoidal_embedding(grid: &GridSpec, d: usize) -> Array2<f64> {
    assert!(d >= 4 && d % 4 == 0, "embedding dim must be a multiple of 4");
    let (h, w) = (grid.height_px, grid.width_px);
    let half = d / 2;
    let pairs = half / 2;
    let mut out = Array2::<f64>::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            let row = r * w + c;
            let x = (c as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            let y = (r as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            for p in 0..pairs {
                let freq = TEMPERATURE.powf(-(2.0 * p as f64) / half as f64);
                out[[row, 2 * p]] = (x * freq).sin();
                out[[row, 2 * p + 1]] = (x * freq).cos();
                out[[row, half + 2 * p]] = (y * freq).sin();
                out[[row, half + 2 * p + 1]] = (y * freq).cos();
            }
        }
    }
    out
}
