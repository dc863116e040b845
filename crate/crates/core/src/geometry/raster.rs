use ndarray::Array2;

use crate::geometry::{GridSpec, MapInstance, Mask};

/// Rasterizes one instance onto the grid: closed instances become filled
/// polygons (even-odd rule at pixel centers), open instances become strokes
/// of the given pixel width. Geometry outside the grid is clipped silently.
pub fn rasterize_instance(inst: &MapInstance, grid: &GridSpec, line_width_px: usize) -> Mask {
    let (h, w) = (grid.height_px, grid.width_px);
    let mut mask = Array2::<f64>::zeros((h, w));
    if inst.closed {
        fill_polygon(&inst.points, &mut mask);
    } else {
        stroke_polyline(&inst.points, line_width_px.max(1), &mut mask);
    }
    mask
}

/// Even-odd point-in-polygon test per pixel center (classic crossing count).
fn fill_polygon(points: &[[f64; 2]], mask: &mut Array2<f64>) {
    let (h, w) = mask.dim();
    let n = points.len();
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            let mut inside = false;
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = (points[i][0], points[i][1]);
                let (xj, yj) = (points[j][0], points[j][1]);
                if (yi > cy) != (yj > cy) && cx < (xj - xi) * (cy - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                mask[[r, c]] = 1.0;
            }
        }
    }
}

fn stroke_polyline(points: &[[f64; 2]], width_px: usize, mask: &mut Array2<f64>) {
    let (h, w) = mask.dim();
    let (hf, wf) = (h as f64, w as f64);
    // Continuous pixel coordinates.
    let px: Vec<[f64; 2]> = points.iter().map(|p| [p[0] * wf, p[1] * hf]).collect();

    // Base trace: dense samples along each segment mark the cell under them,
    // so a width-1 line is always connected.
    for seg in px.windows(2) {
        let len = ((seg[1][0] - seg[0][0]).powi(2) + (seg[1][1] - seg[0][1]).powi(2)).sqrt();
        let steps = (len / 0.25).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = seg[0][0] + t * (seg[1][0] - seg[0][0]);
            let y = seg[0][1] + t * (seg[1][1] - seg[0][1]);
            let (c, r) = (x.floor() as isize, y.floor() as isize);
            if r >= 0 && (r as usize) < h && c >= 0 && (c as usize) < w {
                mask[[r as usize, c as usize]] = 1.0;
            }
        }
    }

    // Thickness: pixel centers strictly closer than width/2 to any segment.
    let half = width_px as f64 / 2.0;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 1.0 {
                continue;
            }
            let center = [c as f64 + 0.5, r as f64 + 0.5];
            for seg in px.windows(2) {
                if dist_point_segment(center, seg[0], seg[1]) < half {
                    mask[[r, c]] = 1.0;
                    break;
                }
            }
        }
    }
}

fn dist_point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassId;

    fn grid8() -> GridSpec {
        GridSpec {
            height_px: 8,
            width_px: 8,
            ..GridSpec::default()
        }
    }

    #[test]
    fn horizontal_divider_one_full_row() {
        let inst = MapInstance::new(ClassId::Divider, vec![[0.0, 0.5], [1.0, 0.5]]);
        let mask = rasterize_instance(&inst, &grid8(), 1);
        for c in 0..8 {
            assert_eq!(mask[[4, c]], 1.0);
        }
        assert_eq!(mask.sum(), 8.0);
    }

    #[test]
    fn full_extent_crossing_fills_grid() {
        let inst = MapInstance::new(
            ClassId::PedestrianCrossing,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        );
        let mask = rasterize_instance(&inst, &grid8(), 1);
        assert_eq!(mask.sum(), 64.0);
    }

    /// Independent even-odd scanline fill: per row, sort edge intersections
    /// with the row-center line and fill alternating spans.
    fn scanline_fill(points: &[[f64; 2]], h: usize, w: usize) -> Array2<f64> {
        let mut mask = Array2::<f64>::zeros((h, w));
        let n = points.len();
        for r in 0..h {
            let cy = (r as f64 + 0.5) / h as f64;
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..n {
                let a = points[i];
                let b = points[(i + 1) % n];
                if (a[1] > cy) != (b[1] > cy) {
                    xs.push(a[0] + (cy - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
                }
            }
            xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
            for pair in xs.chunks(2) {
                if pair.len() < 2 {
                    continue;
                }
                for c in 0..w {
                    let cx = (c as f64 + 0.5) / w as f64;
                    if cx > pair[0] && cx < pair[1] {
                        mask[[r, c]] = 1.0;
                    }
                }
            }
        }
        mask
    }

    #[test]
    fn polygon_fill_matches_scanline_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let grid = GridSpec {
            height_px: 16,
            width_px: 12,
            ..GridSpec::default()
        };
        for _ in 0..30 {
            // Star-shaped polygon around a random center: arbitrary enough to
            // exercise the fill, guaranteed to be simple.
            let cx: f64 = rng.gen_range(0.3..0.7);
            let cy: f64 = rng.gen_range(0.3..0.7);
            let k = rng.gen_range(3..9);
            let pts: Vec<[f64; 2]> = (0..k)
                .map(|i| {
                    let ang = i as f64 / k as f64 * std::f64::consts::TAU;
                    let rad: f64 = rng.gen_range(0.05..0.3);
                    [
                        (cx + rad * ang.cos()).clamp(0.0, 1.0),
                        (cy + rad * ang.sin()).clamp(0.0, 1.0),
                    ]
                })
                .collect();
            let inst = MapInstance::new(ClassId::PedestrianCrossing, pts.clone());
            let got = rasterize_instance(&inst, &grid, 1);
            let want = scanline_fill(&pts, grid.height_px, grid.width_px);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn clipping_is_silent() {
        let inst = MapInstance::new(ClassId::Boundary, vec![[-0.5, 0.5], [1.5, 0.5]]);
        let mask = rasterize_instance(&inst, &grid8(), 1);
        assert_eq!(mask.sum(), 8.0);
    }
}
