use crate::error::{CoreError, Result};
use crate::geometry::dist;

/// Resamples a piecewise-linear curve to `n` points at equal arc-length
/// spacing. The first output point coincides with the first input point.
/// Closed curves are treated as cyclic and the last sample does not duplicate
/// the first.
pub fn resample_polyline(points: &[[f64; 2]], n: usize, closed: bool) -> Result<Vec<[f64; 2]>> {
    if points.len() < 2 || n < 2 {
        return Err(CoreError::DegeneratePolyline);
    }

    // Segment endpoints, with the closing segment appended for cyclic curves.
    let mut verts: Vec<[f64; 2]> = points.to_vec();
    if closed {
        verts.push(points[0]);
    }

    let mut cum = Vec::with_capacity(verts.len());
    cum.push(0.0);
    for w in verts.windows(2) {
        let l = cum.last().unwrap() + dist(w[0], w[1]);
        cum.push(l);
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(CoreError::DegeneratePolyline);
    }

    let step = if closed {
        total / n as f64
    } else {
        total / (n - 1) as f64
    };

    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut seg = 0usize;
    for k in 1..n {
        let target = step * k as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            ((target - cum[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = verts[seg];
        let b = verts[seg + 1];
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    if !closed {
        // Pin the endpoint exactly; cumulative arithmetic can drift by an ulp.
        out[n - 1] = *points.last().unwrap();
    }
    Ok(out)
}
