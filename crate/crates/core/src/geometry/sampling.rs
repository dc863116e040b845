use ndarray::Array2;

use crate::geometry::Mask;

/// Keeps only the strongest pixel in each non-overlapping `g x g` window
/// (ragged edge windows allowed), zeroing the rest. All-zero windows stay
/// zero. Ties go to the lowest row-major index.
pub fn max_survival(mask: &Mask, g: usize) -> Mask {
    assert!(g >= 1, "window size must be >= 1");
    let (h, w) = mask.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut r0 = 0;
    while r0 < h {
        let mut c0 = 0;
        while c0 < w {
            let mut best = 0.0;
            let mut best_pos = None;
            for r in r0..(r0 + g).min(h) {
                for c in c0..(c0 + g).min(w) {
                    let v = mask[[r, c]];
                    if v > best {
                        best = v;
                        best_pos = Some((r, c));
                    }
                }
            }
            if let Some((r, c)) = best_pos {
                out[[r, c]] = best;
            }
            c0 += g;
        }
        r0 += g;
    }
    out
}

/// Greedy farthest-point sampling over pixel candidates. The first pick is
/// the candidate with the maximum value; each later pick maximizes the
/// minimum Euclidean pixel distance to everything already picked. Ties go to
/// the lowest row-major pixel index. When there are fewer candidates than
/// requested, the picked list is cycled up to length `n`.
pub fn farthest_point_sampling(candidates: &[((usize, usize), f64)], n: usize) -> Vec<(usize, usize)> {
    assert!(!candidates.is_empty(), "candidates must be non-empty");
    assert!(n >= 1);

    let mut picked: Vec<usize> = Vec::new();
    let mut first = 0usize;
    for (i, c) in candidates.iter().enumerate() {
        if c.1 > candidates[first].1
            || (c.1 == candidates[first].1 && c.0 < candidates[first].0)
        {
            first = i;
        }
    }
    picked.push(first);

    // Squared pixel distances are exact integers, so tie comparison is exact.
    let d2 = |a: (usize, usize), b: (usize, usize)| -> u64 {
        let dr = a.0 as i64 - b.0 as i64;
        let dc = a.1 as i64 - b.1 as i64;
        (dr * dr + dc * dc) as u64
    };

    let take = n.min(candidates.len());
    let mut min_d2: Vec<u64> = candidates
        .iter()
        .map(|c| d2(c.0, candidates[first].0))
        .collect();
    while picked.len() < take {
        let mut best: Option<usize> = None;
        for (i, c) in candidates.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) => {
                    let better = min_d2[i] > min_d2[b]
                        || (min_d2[i] == min_d2[b] && c.0 < candidates[b].0);
                    if better {
                        best = Some(i);
                    }
                }
            }
        }
        let b = best.unwrap();
        picked.push(b);
        for (i, c) in candidates.iter().enumerate() {
            min_d2[i] = min_d2[i].min(d2(c.0, candidates[b].0));
        }
    }

    (0..n)
        .map(|i| candidates[picked[i % picked.len()]].0)
        .collect()
}
