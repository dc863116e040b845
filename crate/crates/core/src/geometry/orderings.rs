use crate::geometry::MapInstance;

/// Point sequences that trace the same geometry as `inst.points`.
///
/// Open polylines admit two directions. Closed ones additionally admit every
/// cyclic shift of either direction, for `2 * n` orderings total. The identity
/// ordering comes first.
pub fn equivalent_orderings(inst: &MapInstance) -> Vec<Vec<[f64; 2]>> {
    let pts = &inst.points;
    let n = pts.len();
    let mut rev: Vec<[f64; 2]> = pts.clone();
    rev.reverse();
    if !inst.closed {
        return vec![pts.clone(), rev];
    }
    let mut out = Vec::with_capacity(2 * n);
    for base in [pts, &rev] {
        for shift in 0..n {
            let mut seq = Vec::with_capacity(n);
            for k in 0..n {
                seq.push(base[(k + shift) % n]);
            }
            out.push(seq);
        }
    }
    out
}
