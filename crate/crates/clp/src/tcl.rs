//! Temporal contrastive loss over an ordered sequence of frame embeddings.
//!
//! One sequence of length J yields J-2 triplets anchored at the first frame:
//! the frame at offset j is the positive, the frame at offset j+1 the
//! negative, so frames nearer the anchor in time must stay nearer in the
//! embedding space by a margin. Each triplet is weighted by a schedule over
//! the offset j. The same construction runs on the reversed sequence and the
//! two sums add; nothing is normalized.

use ndarray::Array2;

use crate::config::WeightSchedule;

/// Index triple into a sequence, plus the offset that selects its weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Temporal gap between positive and anchor; the weight is a function of
    /// this, not of the row indices.
    pub offset: usize,
}

/// All triplets for one sequence: J-2 anchored at the first frame, then J-2
/// anchored at the last frame walking backwards.
pub fn triplets(seq_len: usize) -> Vec<Triplet> {
    assert!(seq_len >= 3, "a triplet needs at least 3 frames, got {seq_len}");
    let mut out = Vec::with_capacity(2 * (seq_len - 2));
    for j in 1..=seq_len - 2 {
        out.push(Triplet {
            anchor: 0,
            positive: j,
            negative: j + 1,
            offset: j,
        });
    }
    for j in 1..=seq_len - 2 {
        out.push(Triplet {
            anchor: seq_len - 1,
            positive: seq_len - 1 - j,
            negative: seq_len - 2 - j,
            offset: j,
        });
    }
    out
}

fn dist(seq: &Array2<f64>, a: usize, b: usize) -> f64 {
    seq.row(a)
        .iter()
        .zip(seq.row(b).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weighted triplet loss over both directions. `seq` is (J, d), one row per
/// frame in temporal order.
pub fn tcl_loss(seq: &Array2<f64>, margin: f64, schedule: WeightSchedule) -> f64 {
    triplets(seq.nrows())
        .iter()
        .map(|t| {
            let hinge = dist(seq, t.anchor, t.positive) - dist(seq, t.anchor, t.negative) + margin;
            schedule.weight(t.offset) * hinge.max(0.0)
        })
        .sum()
}

/// Loss plus its gradient with respect to every row of `seq`.
///
/// The hinge contributes nothing at or below zero, and the distance gradient
/// is taken as zero when two rows coincide; both choices are valid
/// subgradients, so descent behaves at the kinks even though the
/// finite-difference checks must stay away from them.
pub fn tcl_loss_and_grad(
    seq: &Array2<f64>,
    margin: f64,
    schedule: WeightSchedule,
) -> (f64, Array2<f64>) {
    let (j_total, d) = seq.dim();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((j_total, d));
    for t in triplets(j_total) {
        let dp = dist(seq, t.anchor, t.positive);
        let dn = dist(seq, t.anchor, t.negative);
        let hinge = dp - dn + margin;
        let w = schedule.weight(t.offset);
        if hinge <= 0.0 {
            continue;
        }
        loss += w * hinge;
        // d||a-p|| / da = (a-p)/||a-p||, and the negative enters with the
        // opposite sign.
        if dp > 0.0 {
            for k in 0..d {
                let u = (seq[[t.anchor, k]] - seq[[t.positive, k]]) / dp;
                grad[[t.anchor, k]] += w * u;
                grad[[t.positive, k]] -= w * u;
            }
        }
        if dn > 0.0 {
            for k in 0..d {
                let u = (seq[[t.anchor, k]] - seq[[t.negative, k]]) / dn;
                grad[[t.anchor, k]] -= w * u;
                grad[[t.negative, k]] += w * u;
            }
        }
    }
    (loss, grad)
}
