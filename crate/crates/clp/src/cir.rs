//! Cross-identity reconstruction against a FIFO memory of target-encoder
//! embeddings.
//!
//! Each step splits the filled queue at random into a dictionary and a
//! negative set. A query embedding is rebuilt as a convex combination of
//! dictionary entries, weighted by a temperature softmax over cosine
//! similarities; the reconstruction is then scored against the query's own
//! key (positive) and the negative set with an InfoNCE term. Keys enqueue
//! strictly after the loss, so a key is never among its own negatives.
//!
//! Gradients flow into the query only; keys and queue contents come from the
//! target encoder and are treated as constants.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CirConfig;
use crate::error::{ClpError, Result};

const NORM_FLOOR: f64 = 1e-12;

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity, defined for any nonzero vectors; the full formula is
/// kept (rather than assuming unit inputs) so gradients are exact wherever
/// the finite-difference checks probe.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / (norm(u) * norm(v))
}

/// d cos(u, v) / d u = (v/|v| - cos * u/|u|) / |u|.
fn cosine_grad_wrt_u(u: &[f64], v: &[f64]) -> Vec<f64> {
    let nu = norm(u);
    let nv = norm(v);
    let c = dot(u, v) / (nu * nv);
    u.iter()
        .zip(v)
        .map(|(ui, vi)| (vi / nv - c * ui / nu) / nu)
        .collect()
}

/// Softmax over `x / tau`, shifted by the max for stability.
fn softmax_scaled(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Soft nearest-neighbor reconstruction of `q` from the dictionary rows.
/// Returns the softmax coefficients and the combination itself.
pub fn reconstruct(q: &[f64], dict: &Array2<f64>, tau: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(dict.nrows() > 0, "reconstruction needs a nonempty dictionary");
    let sims: Vec<f64> = dict.rows().into_iter().map(|c| cosine(q, c.as_slice().unwrap())).collect();
    let alpha = softmax_scaled(&sims, tau);
    let mut q_hat = vec![0.0; q.len()];
    for (a, c) in alpha.iter().zip(dict.rows()) {
        for (o, ci) in q_hat.iter_mut().zip(c.iter()) {
            *o += a * ci;
        }
    }
    (alpha, q_hat)
}

fn eval(
    q: &[f64],
    k: &[f64],
    dict: &Array2<f64>,
    negs: &Array2<f64>,
    tau: f64,
    printed_variant: bool,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let (alpha, q_hat) = reconstruct(q, dict, tau);
    let n_neg = negs.nrows();

    // Logits: the positive pairs the reconstruction with the key; negatives
    // score against the reconstruction, or against the raw query in the
    // printed variant.
    let pos_sim = cosine(&q_hat, k);
    let neg_sims: Vec<f64> = negs
        .rows()
        .into_iter()
        .map(|c| {
            let cref = c.as_slice().unwrap();
            if printed_variant {
                cosine(q, cref)
            } else {
                cosine(&q_hat, cref)
            }
        })
        .collect();

    let mut logits = Vec::with_capacity(1 + n_neg);
    logits.push(pos_sim / tau);
    logits.extend(neg_sims.iter().map(|s| s / tau));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[0];

    if !want_grad {
        return (loss, None);
    }

    // Softmax over the logits gives dL/dlogit directly.
    let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let d = q.len();

    // Gradient into the reconstruction.
    let mut d_qhat = vec![0.0; d];
    {
        let coeff = (probs[0] - 1.0) / tau;
        for (o, g) in d_qhat.iter_mut().zip(cosine_grad_wrt_u(&q_hat, k)) {
            *o += coeff * g;
        }
    }
    let mut dq = vec![0.0; d];
    for (i, c) in negs.rows().into_iter().enumerate() {
        let coeff = probs[i + 1] / tau;
        let cref = c.as_slice().unwrap();
        if printed_variant {
            for (o, g) in dq.iter_mut().zip(cosine_grad_wrt_u(q, cref)) {
                *o += coeff * g;
            }
        } else {
            for (o, g) in d_qhat.iter_mut().zip(cosine_grad_wrt_u(&q_hat, cref)) {
                *o += coeff * g;
            }
        }
    }

    // Through the convex combination into the coefficients, then through the
    // softmax into the dictionary similarities, then into q.
    let d_alpha: Vec<f64> = dict
        .rows()
        .into_iter()
        .map(|c| dot(&d_qhat, c.as_slice().unwrap()))
        .collect();
    let inner: f64 = alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
    for (c_idx, c) in dict.rows().into_iter().enumerate() {
        let d_sim = alpha[c_idx] * (d_alpha[c_idx] - inner) / tau;
        for (o, g) in dq.iter_mut().zip(cosine_grad_wrt_u(q, c.as_slice().unwrap())) {
            *o += d_sim * g;
        }
    }
    (loss, Some(dq))
}

/// Reconstruction loss for one query against its key.
pub fn cir_loss(
    q: &[f64],
    k: &[f64],
    dict: &Array2<f64>,
    negs: &Array2<f64>,
    tau: f64,
    printed_variant: bool,
) -> f64 {
    eval(q, k, dict, negs, tau, printed_variant, false).0
}

/// Loss plus its gradient with respect to the query.
pub fn cir_loss_and_grad(
    q: &[f64],
    k: &[f64],
    dict: &Array2<f64>,
    negs: &Array2<f64>,
    tau: f64,
    printed_variant: bool,
) -> (f64, Vec<f64>) {
    let (loss, grad) = eval(q, k, dict, negs, tau, printed_variant, true);
    (loss, grad.expect("grad requested"))
}

// ---------------------------------------------------------------------------
// Memory queue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub video_id: String,
}

/// Fixed-capacity FIFO of target-encoder embeddings. Entries keep their
/// source video id so queue composition stays inspectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 20)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, embedding: Vec<f64>, video_id: &str) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(ClpError::Contract(format!(
                "queue holds {}-dim embeddings, got {}",
                self.dim,
                embedding.len()
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry {
            embedding,
            video_id: video_id.to_string(),
        });
        Ok(())
    }

    /// Dictionary size a split would use right now.
    pub fn dict_count(&self, dict_fraction: f64) -> usize {
        (self.len() as f64 * dict_fraction).floor() as usize
    }

    /// Warm once a split yields a nonempty dictionary and enough negatives.
    pub fn is_warm(&self, cfg: &CirConfig) -> bool {
        let dict = self.dict_count(cfg.dict_fraction);
        dict >= 1 && self.len() - dict >= cfg.min_negatives
    }

    /// Random split of every filled entry into (dictionary, negatives).
    pub fn split(&self, cfg: &CirConfig, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let (dict, _, negs, _) = self.split_tagged(cfg, rng);
        (dict, negs)
    }

    /// Same split, keeping each side's source video ids row-aligned. Uses the
    /// rng stream exactly like `split`, so the partitions agree under one seed.
    pub fn split_tagged(
        &self,
        cfg: &CirConfig,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Vec<String>, Array2<f64>, Vec<String>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let dict_n = self.dict_count(cfg.dict_fraction);
        let gather = |ids: &[usize]| {
            let mut m = Array2::zeros((ids.len(), self.dim));
            let mut tags = Vec::with_capacity(ids.len());
            for (row, &i) in ids.iter().enumerate() {
                m.row_mut(row)
                    .iter_mut()
                    .zip(&self.entries[i].embedding)
                    .for_each(|(o, v)| *o = *v);
                tags.push(self.entries[i].video_id.clone());
            }
            (m, tags)
        };
        let (dict, dict_ids) = gather(&idx[..dict_n]);
        let (negs, neg_ids) = gather(&idx[dict_n..]);
        (dict, dict_ids, negs, neg_ids)
    }
}

/// Rows of `m` whose tag differs from `vid`, as a fresh matrix.
fn rows_from_other_videos(m: &Array2<f64>, tags: &[String], vid: &str) -> Array2<f64> {
    let keep: Vec<usize> = tags
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() != vid)
        .map(|(i, _)| i)
        .collect();
    let mut out = Array2::zeros((keep.len(), m.ncols()));
    for (row, &i) in keep.iter().enumerate() {
        out.row_mut(row).assign(&m.row(i));
    }
    out
}

// ---------------------------------------------------------------------------
// One training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CirStepOutput {
    /// Mean loss over the batch; zero during warm-up.
    pub loss: f64,
    /// dL/dq per query row; zero rows during warm-up.
    pub grads: Array2<f64>,
    /// Whether the queue was warm when the step ran.
    pub warm: bool,
    /// Queue fill after this step's keys enqueued.
    pub queue_fill: usize,
}

/// Run the reconstruction term for a batch of (query, key) embedding pairs.
///
/// The split is drawn once and shared by the whole batch. Keys enqueue after
/// every loss is computed, warm or not, so the queue fills during warm-up
/// and a key never serves as its own negative.
///
/// With `exclude_same_video` set, each query sees the shared split minus the
/// rows tagged with its own video. A row whose filtered dictionary or
/// negative pool comes up empty is skipped; the mean runs over the rows that
/// actually scored.
pub fn cir_step(
    queue: &mut MemoryQueue,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    video_ids: &[String],
    cfg: &CirConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CirStepOutput> {
    if queries.dim() != keys.dim() {
        return Err(ClpError::Contract(format!(
            "query batch {:?} and key batch {:?} disagree",
            queries.dim(),
            keys.dim()
        )));
    }
    if video_ids.len() != queries.nrows() {
        return Err(ClpError::Contract(format!(
            "{} video ids for {} queries",
            video_ids.len(),
            queries.nrows()
        )));
    }
    let batch = queries.nrows();
    let warm = queue.is_warm(cfg);
    let mut loss = 0.0;
    let mut grads = Array2::zeros(queries.raw_dim());

    if warm && batch > 0 {
        let (dict, dict_ids, negs, neg_ids) = queue.split_tagged(cfg, rng);
        let mut scored: Vec<(usize, f64, Vec<f64>)> = Vec::with_capacity(batch);
        for (b, (q_row, k_row)) in queries.rows().into_iter().zip(keys.rows()).enumerate() {
            let (d, n);
            let (dict_b, negs_b) = if cfg.exclude_same_video {
                d = rows_from_other_videos(&dict, &dict_ids, &video_ids[b]);
                n = rows_from_other_videos(&negs, &neg_ids, &video_ids[b]);
                if d.nrows() == 0 || n.nrows() == 0 {
                    continue;
                }
                (&d, &n)
            } else {
                (&dict, &negs)
            };
            let (l, dq) = cir_loss_and_grad(
                q_row.as_slice().unwrap(),
                k_row.as_slice().unwrap(),
                dict_b,
                negs_b,
                cfg.temperature,
                cfg.eq4_printed_variant,
            );
            scored.push((b, l, dq));
        }
        let denom = scored.len().max(1) as f64;
        for (b, l, dq) in scored {
            loss += l / denom;
            grads
                .row_mut(b)
                .iter_mut()
                .zip(&dq)
                .for_each(|(o, g)| *o += g / denom);
        }
    }

    for (k_row, vid) in keys.rows().into_iter().zip(video_ids) {
        queue.push(k_row.to_vec(), vid)?;
    }

    Ok(CirStepOutput {
        loss,
        grads,
        warm,
        queue_fill: queue.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            row.mapv_inplace(|v| v / nrm);
        }
        m
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn small_cfg() -> CirConfig {
        CirConfig {
            enabled: true,
            frames_per_video: 2,
            memory_size: 8,
            dict_fraction: 0.5,
            temperature: 0.07,
            min_negatives: 2,
            momentum: 0.999,
            eq4_printed_variant: false,
            exclude_same_video: false,
        }
    }

    #[test]
    fn coefficients_are_a_probability_vector() {
        let mut r = rng(21);
        for _ in 0..50 {
            let d = r.gen_range(2..=8);
            let n = r.gen_range(1..=10);
            let dict = unit_rows(n, d, &mut r);
            let q: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0) + 0.1).collect();
            let (alpha, q_hat) = reconstruct(&q, &dict, 0.07);
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|a| *a > 0.0));
            // Convex combination of unit rows cannot leave the unit ball.
            assert!(norm(&q_hat) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn reconstruction_matches_a_hand_rolled_loop() {
        let dict = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = vec![1.0, 0.0];
        let tau = 0.5;
        let (alpha, q_hat) = reconstruct(&q, &dict, tau);
        // sims are (1, 0); alpha = softmax([2, 0]).
        let e = (1.0f64 / tau).exp();
        let a0 = e / (e + 1.0);
        assert!((alpha[0] - a0).abs() < 1e-12);
        assert!((q_hat[0] - a0).abs() < 1e-12);
        assert!((q_hat[1] - (1.0 - a0)).abs() < 1e-12);
    }

    #[test]
    fn indistinguishable_logits_cost_ln_count() {
        // Dictionary, key and negatives all sit on the same unit vector, so
        // every logit ties and the softmax is uniform over 1 + |negatives|.
        let d = 4;
        let dict = Array2::from_shape_fn((4, d), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let negs = Array2::from_shape_fn((7, d), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let k = basis(d, 0);
        let q = vec![0.3, 0.1, -0.2, 0.5];
        for printed in [false, true] {
            let loss = cir_loss(&q, &k, &dict, &negs, 0.07, printed);
            if printed {
                // The printed variant scores negatives against the raw
                // query, so the tie only holds in the reconstruction
                // variant.
                continue;
            }
            assert!((loss - (8.0f64).ln()).abs() < 1e-12);
            assert!((loss - 2.0794415416798357).abs() < 1e-12);
        }
    }

    #[test]
    fn perfectly_separated_case_costs_nearly_nothing() {
        // Reconstruction equals the key; the single negative is orthogonal.
        // loss = ln(1 + exp(-1/tau)).
        let d = 3;
        let dict = Array2::from_shape_fn((3, d), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let negs = Array2::from_shape_fn((1, d), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        let k = basis(d, 0);
        let q = vec![0.9, 0.05, 0.0];
        let loss = cir_loss(&q, &k, &dict, &negs, 0.07, false);
        let expect = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!(loss < 1e-6 && loss > 1e-7);
    }

    #[test]
    fn query_gradient_matches_finite_difference_in_both_variants() {
        let mut r = rng(22);
        for case in 0..30 {
            let d = r.gen_range(2..=6);
            let n_dict = r.gen_range(1..=8);
            let n_neg = r.gen_range(1..=8);
            let dict = unit_rows(n_dict, d, &mut r);
            let negs = unit_rows(n_neg, d, &mut r);
            let k = unit_rows(1, d, &mut r).row(0).to_vec();
            let q: Vec<f64> = (0..d).map(|_| r.gen_range(0.2..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let printed = case % 2 == 1;
            let tau = if case % 3 == 0 { 0.07 } else { 0.5 };
            let (_, dq) = cir_loss_and_grad(&q, &k, &dict, &negs, tau, printed);
            let numeric = finite_diff_grad(
                |x| cir_loss(x, &k, &dict, &negs, tau, printed),
                &q,
                1e-6,
            );
            let err = max_rel_err(&dq, &numeric);
            assert!(
                err < 1e-5,
                "case {case} (printed={printed}) gradient mismatch, rel err {err:.3e}"
            );
        }
    }

    #[test]
    fn queue_is_strictly_fifo_at_capacity_eight() {
        let mut q = MemoryQueue::new(8, 1);
        for i in 0..20 {
            q.push(vec![i as f64], &format!("v{i}")).unwrap();
            let expect_len = (i + 1).min(8);
            assert_eq!(q.len(), expect_len);
            let oldest = (i + 1).saturating_sub(8);
            let got: Vec<f64> = q.iter().map(|e| e.embedding[0]).collect();
            let expect: Vec<f64> = (oldest..=i).map(|v| v as f64).collect();
            assert_eq!(got, expect, "after push {i}");
        }
    }

    #[test]
    fn queue_rejects_wrong_dimension() {
        let mut q = MemoryQueue::new(4, 3);
        assert!(q.push(vec![1.0, 2.0], "v").is_err());
    }

    #[test]
    fn queue_serde_roundtrip_is_exact() {
        let mut q = MemoryQueue::new(4, 2);
        for i in 0..6 {
            q.push(vec![i as f64, -(i as f64)], &format!("v{i}")).unwrap();
        }
        let text = serde_json::to_string(&q).unwrap();
        let back: MemoryQueue = serde_json::from_str(&text).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn split_sizes_follow_the_fraction() {
        let mut q = MemoryQueue::new(16, 1);
        let cfg = small_cfg();
        let mut r = rng(23);
        for i in 0..7 {
            q.push(vec![i as f64], "v").unwrap();
        }
        let (dict, negs) = q.split(&cfg, &mut r);
        assert_eq!(dict.nrows(), 3);
        assert_eq!(negs.nrows(), 4);
        // Together they cover the queue exactly once.
        let mut all: Vec<f64> = dict.column(0).iter().chain(negs.column(0).iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, (0..7).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn cold_queue_returns_zero_loss_but_still_enqueues() {
        let cfg = small_cfg();
        let mut queue = MemoryQueue::new(cfg.memory_size, 2);
        let mut r = rng(24);
        let queries = unit_rows(3, 2, &mut r);
        let keys = unit_rows(3, 2, &mut r);
        let ids: Vec<String> = (0..3).map(|i| format!("v{i}")).collect();
        let out = cir_step(&mut queue, &queries, &keys, &ids, &cfg, &mut r).unwrap();
        assert!(!out.warm);
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
        assert_eq!(out.queue_fill, 3);
        assert_eq!(queue.len(), 3);
    }

    #[test]
    fn warm_threshold_matches_min_negatives() {
        let cfg = small_cfg();
        let mut queue = MemoryQueue::new(cfg.memory_size, 1);
        // dict = floor(len/2); warm needs len - dict >= 2 and dict >= 1.
        queue.push(vec![1.0], "a").unwrap();
        assert!(!queue.is_warm(&cfg));
        queue.push(vec![1.0], "b").unwrap();
        assert!(!queue.is_warm(&cfg)); // dict 1, negs 1
        queue.push(vec![1.0], "c").unwrap();
        assert!(queue.is_warm(&cfg)); // dict 1, negs 2
    }

    #[test]
    fn keys_enqueue_only_after_the_loss_is_scored() {
        // Queue holds only e2. Query and key are e1. If the key leaked into
        // this step's negatives, one negative similarity would be 1 instead
        // of 0 and the loss would shift; the exact expected value below only
        // holds when all negatives are e2.
        let cfg = small_cfg();
        let mut queue = MemoryQueue::new(8, 2);
        for i in 0..8 {
            queue.push(vec![0.0, 1.0], &format!("old{i}")).unwrap();
        }
        let mut r = rng(25);
        let queries = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let keys = queries.clone();
        let out = cir_step(&mut queue, &queries, &keys, &["new".into()], &cfg, &mut r).unwrap();
        assert!(out.warm);
        // dict = 4 x e2 so q_hat = e2; cos(q_hat, k) = 0, cos(q_hat, neg) = 1.
        let tau = cfg.temperature;
        let expect = {
            let z0: f64 = 0.0 / tau;
            let zn = 1.0 / tau;
            let lse = (z0.exp() + 4.0 * zn.exp()).ln();
            lse - z0
        };
        assert!((out.loss - expect).abs() < 1e-9);
        // The key is in the queue afterwards, having evicted the oldest entry.
        assert_eq!(queue.len(), 8);
        assert_eq!(queue.iter().last().unwrap().video_id, "new");
        assert_eq!(queue.iter().last().unwrap().embedding, vec![1.0, 0.0]);
    }

    #[test]
    fn same_video_filter_skips_rows_with_nothing_left() {
        // Every stored entry shares the query's video, so the filtered pools
        // are empty and the step contributes nothing despite a warm queue.
        let mut cfg = small_cfg();
        cfg.exclude_same_video = true;
        let mut queue = MemoryQueue::new(8, 2);
        let mut r = rng(31);
        for _ in 0..8 {
            let v = unit_rows(1, 2, &mut r);
            queue.push(v.row(0).to_vec(), "vid_a").unwrap();
        }
        assert!(queue.is_warm(&cfg));
        let queries = unit_rows(1, 2, &mut r);
        let keys = unit_rows(1, 2, &mut r);
        let out = cir_step(&mut queue, &queries, &keys, &["vid_a".into()], &cfg, &mut r).unwrap();
        assert!(out.warm);
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn same_video_filter_matches_a_hand_filtered_oracle() {
        let mut cfg = small_cfg();
        cfg.exclude_same_video = true;
        let mut r = rng(77);
        let mut queue = MemoryQueue::new(8, 4);
        for i in 0..8 {
            let v = unit_rows(1, 4, &mut r);
            let vid = if i % 3 == 0 { "mine" } else { "other" };
            queue.push(v.row(0).to_vec(), vid).unwrap();
        }
        let queries = unit_rows(2, 4, &mut r);
        let keys = unit_rows(2, 4, &mut r);
        let vids = vec!["mine".to_string(), "absent".to_string()];

        // Replay the same rng stream to learn the split, then filter by hand.
        let mut r_split = r.clone();
        let (dict, dict_ids, negs, neg_ids) = queue.split_tagged(&cfg, &mut r_split);
        let mut expect = 0.0;
        for (b, vid) in vids.iter().enumerate() {
            let d = rows_from_other_videos(&dict, &dict_ids, vid);
            let n = rows_from_other_videos(&negs, &neg_ids, vid);
            assert!(d.nrows() > 0 && n.nrows() > 0);
            expect += cir_loss(
                queries.row(b).as_slice().unwrap(),
                keys.row(b).as_slice().unwrap(),
                &d,
                &n,
                cfg.temperature,
                false,
            ) / 2.0;
        }
        let out = cir_step(&mut queue, &queries, &keys, &vids, &cfg, &mut r).unwrap();
        assert!((out.loss - expect).abs() < 1e-12);

        // A query whose video never enqueued sees the full split, so turning
        // the filter off only changes rows that had something to drop.
        assert!(dict_ids.iter().any(|t| t == "mine"));
    }

    #[test]
    fn filter_is_a_no_op_when_all_sources_differ() {
        let mut r = rng(93);
        let mut queue = MemoryQueue::new(8, 3);
        for i in 0..8 {
            let v = unit_rows(1, 3, &mut r);
            queue.push(v.row(0).to_vec(), &format!("v{i}")).unwrap();
        }
        let queries = unit_rows(3, 3, &mut r);
        let keys = unit_rows(3, 3, &mut r);
        let vids: Vec<String> = (0..3).map(|i| format!("q{i}")).collect();

        let mut cfg_on = small_cfg();
        cfg_on.exclude_same_video = true;
        let mut r_on = r.clone();
        let on = cir_step(&mut queue.clone(), &queries, &keys, &vids, &cfg_on, &mut r_on).unwrap();
        let off = cir_step(&mut queue, &queries, &keys, &vids, &small_cfg(), &mut r).unwrap();
        assert_eq!(on.loss, off.loss);
        assert_eq!(on.grads, off.grads);
    }
}
