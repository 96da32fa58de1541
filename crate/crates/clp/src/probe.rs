//! Linear probe: frozen-encoder evaluation with per-label F1.
//!
//! The probe is one normalization layer followed by a single bias-free
//! affine map onto all labels at once, trained with class-reweighted binary
//! cross-entropy under subject-independent folds. The encoder stays frozen
//! except for its normalization layers: when `update_backbone_bn` is set,
//! trunk batch-norm affine parameters take gradient steps and running
//! statistics refresh on probe batches; everything else never moves.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::data::labels::ProbeExample;
use crate::data::manifest::VideoManifest;
use crate::data::FrameStore;
use crate::encoder::Encoder;
use crate::error::{ClpError, Result};
use crate::nn::{add_grad, BatchNorm, BnCache, Grads, Module, Sgd, TensorKind, Visitor, VisitorMut};

// ---------------------------------------------------------------------------
// Probe model
// ---------------------------------------------------------------------------

/// Normalization plus one bias-free affine map feature_dim -> num_labels.
/// Trainable parameter count is exactly
/// feature_dim·num_labels + 2·feature_dim.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub bn: BatchNorm,
    /// (num_labels, feature_dim); no bias by design, the normalization
    /// layer's shift plays that role.
    pub w: Array2<f64>,
}

impl LinearProbe {
    /// Zero-initialized affine map. Starting every label at zero makes the
    /// per-label subproblems identical up to their data, so results cannot
    /// depend on label ordering or on an initialization draw.
    pub fn new(feature_dim: usize, num_labels: usize) -> Self {
        LinearProbe {
            bn: BatchNorm::new("probe.bn", feature_dim),
            w: Array2::zeros((num_labels, feature_dim)),
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> (Array2<f64>, ProbeCache) {
        let (h, bn) = self.bn.forward(x, train);
        let logits = h.dot(&self.w.t());
        (logits, ProbeCache { bn, h })
    }

    pub fn backward(&self, cache: &ProbeCache, dlogits: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let dw = dlogits.t().dot(&cache.h);
        add_grad(grads, "probe.w", dw.as_slice().expect("contiguous"));
        let dh = dlogits.dot(&self.w);
        self.bn.backward(&cache.bn, &dh, grads)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeCache {
    bn: BnCache,
    h: Array2<f64>,
}

impl Module for LinearProbe {
    fn visit(&self, f: &mut Visitor) {
        self.bn.visit(f);
        f(
            "probe.w",
            TensorKind::Weight,
            &[self.w.nrows(), self.w.ncols()],
            self.w.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        self.bn.visit_mut(f);
        let shape = [self.w.nrows(), self.w.ncols()];
        f(
            "probe.w",
            TensorKind::Weight,
            &shape,
            self.w.as_slice_mut().expect("contiguous"),
        );
    }
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Positive-class weight per label from a training split: negatives over
/// positives among known entries, capped. A label with no known positives
/// gets the cap and a warning.
pub fn pos_weights(
    targets: &Array2<f64>,
    mask: &Array2<f64>,
    label_names: &[String],
    cap: f64,
) -> (Vec<f64>, Vec<String>) {
    let mut weights = Vec::with_capacity(label_names.len());
    let mut warnings = Vec::new();
    for (a, name) in label_names.iter().enumerate() {
        let mut pos = 0.0f64;
        let mut neg = 0.0f64;
        for i in 0..targets.nrows() {
            if mask[[i, a]] != 0.0 {
                if targets[[i, a]] != 0.0 {
                    pos += 1.0;
                } else {
                    neg += 1.0;
                }
            }
        }
        if pos == 0.0 {
            warnings.push(format!(
                "label {name} has no known positives in the training split; weight capped at {cap}"
            ));
            weights.push(cap);
        } else {
            weights.push((neg / pos).min(cap));
        }
    }
    (weights, warnings)
}

/// Class-reweighted binary cross-entropy over known entries, mean over the
/// unmasked count, with its gradient in the logits. Masked entries
/// contribute exactly zero to both.
pub fn weighted_bce(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    mask: &Array2<f64>,
    pos_weight: &[f64],
) -> (f64, Array2<f64>) {
    let n_known: f64 = mask.sum();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    if n_known == 0.0 {
        return (0.0, dlogits);
    }
    let mut loss = 0.0;
    for i in 0..logits.nrows() {
        for a in 0..logits.ncols() {
            if mask[[i, a]] == 0.0 {
                continue;
            }
            let z = logits[[i, a]];
            let t = targets[[i, a]];
            let w = pos_weight[a];
            // -w t ln σ(z) - (1-t) ln(1-σ(z)), in softplus form.
            loss += (w * t * softplus(-z) + (1.0 - t) * softplus(z)) / n_known;
            dlogits[[i, a]] = (w * t * (sigmoid(z) - 1.0) + (1.0 - t) * sigmoid(z)) / n_known;
        }
    }
    (loss, dlogits)
}

/// Confusion counts and derived scores for one label. Scores live in
/// [0, 1]; reports multiply by 100 at rendering time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelStats {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> LabelStats {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        LabelStats {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-label confusion statistics over unmasked entries. Predictions and
/// targets must be 0/1 matrices of the same shape as the mask.
pub fn f1_scores(predictions: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>) -> Vec<LabelStats> {
    assert_eq!(predictions.dim(), targets.dim());
    assert_eq!(predictions.dim(), mask.dim());
    (0..predictions.ncols())
        .map(|a| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for i in 0..predictions.nrows() {
                if mask[[i, a]] == 0.0 {
                    continue;
                }
                let p = predictions[[i, a]] != 0.0;
                let t = targets[[i, a]] != 0.0;
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            LabelStats::from_counts(tp, fp, fn_)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

/// Probe-ready matrices: one pixel row per labeled frame, targets and a
/// known-entry mask over the full label set, and the owning subject per row.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub pixels: Array2<f64>,
    pub targets: Array2<f64>,
    pub mask: Array2<f64>,
    pub label_names: Vec<String>,
    pub subjects: Vec<String>,
}

/// Assemble probe matrices from joined examples. Frames resize to the
/// configured input side with no augmentation; an example naming a frame
/// absent from the manifests is a data error.
pub fn build_probe_data(
    store: &FrameStore,
    manifests: &[VideoManifest],
    examples: &[ProbeExample],
    label_names: &[String],
    input_size: usize,
) -> Result<ProbeData> {
    use std::collections::BTreeMap;
    let mut index: BTreeMap<&std::path::Path, (usize, usize)> = BTreeMap::new();
    for (vi, m) in manifests.iter().enumerate() {
        for (fi, f) in m.frames.iter().enumerate() {
            index.insert(f.as_path(), (vi, fi));
        }
    }
    if examples.is_empty() {
        return Err(ClpError::Data("no labeled examples to probe".into()));
    }
    let l = label_names.len();
    let probe_img = store.frame(0, 0).resize_bilinear(input_size, input_size);
    let d = probe_img.data.len();
    let mut pixels = Array2::zeros((examples.len(), d));
    let mut targets = Array2::zeros((examples.len(), l));
    let mut mask = Array2::zeros((examples.len(), l));
    let mut subjects = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let &(vi, fi) = index.get(ex.image.as_path()).ok_or_else(|| {
            ClpError::Data(format!("labeled image {} is not in any manifest", ex.image.display()))
        })?;
        let img = store.frame(vi, fi).resize_bilinear(input_size, input_size);
        pixels.row_mut(i).iter_mut().zip(&img.data).for_each(|(o, p)| *o = *p);
        for (a, name) in label_names.iter().enumerate() {
            if let Some(Some(v)) = ex.labels.get(name) {
                targets[[i, a]] = if *v { 1.0 } else { 0.0 };
                mask[[i, a]] = 1.0;
            }
        }
        subjects.push(ex.subject_id.clone());
    }
    Ok(ProbeData {
        pixels,
        targets,
        mask,
        label_names: label_names.to_vec(),
        subjects,
    })
}

/// Row indices per fold, assigning whole subjects round-robin over the
/// sorted subject list so no subject ever crosses folds.
pub fn subject_folds(subjects: &[String], folds: usize) -> Result<Vec<Vec<usize>>> {
    if folds == 0 {
        return Err(ClpError::Config("probe.folds must be positive".into()));
    }
    let mut unique: Vec<&String> = subjects.iter().collect();
    unique.sort();
    unique.dedup();
    if unique.len() < folds {
        return Err(ClpError::Data(format!(
            "{} subjects cannot fill {} subject-independent folds",
            unique.len(),
            folds
        )));
    }
    let fold_of: std::collections::BTreeMap<&String, usize> = unique
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i % folds))
        .collect();
    let mut out = vec![Vec::new(); folds];
    for (row, s) in subjects.iter().enumerate() {
        out[fold_of[&s]].push(row);
    }
    Ok(out)
}

fn ensure_disjoint_subjects(data: &ProbeData, folds: &[Vec<usize>]) -> Result<()> {
    use std::collections::BTreeSet;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for fold in folds {
        let here: BTreeSet<&str> = fold.iter().map(|&r| data.subjects[r].as_str()).collect();
        if let Some(dup) = here.iter().find(|s| seen.contains(*s)) {
            return Err(ClpError::Contract(format!(
                "subject {dup} appears in more than one fold"
            )));
        }
        seen.extend(here);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cross-validated evaluation
// ---------------------------------------------------------------------------

/// Fold-resolved evaluation results, scores in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub label_names: Vec<String>,
    /// [fold][label] confusion statistics on the held-out split.
    pub per_fold: Vec<Vec<LabelStats>>,
    /// Mean F1 over labels, per fold.
    pub fold_mean_f1: Vec<f64>,
    /// Fold-averaged F1 per label.
    pub label_f1: Vec<f64>,
    /// Unweighted mean of `label_f1`.
    pub mean_f1: f64,
    pub warnings: Vec<String>,
}

fn rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).assign(&m.row(i));
    }
    out
}

/// Train the probe on one split and return hard predictions for the test
/// rows plus the fold's adapted encoder clone, so callers and tests can
/// inspect what moved. The caller's encoder is never touched.
fn run_fold(
    encoder: &Encoder,
    data: &ProbeData,
    train_rows: &[usize],
    test_rows: &[usize],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
    warnings: &mut Vec<String>,
) -> Result<(Array2<f64>, Encoder)> {
    let mut enc = encoder.clone();
    let mut probe = LinearProbe::new(enc.feature_dim(), data.label_names.len());
    let mut sgd = Sgd::new(0.0);

    let train_targets = rows(&data.targets, train_rows);
    let train_mask = rows(&data.mask, train_rows);
    let (weights, mut warn) = pos_weights(&train_targets, &train_mask, &data.label_names, cfg.pos_weight_cap);
    warnings.append(&mut warn);

    // Frozen-trunk fast path: features never change, so extract them once.
    let frozen_feats = if cfg.update_backbone_bn {
        None
    } else {
        Some(enc.features_eval(&rows(&data.pixels, train_rows)))
    };

    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let abs: Vec<usize> = chunk.iter().map(|&r| train_rows[r]).collect();
            let targets = rows(&data.targets, &abs);
            let mask = rows(&data.mask, &abs);
            let mut grads = Grads::new();
            let loss = if let Some(ff) = &frozen_feats {
                let feats = rows(ff, chunk);
                let (logits, cache) = probe.forward(&feats, true);
                let (loss, dlogits) = weighted_bce(&logits, &targets, &mask, &weights);
                probe.backward(&cache, &dlogits, &mut grads);
                loss
            } else {
                let x = rows(&data.pixels, &abs);
                let (feats, trunk_cache) = enc.trunk.forward(&x, true);
                let (logits, cache) = probe.forward(&feats, true);
                let (loss, dlogits) = weighted_bce(&logits, &targets, &mask, &weights);
                let d_feats = probe.backward(&cache, &dlogits, &mut grads);
                enc.trunk.backward(&trunk_cache, &d_feats, &mut grads);
                loss
            };
            if !loss.is_finite() {
                return Err(ClpError::non_finite("probe loss"));
            }
            sgd.step(&mut probe, &grads, cfg.lr);
            if cfg.update_backbone_bn {
                // Only the trunk's normalization affine may move.
                sgd.step_filtered(&mut enc.trunk, &grads, cfg.lr, &|_, kind| kind.is_norm());
            }
        }
    }

    // Hard decisions on the held-out rows, everything in eval mode.
    let test_feats = enc.features_eval(&rows(&data.pixels, test_rows));
    let (logits, _) = probe.forward(&test_feats, false);
    let cut = (cfg.threshold / (1.0 - cfg.threshold)).ln();
    Ok((logits.mapv(|z| if z >= cut { 1.0 } else { 0.0 }), enc))
}

/// Subject-independent cross-validated probe evaluation of a frozen
/// encoder.
pub fn run_probe(
    encoder: &Encoder,
    data: &ProbeData,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let folds = subject_folds(&data.subjects, cfg.folds)?;
    ensure_disjoint_subjects(data, &folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut warnings = Vec::new();
    for f in 0..folds.len() {
        let test_rows = &folds[f];
        let train_rows: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        if train_rows.is_empty() || test_rows.is_empty() {
            return Err(ClpError::Data(format!("fold {f} has an empty split")));
        }
        let (preds, _) = run_fold(encoder, data, &train_rows, test_rows, cfg, &mut rng, &mut warnings)?;
        let targets = rows(&data.targets, test_rows);
        let mask = rows(&data.mask, test_rows);
        per_fold.push(f1_scores(&preds, &targets, &mask));
    }

    let num_labels = data.label_names.len();
    let label_f1: Vec<f64> = (0..num_labels)
        .map(|a| per_fold.iter().map(|f| f[a].f1).sum::<f64>() / per_fold.len() as f64)
        .collect();
    let fold_mean_f1: Vec<f64> = per_fold
        .iter()
        .map(|f| f.iter().map(|s| s.f1).sum::<f64>() / num_labels as f64)
        .collect();
    let mean_f1 = label_f1.iter().sum::<f64>() / num_labels as f64;
    Ok(ProbeReport {
        label_names: data.label_names.clone(),
        per_fold,
        fold_mean_f1,
        label_f1,
        mean_f1,
        warnings,
    })
}

/// Mean cosine similarity of eval-mode trunk features over index pairs;
/// the cross-identity pull measurement.
pub fn mean_pair_cosine(
    encoder: &Encoder,
    pixels: &Array2<f64>,
    pairs: &[(usize, usize)],
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut enc = encoder.clone();
    let feats = enc.features_eval(pixels);
    let mut total = 0.0;
    for &(i, j) in pairs {
        total += crate::cir::cosine(
            feats.row(i).as_slice().expect("contiguous"),
            feats.row(j).as_slice().expect("contiguous"),
        );
    }
    total / pairs.len() as f64
}
