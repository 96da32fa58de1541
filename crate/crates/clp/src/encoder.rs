//! Frame encoder: a batch-normalized MLP trunk shared by two projection
//! heads, one per loss. The trunk output is the representation the linear
//! probe evaluates; each head maps it to a unit-norm embedding.
//!
//! Forward passes return caches, and backward passes consume them, so one
//! trunk forward can serve several heads in a step: run the trunk on the
//! concatenated batch, slice the features per head, then add the head
//! feature-gradients back together before the trunk backward.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::error::{ClpError, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, relu, relu_backward, BatchNorm, BnCache, Grads, Linear,
    Module, Visitor, VisitorMut,
};

#[derive(Debug, Clone)]
pub struct Block {
    pub lin: Linear,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Array2<f64>,
    bn: BnCache,
    pre_relu: Array2<f64>,
}

impl Block {
    fn forward(&mut self, x: &Array2<f64>, train: bool) -> (Array2<f64>, BlockCache) {
        let lin_out = self.lin.forward(x);
        let (bn_out, bn_cache) = self.bn.forward(&lin_out, train);
        let y = relu(&bn_out);
        (
            y,
            BlockCache {
                x: x.clone(),
                bn: bn_cache,
                pre_relu: bn_out,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let d_pre = relu_backward(&cache.pre_relu, dy);
        let d_lin = self.bn.backward(&cache.bn, &d_pre, grads);
        self.lin.backward(&cache.x, &d_lin, grads)
    }
}

/// Linear -> batch norm -> ReLU, repeated; the last width is the feature
/// dimension the probe sees.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub blocks: Vec<Block>,
    pub in_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    blocks: Vec<BlockCache>,
}

impl Trunk {
    pub fn new(in_dim: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(!widths.is_empty());
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(Block {
                lin: Linear::new(&format!("trunk.fc{i}"), prev, w, rng),
                bn: BatchNorm::new(&format!("trunk.bn{i}"), w),
            });
            prev = w;
        }
        Trunk { blocks, in_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().expect("nonempty trunk").bn.gamma.len()
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> (Array2<f64>, TrunkCache) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (next, cache) = b.forward(&cur, train);
            caches.push(cache);
            cur = next;
        }
        (cur, TrunkCache { blocks: caches })
    }

    pub fn backward(&self, cache: &TrunkCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(c, &d, grads);
        }
        d
    }
}

impl Module for Trunk {
    fn visit(&self, f: &mut Visitor) {
        for b in &self.blocks {
            b.lin.visit(f);
            b.bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        for b in &mut self.blocks {
            b.lin.visit_mut(f);
            b.bn.visit_mut(f);
        }
    }
}

/// Two-layer projection onto the unit sphere. Stateless across calls, so the
/// forward takes `&self` and training mode does not matter.
#[derive(Debug, Clone)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
}

impl Head {
    pub fn new(name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            fc1: Linear::new(&format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let h_pre = self.fc1.forward(x);
        let h = relu(&h_pre);
        let z = self.fc2.forward(&h);
        let y = l2_normalize(&z);
        (
            y,
            HeadCache {
                x: x.clone(),
                h_pre,
                h,
                z,
            },
        )
    }

    pub fn backward(&self, cache: &HeadCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let dz = l2_normalize_backward(&cache.z, dy);
        let dh = self.fc2.backward(&cache.h, &dz, grads);
        let dh_pre = relu_backward(&cache.h_pre, &dh);
        self.fc1.backward(&cache.x, &dh_pre, grads)
    }
}

impl Module for Head {
    fn visit(&self, f: &mut Visitor) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub trunk: Trunk,
    pub tcl_head: Head,
    pub cir_head: Head,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.backbone != "mlp" {
            return Err(ClpError::Config(format!(
                "encoder.backbone {:?} is not available; this build provides \"mlp\"",
                cfg.backbone
            )));
        }
        let mut widths = cfg.hidden.clone();
        widths.push(cfg.feature_dim);
        let trunk = Trunk::new(input_dim, &widths, rng);
        let tcl_head = Head::new("tcl_head", cfg.feature_dim, cfg.head_hidden, cfg.embed_dim, rng);
        let cir_head = Head::new("cir_head", cfg.feature_dim, cfg.head_hidden, cfg.embed_dim, rng);
        Ok(Encoder {
            trunk,
            tcl_head,
            cir_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    /// Features only, eval mode; what the probe consumes at inference.
    pub fn features_eval(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.trunk.forward(x, false).0
    }

    /// Unit-norm reconstruction-head embeddings, eval mode; used by the
    /// target encoder to produce keys and by offline analysis.
    pub fn embed_cir_eval(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (feats, _) = self.trunk.forward(x, false);
        self.cir_head.forward(&feats).0
    }

    /// Unit-norm temporal-head embeddings, eval mode.
    pub fn embed_tcl_eval(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (feats, _) = self.trunk.forward(x, false);
        self.tcl_head.forward(&feats).0
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut Visitor) {
        self.trunk.visit(f);
        self.tcl_head.visit(f);
        self.cir_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        self.trunk.visit_mut(f);
        self.tcl_head.visit_mut(f);
        self.cir_head.visit_mut(f);
    }
}

/// Split a concatenated feature-gradient back to trunk layout: `parts` are
/// per-segment gradients in the order the rows were stacked.
pub fn stack_rows(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ema_blend, finite_diff_grad, max_rel_err, state_map, Sgd, TensorKind};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            backbone: "mlp".into(),
            hidden: vec![5],
            feature_dim: 4,
            head_hidden: 4,
            embed_dim: 3,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Weighted sum of the TCL-head embedding, as a scalar objective.
    fn objective(enc: &Encoder, x: &Array2<f64>, w: &Array2<f64>, train: bool) -> f64 {
        let mut e = enc.clone();
        let (feats, _) = e.trunk.forward(x, train);
        let (emb, _) = e.tcl_head.forward(&feats);
        (emb * w).sum()
    }

    /// Finite differences only make sense away from the kinks. With
    /// zero-initialized biases a dead feature row puts head pre-activations
    /// exactly on the ReLU kink and the pre-norm embedding exactly at the
    /// origin, where the function is not differentiable (the analytic
    /// subgradient is still valid, but a central difference measures the
    /// jump). Require a comfortable margin from every kink.
    fn comfortably_differentiable(enc: &Encoder, x: &Array2<f64>) -> bool {
        let mut e = enc.clone();
        let (feats, tcache) = e.trunk.forward(x, true);
        let (_, hcache) = e.tcl_head.forward(&feats);
        let trunk_clear = tcache
            .blocks
            .iter()
            .all(|b| b.pre_relu.iter().all(|v| v.abs() > 1e-4));
        let head_clear = hcache.h_pre.iter().all(|v| v.abs() > 1e-4);
        let norm_clear = hcache
            .z
            .rows()
            .into_iter()
            .all(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3);
        trunk_clear && head_clear && norm_clear
    }

    /// First seed at or after `from` whose draw sits clear of every kink.
    fn differentiable_case(from: u64, batch: usize) -> (Encoder, Array2<f64>, ChaCha8Rng) {
        for seed in from..from + 50 {
            let mut r = rng(seed);
            let enc = Encoder::new(&tiny_cfg(), 6, &mut r).unwrap();
            let x = Array2::from_shape_fn((batch, 6), |_| r.gen_range(-1.0..1.0));
            if comfortably_differentiable(&enc, &x) {
                return (enc, x, r);
            }
        }
        panic!("no differentiable draw within 50 seeds of {from}");
    }

    #[test]
    fn input_gradient_matches_finite_difference_through_the_whole_stack() {
        let (enc, x, mut r) = differentiable_case(31, 3);
        let mut e = enc.clone();
        let (feats, tcache) = e.trunk.forward(&x, true);
        let (emb, hcache) = e.tcl_head.forward(&feats);
        let w = Array2::from_shape_fn(emb.raw_dim(), |_| r.gen_range(-1.0..1.0));

        let mut grads = Grads::new();
        let dfeat = e.tcl_head.backward(&hcache, &w, &mut grads);
        let dx = e.trunk.backward(&tcache, &dfeat, &mut grads);

        let numeric = finite_diff_grad(
            |flat| {
                let xm = Array2::from_shape_vec((3, 6), flat.to_vec()).unwrap();
                objective(&enc, &xm, &w, true)
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        let analytic: Vec<f64> = dx.iter().copied().collect();
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn every_parameter_gradient_matches_finite_difference() {
        let (enc, x, mut r) = differentiable_case(32, 4);
        let mut e = enc.clone();
        let (feats, tcache) = e.trunk.forward(&x, true);
        let (emb, hcache) = e.tcl_head.forward(&feats);
        let w = Array2::from_shape_fn(emb.raw_dim(), |_| r.gen_range(-1.0..1.0));

        let mut grads = Grads::new();
        let dfeat = e.tcl_head.backward(&hcache, &w, &mut grads);
        let _ = e.trunk.backward(&tcache, &dfeat, &mut grads);

        // Perturb every trainable scalar in turn. The cir head never ran, so
        // it gets no gradient; everything else must check out.
        let names: Vec<(String, usize, TensorKind)> = {
            let mut v = Vec::new();
            enc.visit(&mut |name, kind, _shape, data| v.push((name.to_string(), data.len(), kind)));
            v
        };
        for (name, len, kind) in names {
            if !kind.is_trainable() || name.starts_with("cir_head") {
                continue;
            }
            let analytic = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; len]);
            let mut numeric = vec![0.0; len];
            for i in 0..len {
                let h = 1e-6;
                let eval_at = |delta: f64| {
                    let mut e2 = enc.clone();
                    e2.visit_mut(&mut |n, _k, _s, data| {
                        if n == name {
                            data[i] += delta;
                        }
                    });
                    objective(&e2, &x, &w, true)
                };
                numeric[i] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            }
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-5, "parameter gradient mismatch for {name}: rel err {err:.3e}");
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_mutation_free() {
        let mut r = rng(33);
        let mut enc = Encoder::new(&tiny_cfg(), 6, &mut r).unwrap();
        let x = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
        // Train once so running statistics move off their initializer.
        let _ = enc.trunk.forward(&x, true);
        let before = state_map(&enc);
        let a = enc.embed_cir_eval(&x);
        let b = enc.embed_cir_eval(&x);
        assert_eq!(a, b);
        assert_eq!(state_map(&enc), before);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut r = rng(34);
        let mut enc = Encoder::new(&tiny_cfg(), 6, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 6), |_| r.gen_range(-1.0..1.0));
        for emb in [enc.embed_tcl_eval(&x), enc.embed_cir_eval(&x)] {
            for row in emb.rows() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn target_encoder_ema_tracks_the_online_encoder() {
        let mut r = rng(35);
        let mut online = Encoder::new(&tiny_cfg(), 6, &mut r).unwrap();
        let mut target = online.clone();
        // Blending with rho = 1 freezes the target entirely.
        ema_blend(&mut target, &online, 1.0).unwrap();
        assert_eq!(state_map(&target), state_map(&online));

        // Move the online encoder, then blend with rho = 0: full copy.
        let x = Array2::from_shape_fn((4, 6), |_| r.gen_range(-1.0..1.0));
        let mut e = online.clone();
        let (feats, tcache) = e.trunk.forward(&x, true);
        let (emb, hcache) = e.tcl_head.forward(&feats);
        let w = Array2::from_shape_fn(emb.raw_dim(), |_| 1.0);
        let mut grads = Grads::new();
        let dfeat = e.tcl_head.backward(&hcache, &w, &mut grads);
        let _ = e.trunk.backward(&tcache, &dfeat, &mut grads);
        online = e;
        let mut opt = Sgd::new(0.9);
        opt.step(&mut online, &grads, 0.05);

        ema_blend(&mut target, &online, 0.0).unwrap();
        assert_eq!(state_map(&target), state_map(&online));
    }

    #[test]
    fn stacked_rows_concatenate_in_order() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![5.0, 6.0]).unwrap();
        let s = stack_rows(&[&a, &b]);
        assert_eq!(s.nrows(), 3);
        assert_eq!(s[[2, 1]], 6.0);
    }
}
