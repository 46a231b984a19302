use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Real};

/// Standard deviation of the Gaussian initialiser.
pub const INIT_STD: f64 = 0.02;

/// Dense tensor with a row-major shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn gaussian<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| T::cast(normal.sample(rng)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }
}

/// Weights of one pre-norm encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_shift: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

/// Every learnable tensor. Gradients and optimizer moments reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub patch_w1: Tensor<T>,
    pub patch_b1: Tensor<T>,
    pub patch_w2: Tensor<T>,
    pub patch_b2: Tensor<T>,
    pub proj_e0: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_shift: Tensor<T>,
    pub head_w: Tensor<T>,
}

const BLOCK_NAMES: [&str; 13] = [
    "ln1_gain", "ln1_shift", "w_q", "w_k", "w_v", "w_out", "b_out", "ln2_gain", "ln2_shift",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2",
];

impl<T: Real> BlockParams<T> {
    fn refs(&self) -> [&Tensor<T>; 13] {
        [
            &self.ln1_gain, &self.ln1_shift, &self.w_q, &self.w_k, &self.w_v, &self.w_out,
            &self.b_out, &self.ln2_gain, &self.ln2_shift, &self.w_ff1, &self.b_ff1, &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut Tensor<T>; 13] {
        [
            &mut self.ln1_gain, &mut self.ln1_shift, &mut self.w_q, &mut self.w_k, &mut self.w_v,
            &mut self.w_out, &mut self.b_out, &mut self.ln2_gain, &mut self.ln2_shift,
            &mut self.w_ff1, &mut self.b_ff1, &mut self.w_ff2, &mut self.b_ff2,
        ]
    }
}

impl<T: Real> ModelParams<T> {
    /// Gaussian weights, zero biases and shifts, unit norm gains.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let f = &cfg.fpe;
        let t = &cfg.transformer;
        let d = f.token_dim;
        let aw = t.attn_width();
        let blocks = (0..t.depth)
            .map(|_| BlockParams {
                ln1_gain: Tensor::filled(&[d], T::one()),
                ln1_shift: Tensor::zeros(&[d]),
                w_q: Tensor::gaussian(&[d, aw], rng),
                w_k: Tensor::gaussian(&[d, aw], rng),
                w_v: Tensor::gaussian(&[d, aw], rng),
                w_out: Tensor::gaussian(&[aw, d], rng),
                b_out: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], T::one()),
                ln2_shift: Tensor::zeros(&[d]),
                w_ff1: Tensor::gaussian(&[d, t.dim_mlp], rng),
                b_ff1: Tensor::zeros(&[t.dim_mlp]),
                w_ff2: Tensor::gaussian(&[t.dim_mlp, d], rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        ModelParams {
            patch_w1: Tensor::gaussian(&[cfg.patch_len(), f.mlp_hidden], rng),
            patch_b1: Tensor::zeros(&[f.mlp_hidden]),
            patch_w2: Tensor::gaussian(&[f.mlp_hidden, f.embed_dim], rng),
            patch_b2: Tensor::zeros(&[f.embed_dim]),
            proj_e0: Tensor::gaussian(&[f.embed_dim, d], rng),
            cls_token: Tensor::gaussian(&[d], rng),
            pos_embed: Tensor::gaussian(&[cfg.n_tokens(), d], rng),
            blocks,
            lnf_gain: Tensor::filled(&[d], T::one()),
            lnf_shift: Tensor::zeros(&[d]),
            head_w: Tensor::gaussian(&[d, t.n_classes], rng),
        }
    }

    /// Same shapes, all zero: a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Tensor names in serialization order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "patch_w1", "patch_b1", "patch_w2", "patch_b2", "proj_e0", "cls_token", "pos_embed",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        names.extend(["lnf_gain", "lnf_shift", "head_w"].iter().map(|s| s.to_string()));
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![
            &self.patch_w1, &self.patch_b1, &self.patch_w2, &self.patch_b2, &self.proj_e0,
            &self.cls_token, &self.pos_embed,
        ];
        for b in &self.blocks {
            v.extend(b.refs());
        }
        v.extend([&self.lnf_gain, &self.lnf_shift, &self.head_w]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.patch_w1, &mut self.patch_b1, &mut self.patch_w2, &mut self.patch_b2,
            &mut self.proj_e0, &mut self.cls_token, &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            v.extend(b.refs_mut());
        }
        v.extend([&mut self.lnf_gain, &mut self.lnf_shift, &mut self.head_w]);
        v
    }

    /// Whether decoupled weight decay applies: weight matrices only, never
    /// biases, norm parameters, the class token or position embeddings.
    pub fn decays(name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        matches!(
            leaf,
            "patch_w1" | "patch_w2" | "proj_e0" | "w_q" | "w_k" | "w_v" | "w_out" | "w_ff1"
                | "w_ff2" | "head_w"
        )
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    /// Flattened copy in serialization order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites every tensor from a flat buffer in serialization order.
    pub fn load_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat buffer length mismatch");
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            patch_w1: self.patch_w1.cast(),
            patch_b1: self.patch_b1.cast(),
            patch_w2: self.patch_w2.cast(),
            patch_b2: self.patch_b2.cast(),
            proj_e0: self.proj_e0.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: Vec::new(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_shift: self.lnf_shift.cast(),
            head_w: self.head_w.cast(),
        };
        out.blocks = self
            .blocks
            .iter()
            .map(|b| BlockParams {
                ln1_gain: b.ln1_gain.cast(),
                ln1_shift: b.ln1_shift.cast(),
                w_q: b.w_q.cast(),
                w_k: b.w_k.cast(),
                w_v: b.w_v.cast(),
                w_out: b.w_out.cast(),
                b_out: b.b_out.cast(),
                ln2_gain: b.ln2_gain.cast(),
                ln2_shift: b.ln2_shift.cast(),
                w_ff1: b.w_ff1.cast(),
                b_ff1: b.b_ff1.cast(),
                w_ff2: b.w_ff2.cast(),
                b_ff2: b.b_ff2.cast(),
            })
            .collect();
        out
    }
}

