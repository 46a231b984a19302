//! Frame-patch encoder and transformer classifier.
//!
//! Shape chain for one input `M x T'`:
//!
//! ```text
//! G = ceil(T'/d) + 1 frame patches of M*m values
//!   -> patch MLP -> G embeddings of width L
//!   -> mean over windows of P, shift h -> K = floor((G-P)/h) + 1 embeddings
//!   -> [cls; e_k E0] + E_pos -> (K+1) x L' tokens
//!   -> pre-norm transformer -> class-token row -> logits (c)
//! ```

mod forward;
pub mod ops;
mod params;

pub use forward::{
    assemble_tokens, attention_maps, average_embeddings, backward, classify, embed_patches, extract_patches,
    forward, forward_batch, forward_cached, patch_count, transformer_forward, ForwardCache,
};
pub use params::{BlockParams, ModelParams, Tensor, INIT_STD};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

/// Floating point type the model can run in: f32 for training, f64 for
/// gradient checks.
pub trait Real:
    num_traits::Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// How the template is cut into patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// One patch spans all channels over a time window.
    Frame,
    /// One patch per channel and time window; tokens ordered channel-major.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpeConfig {
    /// Patch embedding width `L`.
    pub embed_dim: usize,
    /// Frame window `m` in samples.
    pub frame_window: usize,
    /// Frame stride `d` in samples.
    pub frame_stride: usize,
    /// Averaging window `P` in embeddings.
    pub avg_window: usize,
    /// Shift `h` between averaging windows.
    pub avg_shift: usize,
    /// Token width `L'`.
    pub token_dim: usize,
    pub mlp_hidden: usize,
    pub patch_mode: PatchMode,
}

impl FpeConfig {
    pub fn preset(task: Task) -> Self {
        let (p, h) = match task {
            Task::Mi => (25, 5),
            Task::Erp => (5, 2),
        };
        FpeConfig {
            embed_dim: 20,
            frame_window: 25,
            frame_stride: 25,
            avg_window: p,
            avg_shift: h,
            token_dim: 40,
            mlp_hidden: 40,
            patch_mode: PatchMode::Frame,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim_head: usize,
    pub dim_mlp: usize,
    pub n_classes: usize,
    /// Layer norm on the encoder output before the head.
    pub final_norm: bool,
}

impl TransformerConfig {
    pub fn preset(task: Task) -> Self {
        let (dim_head, dim_mlp) = match task {
            Task::Mi => (64, 40),
            Task::Erp => (10, 20),
        };
        TransformerConfig {
            depth: 6,
            heads: 8,
            dim_head,
            dim_mlp,
            n_classes: 2,
            final_norm: true,
        }
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.dim_head
    }
}

/// Complete model geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Template rows `M`.
    pub n_channels: usize,
    /// Template length `T'`.
    pub template_len: usize,
    pub fpe: FpeConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn preset(task: Task, n_channels: usize, template_len: usize) -> Self {
        ModelConfig {
            n_channels,
            template_len,
            fpe: FpeConfig::preset(task),
            transformer: TransformerConfig::preset(task),
        }
    }

    /// `G = ceil(T'/d) + 1`.
    pub fn n_embeddings(&self) -> usize {
        patch_count(self.template_len, self.fpe.frame_stride)
    }

    /// `K = floor((G - P)/h) + 1` per patch group.
    pub fn n_averaged(&self) -> usize {
        (self.n_embeddings() - self.fpe.avg_window) / self.fpe.avg_shift + 1
    }

    /// Independent patch sequences: 1 for frame patches, `M` for channel patches.
    pub fn n_groups(&self) -> usize {
        match self.fpe.patch_mode {
            PatchMode::Frame => 1,
            PatchMode::Channel => self.n_channels,
        }
    }

    pub fn patch_len(&self) -> usize {
        match self.fpe.patch_mode {
            PatchMode::Frame => self.n_channels * self.fpe.frame_window,
            PatchMode::Channel => self.fpe.frame_window,
        }
    }

    /// Token count including the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_groups() * self.n_averaged() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fpe;
        let t = &self.transformer;
        for (key, v) in [
            ("model.n_channels", self.n_channels),
            ("model.template_len", self.template_len),
            ("model.fpe.embed_dim", f.embed_dim),
            ("model.fpe.frame_window", f.frame_window),
            ("model.fpe.frame_stride", f.frame_stride),
            ("model.fpe.avg_window", f.avg_window),
            ("model.fpe.avg_shift", f.avg_shift),
            ("model.fpe.token_dim", f.token_dim),
            ("model.fpe.mlp_hidden", f.mlp_hidden),
            ("model.transformer.depth", t.depth),
            ("model.transformer.heads", t.heads),
            ("model.transformer.dim_head", t.dim_head),
            ("model.transformer.dim_mlp", t.dim_mlp),
            ("model.transformer.n_classes", t.n_classes),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let g = self.n_embeddings();
        if f.avg_window > g {
            return Err(Error::config(
                "model.fpe.avg_window",
                format!("averaging window {} exceeds {} embeddings", f.avg_window, g),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let mi = ModelConfig::preset(Task::Mi, 17, 1280);
        mi.validate().unwrap();
        assert_eq!(mi.n_embeddings(), 53);
        assert_eq!(mi.n_averaged(), 6);
        assert_eq!(mi.n_tokens(), 7);
        assert_eq!(mi.patch_len(), 425);

        let erp = ModelConfig::preset(Task::Erp, 28, 256);
        erp.validate().unwrap();
        assert_eq!(erp.n_embeddings(), 12);
        assert_eq!(erp.n_averaged(), 4);
    }

    #[test]
    fn window_longer_than_sequence() {
        let mut c = ModelConfig::preset(Task::Mi, 17, 256);
        assert!(c.validate().is_err());
        c.fpe.avg_window = 12;
        assert!(c.validate().is_ok());
    }
}
