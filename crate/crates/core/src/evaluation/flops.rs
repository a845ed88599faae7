use crate::encoders::{TextConfig, VitConfig};
use crate::model::ModelConfig;

/// Analytic FLOP counts for one zero-shot prediction (one image against
/// `n_classes` class captions). One multiply-add counts as two FLOPs.
///
/// Caption features are computed once per class and shared by every image,
/// so `text` is reported separately and left out of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    pub backbone: u64,
    pub mixer: u64,
    pub text: u64,
    pub total: u64,
    /// `total` of the same configuration with a single pooled token.
    pub baseline_total: u64,
}

impl FlopReport {
    pub fn overhead_ratio(&self) -> f64 {
        self.total as f64 / self.baseline_total as f64
    }
}

/// Attention projections, MLP and both attention products of one block.
pub fn block_macs(tokens: usize, width: usize) -> u64 {
    let (t, d) = (tokens as u64, width as u64);
    12 * t * d * d + 2 * t * t * d
}

pub fn image_encoder_macs(vit: &VitConfig) -> u64 {
    let p = vit.num_patches() as u64;
    let embed = p * vit.patch_dim() as u64 * vit.width as u64;
    embed + vit.depth as u64 * block_macs(vit.seq_len(), vit.width)
}

pub fn text_encoder_macs(text: &TextConfig) -> u64 {
    text.depth as u64 * block_macs(text.context_length, text.width)
}

/// Per-image pooling and scoring cost against `n_classes` captions, including
/// the caption-side projections. A single token reduces to the value path.
pub fn mixer_macs(cfg: &ModelConfig, n_classes: usize) -> u64 {
    let d = cfg.vit.width as u64;
    let dt = cfg.text.width as u64;
    let c = n_classes as u64;
    let t = cfg.vit.out_tokens() as u64;
    let text_proj = c * dt * d;
    let score = c * d;
    if t == 1 {
        return 2 * d * d + text_proj + score;
    }
    let keys_values = 2 * t * d * d;
    let queries = c * dt * d;
    let per_pair = 2 * t * d + d * d;
    keys_values + queries + text_proj + c * per_pair + score
}

pub fn flops_estimate(cfg: &ModelConfig, n_classes: usize) -> FlopReport {
    let backbone = image_encoder_macs(&cfg.vit);
    let mixer = mixer_macs(cfg, n_classes);
    let text = n_classes as u64 * text_encoder_macs(&cfg.text);
    let mut base = cfg.clone();
    base.vit.mixture_tokens = 1;
    base.vit.emit_patch_tokens = false;
    let baseline = image_encoder_macs(&base.vit) + mixer_macs(&base, n_classes);
    FlopReport {
        backbone: 2 * backbone,
        mixer: 2 * mixer,
        text: 2 * text,
        total: 2 * (backbone + mixer),
        baseline_total: 2 * baseline,
    }
}
