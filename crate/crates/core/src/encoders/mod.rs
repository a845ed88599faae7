//! Tiny vision transformer with learnable mixture tokens, and a causal text
//! transformer pooled at the end-of-sequence position.

mod block;

pub use block::transformer_block;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{LlipError, Result};
use crate::model::{ParamStore, ParamVars};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::truncated_normal;

pub const INIT_STD: f64 = 0.02;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Number of learnable mixture tokens `K`.
    pub mixture_tokens: usize,
    /// Also return the patch-token outputs, giving `K + P` tokens.
    pub emit_patch_tokens: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            width: 64,
            depth: 4,
            heads: 4,
            mixture_tokens: 16,
            emit_patch_tokens: false,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(LlipError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.mixture_tokens == 0 {
            return Err(LlipError::Config("at least one mixture token is required".into()));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(LlipError::Config(format!(
                "vision width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Sequence length inside the transformer.
    pub fn seq_len(&self) -> usize {
        self.mixture_tokens + self.num_patches()
    }

    /// Tokens returned by [`encode_image`].
    pub fn out_tokens(&self) -> usize {
        if self.emit_patch_tokens {
            self.seq_len()
        } else {
            self.mixture_tokens
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 64,
            context_length: 16,
            width: 64,
            depth: 2,
            heads: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_length < 3 {
            return Err(LlipError::Config(format!(
                "context length {} leaves no room for BOS, a word and EOS",
                self.context_length
            )));
        }
        if self.vocab_size < 4 {
            return Err(LlipError::Config("vocabulary must hold the four special tokens".into()));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(LlipError::Config(format!(
                "text width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// `[N, T, D]` token outputs of the image encoder.
#[derive(Debug, Clone, Copy)]
pub struct MixtureTokens {
    pub values: Var,
}

/// `[N, D_t]` pooled caption features.
#[derive(Debug, Clone, Copy)]
pub struct TextFeature {
    pub values: Var,
}

fn weight<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(truncated_normal(rng, INIT_STD))).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn init_block<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut R) {
    let hidden = 4 * width;
    store.insert(format!("{prefix}.ln1.g"), Tensor::full(&[width], T::one()));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.attn.qkv.w"), weight(rng, &[width, 3 * width]));
    store.insert(format!("{prefix}.attn.qkv.b"), Tensor::zeros(&[3 * width]));
    store.insert(format!("{prefix}.attn.proj.w"), weight(rng, &[width, width]));
    store.insert(format!("{prefix}.attn.proj.b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::full(&[width], T::one()));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[width]));
    store.insert(format!("{prefix}.mlp.fc1.w"), weight(rng, &[width, hidden]));
    store.insert(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.mlp.fc2.w"), weight(rng, &[hidden, width]));
    store.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[width]));
}

pub(crate) fn init_vit<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &VitConfig, rng: &mut R) {
    let d = cfg.width;
    store.insert("vis.patch.w", weight(rng, &[cfg.patch_dim(), d]));
    store.insert("vis.patch.b", Tensor::zeros(&[d]));
    store.insert("vis.tokens", weight(rng, &[cfg.mixture_tokens, d]));
    store.insert("vis.pos", weight(rng, &[cfg.seq_len(), d]));
    for l in 0..cfg.depth {
        init_block(store, &format!("vis.blocks.{l}"), d, rng);
    }
    store.insert("vis.ln_final.g", Tensor::full(&[d], T::one()));
    store.insert("vis.ln_final.b", Tensor::zeros(&[d]));
}

pub(crate) fn init_text<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &TextConfig, rng: &mut R) {
    let d = cfg.width;
    store.insert("txt.embed", weight(rng, &[cfg.vocab_size, d]));
    store.insert("txt.pos", weight(rng, &[cfg.context_length, d]));
    for l in 0..cfg.depth {
        init_block(store, &format!("txt.blocks.{l}"), d, rng);
    }
    store.insert("txt.ln_final.g", Tensor::full(&[d], T::one()));
    store.insert("txt.ln_final.b", Tensor::zeros(&[d]));
}

/// Splits one `[3, H, W]` image into `(H/p)²` row-major patches of `3·p²`
/// values laid out channel, row, column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if image.shape() != [CHANNELS, s, s] {
        return Err(LlipError::Config(format!(
            "expected image of shape [3, {s}, {s}], got {:?}",
            image.shape()
        )));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(image.numel());
    patchify_into(image.data(), cfg, &mut out);
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

fn patchify_into<T: Scalar>(img: &[T], cfg: &VitConfig, out: &mut Vec<T>) {
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let g = s / p;
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..CHANNELS {
                for py in 0..p {
                    let row = c * s * s + (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
}

/// Patchifies a `[N, 3, H, W]` batch into `[N·P, 3·p²]`.
pub fn patchify_batch<T: Scalar>(images: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    let sh = images.shape();
    if sh.len() != 4 || sh[1..] != [CHANNELS, s, s] {
        return Err(LlipError::Config(format!(
            "expected images of shape [N, 3, {s}, {s}], got {:?}",
            sh
        )));
    }
    cfg.validate()?;
    let n = sh[0];
    let per = CHANNELS * s * s;
    let mut out = Vec::with_capacity(images.numel());
    for i in 0..n {
        patchify_into(&images.data()[i * per..(i + 1) * per], cfg, &mut out);
    }
    Tensor::new(&[n * cfg.num_patches(), cfg.patch_dim()], out)
}

/// Runs the vision transformer over `[N, 3, H, W]` images.
///
/// The K mixture tokens sit at positions `0..K`, followed by the P patches.
/// Returns `[N, K, D]`, or `[N, K+P, D]` with `emit_patch_tokens`.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    images: &Tensor<T>,
    cfg: &VitConfig,
) -> Result<MixtureTokens> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(LlipError::Input("empty image batch".into()));
    }
    let (d, k, np) = (cfg.width, cfg.mixture_tokens, cfg.num_patches());
    let patches = tape.constant(patchify_batch(images, cfg)?)?;
    let x = tape.linear(patches, p.get("vis.patch.w")?, p.get("vis.patch.b")?)?;
    let x = tape.reshape(x, &[n, np, d])?;
    let tokens = tape.repeat_axis(p.get("vis.tokens")?, 0, n)?;
    let x = tape.concat(tokens, x, 1)?;
    let mut x = tape.add_broadcast(x, p.get("vis.pos")?)?;
    for l in 0..cfg.depth {
        x = transformer_block(tape, p, &format!("vis.blocks.{l}"), x, cfg.heads, false)?;
    }
    let x = if cfg.emit_patch_tokens {
        x
    } else {
        tape.slice_axis(x, 1, 0, k)?
    };
    let x = tape.layer_norm(x, p.get("vis.ln_final.g")?, p.get("vis.ln_final.b")?)?;
    Ok(MixtureTokens { values: x })
}

/// Validates token sequences and pads them to the context length.
///
/// Returns the flattened ids and each sequence's EOS position.
pub fn prepare_token_ids(seqs: &[Vec<usize>], cfg: &TextConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let l = cfg.context_length;
    let mut flat = Vec::with_capacity(seqs.len() * l);
    let mut eos = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if s.len() > l {
            return Err(LlipError::Input(format!(
                "sequence {} has {} tokens, context length is {}",
                i,
                s.len(),
                l
            )));
        }
        if s.first() != Some(&BOS_ID) {
            return Err(LlipError::Input(format!("sequence {} does not start with BOS", i)));
        }
        let eos_positions: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == EOS_ID)
            .map(|(j, _)| j)
            .collect();
        if eos_positions.len() != 1 {
            return Err(LlipError::Input(format!(
                "sequence {} must contain exactly one EOS, found {}",
                i,
                eos_positions.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(LlipError::Input(format!(
                "token id {} outside vocabulary of {}",
                bad, cfg.vocab_size
            )));
        }
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat(PAD_ID).take(l - s.len()));
        eos.push(eos_positions[0]);
    }
    Ok((flat, eos))
}

/// Causal transformer over caption tokens; the feature is the final layer-norm
/// output at each sequence's EOS position.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    seqs: &[Vec<usize>],
    cfg: &TextConfig,
) -> Result<TextFeature> {
    if seqs.is_empty() {
        return Err(LlipError::Input("empty caption batch".into()));
    }
    let (ids, eos) = prepare_token_ids(seqs, cfg)?;
    let (n, l, d) = (seqs.len(), cfg.context_length, cfg.width);
    let x = tape.gather_rows(p.get("txt.embed")?, &ids)?;
    let x = tape.reshape(x, &[n, l, d])?;
    let mut x = tape.add_broadcast(x, p.get("txt.pos")?)?;
    for b in 0..cfg.depth {
        x = transformer_block(tape, p, &format!("txt.blocks.{b}"), x, cfg.heads, true)?;
    }
    let flat = tape.reshape(x, &[n * l, d])?;
    let rows: Vec<usize> = eos.iter().enumerate().map(|(i, e)| i * l + e).collect();
    let pooled = tape.gather_rows(flat, &rows)?;
    let g = tape.layer_norm(pooled, p.get("txt.ln_final.g")?, p.get("txt.ln_final.b")?)?;
    Ok(TextFeature { values: g })
}
