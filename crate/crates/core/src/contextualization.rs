//! Text-conditioned mixing of visual mixture tokens.
//!
//! For image `i` and caption `j`, head `m` computes weights over the image's
//! tokens from the caption query and the token keys,
//! `Φ[m, k] = softmax_k(τ · (g_j W_Q^m) · (h_i^k W_K^m))`, mixes the token values
//! `h_i^k W_V^m` with them, concatenates heads and projects by `W_O`. The caption
//! side is `g_j W_T`. Both sides are L2-normalized before scoring.
//!
//! `τ` multiplies the logits: larger values sharpen the mixture.
//!
//! The ladder of baselines differs only in where the mixing weights come from:
//! a one-hot on the first token, a uniform average, a single learned query, or
//! the caption itself.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlipError, Result};
use crate::model::{ParamStore, ParamVars};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::truncated_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Cross-attention heads `M`.
    pub heads: usize,
    /// Logit multiplier `τ` inside the mixing softmax.
    pub tau: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig { heads: 4, tau: 5.0 }
    }
}

impl MixerConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(LlipError::Parameter(format!(
                "mixer temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.heads == 0 || width % self.heads != 0 {
            return Err(LlipError::Config(format!(
                "width {} is not divisible by {} mixer heads",
                width, self.heads
            )));
        }
        Ok(())
    }
}

/// How the visual tokens are pooled into the feature that gets scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PoolingVariant {
    /// One learned token, used as is.
    SiglipCls,
    /// K learned tokens, only the first one pooled; the rest act as registers.
    RegistersFirst,
    /// Equal-weight mean of the K tokens.
    UniformAverage,
    /// Cross-attention with one learned query shared by all samples.
    LearnedAverage,
    /// Cross-attention queried by each caption.
    Llip,
}

impl PoolingVariant {
    pub const ALL: [PoolingVariant; 5] = [
        PoolingVariant::SiglipCls,
        PoolingVariant::RegistersFirst,
        PoolingVariant::UniformAverage,
        PoolingVariant::LearnedAverage,
        PoolingVariant::Llip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingVariant::SiglipCls => "siglip",
            PoolingVariant::RegistersFirst => "registers",
            PoolingVariant::UniformAverage => "average",
            PoolingVariant::LearnedAverage => "learned-average",
            PoolingVariant::Llip => "llip",
        }
    }

    /// Whether the visual feature depends on the caption.
    pub fn is_text_conditioned(self) -> bool {
        self == PoolingVariant::Llip
    }
}

impl fmt::Display for PoolingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<PoolingVariant> for String {
    fn from(v: PoolingVariant) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for PoolingVariant {
    type Error = LlipError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for PoolingVariant {
    type Err = LlipError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        PoolingVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == norm)
            .or(match norm.as_str() {
                "siglip-cls" => Some(PoolingVariant::SiglipCls),
                "registers-first" => Some(PoolingVariant::RegistersFirst),
                "uniform-average" => Some(PoolingVariant::UniformAverage),
                _ => None,
            })
            .ok_or_else(|| LlipError::Config(format!("unknown pooling variant `{}`", s)))
    }
}

/// Normalized visual features for every (image, caption) pair plus the
/// normalized caption features.
#[derive(Debug, Clone, Copy)]
pub struct ContextualizedBatch {
    /// `[N_img, N_txt, D]`, unit rows.
    pub z: Var,
    /// `[N_txt, D]`, unit rows.
    pub z_text: Var,
}

pub(crate) fn init_mixer<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &MixerConfig,
    width: usize,
    text_width: usize,
    learned_query: bool,
    rng: &mut R,
) {
    let dh = width / cfg.heads;
    let mut w = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(truncated_normal(rng, crate::encoders::INIT_STD))).collect())
            .expect("mixer shape")
    };
    store.insert("mix.q.w", w(&[cfg.heads, text_width, dh]));
    store.insert("mix.k.w", w(&[cfg.heads, width, dh]));
    store.insert("mix.v.w", w(&[cfg.heads, width, dh]));
    store.insert("mix.o.w", w(&[width, width]));
    store.insert("mix.t.w", w(&[text_width, width]));
    if learned_query {
        store.insert("mix.query", w(&[text_width]));
    }
}

fn tokens_shape<T: Scalar>(tape: &Tape<T>, h: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(h) {
        &[n, t, d] => Ok((n, t, d)),
        s => Err(LlipError::Dimension(format!("mixture tokens must be [N, T, D], got {:?}", s))),
    }
}

/// Cross-attention of `queries [Nq, D_t]` over `h [Ni, T, D]`.
///
/// Returns the weights `[M·Ni, Nq, T]` and the unnormalized mixed features
/// `[Ni, Nq, D]`.
fn cross_attend<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    h: Var,
    queries: Var,
    cfg: &MixerConfig,
) -> Result<(Var, Var)> {
    let (ni, t, d) = tokens_shape(tape, h)?;
    let wq = p.get("mix.q.w")?;
    let (m, dt, dh) = match tape.shape(wq) {
        &[m, dt, dh] => (m, dt, dh),
        s => return Err(LlipError::Dimension(format!("W_Q must be [M, D_t, D/M], got {:?}", s))),
    };
    if m != cfg.heads || m * dh != d {
        return Err(LlipError::Dimension(format!(
            "W_Q {:?} does not match width {} with {} heads",
            tape.shape(wq),
            d,
            cfg.heads
        )));
    }
    let nq = match tape.shape(queries) {
        &[nq, qd] if qd == dt => nq,
        s => return Err(LlipError::Dimension(format!("queries must be [N, {}], got {:?}", dt, s))),
    };
    let flat = tape.reshape(h, &[ni * t, d])?;
    let keys = tape.bmm(flat, p.get("mix.k.w")?, false)?;
    let vals = tape.bmm(flat, p.get("mix.v.w")?, false)?;
    let q = tape.bmm(queries, wq, false)?;
    // [M, Ni·T, Nq] → [M·Ni, Nq, T]
    let logits = tape.bmm(keys, q, true)?;
    let logits = tape.reshape(logits, &[m * ni, t, nq])?;
    let logits = tape.permute(logits, &[0, 2, 1])?;
    let phi = tape.softmax(logits, T::lit(cfg.tau), false)?;
    let vals = tape.reshape(vals, &[m * ni, t, dh])?;
    let mixed = tape.bmm(phi, vals, false)?;
    let mixed = tape.reshape(mixed, &[m, ni, nq, dh])?;
    let mixed = tape.permute(mixed, &[1, 2, 0, 3])?;
    let mixed = tape.reshape(mixed, &[ni * nq, d])?;
    let z = tape.matmul(mixed, p.get("mix.o.w")?)?;
    let z = tape.reshape(z, &[ni, nq, d])?;
    Ok((phi, z))
}

/// Mixing weights for every (image, caption, head) as `[Ni, Nt, M, T]`; each
/// trailing vector sums to one.
pub fn mixing_weights<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    h: Var,
    g: Var,
    cfg: &MixerConfig,
) -> Result<Var> {
    let (ni, t, _) = tokens_shape(tape, h)?;
    let nt = tape.shape(g)[0];
    let (phi, _) = cross_attend(tape, p, h, g, cfg)?;
    let phi = tape.reshape(phi, &[cfg.heads, ni, nt, t])?;
    tape.permute(phi, &[1, 2, 0, 3])
}

/// Caption projection `g W_T`, normalized.
pub fn project_text<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, g: Var) -> Result<Var> {
    let zt = tape.matmul(g, p.get("mix.t.w")?)?;
    tape.l2_normalize(zt)
}

/// Caption-conditioned features for the full image × caption grid.
pub fn contextualize<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    h: Var,
    g: Var,
    cfg: &MixerConfig,
) -> Result<ContextualizedBatch> {
    let (_, z) = cross_attend(tape, p, h, g, cfg)?;
    let z = tape.l2_normalize(z)?;
    let z_text = project_text(tape, p, g)?;
    Ok(ContextualizedBatch { z, z_text })
}

/// Value path then output projection for one pooled token per image:
/// `[Ni, D] → concat_m(x W_V^m) W_O`.
fn project_pooled<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, pooled: Var) -> Result<Var> {
    let (ni, d) = match tape.shape(pooled) {
        &[ni, d] => (ni, d),
        s => return Err(LlipError::Dimension(format!("pooled tokens must be [N, D], got {:?}", s))),
    };
    let v = tape.bmm(pooled, p.get("mix.v.w")?, false)?;
    let v = tape.permute(v, &[1, 0, 2])?;
    let v = tape.reshape(v, &[ni, d])?;
    tape.matmul(v, p.get("mix.o.w")?)
}

/// Caption-independent image features `[Ni, D]` (unit rows) for the non-Llip
/// variants. Errors for [`PoolingVariant::Llip`].
pub fn pooled_image_features<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    h: Var,
    cfg: &MixerConfig,
    variant: PoolingVariant,
) -> Result<Var> {
    let (ni, _, d) = tokens_shape(tape, h)?;
    let z = match variant {
        PoolingVariant::SiglipCls | PoolingVariant::RegistersFirst => {
            let first = tape.slice_axis(h, 1, 0, 1)?;
            let first = tape.reshape(first, &[ni, d])?;
            project_pooled(tape, p, first)?
        }
        PoolingVariant::UniformAverage => {
            let mean = tape.mean_axis(h, 1)?;
            project_pooled(tape, p, mean)?
        }
        PoolingVariant::LearnedAverage => {
            if !p.has("mix.query") {
                return Err(LlipError::Config(
                    "learned-average pooling needs a learned query (`mix.query`)".into(),
                ));
            }
            let dt = tape.shape(p.get("mix.q.w")?)[1];
            let q = tape.reshape(p.get("mix.query")?, &[1, dt])?;
            let (_, z) = cross_attend(tape, p, h, q, cfg)?;
            tape.reshape(z, &[ni, d])?
        }
        PoolingVariant::Llip => {
            return Err(LlipError::Contract(
                "llip features depend on the caption; use contextualize".into(),
            ))
        }
    };
    tape.l2_normalize(z)
}

/// Pools tokens per `variant` into a batch scored the same way for every
/// variant: caption-independent features are replicated along the caption axis.
pub fn pool_variant<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    h: Var,
    g: Var,
    cfg: &MixerConfig,
    variant: PoolingVariant,
) -> Result<ContextualizedBatch> {
    if variant == PoolingVariant::Llip {
        return contextualize(tape, p, h, g, cfg);
    }
    let nt = match tape.shape(g) {
        &[nt, _] => nt,
        s => return Err(LlipError::Dimension(format!("text features must be [N, D_t], got {:?}", s))),
    };
    let zi = pooled_image_features(tape, p, h, cfg, variant)?;
    let z = tape.repeat_axis(zi, 1, nt)?;
    let z_text = project_text(tape, p, g)?;
    Ok(ContextualizedBatch { z, z_text })
}

/// Cosine score `ẑ_ij · ẑ'_j` for every pair, `[N_img, N_txt]`.
pub fn pairwise_scores<T: Scalar>(tape: &mut Tape<T>, cb: &ContextualizedBatch) -> Result<Var> {
    tape.pairwise_dot(cb.z, cb.z_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamStore;
    use crate::rng;

    const D: usize = 16;
    const M: usize = 4;

    fn store(learned: bool, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut r = rng::stream(seed, "mixer-test");
        init_mixer(&mut s, &MixerConfig { heads: M, tau: 5.0 }, D, D, learned, &mut r);
        // larger weights so the mixture is far from uniform
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        s
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "x");
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn cfg() -> MixerConfig {
        MixerConfig { heads: M, tau: 5.0 }
    }

    #[test]
    fn weights_normalize_per_head() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 5, D], 2)).unwrap();
        let g = tape.constant(random(&[4, D], 3)).unwrap();
        let phi = mixing_weights(&mut tape, &p, h, g, &cfg()).unwrap();
        assert_eq!(tape.shape(phi), &[3, 4, M, 5]);
        for row in tape.data(phi).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_mix_uniformly() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let one = random(&[1, 1, D], 5);
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(one.data());
        }
        let h = tape.constant(Tensor::new(&[1, 6, D], data).unwrap()).unwrap();
        let g = tape.constant(random(&[2, D], 3)).unwrap();
        let phi = mixing_weights(&mut tape, &p, h, g, &cfg()).unwrap();
        assert!(tape.data(phi).iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn single_token_has_unit_weight_and_caption_free_features() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 1, D], 2)).unwrap();
        let g = tape.constant(random(&[5, D], 3)).unwrap();
        let phi = mixing_weights(&mut tape, &p, h, g, &cfg()).unwrap();
        assert!(tape.data(phi).iter().all(|w| *w == 1.0));
        let cb = contextualize(&mut tape, &p, h, g, &cfg()).unwrap();
        let z = tape.value(cb.z);
        assert_eq!(z.shape(), &[3, 5, D]);
        for i in 0..3 {
            for j in 1..5 {
                assert_eq!(z.row(i * 5 + j), z.row(i * 5));
            }
        }
    }

    #[test]
    fn contextualized_shapes_and_norms() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 4, D], 2)).unwrap();
        let g = tape.constant(random(&[5, D], 3)).unwrap();
        let cb = contextualize(&mut tape, &p, h, g, &cfg()).unwrap();
        assert_eq!(tape.shape(cb.z), &[3, 5, D]);
        assert_eq!(tape.shape(cb.z_text), &[5, D]);
        for v in [cb.z, cb.z_text] {
            for row in tape.data(v).chunks(D) {
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        // captions actually change the feature when K > 1
        let z = tape.value(cb.z);
        assert_ne!(z.row(0), z.row(1));
    }

    #[test]
    fn constant_logits_match_uniform_average() {
        let mut s = store(false, 1);
        // zero queries force every logit to 0
        s.get_mut("mix.q.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 7, D], 2)).unwrap();
        let g = tape.constant(random(&[4, D], 3)).unwrap();
        let llip = contextualize(&mut tape, &p, h, g, &cfg()).unwrap();
        let avg = pool_variant(&mut tape, &p, h, g, &cfg(), PoolingVariant::UniformAverage).unwrap();
        let diff = tape.value(llip.z).max_abs_diff(tape.value(avg.z));
        assert!(diff <= 1e-6, "{}", diff);
        // and the directly computed uniform mixture agrees
        let hv = tape.value(h).clone();
        let wv = s.get("mix.v.w").unwrap();
        let wo = s.get("mix.o.w").unwrap();
        let dh = D / M;
        for i in 0..3 {
            let mut mean = vec![0.0; D];
            for k in 0..7 {
                for c in 0..D {
                    mean[c] += hv.data()[(i * 7 + k) * D + c] / 7.0;
                }
            }
            let mut cat = vec![0.0; D];
            for m in 0..M {
                for e in 0..dh {
                    cat[m * dh + e] = (0..D).map(|c| mean[c] * wv.data()[(m * D + c) * dh + e]).sum();
                }
            }
            let mut z: Vec<f64> = (0..D).map(|o| (0..D).map(|c| cat[c] * wo.data()[c * D + o]).sum()).collect();
            let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            z.iter_mut().for_each(|x| *x /= n);
            for j in 0..4 {
                let got = tape.value(llip.z).row(i * 4 + j);
                assert!(got.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn registers_equal_siglip_on_first_token() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let full = random(&[3, 8, D], 2);
        let h = tape.constant(full.clone()).unwrap();
        let first = tape.slice_axis(h, 1, 0, 1).unwrap();
        let g = tape.constant(random(&[2, D], 3)).unwrap();
        let reg = pool_variant(&mut tape, &p, h, g, &cfg(), PoolingVariant::RegistersFirst).unwrap();
        let cls = pool_variant(&mut tape, &p, first, g, &cfg(), PoolingVariant::SiglipCls).unwrap();
        assert_eq!(tape.value(reg.z), tape.value(cls.z));
    }

    #[test]
    fn registers_pool_only_the_first_token() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.leaf(random(&[2, 5, D], 2).with_grad()).unwrap();
        let g = tape.constant(random(&[2, D], 3)).unwrap();
        let cb = pool_variant(&mut tape, &p, h, g, &cfg(), PoolingVariant::RegistersFirst).unwrap();
        let w = tape.mul_const(cb.z, random(&[2, 2, D], 9).into_data()).unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gh = grads.get(h).unwrap();
        for i in 0..2 {
            for k in 0..5 {
                let slot = &gh[(i * 5 + k) * D..(i * 5 + k + 1) * D];
                let nonzero = slot.iter().any(|v| *v != 0.0);
                assert_eq!(nonzero, k == 0, "image {} token {}", i, k);
            }
        }
    }

    #[test]
    fn learned_average_ignores_captions() {
        let s = store(true, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 6, D], 2)).unwrap();
        let g1 = tape.constant(random(&[2, D], 3)).unwrap();
        let g2 = tape.constant(random(&[2, D], 4)).unwrap();
        let a = pool_variant(&mut tape, &p, h, g1, &cfg(), PoolingVariant::LearnedAverage).unwrap();
        let b = pool_variant(&mut tape, &p, h, g2, &cfg(), PoolingVariant::LearnedAverage).unwrap();
        assert_eq!(tape.value(a.z), tape.value(b.z));

        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[3, 6, D], 2)).unwrap();
        let g = tape.constant(random(&[2, D], 3)).unwrap();
        assert!(matches!(
            pool_variant(&mut tape, &p, h, g, &cfg(), PoolingVariant::LearnedAverage),
            Err(LlipError::Config(_))
        ));
    }

    #[test]
    fn scores_are_cosines() {
        let mut tape = Tape::<f64>::new();
        let z = tape
            .constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let zt = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let s = pairwise_scores(&mut tape, &ContextualizedBatch { z, z_text: zt }).unwrap();
        assert_eq!(tape.data(s), &[1.0, 0.0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PoolingVariant::ALL {
            assert_eq!(v.name().parse::<PoolingVariant>().unwrap(), v);
        }
        assert!("mean".parse::<PoolingVariant>().is_err());
    }

    #[test]
    fn non_positive_tau_is_a_parameter_error() {
        let s = store(false, 1);
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false).unwrap();
        let h = tape.constant(random(&[1, 3, D], 2)).unwrap();
        let g = tape.constant(random(&[1, D], 3)).unwrap();
        let bad = MixerConfig { heads: M, tau: 0.0 };
        assert!(matches!(
            mixing_weights(&mut tape, &p, h, g, &bad),
            Err(LlipError::Parameter(_))
        ));
    }
}
