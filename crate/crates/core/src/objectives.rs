//! Sigmoid pairwise objective over contextualized pairs, its caption-independent
//! special case, and a softmax (InfoNCE) baseline.

use crate::contextualization::{pairwise_scores, ContextualizedBatch};
use crate::error::{LlipError, Result};
use crate::model::{ParamStore, ParamVars};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Initial logit scale `a`.
pub const INIT_SCALE: f64 = 10.0;
/// Initial bias: a zero-similarity pair starts at logit −10.
pub const INIT_BIAS: f64 = -10.0;

pub(crate) fn init_loss_params<T: Scalar>(store: &mut ParamStore<T>) {
    store.insert("loss.log_a", Tensor::full(&[1], T::lit(INIT_SCALE.ln())));
    store.insert("loss.b", Tensor::full(&[1], T::lit(INIT_BIAS)));
}

/// Learnable scale (stored as `log a`) and bias of the pairwise logits
/// `a · sim + b`.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub log_a: Var,
    pub b: Var,
}

impl LossParams {
    pub fn from_vars(p: &ParamVars) -> Result<Self> {
        Ok(LossParams {
            log_a: p.get("loss.log_a")?,
            b: p.get("loss.b")?,
        })
    }

    pub fn constant<T: Scalar>(tape: &mut Tape<T>, a: f64, b: f64) -> Result<Self> {
        Ok(LossParams {
            log_a: tape.constant(Tensor::full(&[1], T::lit(a.ln())))?,
            b: tape.constant(Tensor::full(&[1], T::lit(b)))?,
        })
    }
}

fn pair_signs<T: Scalar>(n: usize) -> Vec<T> {
    (0..n * n)
        .map(|k| if k / n == k % n { T::one() } else { -T::one() })
        .collect()
}

/// Negated sigmoid pairwise log-likelihood over an `N × N` grid whose diagonal
/// holds the positive pairs:
/// `−(1/N) [Σ_i log σ(ℓ_ii) + Σ_{i≠j} log σ(−ℓ_ij)]`, `ℓ_ij = a·ẑ_ij·ẑ'_j + b`.
pub fn llip_loss<T: Scalar>(tape: &mut Tape<T>, cb: &ContextualizedBatch, lp: &LossParams) -> Result<Var> {
    let (ni, nt) = match tape.shape(cb.z) {
        &[ni, nt, _] => (ni, nt),
        s => return Err(LlipError::Dimension(format!("contextualized features must be [N, N, D], got {:?}", s))),
    };
    if ni != nt || ni == 0 {
        return Err(LlipError::Contract(format!(
            "pairwise loss needs N images aligned with N captions, got {} × {}",
            ni, nt
        )));
    }
    let scores = pairwise_scores(tape, cb)?;
    let a = tape.exp(lp.log_a)?;
    let logits = tape.scale_by(scores, a)?;
    let logits = tape.add_scalar(logits, lp.b)?;
    let signed = tape.mul_const(logits, pair_signs(ni))?;
    let terms = tape.log_sigmoid(signed)?;
    let total = tape.sum(terms)?;
    tape.scale(total, -T::one() / T::from_usize(ni).unwrap())
}

/// [`llip_loss`] for caption-independent image features `[N, D]`.
pub fn siglip_loss<T: Scalar>(tape: &mut Tape<T>, img: Var, txt: Var, lp: &LossParams) -> Result<Var> {
    let nt = match (tape.shape(img), tape.shape(txt)) {
        (&[_, di], &[nt, dt]) if di == dt => nt,
        (a, b) => return Err(LlipError::Dimension(format!("features {:?} vs {:?}", a, b))),
    };
    let z = tape.repeat_axis(img, 1, nt)?;
    llip_loss(tape, &ContextualizedBatch { z, z_text: txt }, lp)
}

/// Symmetric softmax cross-entropy over `exp(log_scale) · cos` logits.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, img: Var, txt: Var, log_scale: Var) -> Result<Var> {
    let n = match (tape.shape(img), tape.shape(txt)) {
        (&[ni, di], &[nt, dt]) if di == dt && ni == nt => ni,
        (a, b) => return Err(LlipError::Dimension(format!("features {:?} vs {:?}", a, b))),
    };
    if n < 2 {
        return Err(LlipError::Contract("softmax contrastive loss needs at least two pairs".into()));
    }
    let sims = tape.bmm(img, txt, true)?;
    let sims = tape.reshape(sims, &[n, n])?;
    let scale = tape.exp(log_scale)?;
    let logits = tape.scale_by(sims, scale)?;
    let diag: Vec<T> = (0..n * n)
        .map(|k| if k / n == k % n { T::one() } else { T::zero() })
        .collect();
    let i2t = tape.log_softmax(logits)?;
    let i2t = tape.mul_const(i2t, diag.clone())?;
    let t2i_logits = tape.permute(logits, &[1, 0])?;
    let t2i = tape.log_softmax(t2i_logits)?;
    let t2i = tape.mul_const(t2i, diag)?;
    let both = tape.add(i2t, t2i)?;
    let total = tape.sum(both)?;
    tape.scale(total, -T::one() / T::from_usize(2 * n).unwrap())
}
