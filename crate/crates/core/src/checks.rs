//! Double-precision finite-difference checks of each model component and of
//! the full training objective, on a tiny randomly initialized model.

use rand::Rng;

use crate::contextualization::{contextualize, pairwise_scores, PoolingVariant};
use crate::encoders::{encode_image, encode_text};
use crate::error::Result;
use crate::model::{batch_loss, init_params, ModelConfig, ParamStore, ParamVars};
use crate::numerics::{finite_difference_check, GradCheckReport, Tape, Tensor, Var};
use crate::objectives::{llip_loss, LossParams};
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Largest accepted `|analytic − numeric| / max(1, |analytic|)`.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Matrix weights are scaled up so attention and mixing are far from uniform.
pub const WEIGHT_GAIN: f64 = 10.0;

const VOCAB: usize = 12;
const CONTEXT: usize = 6;

/// Width 16, two mixture tokens, one block per tower, 8×8 images of 4×4 patches.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::desk(VOCAB);
    c.vit.image_size = 8;
    c.vit.patch_size = 4;
    c.vit.width = 16;
    c.vit.depth = 1;
    c.vit.heads = 2;
    c.vit.mixture_tokens = 2;
    c.text.width = 16;
    c.text.depth = 1;
    c.text.heads = 2;
    c.text.context_length = CONTEXT;
    c.mixer.heads = 2;
    c
}

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub component: String,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= FD_TOLERANCE
    }
}

fn random_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor<f64> {
    let mut r = rng::stream(seed, label);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn token_batch(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, "captions");
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=CONTEXT - 2);
            let mut s = vec![crate::data::vocab::BOS_ID];
            s.extend((0..len).map(|_| r.random_range(4..VOCAB)));
            s.push(crate::data::vocab::EOS_ID);
            s
        })
        .collect()
}

fn gained(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = init_params::<f64>(cfg, seed)?;
    for (_, t) in store.iter_mut() {
        if t.ndim() >= 2 {
            t.data_mut().iter_mut().for_each(|x| *x *= WEIGHT_GAIN);
        }
    }
    Ok(store)
}

/// Checks the gradient of `loss` with respect to every tensor in `store`.
pub fn check_store<F>(store: &ParamStore<f64>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.register(&mut tape, true)?;
    let l = loss(&mut tape, &p)?;
    let grads = tape.backward(l)?;
    let mut analytic = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        analytic.push(grads.get_or_zeros(p.get(name)?, t.numel()));
    }
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut s = ParamStore::new();
        for (n, t) in names.iter().zip(ps) {
            s.insert(n.clone(), t.clone());
        }
        let mut tape = Tape::new();
        let p = s.register(&mut tape, false)?;
        let l = loss(&mut tape, &p)?;
        Ok(tape.value(l).item())
    };
    finite_difference_check(eval, &params, &analytic, FD_STEP)
}

/// Random projection of `x` to a scalar, so every output coordinate matters.
fn probe(tape: &mut Tape<f64>, x: Var, seed: u64, label: &str) -> Result<Var> {
    let w = random_tensor(tape.shape(x), seed, label);
    let y = tape.mul_const(x, w.into_data())?;
    tape.sum(y)
}

fn select(store: &ParamStore<f64>, prefixes: &[&str]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in store.iter() {
        if prefixes.iter().any(|p| n.starts_with(p)) {
            s.insert(n, t.clone());
        }
    }
    s
}

/// Per-component reports followed by the full objective.
pub fn gradient_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let cfg = tiny_config();
    let full = gained(&cfg, seed)?;
    let images = random_tensor(&[2, 3, 8, 8], seed, "images");
    let seqs = token_batch(2, seed);
    let mut out = Vec::new();

    let vis = select(&full, &["vis."]);
    let r = check_store(&vis, |tape, p| {
        let h = encode_image(tape, p, &images, &cfg.vit)?;
        probe(tape, h.values, seed, "probe-vis")
    })?;
    out.push(ComponentCheck { component: "image encoder".into(), report: r });

    let txt = select(&full, &["txt."]);
    let r = check_store(&txt, |tape, p| {
        let g = encode_text(tape, p, &seqs, &cfg.text)?;
        probe(tape, g.values, seed, "probe-txt")
    })?;
    out.push(ComponentCheck { component: "text encoder".into(), report: r });

    let mut mix = select(&full, &["mix."]);
    mix.insert("in.h", random_tensor(&[2, 2, 16], seed, "h"));
    mix.insert("in.g", random_tensor(&[2, 16], seed, "g"));
    let r = check_store(&mix, |tape, p| {
        let cb = contextualize(tape, p, p.get("in.h")?, p.get("in.g")?, &cfg.mixer)?;
        let s = pairwise_scores(tape, &cb)?;
        probe(tape, s, seed, "probe-mix")
    })?;
    out.push(ComponentCheck { component: "contextualization".into(), report: r });

    let mut obj = select(&full, &["loss."]);
    obj.insert("in.z", random_tensor(&[2, 2, 16], seed, "z"));
    obj.insert("in.t", random_tensor(&[2, 16], seed, "t"));
    let r = check_store(&obj, |tape, p| {
        let z = tape.l2_normalize(p.get("in.z")?)?;
        let z_text = tape.l2_normalize(p.get("in.t")?)?;
        let cb = crate::contextualization::ContextualizedBatch { z, z_text };
        llip_loss(tape, &cb, &LossParams::from_vars(p)?)
    })?;
    out.push(ComponentCheck { component: "objective".into(), report: r });

    let mut llip = cfg.clone();
    llip.variant = PoolingVariant::Llip;
    let r = check_store(&full, |tape, p| batch_loss(tape, p, &llip, &images, &seqs))?;
    out.push(ComponentCheck { component: "full pipeline".into(), report: r });
    Ok(out)
}
