//! Named parameter storage and the full model (encoders + mixer + loss scalars).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contextualization::{
    contextualize, pool_variant, pooled_image_features, project_text, ContextualizedBatch, MixerConfig, PoolingVariant,
};
use crate::encoders::{self, TextConfig, VitConfig};
use crate::error::{LlipError, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::objectives::{self, LossParams};
use crate::rng;

/// Ordered collection of named tensors. Order is insertion order and is part of
/// the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.entries[i].1),
            None => None,
        }
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| LlipError::Config(format!("missing parameter `{}`", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a leaf; `trainable` controls gradient tracking.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let mut t = t.clone();
            t.requires_grad = trainable;
            vars.insert(name.clone(), tape.leaf(t)?);
        }
        Ok(ParamVars { vars })
    }
}

/// Parameter name → tape handle for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LlipError::Config(format!("missing parameter `{}`", name)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub mixer: MixerConfig,
    pub variant: PoolingVariant,
}

impl ModelConfig {
    /// Desk-scale defaults: 32px images, 8px patches, width 64, 4 blocks, 16
    /// mixture tokens; a 2-block causal text encoder with 16-token context.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vit: VitConfig::default(),
            text: TextConfig {
                vocab_size,
                ..TextConfig::default()
            },
            mixer: MixerConfig::default(),
            variant: PoolingVariant::Llip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate()?;
        self.mixer.validate(self.vit.width)?;
        if self.text.width != self.vit.width {
            return Err(LlipError::Config(format!(
                "text width {} must equal vision width {}",
                self.text.width, self.vit.width
            )));
        }
        if self.variant == PoolingVariant::SiglipCls && self.vit.mixture_tokens != 1 {
            return Err(LlipError::Config(format!(
                "siglip variant uses a single learned token, got K={}",
                self.vit.mixture_tokens
            )));
        }
        Ok(())
    }

    /// Expected shape of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let store = init_params::<f32>(self, 0).expect("validated config");
        store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

/// Initializes every parameter of the model from `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::LABEL_INIT);
    let mut store = ParamStore::new();
    encoders::init_vit(&mut store, &cfg.vit, &mut rng);
    encoders::init_text(&mut store, &cfg.text, &mut rng);
    crate::contextualization::init_mixer(
        &mut store,
        &cfg.mixer,
        cfg.vit.width,
        cfg.text.width,
        cfg.variant == PoolingVariant::LearnedAverage,
        &mut rng,
    );
    objectives::init_loss_params(&mut store);
    Ok(store)
}

/// A configured model with its `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Checks that `params` has exactly the shapes `cfg` expects.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_shapes();
        if expected.len() != params.len() {
            return Err(LlipError::Compatibility(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(LlipError::Compatibility(format!(
                        "`{}` has shape {:?}, config expects {:?}",
                        name,
                        t.shape(),
                        shape
                    )))
                }
                None => {
                    return Err(LlipError::Compatibility(format!("missing `{}`", name)))
                }
            }
        }
        Ok(Model { cfg, params })
    }
}

/// Encodes a batch of images and captions and pools per the configured
/// variant, for the full image × caption grid.
pub fn forward_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    seqs: &[Vec<usize>],
) -> Result<ContextualizedBatch> {
    let h = encoders::encode_image(tape, p, images, &cfg.vit)?;
    let g = encoders::encode_text(tape, p, seqs, &cfg.text)?;
    pool_variant(tape, p, h.values, g.values, &cfg.mixer, cfg.variant)
}

/// Training objective for aligned pairs: the contextualized pairwise loss for
/// Llip, the caption-independent sigmoid loss for every other variant.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    let lp = LossParams::from_vars(p)?;
    let h = encoders::encode_image(tape, p, images, &cfg.vit)?;
    let g = encoders::encode_text(tape, p, seqs, &cfg.text)?;
    if cfg.variant == PoolingVariant::Llip {
        let cb = contextualize(tape, p, h.values, g.values, &cfg.mixer)?;
        objectives::llip_loss(tape, &cb, &lp)
    } else {
        let img = pooled_image_features(tape, p, h.values, &cfg.mixer, cfg.variant)?;
        let txt = project_text(tape, p, g.values)?;
        objectives::siglip_loss(tape, img, txt, &lp)
    }
}
