//! AdamW with warmup + cosine schedule, the training loop over any pooling
//! variant, and checkpoint persistence.

pub mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sampler, Vocabulary};
use crate::error::{LlipError, Result};
use crate::model::{batch_loss, init_params, Model, ModelConfig, ParamStore};
use crate::numerics::Tape;
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{adamw_step, adamw_update, decays, lr_schedule, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Periodic evaluation interval in steps; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 64,
            lr_peak: 3e-4,
            warmup_steps: 200,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size < 2 {
            bad.push(format!(
                "batch_size = {}: at least 2 pairs are needed so every batch has negatives",
                self.batch_size
            ));
        }
        if self.steps == 0 {
            bad.push("steps must be at least 1".to_string());
        }
        if self.warmup_steps > self.steps {
            bad.push(format!("warmup_steps = {} exceeds steps = {}", self.warmup_steps, self.steps));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            bad.push(format!("lr_peak = {} must be finite and non-negative", self.lr_peak));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("weight_decay = {} must be finite and non-negative", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{} = {} must lie in [0, 1)", name, b));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bad.push(format!("eps = {} must be positive", self.eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(LlipError::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step losses plus the periodic evaluation metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
    pub evals: Vec<(usize, String, f64)>,
}

impl MetricsLog {
    /// `step,loss,lr` lines.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9e},{:.9e}", r.step, r.loss, r.lr);
        }
        s
    }

    /// `step,metric,value` lines.
    pub fn eval_csv(&self) -> String {
        let mut s = String::from("step,metric,value\n");
        for (step, k, v) in &self.evals {
            let _ = writeln!(s, "{},{},{:.9e}", step, k, v);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Periodic evaluation callback: `(completed step, model snapshot)` to named metrics.
pub type EvalHook<'h> = dyn FnMut(usize, &Model) -> Result<Vec<(String, f64)>> + 'h;

/// Single-writer training state over a dataset.
pub struct Trainer<'a> {
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: &'a Dataset,
    tokens: Vec<Vec<Vec<usize>>>,
    sampler: Sampler,
    step: usize,
    params: ParamStore<f32>,
    moments: Moments,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: &'a Dataset, vocab: &Vocabulary) -> Result<Self> {
        let params = init_params(&model_cfg, cfg.seed)?;
        let moments = Moments::zeros_like(&params);
        Self::assemble(model_cfg, cfg, data, vocab, 0, params, moments)
    }

    /// Continues from a checkpoint with its recorded configuration.
    pub fn resume(ck: Checkpoint, data: &'a Dataset, vocab: &Vocabulary) -> Result<Self> {
        Self::assemble(ck.model, ck.train, data, vocab, ck.step, ck.params, ck.moments)
    }

    fn assemble(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        data: &'a Dataset,
        vocab: &Vocabulary,
        step: usize,
        params: ParamStore<f32>,
        moments: Moments,
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        if vocab.len() > model_cfg.text.vocab_size {
            return Err(LlipError::Config(format!(
                "vocabulary has {} words, the text encoder holds {}",
                vocab.len(),
                model_cfg.text.vocab_size
            )));
        }
        if data.image_size != model_cfg.vit.image_size {
            return Err(LlipError::Config(format!(
                "dataset images are {}px, the model expects {}px",
                data.image_size, model_cfg.vit.image_size
            )));
        }
        let ctx = model_cfg.text.context_length;
        let tokens = data
            .captions
            .iter()
            .map(|caps| caps.iter().map(|c| vocab.tokenize(c, ctx)).collect())
            .collect();
        let sampler = Sampler::new(data.caption_counts(), cfg.batch_size, rng::derive_seed(cfg.seed, rng::LABEL_SAMPLING))?;
        Ok(Trainer {
            model_cfg,
            cfg,
            data,
            tokens,
            sampler,
            step,
            params,
            moments,
        })
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> Model {
        Model {
            cfg: self.model_cfg.clone(),
            params: self.params.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            train: self.cfg.clone(),
            step: self.step,
            params: self.params.clone(),
            moments: self.moments.clone(),
        }
    }

    /// Images and token sequences of the batch for training step `step`.
    pub fn batch(&mut self, step: usize) -> (crate::numerics::Tensor<f32>, Vec<Vec<usize>>) {
        let draws = self.sampler.batch_at(step);
        let scenes: Vec<usize> = draws.iter().map(|d| d.scene).collect();
        let seqs = draws.iter().map(|d| self.tokens[d.scene][d.caption].clone()).collect();
        (self.data.images(&scenes), seqs)
    }

    /// Loss and per-parameter gradients (store order) at the current parameters.
    pub fn loss_and_grads(&mut self, step: usize) -> Result<(f64, Vec<Vec<f32>>)> {
        let (images, seqs) = self.batch(step);
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true)?;
        let loss = batch_loss(&mut tape, &p, &self.model_cfg, &images, &seqs)?;
        let value = f64::from(tape.value(loss).item());
        if !value.is_finite() {
            return Err(LlipError::Numeric(format!("loss = {}", value)));
        }
        let grads = tape.backward(loss)?;
        let mut out = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            out.push(grads.get_or_zeros(p.get(name)?, t.numel()));
        }
        Ok((value, out))
    }

    /// One optimizer step. On failure the state is left at the last good step.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let s = self.step;
        let diverged = |e: LlipError| match e {
            LlipError::Numeric(reason) => LlipError::Divergence { step: s + 1, reason },
            other => other,
        };
        let (loss, grads) = self.loss_and_grads(s).map_err(diverged)?;
        let lr = lr_schedule(s + 1, &self.cfg);
        let mut params = self.params.clone();
        let mut moments = self.moments.clone();
        adamw_step(&mut params, &grads, &mut moments, s + 1, lr, &self.cfg).map_err(diverged)?;
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(LlipError::Divergence {
                step: s + 1,
                reason: format!("parameter `{}` became non-finite", name),
            });
        }
        self.params = params;
        self.moments = moments;
        self.step += 1;
        Ok(LogRow { step: self.step, loss, lr })
    }

    /// Trains until `until` steps are complete, running `eval` every
    /// `cfg.eval_every` steps and at the end.
    pub fn run(&mut self, until: usize, mut eval: Option<&mut EvalHook>) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        let until = until.min(self.cfg.steps);
        while self.step < until {
            let row = self.train_step()?;
            if row.step % 100 == 0 || row.step == 1 {
                log::info!("step {:>5}  loss {:.5}  lr {:.3e}", row.step, row.loss, row.lr);
            }
            log.rows.push(row);
            let due = self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0;
            if let Some(hook) = eval.as_mut() {
                if due || self.step == until {
                    let model = self.model();
                    for (k, v) in hook(self.step, &model)? {
                        log::info!("step {:>5}  {} = {:.4}", self.step, k, v);
                        log.evals.push((self.step, k, v));
                    }
                }
            }
        }
        Ok(log)
    }
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
}

/// Trains `model_cfg` from scratch for `cfg.steps` steps. On divergence the
/// last good state is written to `fallback` (when given) and the divergence
/// error is returned.
pub fn train_run(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    eval: Option<&mut EvalHook>,
    fallback: Option<&Path>,
) -> Result<TrainOutcome> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(model_cfg, cfg, data, vocab)?;
    match trainer.run(steps, eval) {
        Ok(log) => Ok(TrainOutcome {
            checkpoint: trainer.checkpoint(),
            log,
        }),
        Err(e @ LlipError::Divergence { .. }) => {
            log::error!("{}; last good step {}", e, trainer.step_count());
            if let Some(path) = fallback {
                save_checkpoint(&trainer.checkpoint(), path)?;
                log::error!("last good checkpoint written to {}", path.display());
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}
