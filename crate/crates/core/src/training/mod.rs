//! Masked-language-model pretraining, checkpoint surgery and classifier
//! fine-tuning.

pub mod adam;
pub mod backward;
pub mod finetune;
pub mod mlm;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;

pub use adam::{adamw_step, AdamConfig, AdamState};
pub use backward::{loss_and_grads, mlm_loss, LossAndGrads};
pub use finetune::{finetune_classifier, mcc, FinetuneConfig, FinetuneMode, MccCounts};
pub use mlm::{encode_corpus, encode_for_model, mlm_batch, MlmBatch};

/// Init standard deviation for weights.
pub const INIT_STD: f64 = 0.02;

/// Fraction of the base budget spent on continued training after surgery.
pub const GERM_T_FRACTION: f64 = 0.2;

/// Peak learning rate of a continuation run relative to the base run. A
/// full-size restart with fresh moments knocks the model off its optimum.
pub const CONTINUATION_LR_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.98),
            eps: 1e-6,
            mask_rate: 0.15,
            seed: 0,
            warmup_steps: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return bad("lr and eps must be positive, weight_decay non-negative");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate must lie in (0, 1)");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Settings for resuming after surgery: `fraction` of the base budget
    /// at a reduced peak rate.
    pub fn continuation(&self, fraction: f64) -> TrainConfig {
        let steps = germ_t_steps(self.steps, fraction);
        TrainConfig {
            steps,
            lr: self.lr * CONTINUATION_LR_FACTOR,
            warmup_steps: steps / 20,
            ..self.clone()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_linear(self.lr, self.warmup_steps, self.steps, step)
    }
}

/// Linear warmup to `lr`, then linear decay towards zero at `steps`.
pub fn warmup_linear(lr: f64, warmup: usize, steps: usize, step: usize) -> f64 {
    let warm = warmup.min(steps.saturating_sub(1));
    if step < warm {
        return lr * (step + 1) as f64 / warm as f64;
    }
    let rest = (steps - warm).max(1) as f64;
    lr * (steps.saturating_sub(step) as f64 / rest).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_trace: Vec<LossPoint>,
    /// Total optimizer steps applied to the model, including earlier runs.
    pub step: u64,
}

impl TrainOutcome {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.step = self.step;
        ckpt
    }

    /// Mean of the last `window` recorded losses.
    pub fn smoothed_final_loss(&self, window: usize) -> f64 {
        smoothed(&self.loss_trace[self.loss_trace.len().saturating_sub(window)..])
    }

    pub fn smoothed_initial_loss(&self, window: usize) -> f64 {
        smoothed(&self.loss_trace[..window.min(self.loss_trace.len())])
    }
}

fn smoothed(points: &[LossPoint]) -> f64 {
    points.iter().map(|p| p.loss).sum::<f64>() / points.len().max(1) as f64
}

pub fn loss_trace_csv(trace: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in trace {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    out
}

fn train_loop(mut model: Model, corpus: &[Vec<usize>], cfg: &TrainConfig, start_step: u64, rng: &mut Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = mlm_batch(corpus, cfg.batch_size, cfg.mask_rate, model.config.vocab_size, rng);
        match loss_and_grads(&model, &batch) {
            Ok(out) => {
                trace.push(LossPoint { step, loss: out.loss });
                adamw_step(&mut model.params, &out.grads, &mut state, &adam, cfg.lr_at(step));
            }
            // Nothing to learn from this draw.
            Err(Error::NoMaskedPositions) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
        step: start_step + cfg.steps as u64,
    })
}

/// Trains a freshly initialized model on tokenized sequences.
pub fn pretrain(cfg: &TrainConfig, corpus: &[Vec<usize>], model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    let root = Rng::new(cfg.seed);
    let model = Model::init(model_cfg.clone(), &mut root.fork(0), INIT_STD)?;
    train_loop(model, corpus, cfg, 0, &mut root.fork(1))
}

/// Resumes training from `model` with a fresh optimizer state.
pub fn continue_training(model: Model, start_step: u64, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let root = Rng::new(cfg.seed);
    train_loop(model, corpus, cfg, start_step, &mut root.fork(2))
}

/// Number of continued-training steps for a base budget and fraction.
pub fn germ_t_steps(base_steps: usize, fraction: f64) -> usize {
    ((base_steps as f64 * fraction).round() as usize).max(1)
}

/// Switches a softmax-trained checkpoint to Softmax₁ attention, leaving
/// every parameter untouched.
pub fn surgery(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let config = ckpt
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("checkpoint has no model config".into()))?;
    if config.variant == AttentionVariant::Softmax1 {
        return Err(Error::AlreadyOutlierFree);
    }
    let mut out = ckpt.clone();
    out.config.as_mut().expect("checked above").variant = AttentionVariant::Softmax1;
    out.meta
        .insert("surgery_step".into(), serde_json::Value::from(ckpt.step));
    Ok(out)
}

/// A deterministic masked batch for before/after loss comparisons.
pub fn fixed_eval_batch(corpus: &[Vec<usize>], n: usize, mask_rate: f64, vocab_size: usize, seed: u64) -> MlmBatch {
    let take = n.min(corpus.len());
    let mut rng = Rng::new(seed);
    let mut batch = MlmBatch {
        inputs: Vec::with_capacity(take),
        labels: Vec::with_capacity(take),
    };
    for seq in &corpus[..take] {
        let (input, labels) = mlm::mask_sequence(seq, mask_rate, vocab_size, &mut rng);
        batch.inputs.push(input);
        batch.labels.push(labels);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{gen_corpus, CorpusSpec};
    use crate::data::Vocab;

    fn tiny_setup() -> (Vec<Vec<usize>>, ModelConfig) {
        let spec = CorpusSpec {
            num_sequences: 200,
            min_len: 20,
            max_len: 40,
            ..CorpusSpec::default()
        };
        let corpus = gen_corpus(&spec).unwrap();
        let vocab = Vocab::train(&corpus, 32).unwrap();
        let mut cfg = ModelConfig::toy(AttentionVariant::Softmax1);
        cfg.model_dim = 16;
        cfg.ffn_dim = 32;
        cfg.heads = 2;
        cfg.vocab_size = 32;
        (encode_corpus(&vocab, &corpus, cfg.max_seq_len).unwrap(), cfg)
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 10,
            warmup_steps: 4,
            lr: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs[0], 0.25);
        assert_eq!(lrs[3], 1.0);
        assert!(lrs[4..].windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 0.0);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let (corpus, mcfg) = tiny_setup();
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 4,
            warmup_steps: 20,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = pretrain(&cfg, &corpus, &mcfg).unwrap();
        assert!(a.smoothed_final_loss(20) < a.smoothed_initial_loss(20));
        assert!(a.loss_trace[0].loss <= (mcfg.vocab_size as f64).ln() + 0.1);
        let b = pretrain(&cfg, &corpus, &mcfg).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes().unwrap(), b.to_checkpoint().to_bytes().unwrap());
        assert_eq!(a.to_checkpoint().step, 200);
    }

    #[test]
    fn surgery_flips_only_the_variant() {
        let (_, mut mcfg) = tiny_setup();
        mcfg.variant = AttentionVariant::VanillaSoftmax;
        let model = Model::init(mcfg, &mut Rng::new(1), INIT_STD).unwrap();
        let ckpt = model.to_checkpoint();
        let after = surgery(&ckpt).unwrap();
        assert_eq!(after.variant(), Some(AttentionVariant::Softmax1));
        assert_eq!(after.tensors, ckpt.tensors);
        assert!(matches!(surgery(&after), Err(Error::AlreadyOutlierFree)));
    }

    #[test]
    fn germ_t_budget() {
        assert_eq!(germ_t_steps(2000, GERM_T_FRACTION), 400);
        assert_eq!(germ_t_steps(1, 0.2), 1);
        let c = TrainConfig::default().continuation(GERM_T_FRACTION);
        assert_eq!(c.steps, 400);
        assert!(c.lr < TrainConfig::default().lr);
    }
}
