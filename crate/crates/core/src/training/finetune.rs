//! Sequence classification on top of a pretrained encoder: mean-pooled final
//! hidden state into a two-way linear head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::{collect_mut, AdamConfig, AdamState};
use super::backward::backward_hidden;
use super::mlm::encode_for_model;
use super::warmup_linear;
use crate::attention::softmax;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::lora::{apply_adapters, loftq_init, AdapterSet, LoraAdapter};
use crate::model::{Model, ModelParams};
use crate::quant::{fake_quant_weight, Granularity};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MccCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MccCounts {
    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, _) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &MccCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Head stays at its random init; nothing is trained.
    Frozen,
    Full,
    Lora,
    /// LoRA over a 4-bit fake-quantized, frozen base.
    Qlora,
    /// Like `Qlora`, but adapters start from the quantization residual.
    Loftq,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => Self::Frozen,
            "full" => Self::Full,
            "lora" => Self::Lora,
            "qlora" => Self::Qlora,
            "loftq" => Self::Loftq,
            _ => return Err(Error::InvalidConfig(format!("unknown fine-tuning mode `{s}`"))),
        })
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Full => "full",
            Self::Lora => "lora",
            Self::Qlora => "qlora",
            Self::Loftq => "loftq",
        })
    }
}

impl FinetuneMode {
    fn uses_adapters(self) -> bool {
        matches!(self, Self::Lora | Self::Qlora | Self::Loftq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Held-out share of the dataset used for the MCC report.
    pub eval_fraction: f64,
    pub base_bits: u32,
    pub loftq_iters: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            steps: 200,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            rank: 8,
            alpha: 16.0,
            seed: 0,
            eval_fraction: 0.2,
            base_bits: 4,
            loftq_iters: 5,
        }
    }
}

impl FinetuneConfig {
    /// Large adapter setting: rank 128, alpha 256.
    pub fn lora_wide() -> Self {
        Self { mode: FinetuneMode::Lora, rank: 128, alpha: 256.0, ..Self::default() }
    }

    /// Small adapter setting: rank 8, alpha 16.
    pub fn lora_narrow() -> Self {
        Self { mode: FinetuneMode::Lora, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.mode != FinetuneMode::Frozen && (self.steps == 0 || self.batch_size == 0) {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.mode.uses_adapters() && (self.rank == 0 || !(self.alpha > 0.0)) {
            return bad("adapter rank and alpha must be positive");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `logits = w · mean_j h[:, j] + b` with two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierHead {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            w: rng.normal_tensor(&[2, dim], super::INIT_STD),
            b: Tensor::zeros(&[2]),
        }
    }

    pub fn logits(&self, pooled: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.b.data()[c] + self.w.row(c).iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("head.w".to_string(), self.w.clone()), ("head.b".to_string(), self.b.clone())])
    }
}

fn mean_pool(h: &Tensor) -> Vec<f64> {
    let n = h.cols() as f64;
    h.row_sums().into_iter().map(|s| s / n).collect()
}

pub fn predict(model: &Model, head: &ClassifierHead, tokens: &[usize]) -> Result<u8> {
    let cache = model.encode(tokens)?;
    let z = head.logits(&mean_pool(&cache.hidden));
    Ok(u8::from(z[1] > z[0]))
}

pub fn evaluate(model: &Model, head: &ClassifierHead, rows: &[(u8, Vec<usize>)]) -> Result<MccCounts> {
    let mut pred = Vec::with_capacity(rows.len());
    for (_, t) in rows {
        pred.push(predict(model, head, t)?);
    }
    let truth: Vec<u8> = rows.iter().map(|r| r.0).collect();
    Ok(MccCounts::from_predictions(&pred, &truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: FinetuneMode,
    pub mcc: f64,
    pub counts: MccCounts,
    pub n_train: usize,
    pub n_eval: usize,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: ClassifierHead,
    pub adapters: Option<AdapterSet>,
    /// Encoder used for evaluation, with any adapters merged.
    pub model: Model,
    pub report: EvalReport,
    pub loss_trace: Vec<f64>,
}

/// Every projection an adapter may attach to, with `(out, in)` shapes.
pub fn adapter_targets(model: &Model) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    model.params.for_each(|name, t| {
        let leaf = name.rsplit('.').next().unwrap_or("");
        if matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2") {
            out.push((name.to_string(), t.rows(), t.cols()));
        }
    });
    out
}

/// `[CLS] seq [SEP]` ids for each labelled row.
pub fn encode_task(vocab: &Vocab, rows: &[(u8, String)], max_len: usize) -> Result<Vec<(u8, Vec<usize>)>> {
    rows.iter()
        .map(|(l, s)| Ok((*l, encode_for_model(vocab, s, max_len)?)))
        .collect()
}

/// Shuffled train/eval split; both must see both classes.
pub fn split(rows: &[(u8, Vec<usize>)], eval_fraction: f64, rng: &mut Rng) -> Result<(Vec<(u8, Vec<usize>)>, Vec<(u8, Vec<usize>)>)> {
    if rows.iter().all(|r| r.0 == rows[0].0) || rows.len() < 4 {
        return Err(Error::SingleClassDataset);
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    rng.shuffle(&mut idx);
    let n_eval = ((rows.len() as f64 * eval_fraction).round() as usize).clamp(1, rows.len() - 1);
    let eval: Vec<_> = idx[..n_eval].iter().map(|&i| rows[i].clone()).collect();
    let train: Vec<_> = idx[n_eval..].iter().map(|&i| rows[i].clone()).collect();
    if train.iter().all(|r| r.0 == train[0].0) {
        return Err(Error::SingleClassDataset);
    }
    Ok((train, eval))
}

/// Base weights and starting adapters for an adapter mode.
fn prepare_adapters(model: &Model, cfg: &FinetuneConfig, rng: &mut Rng) -> Result<(Model, AdapterSet)> {
    let mut named = model.params.to_named();
    let mut set = AdapterSet::default();
    for (name, out, inp) in adapter_targets(model) {
        let w = named.get_mut(&name).expect("target listed from params");
        let adapter = match cfg.mode {
            FinetuneMode::Loftq => {
                let res = loftq_init(w, cfg.base_bits, cfg.rank, cfg.loftq_iters)?;
                *w = res.quantized;
                // Keep ΔW while switching to the requested alpha.
                let mut ad = res.adapter;
                ad.a = ad.a.scale(ad.scaling() * ad.rank as f64 / cfg.alpha);
                ad.alpha = cfg.alpha;
                ad.target = name.clone();
                ad
            }
            _ => {
                if cfg.mode == FinetuneMode::Qlora {
                    *w = fake_quant_weight(w, cfg.base_bits, Granularity::PerChannel)?;
                }
                LoraAdapter::init(name.clone(), out, inp, cfg.rank, cfg.alpha, rng, 1.0 / (inp as f64).sqrt())
            }
        };
        set.insert(adapter);
    }
    let base = Model::new(model.config.clone(), ModelParams::from_named(&model.config, &named)?)?;
    Ok((base, set))
}

/// Trains and evaluates a classifier according to `cfg.mode`.
pub fn finetune_classifier(model: &Model, rows: &[(u8, Vec<usize>)], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let (train, eval) = split(rows, cfg.eval_fraction, &mut root.fork(0))?;
    let mut head = ClassifierHead::init(model.config.model_dim, &mut root.fork(1));
    let mut batch_rng = root.fork(2);

    let (mut base, mut adapters) = if cfg.mode.uses_adapters() {
        let (b, s) = prepare_adapters(model, cfg, &mut root.fork(3))?;
        (b, Some(s))
    } else {
        (model.clone(), None)
    };

    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut trace = Vec::new();
    let steps = if cfg.mode == FinetuneMode::Frozen { 0 } else { cfg.steps };
    for step in 0..steps {
        let effective = match &adapters {
            Some(set) => apply_adapters(&base, set)?,
            None => base.clone(),
        };
        let batch: Vec<&(u8, Vec<usize>)> = (0..cfg.batch_size).map(|_| &train[batch_rng.below(train.len())]).collect();
        let norm = 1.0 / batch.len() as f64;
        let mut grads = effective.params.zeros_like();
        let mut gw = Tensor::zeros(head.w.shape());
        let mut gb = Tensor::zeros(head.b.shape());
        let mut loss = 0.0;
        for (label, tokens) in batch {
            let cache = effective.encode(tokens)?;
            let pooled = mean_pool(&cache.hidden);
            let p = softmax(&head.logits(&pooled));
            let y = *label as usize;
            loss -= p[y].ln() * norm;
            let dz = [(p[0] - f64::from(y == 0)) * norm, (p[1] - f64::from(y == 1)) * norm];
            for c in 0..2 {
                gb.data_mut()[c] += dz[c];
                for (g, x) in gw.data_mut()[c * pooled.len()..(c + 1) * pooled.len()].iter_mut().zip(&pooled) {
                    *g += dz[c] * x;
                }
            }
            let n = cache.hidden.cols();
            let d_pool: Vec<f64> = (0..pooled.len())
                .map(|i| (dz[0] * head.w.at(0, i) + dz[1] * head.w.at(1, i)) / n as f64)
                .collect();
            let mut d_hidden = Tensor::zeros(cache.hidden.shape());
            for j in 0..n {
                d_hidden.set_column(j, &d_pool);
            }
            backward_hidden(&effective, &cache, d_hidden, &mut grads)?;
        }
        trace.push(loss);
        let lr = warmup_linear(cfg.lr, cfg.warmup_steps, steps, step);

        let mut params: Vec<&mut Tensor> = Vec::new();
        let mut g: Vec<Tensor> = Vec::new();
        match adapters.as_mut() {
            Some(set) => {
                let named = grads.to_named();
                for ad in set.adapters.values_mut() {
                    let dw = &named[&ad.target];
                    let s = ad.scaling();
                    g.push(dw.matmul_t(&ad.b)?.scale(s));
                    g.push(ad.a.t_matmul(dw)?.scale(s));
                    params.push(&mut ad.a);
                    params.push(&mut ad.b);
                }
            }
            None => {
                grads.for_each(|_, t| g.push(t.clone()));
                collect_mut(&mut base.params, &mut params);
            }
        }
        g.push(gw);
        g.push(gb);
        params.push(&mut head.w);
        params.push(&mut head.b);
        let decay: Vec<bool> = params.iter().map(|t| t.is_matrix()).collect();
        let grefs: Vec<&Tensor> = g.iter().collect();
        state.update(&adam, lr, &mut params, &grefs, &decay);
    }

    let model_out = match &adapters {
        Some(set) => apply_adapters(&base, set)?,
        None => base,
    };
    let counts = evaluate(&model_out, &head, &eval)?;
    let report = EvalReport {
        mode: cfg.mode,
        mcc: mcc(&counts),
        counts,
        n_train: train.len(),
        n_eval: eval.len(),
        steps,
        initial_loss: trace.first().copied(),
        final_loss: trace.last().copied(),
    };
    Ok(FinetuneOutcome {
        head,
        adapters,
        model: model_out,
        report,
        loss_trace: trace,
    })
}

/// LoRA fine-tuning that returns only the trained adapters.
pub fn lora_finetune(model: &Model, rows: &[(u8, Vec<usize>)], rank: usize, alpha: f64, steps: usize) -> Result<AdapterSet> {
    let cfg = FinetuneConfig {
        mode: FinetuneMode::Lora,
        rank,
        alpha,
        steps,
        ..FinetuneConfig::default()
    };
    let out = finetune_classifier(model, rows, &cfg)?;
    Ok(out.adapters.expect("lora mode builds adapters"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AttentionVariant, ModelConfig};
    use crate::data::corpus::gen_motif_task;

    #[test]
    fn adapter_presets() {
        let (w, n) = (FinetuneConfig::lora_wide(), FinetuneConfig::lora_narrow());
        assert_eq!((w.rank, w.alpha, n.rank, n.alpha), (128, 256.0, 8, 16.0));
        assert!(w.validate().is_ok() && n.validate().is_ok());
    }

    #[test]
    fn mcc_hand_cases() {
        let c = |tp, tn, fp, fn_| MccCounts { tp, tn, fp, fn_ };
        assert_eq!(mcc(&c(1, 1, 1, 1)), 0.0);
        assert_eq!(mcc(&c(5, 7, 0, 0)), 1.0);
        assert_eq!(mcc(&c(0, 0, 4, 6)), -1.0);
        assert!((mcc(&c(2, 3, 1, 0)) - 6.0 / 72f64.sqrt()).abs() < 1e-15);
        assert_eq!(mcc(&c(5, 0, 3, 0)), 0.0);
        assert_eq!(mcc(&c(0, 0, 0, 0)), 0.0);
    }

    #[test]
    fn counts_from_predictions() {
        let c = MccCounts::from_predictions(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]);
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 1, 1, 1));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"fn\":1"));
    }

    fn setup(n: usize) -> (Model, Vec<(u8, Vec<usize>)>) {
        let vocab = Vocab::base();
        let mut cfg = ModelConfig::toy(AttentionVariant::Softmax1);
        cfg.model_dim = 16;
        cfg.ffn_dim = 32;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.vocab_size = vocab.len();
        let model = Model::init(cfg, &mut Rng::new(4), 0.1).unwrap();
        let rows = gen_motif_task("TATA", n, 16, 24, 2).unwrap();
        (model, encode_task(&vocab, &rows, 64).unwrap())
    }

    #[test]
    fn single_class_rejected() {
        let (model, rows) = setup(20);
        let ones: Vec<_> = rows.into_iter().filter(|r| r.0 == 1).collect();
        assert!(matches!(
            finetune_classifier(&model, &ones, &FinetuneConfig::default()),
            Err(Error::SingleClassDataset)
        ));
    }

    #[test]
    fn lora_loss_strictly_decreases_over_50_steps() {
        let (model, rows) = setup(40);
        let cfg = FinetuneConfig {
            mode: FinetuneMode::Lora,
            steps: 50,
            // Full-batch, constant-direction descent.
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 0,
            ..FinetuneConfig::default()
        };
        // Train on everything so the batch is fixed and the loss is comparable.
        let out = finetune_classifier(&model, &rows, &cfg).unwrap();
        let first = out.loss_trace[0];
        let last = *out.loss_trace.last().unwrap();
        assert!(last < first, "{first} -> {last}");
        let set = out.adapters.unwrap();
        assert_eq!(set.adapters.len(), adapter_targets(&model).len());
        assert!(set.adapters.values().any(|a| a.a.max_abs() > 0.0));
    }

    #[test]
    fn frozen_mode_trains_nothing() {
        let (model, rows) = setup(20);
        let cfg = FinetuneConfig {
            mode: FinetuneMode::Frozen,
            ..FinetuneConfig::default()
        };
        let out = finetune_classifier(&model, &rows, &cfg).unwrap();
        assert!(out.loss_trace.is_empty());
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.report.counts.total() as usize, out.report.n_eval);
    }

    #[test]
    fn qlora_base_is_quantized_and_loftq_starts_closer() {
        let (model, _) = setup(4);
        let mut rng = Rng::new(0);
        let q = FinetuneConfig {
            mode: FinetuneMode::Qlora,
            ..FinetuneConfig::default()
        };
        let l = FinetuneConfig {
            mode: FinetuneMode::Loftq,
            ..FinetuneConfig::default()
        };
        let (qbase, qset) = prepare_adapters(&model, &q, &mut rng).unwrap();
        let (lbase, lset) = prepare_adapters(&model, &l, &mut rng).unwrap();
        let err = |m: &Model| {
            let a = m.params.to_named();
            let b = model.params.to_named();
            adapter_targets(&model)
                .iter()
                .map(|(n, _, _)| a[n].sub(&b[n]).unwrap().frobenius_norm().powi(2))
                .sum::<f64>()
        };
        assert!(err(&qbase) > 0.0);
        let q_merged = apply_adapters(&qbase, &qset).unwrap();
        let l_merged = apply_adapters(&lbase, &lset).unwrap();
        assert!(err(&l_merged) < err(&q_merged));
    }
}
