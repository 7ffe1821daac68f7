//! Transformer parameters and the forward pass.
//!
//! Activations are `D × N` matrices with one column per token. Both block
//! flavors share the same per-head parameter layout; `Formal` heads are D
//! wide, `Practical` heads D/H wide.

use std::collections::BTreeMap;

use crate::attention::{activate_columns, attention_forward_hooked, HeadParams, HeadTrace};
use crate::checkpoint::Checkpoint;
use crate::config::{AttentionVariant, BlockMode, ModelConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub ln1: Option<LayerNormParams>,
    pub ln2: Option<LayerNormParams>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `D × V`; column `t` embeds token `t`.
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln: Option<LayerNormParams>,
    /// `V × D` output projection.
    pub w_out: Tensor,
}

impl ModelParams {
    /// Gaussian weights with standard deviation `std`, zero biases and unit
    /// LayerNorm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng, std: f64) -> Self {
        let (d, f, v, dh) = (cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.head_dim());
        let practical = cfg.block_mode == BlockMode::Practical;
        let embed = rng.normal_tensor(&[d, v], std);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                heads: (0..cfg.heads)
                    .map(|_| HeadParams {
                        wq: rng.normal_tensor(&[dh, d], std),
                        wk: rng.normal_tensor(&[dh, d], std),
                        wv: rng.normal_tensor(&[dh, d], std),
                        wo: rng.normal_tensor(&[d, dh], std),
                    })
                    .collect(),
                ln1: practical.then(|| LayerNormParams::identity(d)),
                ln2: practical.then(|| LayerNormParams::identity(d)),
                w1: rng.normal_tensor(&[f, d], std),
                b1: Tensor::zeros(&[f]),
                w2: rng.normal_tensor(&[d, f], std),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let final_ln = practical.then(|| LayerNormParams::identity(d));
        let w_out = rng.normal_tensor(&[v, d], std);
        Self {
            embed,
            layers,
            final_ln,
            w_out,
        }
    }

    /// Every weight matrix and bias zero; LayerNorm gains one.
    pub fn zero_weights(cfg: &ModelConfig) -> Self {
        Self::init(cfg, &mut Rng::new(0), 0.0)
    }

    /// Same structure with every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        out
    }

    /// Visits `(name, tensor)` pairs in canonical order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor)) {
        f("embed", &self.embed);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, hp) in layer.heads.iter().enumerate() {
                f(&format!("layers.{l}.heads.{h}.wq"), &hp.wq);
                f(&format!("layers.{l}.heads.{h}.wk"), &hp.wk);
                f(&format!("layers.{l}.heads.{h}.wv"), &hp.wv);
                f(&format!("layers.{l}.heads.{h}.wo"), &hp.wo);
            }
            if let Some(ln) = &layer.ln1 {
                f(&format!("layers.{l}.ln1.gamma"), &ln.gamma);
                f(&format!("layers.{l}.ln1.beta"), &ln.beta);
            }
            if let Some(ln) = &layer.ln2 {
                f(&format!("layers.{l}.ln2.gamma"), &ln.gamma);
                f(&format!("layers.{l}.ln2.beta"), &ln.beta);
            }
            f(&format!("layers.{l}.ffn.w1"), &layer.w1);
            f(&format!("layers.{l}.ffn.b1"), &layer.b1);
            f(&format!("layers.{l}.ffn.w2"), &layer.w2);
            f(&format!("layers.{l}.ffn.b2"), &layer.b2);
        }
        if let Some(ln) = &self.final_ln {
            f("final_ln.gamma", &ln.gamma);
            f("final_ln.beta", &ln.beta);
        }
        f("output.w", &self.w_out);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.embed);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, hp) in layer.heads.iter_mut().enumerate() {
                f(&format!("layers.{l}.heads.{h}.wq"), &mut hp.wq);
                f(&format!("layers.{l}.heads.{h}.wk"), &mut hp.wk);
                f(&format!("layers.{l}.heads.{h}.wv"), &mut hp.wv);
                f(&format!("layers.{l}.heads.{h}.wo"), &mut hp.wo);
            }
            if let Some(ln) = &mut layer.ln1 {
                f(&format!("layers.{l}.ln1.gamma"), &mut ln.gamma);
                f(&format!("layers.{l}.ln1.beta"), &mut ln.beta);
            }
            if let Some(ln) = &mut layer.ln2 {
                f(&format!("layers.{l}.ln2.gamma"), &mut ln.gamma);
                f(&format!("layers.{l}.ln2.beta"), &mut ln.beta);
            }
            f(&format!("layers.{l}.ffn.w1"), &mut layer.w1);
            f(&format!("layers.{l}.ffn.b1"), &mut layer.b1);
            f(&format!("layers.{l}.ffn.w2"), &mut layer.w2);
            f(&format!("layers.{l}.ffn.b2"), &mut layer.b2);
        }
        if let Some(ln) = &mut self.final_ln {
            f("final_ln.gamma", &mut ln.gamma);
            f("final_ln.beta", &mut ln.beta);
        }
        f("output.w", &mut self.w_out);
    }

    /// Zips two structurally identical parameter sets.
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        let mut rhs = Vec::new();
        other.for_each(|_, t| rhs.push(t));
        let mut rhs = rhs.into_iter();
        self.for_each_mut(|name, t| {
            let r = rhs.next().expect("parameter sets differ in structure");
            f(name, t, r);
        });
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.for_each(|name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Rebuilds typed parameters from named tensors, checking every shape
    /// against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zero_weights(cfg);
        let mut err = None;
        params.for_each_mut(|name, t| {
            if err.is_some() {
                return;
            }
            match named.get(name) {
                None => err = Some(Error::MissingParam(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::ShapeMismatch(format!(
                        "`{name}` has shape {:?}, config expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => *t = src.clone(),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }
}

/// Where an activation is observed or rewritten during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    /// Shared input of the query/key/value projections.
    QkvIn,
    /// Scaled score matrix of one head (before biases and activation).
    Scores(usize),
    /// Stacked head outputs feeding the output projections.
    OutProjIn,
    Ffn1In,
    Ffn2In,
    /// Input of the vocabulary projection (`layer` is `None`).
    HeadIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: Option<usize>,
    pub kind: SiteKind,
}

impl Site {
    pub fn name(&self) -> String {
        let kind = match self.kind {
            SiteKind::QkvIn => "qkv_in".to_string(),
            SiteKind::Scores(h) => format!("scores.{h}"),
            SiteKind::OutProjIn => "out_proj_in".to_string(),
            SiteKind::Ffn1In => "ffn1_in".to_string(),
            SiteKind::Ffn2In => "ffn2_in".to_string(),
            SiteKind::HeadIn => "head_in".to_string(),
        };
        match self.layer {
            Some(l) => format!("layers.{l}.{kind}"),
            None => kind,
        }
    }
}

/// Observes or rewrites activations at linear-layer inputs.
pub trait ForwardHook {
    fn on_activation(&mut self, site: Site, x: &mut Tensor);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    FfnOutput,
    LayernormOutput,
    AttentionProbs,
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub kind: ProbeKind,
    pub layer: usize,
    pub tensor: Tensor,
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub probes: Vec<Probe>,
}

impl ActivationTrace {
    pub fn push(&mut self, kind: ProbeKind, layer: usize, tensor: Tensor) {
        let tag = match kind {
            ProbeKind::FfnOutput => "ffn_output",
            ProbeKind::LayernormOutput => "layernorm_output",
            ProbeKind::AttentionProbs => "attention_probs",
        };
        self.probes.push(Probe {
            name: format!("layers.{layer}.{tag}"),
            kind,
            layer,
            tensor,
        });
    }

    pub fn get(&self, kind: ProbeKind, layer: usize) -> Option<&Probe> {
        self.probes
            .iter()
            .find(|p| p.kind == kind && p.layer == layer)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub out: Tensor,
}

pub(crate) fn layer_norm(x: &Tensor, p: &LayerNormParams) -> LayerNormCache {
    let (d, n) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[d, n]);
    let mut out = Tensor::zeros(&[d, n]);
    let mut inv_std = Vec::with_capacity(n);
    for j in 0..n {
        let mut mean = 0.0;
        for i in 0..d {
            mean += x.at(i, j);
        }
        mean /= d as f64;
        let mut var = 0.0;
        for i in 0..d {
            var += (x.at(i, j) - mean).powi(2);
        }
        var /= d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for i in 0..d {
            let xh = (x.at(i, j) - mean) * is;
            *xhat.at_mut(i, j) = xh;
            *out.at_mut(i, j) = p.gamma.data()[i] * xh + p.beta.data()[i];
        }
    }
    LayerNormCache { xhat, inv_std, out }
}

/// Adds `b` to every column of `x`.
pub(crate) fn add_column_bias(x: &mut Tensor, b: &Tensor) {
    let n = x.cols();
    for (i, bv) in b.data().iter().enumerate() {
        for j in 0..n {
            *x.at_mut(i, j) += bv;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Tensor,
    pub ln1: Option<LayerNormCache>,
    /// Input actually consumed by the q/k/v projections.
    pub attn_in: Tensor,
    pub heads: Vec<HeadTrace>,
    pub ln2: Option<LayerNormCache>,
    pub ffn_in: Tensor,
    pub pre_act: Tensor,
    pub hidden: Tensor,
    pub ffn_out: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub tokens: Option<Vec<usize>>,
    pub layers: Vec<LayerCache>,
    pub final_ln: Option<LayerNormCache>,
    /// Final hidden state fed to the output projection.
    pub hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `V × N` pre-activation output scores.
    pub logits: Tensor,
    /// Output activation applied column-wise.
    pub probs: Tensor,
    pub trace: ActivationTrace,
}

/// A validated config together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let named = params.to_named();
        ModelParams::from_named(&config, &named)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut Rng, std: f64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng, std);
        Ok(Self { config, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .config
            .clone()
            .ok_or_else(|| Error::InvalidConfig("checkpoint has no model config".into()))?;
        let params = ModelParams::from_named(&config, &ckpt.tensors)?;
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new_model(self.config.clone(), self.params.to_named())
    }

    pub fn output_activation(&self) -> AttentionVariant {
        if self.config.output_softmax1 {
            AttentionVariant::Softmax1
        } else {
            AttentionVariant::VanillaSoftmax
        }
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let mut x = Tensor::zeros(&[cfg.model_dim, tokens.len()]);
        for (j, &t) in tokens.iter().enumerate() {
            if t >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            for i in 0..cfg.model_dim {
                *x.at_mut(i, j) = self.params.embed.at(i, t);
            }
        }
        Ok(x)
    }

    /// Logits, output probabilities and probe activations for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<ModelOutput> {
        self.forward_hooked(tokens, None)
    }

    pub fn forward_hooked(
        &self,
        tokens: &[usize],
        hook: Option<&mut dyn ForwardHook>,
    ) -> Result<ModelOutput> {
        let x = self.embed(tokens)?;
        let (logits, cache) = self.run(x, Some(tokens.to_vec()), hook)?;
        Ok(self.finish(logits, &cache))
    }

    /// Forward pass on an already embedded `D × N` input, bypassing the
    /// token embedding.
    pub fn forward_embedded(&self, x: &Tensor) -> Result<ModelOutput> {
        if x.rows() != self.config.model_dim || !x.is_matrix() || x.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} for model_dim {}",
                x.shape(),
                self.config.model_dim
            )));
        }
        let (logits, cache) = self.run(x.clone(), None, None)?;
        Ok(self.finish(logits, &cache))
    }

    fn finish(&self, logits: Tensor, cache: &ForwardCache) -> ModelOutput {
        let probs = activate_columns(self.output_activation(), &logits);
        ModelOutput {
            logits,
            probs,
            trace: trace_from_cache(cache),
        }
    }

    pub(crate) fn run(
        &self,
        x: Tensor,
        tokens: Option<Vec<usize>>,
        mut hook: Option<&mut dyn ForwardHook>,
    ) -> Result<(Tensor, ForwardCache)> {
        let (hidden, layers, final_ln) = self.trunk(x, &mut hook)?;
        let mut head_in = hidden.clone();
        if let Some(h) = hook.as_mut() {
            h.on_activation(
                Site {
                    layer: None,
                    kind: SiteKind::HeadIn,
                },
                &mut head_in,
            );
        }
        let logits = self.params.w_out.matmul(&head_in)?;
        Ok((
            logits,
            ForwardCache {
                tokens,
                layers,
                final_ln,
                hidden,
            },
        ))
    }

    /// Embedding-to-final-hidden computation shared by every head.
    pub(crate) fn encode(&self, tokens: &[usize]) -> Result<ForwardCache> {
        let x = self.embed(tokens)?;
        let (hidden, layers, final_ln) = self.trunk(x, &mut None)?;
        Ok(ForwardCache {
            tokens: Some(tokens.to_vec()),
            layers,
            final_ln,
            hidden,
        })
    }

    #[allow(clippy::type_complexity)]
    fn trunk(
        &self,
        x: Tensor,
        hook: &mut Option<&mut dyn ForwardHook>,
    ) -> Result<(Tensor, Vec<LayerCache>, Option<LayerNormCache>)> {
        let cfg = &self.config;
        let mut z = x;
        let mut caches = Vec::with_capacity(cfg.layers);
        for (l, lp) in self.params.layers.iter().enumerate() {
            let cache = self.layer_forward(l, lp, z, hook)?;
            z = cache.output.clone();
            caches.push(cache);
        }
        let (hidden, final_ln) = match &self.params.final_ln {
            Some(p) => {
                let c = layer_norm(&z, p);
                (c.out.clone(), Some(c))
            }
            None => (z, None),
        };
        Ok((hidden, caches, final_ln))
    }

    fn layer_forward(
        &self,
        l: usize,
        lp: &LayerParams,
        input: Tensor,
        hook: &mut Option<&mut dyn ForwardHook>,
    ) -> Result<LayerCache> {
        let cfg = &self.config;
        let site = |kind| Site {
            layer: Some(l),
            kind,
        };
        let ln1 = lp.ln1.as_ref().map(|p| layer_norm(&input, p));
        let mut attn_in = match &ln1 {
            Some(c) => c.out.clone(),
            None => input.clone(),
        };
        if let Some(h) = hook.as_mut() {
            h.on_activation(site(SiteKind::QkvIn), &mut attn_in);
        }

        let (mut attn_out, mut heads) = match hook.as_mut() {
            Some(h) => {
                let mut score_hook =
                    |head: usize, s: &mut Tensor| h.on_activation(site(SiteKind::Scores(head)), s);
                attention_forward_hooked(&attn_in, &lp.heads, cfg, Some(&mut score_hook))?
            }
            None => attention_forward_hooked(&attn_in, &lp.heads, cfg, None)?,
        };
        if let Some(h) = hook.as_mut() {
            // Recombine heads from the rewritten stacked head outputs.
            let dh = cfg.head_dim();
            let n = attn_in.cols();
            let mut stacked = Tensor::zeros(&[dh * heads.len(), n]);
            for (i, tr) in heads.iter().enumerate() {
                stacked.set_rows(i * dh, &tr.mixed);
            }
            h.on_activation(site(SiteKind::OutProjIn), &mut stacked);
            attn_out = Tensor::zeros(&[cfg.model_dim, n]);
            for (i, (tr, hp)) in heads.iter_mut().zip(&lp.heads).enumerate() {
                tr.mixed = stacked.row_slice(i * dh, (i + 1) * dh);
                attn_out.axpy(1.0, &hp.wo.matmul(&tr.mixed)?)?;
            }
        }

        let (ln2, mut ffn_in) = match cfg.block_mode {
            BlockMode::Practical => {
                let resid = input.add(&attn_out)?;
                let c = layer_norm(&resid, lp.ln2.as_ref().expect("practical has ln2"));
                let out = c.out.clone();
                (Some(c), out)
            }
            BlockMode::Formal => (None, attn_out.clone()),
        };
        if let Some(h) = hook.as_mut() {
            h.on_activation(site(SiteKind::Ffn1In), &mut ffn_in);
        }
        let mut pre_act = lp.w1.matmul(&ffn_in)?;
        add_column_bias(&mut pre_act, &lp.b1);
        let mut hidden = pre_act.map(|v| v.max(0.0));
        if let Some(h) = hook.as_mut() {
            h.on_activation(site(SiteKind::Ffn2In), &mut hidden);
        }
        let mut ffn_out = lp.w2.matmul(&hidden)?;
        add_column_bias(&mut ffn_out, &lp.b2);
        let output = match cfg.block_mode {
            BlockMode::Practical => input.add(&attn_out)?.add(&ffn_out)?,
            BlockMode::Formal => ffn_out.clone(),
        };
        Ok(LayerCache {
            input,
            ln1,
            attn_in,
            heads,
            ln2,
            ffn_in,
            pre_act,
            hidden,
            ffn_out,
            output,
        })
    }
}

fn trace_from_cache(cache: &ForwardCache) -> ActivationTrace {
    let mut trace = ActivationTrace::default();
    for (l, lc) in cache.layers.iter().enumerate() {
        trace.push(ProbeKind::FfnOutput, l, lc.ffn_out.clone());
        if let Some(ln) = &lc.ln2 {
            trace.push(ProbeKind::LayernormOutput, l, ln.out.clone());
        }
        let n = lc.input.cols();
        let mut probs = Vec::with_capacity(lc.heads.len() * n * n);
        for h in &lc.heads {
            probs.extend_from_slice(h.probs.data());
        }
        trace.push(
            ProbeKind::AttentionProbs,
            l,
            Tensor::from_parts(vec![lc.heads.len(), n, n], probs),
        );
    }
    trace
}

/// One-shot forward from a checkpoint.
pub fn model_forward(tokens: &[usize], ckpt: &Checkpoint) -> Result<ModelOutput> {
    Model::from_checkpoint(ckpt)?.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::softmax1;

    #[test]
    fn zero_model_uniform_output() {
        for (mode, out1) in [(BlockMode::Practical, true), (BlockMode::Formal, true)] {
            let mut cfg = ModelConfig::toy(AttentionVariant::Softmax1);
            cfg.block_mode = mode;
            cfg.alibi = mode == BlockMode::Practical;
            cfg.ffn_dim = cfg.model_dim;
            cfg.output_softmax1 = out1;
            let model = Model::new(cfg.clone(), ModelParams::zero_weights(&cfg)).unwrap();
            let out = model.forward(&[1, 2, 3]).unwrap();
            assert!(out.logits.data().iter().all(|v| *v == 0.0));
            let v = cfg.vocab_size as f64;
            for p in out.probs.data() {
                assert!((p - 1.0 / (1.0 + v)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn input_errors() {
        let cfg = ModelConfig::toy(AttentionVariant::VanillaSoftmax);
        let model = Model::new(cfg.clone(), ModelParams::zero_weights(&cfg)).unwrap();
        assert!(matches!(model.forward(&[]), Err(Error::EmptyInput)));
        assert!(matches!(
            model.forward(&[64]),
            Err(Error::TokenOutOfRange { id: 64, .. })
        ));
        assert!(matches!(
            model.forward(&vec![1; 65]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn named_round_trip_and_shape_checks() {
        let cfg = ModelConfig::toy(AttentionVariant::Softmax1);
        let p = ModelParams::init(&cfg, &mut Rng::new(1), 0.02);
        let named = p.to_named();
        assert_eq!(ModelParams::from_named(&cfg, &named).unwrap(), p);
        let mut broken = named.clone();
        broken.remove("output.w");
        assert!(matches!(
            ModelParams::from_named(&cfg, &broken),
            Err(Error::MissingParam(_))
        ));
        let mut broken = named;
        broken.insert("embed".into(), Tensor::zeros(&[2, 2]));
        assert!(ModelParams::from_named(&cfg, &broken).is_err());
    }

    /// Direct transcription of the bare block equations with explicit loops
    /// over heads, no shared helpers beyond matmul and softmax1.
    #[test]
    fn formal_single_layer_matches_transcription() {
        let cfg = ModelConfig::formal(1, 2, 3, 8);
        let mut rng = Rng::new(4);
        let model = Model::init(cfg.clone(), &mut rng, 0.7).unwrap();
        let mut p = model.params.clone();
        p.layers[0].b1 = rng.normal_tensor(&[3], 0.5);
        p.layers[0].b2 = rng.normal_tensor(&[3], 0.5);
        let model = Model::new(cfg, p).unwrap();
        let x = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let out = model.forward_embedded(&x).unwrap();

        let lp = &model.params.layers[0];
        let n = 4;
        let mut attn = Tensor::zeros(&[3, n]);
        for hp in &lp.heads {
            let s = x
                .transpose()
                .matmul(&hp.wk.transpose())
                .unwrap()
                .matmul(&hp.wq)
                .unwrap()
                .matmul(&x)
                .unwrap();
            let mut sm = Tensor::zeros(&[n, n]);
            for j in 0..n {
                sm.set_column(j, &softmax1(&s.column(j)));
            }
            let term = hp.wo.matmul(&hp.wv).unwrap().matmul(&x).unwrap().matmul(&sm).unwrap();
            attn = attn.add(&term).unwrap();
        }
        let ones = Tensor::filled(&[1, n], 1.0);
        let b1 = lp.b1.clone().reshape(vec![3, 1]).unwrap();
        let b2 = lp.b2.clone().reshape(vec![3, 1]).unwrap();
        let pre = lp.w1.matmul(&attn).unwrap().add(&b1.matmul(&ones).unwrap()).unwrap();
        let z1 = lp
            .w2
            .matmul(&pre.map(|v| v.max(0.0)))
            .unwrap()
            .add(&b2.matmul(&ones).unwrap())
            .unwrap();
        let logits = model.params.w_out.matmul(&z1).unwrap();
        let mut f = Tensor::zeros(&[3, n]);
        for j in 0..n {
            f.set_column(j, &softmax1(&logits.column(j)));
        }
        assert!(out.logits.max_abs_diff(&logits).unwrap() < 1e-12);
        assert!(out.probs.max_abs_diff(&f).unwrap() < 1e-12);
    }

    struct Recorder(Vec<Site>);
    impl ForwardHook for Recorder {
        fn on_activation(&mut self, site: Site, _x: &mut Tensor) {
            self.0.push(site);
        }
    }

    #[test]
    fn passive_hook_changes_nothing_and_sees_every_site() {
        let cfg = ModelConfig::toy(AttentionVariant::Softmax1);
        let model = Model::init(cfg.clone(), &mut Rng::new(2), 0.1).unwrap();
        let tokens = [5, 9, 12, 40, 7];
        let plain = model.forward(&tokens).unwrap();
        let mut rec = Recorder(Vec::new());
        let hooked = model.forward_hooked(&tokens, Some(&mut rec)).unwrap();
        assert_eq!(plain.logits, hooked.logits);
        // qkv, H scores, out-proj, ffn1, ffn2 per layer plus the head input.
        assert_eq!(rec.0.len(), cfg.layers * (4 + cfg.heads) + 1);
    }

    #[test]
    fn trace_has_expected_probes() {
        let cfg = ModelConfig::toy(AttentionVariant::Softmax1);
        let model = Model::init(cfg, &mut Rng::new(2), 0.1).unwrap();
        let out = model.forward(&[1, 2, 3]).unwrap();
        let names: Vec<&str> = out.trace.probes.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "layers.0.ffn_output",
                "layers.0.layernorm_output",
                "layers.0.attention_probs",
                "layers.1.ffn_output",
                "layers.1.layernorm_output",
                "layers.1.attention_probs"
            ]
        );
        let probs = &out.trace.get(ProbeKind::AttentionProbs, 0).unwrap().tensor;
        assert_eq!(probs.shape(), &[4, 3, 3]);
    }
}
