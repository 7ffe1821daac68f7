//! Low-rank adapters, best rank-r approximation and the exact-representation
//! construction for Formal-mode models.
//!
//! In Formal mode every projection is `D × D`, so the adapted model
//! `f` (frozen weights plus low-rank updates and rewritten biases) can be
//! made to reproduce a target model `f̄` exactly once the adapter rank is
//! at least half of the largest per-block rank gap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::BlockMode;
use crate::error::{Error, Result};
use crate::linalg::{inverse, is_singular, numerical_rank, spectral_norm, svd};
use crate::model::{Model, ModelParams};
use crate::quant::{fake_quant, Range};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Best rank-`r` approximation `Σ_{i≤r} σᵢ uᵢ vᵢᵀ`.
pub fn lra(w: &Tensor, r: usize) -> Result<Tensor> {
    Ok(svd(w)?.truncated(r))
}

/// Low-rank update `ΔW = (alpha / rank) · a · b` for one named weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `out × rank`
    pub a: Tensor,
    /// `rank × in`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn zeros(target: impl Into<String>, out: usize, inp: usize, rank: usize, alpha: f64) -> Self {
        Self {
            target: target.into(),
            a: Tensor::zeros(&[out, rank]),
            b: Tensor::zeros(&[rank, inp]),
            rank,
            alpha,
        }
    }

    /// Standard LoRA start: `a = 0`, `b ~ N(0, std²)`, so `ΔW = 0`.
    pub fn init(target: impl Into<String>, out: usize, inp: usize, rank: usize, alpha: f64, rng: &mut Rng, std: f64) -> Self {
        let mut ad = Self::zeros(target, out, inp, rank, alpha);
        ad.b = rng.normal_tensor(&[rank, inp], std);
        ad
    }

    /// Factors `delta` through its truncated SVD with `alpha == rank`.
    pub fn from_delta(target: impl Into<String>, delta: &Tensor, rank: usize) -> Result<Self> {
        let rank = rank.min(delta.rows()).min(delta.cols()).max(1);
        let s = svd(delta)?;
        let mut a = Tensor::zeros(&[delta.rows(), rank]);
        let mut b = Tensor::zeros(&[rank, delta.cols()]);
        for c in 0..rank {
            for i in 0..delta.rows() {
                *a.at_mut(i, c) = s.u.at(i, c) * s.sigma[c];
            }
            for j in 0..delta.cols() {
                *b.at_mut(c, j) = s.v.at(j, c);
            }
        }
        Ok(Self {
            target: target.into(),
            a,
            b,
            rank,
            alpha: rank as f64,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Tensor {
        self.a.matmul(&self.b).expect("adapter factors agree").scale(self.scaling())
    }

    /// `W·x + s·a·(b·x)` without forming `ΔW`.
    pub fn apply(&self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut y = w.matmul(x)?;
        let low = self.a.matmul(&self.b.matmul(x)?)?;
        y.axpy(self.scaling(), &low)?;
        Ok(y)
    }
}

/// Adapters keyed by target parameter name plus bias replacements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub replaced_biases: BTreeMap<String, Tensor>,
}

impl AdapterSet {
    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.target.clone(), adapter);
    }

    pub fn max_rank(&self) -> usize {
        self.adapters.values().map(|a| a.rank).max().unwrap_or(0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut info = serde_json::Map::new();
        for (name, ad) in &self.adapters {
            tensors.insert(format!("adapters.{name}.a"), ad.a.clone());
            tensors.insert(format!("adapters.{name}.b"), ad.b.clone());
            info.insert(name.clone(), json!({ "rank": ad.rank, "alpha": ad.alpha }));
        }
        for (name, b) in &self.replaced_biases {
            tensors.insert(format!("biases.{name}"), b.clone());
        }
        let mut ckpt = Checkpoint::new_adapters(tensors);
        ckpt.meta.insert("adapters".into(), Value::Object(info));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Adapters {
            return Err(Error::CorruptManifest("not an adapter checkpoint".into()));
        }
        let info = ckpt
            .meta
            .get("adapters")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::CorruptManifest("missing adapter table".into()))?;
        let mut set = AdapterSet::default();
        for (name, entry) in info {
            let field = |k: &str| {
                entry
                    .get(k)
                    .and_then(Value::as_f64)
                    .ok_or_else(|| Error::CorruptManifest(format!("adapter {name}: missing {k}")))
            };
            set.insert(LoraAdapter {
                target: name.clone(),
                a: ckpt.tensor(&format!("adapters.{name}.a"))?.clone(),
                b: ckpt.tensor(&format!("adapters.{name}.b"))?.clone(),
                rank: field("rank")? as usize,
                alpha: field("alpha")?,
            });
        }
        for (name, t) in &ckpt.tensors {
            if let Some(bias) = name.strip_prefix("biases.") {
                set.replaced_biases.insert(bias.to_string(), t.clone());
            }
        }
        Ok(set)
    }
}

/// Adds every `ΔW` in place and swaps in the replacement biases.
pub fn apply_adapters(model: &Model, set: &AdapterSet) -> Result<Model> {
    let mut named = model.params.to_named();
    for (name, ad) in &set.adapters {
        let w = named
            .get_mut(name)
            .ok_or_else(|| Error::TargetMissing(name.clone()))?;
        let delta = ad.delta();
        if delta.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adapter {name}: {:?} vs weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
            if *d != 0.0 {
                *x += d;
            }
        }
    }
    for (name, b) in &set.replaced_biases {
        let slot = named
            .get_mut(name)
            .ok_or_else(|| Error::TargetMissing(name.clone()))?;
        if slot.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!("bias {name}")));
        }
        *slot = b.clone();
    }
    Model::new(model.config.clone(), ModelParams::from_named(&model.config, &named)?)
}

pub fn apply_adapters_to_checkpoint(ckpt: &Checkpoint, set: &AdapterSet) -> Result<Checkpoint> {
    let mut merged = apply_adapters(&Model::from_checkpoint(ckpt)?, set)?.to_checkpoint();
    merged.step = ckpt.step;
    merged.dtype = ckpt.dtype;
    merged.meta = ckpt.meta.clone();
    Ok(merged)
}

/// Result of the sequential product update.
#[derive(Debug, Clone)]
pub struct ProductUpdate {
    pub deltas: Vec<Tensor>,
    /// `‖Π(W_l + ΔW_l) − W̄‖₂`
    pub achieved_error: f64,
}

fn product(factors: &[Tensor]) -> Result<Tensor> {
    let mut it = factors.iter();
    let mut p = it.next().ok_or(Error::EmptyTensor)?.clone();
    for f in it {
        p = p.matmul(f)?;
    }
    Ok(p)
}

/// Relative size below which a correction is treated as exactly zero.
const ZERO_CORRECTION: f64 = 1e-12;

/// Rank-`R` updates of `factors` so that their product moves towards `w_bar`.
///
/// The error `E = W̄ − ΠW` is split into consecutive rank-`R` SVD bands
/// `E_1, E_2, …`; factor `l` absorbs band `l` via
/// `ΔW_l = (Π_{i<l}(W_i + ΔW_i))⁻¹ · E_l · (Π_{i>l} W_i)⁻¹`.
pub fn lemma_product_update(factors: &[Tensor], w_bar: &Tensor, rank: usize) -> Result<ProductUpdate> {
    let d = w_bar.rows();
    for (i, f) in factors.iter().enumerate() {
        if f.shape() != [d, d] || w_bar.shape() != [d, d] {
            return Err(Error::ShapeMismatch(format!("factor {i} is {:?}, expected {d}×{d}", f.shape())));
        }
        if is_singular(f) {
            return Err(Error::NonSingularityViolated(format!("factor {i} is singular")));
        }
    }
    let base = product(factors)?;
    let e = w_bar.sub(&base)?;
    let n = factors.len();
    let mut deltas = vec![Tensor::zeros(&[d, d]); n];
    if e.frobenius_norm() > ZERO_CORRECTION * w_bar.frobenius_norm().max(1.0) {
        let s = svd(&e)?;
        let r_e = s.rank();
        for l in 0..n {
            let (start, end) = ((l * rank).min(r_e), ((l + 1) * rank).min(r_e));
            if start >= end {
                continue;
            }
            let band = s.band(start, end);
            let mut left = Tensor::eye(d);
            for i in 0..l {
                left = left.matmul(&factors[i].add(&deltas[i])?)?;
            }
            let right = if l + 1 < n { product(&factors[l + 1..])? } else { Tensor::eye(d) };
            let singular = |what: &str| Error::NonSingularityViolated(format!("{what} before factor {l}"));
            let left_inv = inverse(&left).map_err(|_| singular("left partial product"))?;
            let right_inv = inverse(&right).map_err(|_| singular("right partial product"))?;
            deltas[l] = left_inv.matmul(&band)?.matmul(&right_inv)?;
        }
    }
    let updated: Vec<Tensor> = factors
        .iter()
        .zip(&deltas)
        .map(|(f, dw)| f.add(dw))
        .collect::<Result<_>>()?;
    let achieved_error = spectral_norm(&product(&updated)?.sub(w_bar)?)?;
    Ok(ProductUpdate { deltas, achieved_error })
}

fn check_pair(frozen: &Model, target: &Model) -> Result<()> {
    if frozen.config != target.config {
        return Err(Error::ConfigMismatch("frozen and target configs differ".into()));
    }
    let c = &frozen.config;
    if c.block_mode != BlockMode::Formal || c.ffn_dim != c.model_dim || c.vocab_size != c.model_dim {
        return Err(Error::ConfigMismatch(
            "adapter construction needs Formal mode with vocab == ffn == model dim".into(),
        ));
    }
    Ok(())
}

fn col(v: &Tensor) -> Tensor {
    v.clone().reshape(vec![v.len(), 1]).expect("vector")
}

fn flat(v: Tensor) -> Tensor {
    let n = v.len();
    v.reshape(vec![n]).expect("column")
}

/// `W̄_{2,l−1} · W_{2,l−1}⁻¹`, mapping adapted block outputs onto target ones.
fn carry(frozen: &ModelParams, target: &ModelParams, l: usize) -> Result<Option<Tensor>> {
    if l == 0 {
        return Ok(None);
    }
    Ok(Some(target.layers[l - 1].w2.matmul(&inverse(&frozen.layers[l - 1].w2)?)?))
}

/// Required `(W_K + ΔW_K)ᵀ(W_Q + ΔW_Q)` for block `l`, head `h`.
fn key_query_target(frozen: &ModelParams, target: &ModelParams, l: usize, h: usize) -> Result<Tensor> {
    let th = &target.layers[l].heads[h];
    let kq = th.wk.t_matmul(&th.wq)?;
    match carry(frozen, target, l)? {
        None => Ok(kq),
        Some(m) => m.t_matmul(&kq)?.matmul(&m),
    }
}

/// Required `(W_O + ΔW_O)(W_V + ΔW_V)` for block `l`, head `h`.
fn value_output_target(frozen: &ModelParams, target: &ModelParams, l: usize, h: usize) -> Result<Tensor> {
    let th = &target.layers[l].heads[h];
    let ov = inverse(&frozen.layers[l].w1)?
        .matmul(&target.layers[l].w1)?
        .matmul(&th.wo)?
        .matmul(&th.wv)?;
    match carry(frozen, target, l)? {
        None => Ok(ov),
        Some(m) => ov.matmul(&m),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFamily {
    FrozenWeight,
    TargetWeight,
    KeyQuery,
    ValueOutput,
    OutputLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityCheck {
    pub family: MatrixFamily,
    pub name: String,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub r: Option<usize>,
    pub singular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSingularityReport {
    pub rank: usize,
    pub checks: Vec<SingularityCheck>,
}

impl NonSingularityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.singular)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SingularityCheck> {
        self.checks.iter().filter(|c| c.singular)
    }

    pub fn failed_family(&self, family: MatrixFamily) -> bool {
        self.failures().any(|c| c.family == family)
    }
}

fn square_weights(p: &ModelParams) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (l, layer) in p.layers.iter().enumerate() {
        for (h, hp) in layer.heads.iter().enumerate() {
            for (n, w) in [("wq", &hp.wq), ("wk", &hp.wk), ("wv", &hp.wv), ("wo", &hp.wo)] {
                out.push((format!("layers.{l}.heads.{h}.{n}"), w));
            }
        }
        out.push((format!("layers.{l}.ffn.w1"), &layer.w1));
        out.push((format!("layers.{l}.ffn.w2"), &layer.w2));
    }
    out.push(("output.w".into(), &p.w_out));
    out
}

/// Checks that every weight of both models is invertible, then every
/// `current + LRA_r(required − current)` for `r = 1..=R` across the
/// key/query, value/output and output-layer families.
pub fn check_nonsingularity(frozen: &Model, target: &Model, rank: usize) -> Result<NonSingularityReport> {
    check_pair(frozen, target)?;
    let (fp, tp) = (&frozen.params, &target.params);
    let mut checks = Vec::new();
    for (family, p) in [(MatrixFamily::FrozenWeight, fp), (MatrixFamily::TargetWeight, tp)] {
        for (name, w) in square_weights(p) {
            checks.push(SingularityCheck {
                family,
                name,
                layer: None,
                head: None,
                r: None,
                singular: is_singular(w),
            });
        }
    }
    // The derived targets below need these inverses.
    let weights_ok = checks.iter().all(|c| !c.singular);

    let mut family_checks = |family: MatrixFamily, name: String, layer: Option<usize>, head: Option<usize>, current: Tensor, required: Option<Tensor>| -> Result<()> {
        let s = match &required {
            Some(req) => Some(svd(&req.sub(&current)?)?),
            None => None,
        };
        for r in 1..=rank {
            let singular = match &s {
                Some(s) => is_singular(&current.add(&s.truncated(r))?),
                None => true,
            };
            checks.push(SingularityCheck {
                family,
                name: name.clone(),
                layer,
                head,
                r: Some(r),
                singular,
            });
        }
        Ok(())
    };

    for l in 0..frozen.config.layers {
        for h in 0..frozen.config.heads {
            let fh = &fp.layers[l].heads[h];
            let kq = if weights_ok { Some(key_query_target(fp, tp, l, h)?) } else { None };
            family_checks(
                MatrixFamily::KeyQuery,
                format!("layers.{l}.heads.{h}.key_query"),
                Some(l),
                Some(h),
                fh.wk.t_matmul(&fh.wq)?,
                kq,
            )?;
            let ov = if weights_ok { Some(value_output_target(fp, tp, l, h)?) } else { None };
            family_checks(
                MatrixFamily::ValueOutput,
                format!("layers.{l}.heads.{h}.value_output"),
                Some(l),
                Some(h),
                fh.wo.matmul(&fh.wv)?,
                ov,
            )?;
        }
    }
    let last = frozen.config.layers - 1;
    let out_current = fp.w_out.matmul(&fp.layers[last].w2)?;
    let out_required = tp.w_out.matmul(&tp.layers[last].w2)?;
    family_checks(MatrixFamily::OutputLayer, "output".into(), None, None, out_current, Some(out_required))?;
    Ok(NonSingularityReport { rank, checks })
}

/// Rank gaps `G_1..G_L` for the blocks and `G_{L+1}` for the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalityGap {
    pub blocks: Vec<usize>,
    pub output: usize,
}

impl FunctionalityGap {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().copied().chain(std::iter::once(self.output))
    }

    pub fn max(&self) -> usize {
        self.all().max().unwrap_or(0)
    }

    /// Smallest adapter rank meeting `R ≥ ⌈G_i / 2⌉` for every `i`.
    pub fn required_rank(&self) -> usize {
        self.all().map(|g| g.div_ceil(2)).max().unwrap_or(0)
    }
}

pub fn functionality_gap(frozen: &Model, target: &Model) -> Result<FunctionalityGap> {
    check_pair(frozen, target)?;
    let (fp, tp) = (&frozen.params, &target.params);
    let mut blocks = Vec::new();
    for l in 0..frozen.config.layers {
        let mut g = 0;
        for h in 0..frozen.config.heads {
            let (fh, th) = (&fp.layers[l].heads[h], &tp.layers[l].heads[h]);
            let mut kq_bar = th.wk.t_matmul(&th.wq)?;
            let mut kq = fh.wk.t_matmul(&fh.wq)?;
            let mut ov_bar = tp.layers[l].w1.matmul(&th.wo)?.matmul(&th.wv)?;
            let mut ov = fp.layers[l].w1.matmul(&fh.wo)?.matmul(&fh.wv)?;
            if l > 0 {
                let (w2_bar, w2) = (&tp.layers[l - 1].w2, &fp.layers[l - 1].w2);
                kq_bar = w2_bar.t_matmul(&kq_bar)?.matmul(w2_bar)?;
                kq = w2.t_matmul(&kq)?.matmul(w2)?;
                ov_bar = ov_bar.matmul(w2_bar)?;
                ov = ov.matmul(w2)?;
            }
            g = g
                .max(numerical_rank(&kq_bar.sub(&kq)?)?)
                .max(numerical_rank(&ov_bar.sub(&ov)?)?);
        }
        blocks.push(g);
    }
    let last = frozen.config.layers - 1;
    let output = numerical_rank(
        &tp.w_out
            .matmul(&tp.layers[last].w2)?
            .sub(&fp.w_out.matmul(&fp.layers[last].w2)?)?,
    )?;
    Ok(FunctionalityGap { blocks, output })
}

/// Builds rank-`R` adapters and rewritten biases that make the frozen
/// Formal-mode model compute exactly the target model.
pub fn construct_adapters(frozen: &Model, target: &Model, rank: usize) -> Result<AdapterSet> {
    let gap = functionality_gap(frozen, target)?;
    let required = gap.required_rank();
    if rank < required || rank == 0 {
        return Err(Error::RankConditionViolated { rank, required: required.max(1) });
    }
    let report = check_nonsingularity(frozen, target, rank)?;
    if let Some(bad) = report.failures().next() {
        return Err(Error::NonSingularityViolated(match bad.r {
            Some(r) => format!("{} at r={r}", bad.name),
            None => bad.name.clone(),
        }));
    }

    let (fp, tp) = (&frozen.params, &target.params);
    let mut set = AdapterSet::default();
    let layers = frozen.config.layers;
    for l in 0..layers {
        for h in 0..frozen.config.heads {
            let fh = &fp.layers[l].heads[h];
            let prefix = format!("layers.{l}.heads.{h}");

            // Transposed product Wqᵀ·Wk so the query side is updated first.
            let kq = key_query_target(fp, tp, l, h)?;
            let up = lemma_product_update(&[fh.wq.transpose(), fh.wk.clone()], &kq.transpose(), rank)?;
            set.insert(LoraAdapter::from_delta(format!("{prefix}.wq"), &up.deltas[0].transpose(), rank)?);
            set.insert(LoraAdapter::from_delta(format!("{prefix}.wk"), &up.deltas[1], rank)?);

            let ov = value_output_target(fp, tp, l, h)?;
            let up = lemma_product_update(&[fh.wo.clone(), fh.wv.clone()], &ov, rank)?;
            set.insert(LoraAdapter::from_delta(format!("{prefix}.wo"), &up.deltas[0], rank)?);
            set.insert(LoraAdapter::from_delta(format!("{prefix}.wv"), &up.deltas[1], rank)?);
        }
        set.replaced_biases
            .insert(format!("layers.{l}.ffn.b1"), tp.layers[l].b1.clone());
        if l + 1 < layers {
            let b2 = fp.layers[l]
                .w2
                .matmul(&inverse(&tp.layers[l].w2)?)?
                .matmul(&col(&tp.layers[l].b2))?;
            set.replaced_biases.insert(format!("layers.{l}.ffn.b2"), flat(b2));
        }
    }

    let last = layers - 1;
    let out_target = tp.w_out.matmul(&tp.layers[last].w2)?;
    let up = lemma_product_update(&[fp.w_out.clone(), fp.layers[last].w2.clone()], &out_target, rank)?;
    let w_out_adapted = fp.w_out.add(&up.deltas[0])?;
    set.insert(LoraAdapter::from_delta("output.w", &up.deltas[0], rank)?);
    set.insert(LoraAdapter::from_delta(format!("layers.{last}.ffn.w2"), &up.deltas[1], rank)?);
    let b2 = inverse(&w_out_adapted)?
        .matmul(&tp.w_out)?
        .matmul(&col(&tp.layers[last].b2))?;
    set.replaced_biases.insert(format!("layers.{last}.ffn.b2"), flat(b2));
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    /// Max `‖f(X) − f̄(X)‖_∞` over output probabilities.
    pub max_deviation: f64,
    /// Same on the pre-activation logits.
    pub max_logit_deviation: f64,
    pub trials: usize,
}

/// Compares adapted and target models on `trials` random inputs
/// `X ∈ [−1, 1]^{D×n_tokens}`.
pub fn verify_theorem(
    frozen: &Model,
    target: &Model,
    adapters: &AdapterSet,
    trials: usize,
    n_tokens: usize,
    rng: &mut Rng,
) -> Result<TheoremCheck> {
    let adapted = apply_adapters(frozen, adapters)?;
    let d = frozen.config.model_dim;
    let (mut dev, mut logit_dev) = (0.0_f64, 0.0_f64);
    for t in 0..trials {
        let mut trial_rng = rng.fork(t as u64);
        let x = trial_rng.uniform_tensor(&[d, n_tokens], -1.0, 1.0);
        let a = adapted.forward_embedded(&x)?;
        let b = target.forward_embedded(&x)?;
        dev = dev.max(a.probs.max_abs_diff(&b.probs)?);
        logit_dev = logit_dev.max(a.logits.max_abs_diff(&b.logits)?);
    }
    Ok(TheoremCheck {
        max_deviation: dev,
        max_logit_deviation: logit_dev,
        trials,
    })
}

/// Random Formal-mode model with `N(0, 1/D)` weights and `N(0, 0.1²)` biases.
pub fn random_formal_model(layers: usize, heads: usize, dim: usize, max_seq_len: usize, rng: &mut Rng) -> Result<Model> {
    let cfg = crate::config::ModelConfig::formal(layers, heads, dim, max_seq_len);
    let mut params = ModelParams::init(&cfg, rng, 1.0 / (dim as f64).sqrt());
    for layer in &mut params.layers {
        layer.b1 = rng.normal_tensor(&[dim], 0.1);
        layer.b2 = rng.normal_tensor(&[dim], 0.1);
    }
    Model::new(cfg, params)
}

#[derive(Debug, Clone)]
pub struct LoftqResult {
    /// Fake-quantized base weight.
    pub quantized: Tensor,
    pub adapter: LoraAdapter,
    /// `‖W − Q − AB‖_F` after each iteration.
    pub residuals: Vec<f64>,
}

/// Alternates `Q = fake_quant(W − AB)` and `AB = LRA_r(W − Q)`.
///
/// The quantization grid is fixed from `max|W|` so each Q step is the exact
/// nearest-grid-point projection.
pub fn loftq_init(w: &Tensor, bits: u32, r: usize, iters: usize) -> Result<LoftqResult> {
    if iters == 0 {
        return Err(Error::InvalidConfig("loftq needs at least one iteration".into()));
    }
    let grid = [Range::symmetric(w.max_abs())];
    let mut low = Tensor::zeros(w.shape());
    let mut q = w.clone();
    let mut residuals = Vec::with_capacity(iters);
    let mut adapter = LoraAdapter::zeros("", w.rows(), w.cols(), r.max(1), r.max(1) as f64);
    for _ in 0..iters {
        q = fake_quant(&w.sub(&low)?, bits, &grid, true)?;
        adapter = LoraAdapter::from_delta("", &w.sub(&q)?, r)?;
        low = adapter.delta();
        residuals.push(w.sub(&q)?.sub(&low)?.frobenius_norm());
    }
    Ok(LoftqResult {
        quantized: q,
        adapter,
        residuals,
    })
}
