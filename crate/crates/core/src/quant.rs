//! Simulated post-training quantization.
//!
//! Weights are fake-quantized once when a [`QuantizedModel`] is built;
//! activations are fake-quantized on the fly at every linear-layer input and
//! at the raw attention scores, using ranges from a calibration pass.
//! Attention probabilities are left in full precision.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardHook, Model, ModelOutput, Site, SiteKind};
use crate::tensor::Tensor;

/// Floor applied to statistics before SmoothQuant-style migration.
pub const STAT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub granularity: Granularity,
    /// Symmetric activation quantization; weights are always symmetric.
    pub symmetric: bool,
    /// Migration strength; `None` disables SmoothQuant-style migration.
    pub smoothquant_alpha: Option<f64>,
}

impl QuantSpec {
    /// Plain min-max W/A quantization at the given widths.
    pub fn traditional(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
            granularity: Granularity::PerTensor,
            symmetric: true,
            smoothquant_alpha: None,
        }
    }

    pub fn smoothquant(weight_bits: u32, act_bits: u32, alpha: f64) -> Self {
        Self {
            smoothquant_alpha: Some(alpha),
            ..Self::traditional(weight_bits, act_bits)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits] {
            if ![4, 6, 8, 16].contains(&b) {
                return Err(Error::InvalidBits(b));
            }
        }
        if let Some(a) = self.smoothquant_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::AlphaOutOfRange(a));
            }
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.weight_bits == 16 && self.act_bits == 16 && self.smoothquant_alpha.is_none()
    }
}

/// Bit pair in the `8W/8A` notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitPair {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl FromStr for BitPair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || format!("expected bit pair like 8W/8A, got `{s}`");
        let (w, a) = s.split_once('/').ok_or_else(err)?;
        let w = w.strip_suffix(['W', 'w']).ok_or_else(err)?;
        let a = a.strip_suffix(['A', 'a']).ok_or_else(err)?;
        let pair = BitPair {
            weight_bits: w.parse().map_err(|_| err())?,
            act_bits: a.parse().map_err(|_| err())?,
        };
        for b in [pair.weight_bits, pair.act_bits] {
            if ![4, 6, 8, 16].contains(&b) {
                return Err(format!("unsupported bit width {b} in `{s}`"));
            }
        }
        Ok(pair)
    }
}

impl fmt::Display for BitPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}W/{}A", self.weight_bits, self.act_bits)
    }
}

/// Observed value range of one channel (or of a whole tensor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn absmax(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }

    pub fn symmetric(absmax: f64) -> Self {
        Self {
            min: -absmax,
            max: absmax,
        }
    }

    fn merge(&mut self, other: Range) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if [4, 6, 8].contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBits(bits))
    }
}

/// Symmetric fake quantization of one value:
/// `clamp(round_half_even(x / s), −q, q) · s` with `q = 2^(bits−1) − 1`,
/// `s = absmax / q`.
pub fn fake_quant_value(x: f64, bits: u32, absmax: f64) -> Result<f64> {
    check_bits(bits)?;
    if absmax <= 0.0 {
        return if x == 0.0 { Ok(0.0) } else { Err(Error::ZeroRange) };
    }
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let scale = absmax / qmax;
    let q = (x / scale).round_ties_even().clamp(-qmax, qmax);
    Ok(q * scale)
}

/// Asymmetric (affine) fake quantization over `[min, max]`, widened to
/// include zero so that zero stays exact.
pub fn fake_quant_affine_value(x: f64, bits: u32, range: Range) -> Result<f64> {
    check_bits(bits)?;
    let (lo, hi) = (range.min.min(0.0), range.max.max(0.0));
    if hi - lo <= 0.0 {
        return if x == 0.0 { Ok(0.0) } else { Err(Error::ZeroRange) };
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let scale = (hi - lo) / levels;
    let zero_point = (-lo / scale).round_ties_even();
    let q = ((x / scale).round_ties_even() + zero_point).clamp(0.0, levels);
    Ok((q - zero_point) * scale)
}

/// Fake-quantizes `x` with one range for the whole tensor (`ranges.len() == 1`)
/// or one range per row.
pub fn fake_quant(x: &Tensor, bits: u32, ranges: &[Range], symmetric: bool) -> Result<Tensor> {
    check_bits(bits)?;
    let rows = x.rows().max(1);
    let per_row = match ranges.len() {
        1 => false,
        n if n == rows && x.is_matrix() => true,
        n => {
            return Err(Error::ShapeMismatch(format!(
                "{n} ranges for tensor of shape {:?}",
                x.shape()
            )))
        }
    };
    let cols = if x.is_matrix() { x.cols() } else { x.len() };
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let r = if per_row { ranges[idx / cols] } else { ranges[0] };
        *v = if symmetric {
            fake_quant_value(*v, bits, r.absmax())?
        } else {
            fake_quant_affine_value(*v, bits, r)?
        };
    }
    Ok(out)
}

/// Symmetric fake quantization with a per-tensor absmax taken from the data.
pub fn fake_quant_weight(w: &Tensor, bits: u32, granularity: Granularity) -> Result<Tensor> {
    let ranges: Vec<Range> = match granularity {
        Granularity::PerTensor => vec![Range::symmetric(w.max_abs())],
        Granularity::PerChannel => (0..w.rows())
            .map(|i| Range::symmetric(w.row(i).iter().fold(0.0, |m, v| m.max(v.abs()))))
            .collect(),
    };
    fake_quant(w, bits, &ranges, true)
}

/// Per-site activation ranges collected over a calibration sample. Each
/// site holds one range per channel (row), except score sites which hold a
/// single per-tensor range.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub sites: BTreeMap<String, Vec<Range>>,
    pub n_sequences: usize,
}

impl CalibrationStats {
    pub fn get(&self, site: &Site) -> Result<&[Range]> {
        self.sites
            .get(&site.name())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingStats(site.name()))
    }

    /// Per-channel absolute maxima of a site.
    pub fn channel_absmax(&self, site: &Site) -> Result<Vec<f64>> {
        Ok(self.get(site)?.iter().map(Range::absmax).collect())
    }

    /// Whole-tensor absolute maximum of a site.
    pub fn tensor_absmax(&self, site: &Site) -> Result<f64> {
        Ok(self.channel_absmax(site)?.into_iter().fold(0.0, f64::max))
    }

    fn observe(&mut self, site: Site, x: &Tensor) {
        let per_tensor = matches!(site.kind, SiteKind::Scores(_));
        let observed: Vec<Range> = if per_tensor {
            let (lo, hi) = min_max(x.data());
            vec![Range { min: lo, max: hi }]
        } else {
            (0..x.rows())
                .map(|i| {
                    let (lo, hi) = min_max(x.row(i));
                    Range { min: lo, max: hi }
                })
                .collect()
        };
        match self.sites.get_mut(&site.name()) {
            Some(existing) => {
                debug_assert_eq!(existing.len(), observed.len());
                for (e, o) in existing.iter_mut().zip(observed) {
                    e.merge(o);
                }
            }
            None => {
                self.sites.insert(site.name(), observed);
            }
        }
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        })
}

struct Calibrator<'a>(&'a mut CalibrationStats);

impl ForwardHook for Calibrator<'_> {
    fn on_activation(&mut self, site: Site, x: &mut Tensor) {
        self.0.observe(site, x);
    }
}

/// Running min/max of every activation site over `sample`, in sample order.
pub fn calibrate(model: &Model, sample: &[Vec<usize>]) -> Result<CalibrationStats> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut stats = CalibrationStats::default();
    for seq in sample {
        model.forward_hooked(seq, Some(&mut Calibrator(&mut stats)))?;
    }
    stats.n_sequences = sample.len();
    Ok(stats)
}

/// Per-channel migration scales `s_j = max|X_j|^α / max|W_j|^(1−α)`.
pub fn smoothquant_scales(x_absmax: &[f64], w_absmax: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    if x_absmax.len() != w_absmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation channels vs {} weight channels",
            x_absmax.len(),
            w_absmax.len()
        )));
    }
    x_absmax
        .iter()
        .zip(w_absmax)
        .map(|(x, w)| {
            let (x, w) = (x.max(STAT_FLOOR), w.max(STAT_FLOOR));
            let s = x.powf(alpha) / w.powf(1.0 - alpha);
            if s > 0.0 && s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonPositiveStat)
            }
        })
        .collect()
}

/// Scales column `j` of `w` by `s[j]` (the weight side of migration).
pub fn scale_columns(w: &mut Tensor, s: &[f64]) {
    let cols = w.cols();
    for (idx, v) in w.data_mut().iter_mut().enumerate() {
        *v *= s[idx % cols];
    }
}

/// Divides row `j` of `x` by `s[j]` (the activation side of migration).
pub fn unscale_rows(x: &mut Tensor, s: &[f64]) {
    let cols = x.cols();
    for (idx, v) in x.data_mut().iter_mut().enumerate() {
        *v /= s[idx / cols];
    }
}

/// Linear-input sites of a model together with the weights consuming them.
fn linear_sites(model: &Model) -> Vec<Site> {
    let mut sites = Vec::new();
    for l in 0..model.config.layers {
        for kind in [
            SiteKind::QkvIn,
            SiteKind::OutProjIn,
            SiteKind::Ffn1In,
            SiteKind::Ffn2In,
        ] {
            sites.push(Site {
                layer: Some(l),
                kind,
            });
        }
    }
    sites.push(Site {
        layer: None,
        kind: SiteKind::HeadIn,
    });
    sites
}

/// Column-wise absmax over every weight matrix consuming `site`.
fn consumer_absmax(model: &Model, site: Site) -> Vec<f64> {
    let col_absmax = |w: &Tensor, out: &mut [f64]| {
        for i in 0..w.rows() {
            for (j, o) in out.iter_mut().enumerate() {
                *o = o.max(w.at(i, j).abs());
            }
        }
    };
    let p = &model.params;
    match (site.layer, site.kind) {
        (Some(l), SiteKind::QkvIn) => {
            let mut out = vec![0.0; model.config.model_dim];
            for hp in &p.layers[l].heads {
                for w in [&hp.wq, &hp.wk, &hp.wv] {
                    col_absmax(w, &mut out);
                }
            }
            out
        }
        (Some(l), SiteKind::OutProjIn) => {
            let mut out = Vec::new();
            for hp in &p.layers[l].heads {
                let mut part = vec![0.0; hp.wo.cols()];
                col_absmax(&hp.wo, &mut part);
                out.extend(part);
            }
            out
        }
        (Some(l), SiteKind::Ffn1In) => {
            let mut out = vec![0.0; p.layers[l].w1.cols()];
            col_absmax(&p.layers[l].w1, &mut out);
            out
        }
        (Some(l), SiteKind::Ffn2In) => {
            let mut out = vec![0.0; p.layers[l].w2.cols()];
            col_absmax(&p.layers[l].w2, &mut out);
            out
        }
        (None, SiteKind::HeadIn) => {
            let mut out = vec![0.0; p.w_out.cols()];
            col_absmax(&p.w_out, &mut out);
            out
        }
        _ => unreachable!("not a linear input site"),
    }
}

/// Multiplies the columns of every weight consuming `site` by `s`.
fn fold_into_consumers(model: &mut Model, site: Site, s: &[f64]) {
    let p = &mut model.params;
    match (site.layer, site.kind) {
        (Some(l), SiteKind::QkvIn) => {
            for hp in &mut p.layers[l].heads {
                scale_columns(&mut hp.wq, s);
                scale_columns(&mut hp.wk, s);
                scale_columns(&mut hp.wv, s);
            }
        }
        (Some(l), SiteKind::OutProjIn) => {
            let mut offset = 0;
            for hp in &mut p.layers[l].heads {
                let w = hp.wo.cols();
                scale_columns(&mut hp.wo, &s[offset..offset + w]);
                offset += w;
            }
        }
        (Some(l), SiteKind::Ffn1In) => scale_columns(&mut p.layers[l].w1, s),
        (Some(l), SiteKind::Ffn2In) => scale_columns(&mut p.layers[l].w2, s),
        (None, SiteKind::HeadIn) => scale_columns(&mut p.w_out, s),
        _ => unreachable!("not a linear input site"),
    }
}

/// A model with fake-quantized weights that also quantizes activations at
/// run time.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: Model,
    pub spec: QuantSpec,
    /// Migration scales per linear-input site.
    pub smoothing: BTreeMap<Site, Vec<f64>>,
    /// Activation ranges per site, already divided by the migration scales.
    pub act_ranges: BTreeMap<Site, Vec<Range>>,
}

/// Absmax floor for activation ranges that were all-zero during calibration.
const RANGE_FLOOR: f64 = 1e-12;

pub fn quantize_model(model: &Model, spec: &QuantSpec, stats: &CalibrationStats) -> Result<QuantizedModel> {
    spec.validate()?;
    let mut qmodel = model.clone();
    let mut smoothing = BTreeMap::new();
    let mut act_ranges = BTreeMap::new();
    if spec.is_passthrough() {
        return Ok(QuantizedModel {
            model: qmodel,
            spec: spec.clone(),
            smoothing,
            act_ranges,
        });
    }

    for site in linear_sites(model) {
        let channels = stats.get(&site)?.to_vec();
        let s = match spec.smoothquant_alpha {
            Some(alpha) => {
                let x_absmax: Vec<f64> = channels.iter().map(Range::absmax).collect();
                let s = smoothquant_scales(&x_absmax, &consumer_absmax(model, site), alpha)?;
                fold_into_consumers(&mut qmodel, site, &s);
                smoothing.insert(site, s.clone());
                Some(s)
            }
            None => None,
        };
        let mut ranges: Vec<Range> = channels
            .iter()
            .enumerate()
            .map(|(j, r)| match &s {
                Some(s) => Range {
                    min: r.min / s[j],
                    max: r.max / s[j],
                },
                None => *r,
            })
            .collect();
        if spec.granularity == Granularity::PerTensor {
            let mut all = ranges[0];
            ranges.iter().for_each(|r| all.merge(*r));
            ranges = vec![all];
        }
        for r in &mut ranges {
            r.min = r.min.min(-RANGE_FLOOR * f64::from(spec.symmetric as u8));
            r.max = r.max.max(RANGE_FLOOR);
        }
        act_ranges.insert(site, ranges);
    }
    for l in 0..model.config.layers {
        for h in 0..model.config.heads {
            let site = Site {
                layer: Some(l),
                kind: SiteKind::Scores(h),
            };
            let mut r = stats.get(&site)?[0];
            r.max = r.max.max(RANGE_FLOOR);
            act_ranges.insert(site, vec![r]);
        }
    }

    if spec.weight_bits != 16 {
        let (bits, gran) = (spec.weight_bits, spec.granularity);
        let p = &mut qmodel.params;
        let quantize = |w: &mut Tensor| -> Result<()> {
            *w = fake_quant_weight(w, bits, gran)?;
            Ok(())
        };
        for layer in &mut p.layers {
            for hp in &mut layer.heads {
                quantize(&mut hp.wq)?;
                quantize(&mut hp.wk)?;
                quantize(&mut hp.wv)?;
                quantize(&mut hp.wo)?;
            }
            quantize(&mut layer.w1)?;
            quantize(&mut layer.w2)?;
        }
        quantize(&mut p.w_out)?;
    }
    Ok(QuantizedModel {
        model: qmodel,
        spec: spec.clone(),
        smoothing,
        act_ranges,
    })
}

struct ActQuantizer<'a> {
    q: &'a QuantizedModel,
    error: Option<Error>,
}

impl ForwardHook for ActQuantizer<'_> {
    fn on_activation(&mut self, site: Site, x: &mut Tensor) {
        if let Some(s) = self.q.smoothing.get(&site) {
            unscale_rows(x, s);
        }
        if self.q.spec.act_bits == 16 || self.error.is_some() {
            return;
        }
        let Some(ranges) = self.q.act_ranges.get(&site) else {
            self.error = Some(Error::MissingStats(site.name()));
            return;
        };
        match fake_quant(x, self.q.spec.act_bits, ranges, self.q.spec.symmetric) {
            Ok(qx) => *x = qx,
            Err(e) => self.error = Some(e),
        }
    }
}

impl QuantizedModel {
    pub fn forward(&self, tokens: &[usize]) -> Result<ModelOutput> {
        if self.spec.is_passthrough() {
            return self.model.forward(tokens);
        }
        let mut hook = ActQuantizer { q: self, error: None };
        let out = self.model.forward_hooked(tokens, Some(&mut hook))?;
        match hook.error {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDeviation {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub n_values: usize,
}

/// Elementwise |quantized − baseline| logit statistics over `sample`.
pub fn logit_deviation(baseline: &Model, quantized: &QuantizedModel, sample: &[Vec<usize>]) -> Result<LogitDeviation> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let (mut sum, mut max, mut n) = (0.0, 0.0_f64, 0usize);
    for seq in sample {
        let a = baseline.forward(seq)?.logits;
        let b = quantized.forward(seq)?.logits;
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            sum += d;
            max = max.max(d);
            n += 1;
        }
    }
    Ok(LogitDeviation {
        mean_abs: sum / n as f64,
        max_abs: max,
        n_values: n,
    })
}
