//! Outlier statistics over activation traces: kurtosis and ∞-norm.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Model, ProbeKind};

/// `n · Σ(x − x̄)⁴ / (Σ(x − x̄)²)²`, the population (non-excess) kurtosis.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFewValues(n));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in x {
        let d2 = (v - mean) * (v - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    if m2 < 1e-30 {
        return Err(Error::DegenerateSample);
    }
    Ok(n as f64 * m4 / (m2 * m2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStat {
    pub probe_name: String,
    pub kind: ProbeKind,
    /// `None` when the pooled sample is degenerate.
    pub kurtosis: Option<f64>,
    pub inf_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub model_id: String,
    pub n_sequences: usize,
    pub per_probe: Vec<ProbeStat>,
    /// Mean kurtosis over FFN and LayerNorm probes with a defined value.
    pub avg_kurtosis: Option<f64>,
    pub max_inf_norm: f64,
}

impl OutlierReport {
    pub fn from_probes(model_id: impl Into<String>, n_sequences: usize, per_probe: Vec<ProbeStat>) -> Self {
        let valid: Vec<f64> = per_probe
            .iter()
            .filter(|p| matches!(p.kind, ProbeKind::FfnOutput | ProbeKind::LayernormOutput))
            .filter_map(|p| p.kurtosis)
            .collect();
        let avg_kurtosis =
            (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        let max_inf_norm = per_probe
            .iter()
            .filter(|p| p.kind != ProbeKind::AttentionProbs)
            .map(|p| p.inf_norm)
            .fold(0.0, f64::max);
        Self {
            model_id: model_id.into(),
            n_sequences,
            per_probe,
            avg_kurtosis,
            max_inf_norm,
        }
    }

    /// One row per probe: `probe,kind,kurtosis,inf_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe,kind,kurtosis,inf_norm\n");
        for p in &self.per_probe {
            let kind = serde_json::to_value(p.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let k = p.kurtosis.map(|k| k.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", p.probe_name, kind, k, p.inf_norm));
        }
        out
    }
}

/// Runs the model over `sample`, pools each probe's values across all
/// sequences, and reports kurtosis and ∞-norm per FFN/LayerNorm probe.
pub fn collect_report(model: &Model, sample: &[Vec<usize>], model_id: &str) -> Result<OutlierReport> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut pooled: Vec<(String, ProbeKind, Vec<f64>, f64)> = Vec::new();
    for seq in sample {
        let out = model.forward(seq)?;
        for probe in out.trace.probes {
            if probe.kind == ProbeKind::AttentionProbs {
                continue;
            }
            let norm = probe.tensor.max_abs();
            match pooled.iter_mut().find(|p| p.0 == probe.name) {
                Some(entry) => {
                    entry.2.extend_from_slice(probe.tensor.data());
                    entry.3 = entry.3.max(norm);
                }
                None => pooled.push((probe.name, probe.kind, probe.tensor.into_data(), norm)),
            }
        }
    }
    let per_probe = pooled
        .into_iter()
        .map(|(name, kind, values, inf_norm)| ProbeStat {
            probe_name: name,
            kind,
            kurtosis: kurtosis(&values).ok(),
            inf_norm,
        })
        .collect();
    Ok(OutlierReport::from_probes(model_id, sample.len(), per_probe))
}

pub fn collect_report_from_checkpoint(
    ckpt: &Checkpoint,
    sample: &[Vec<usize>],
    model_id: &str,
) -> Result<OutlierReport> {
    collect_report(&Model::from_checkpoint(ckpt)?, sample, model_id)
}
