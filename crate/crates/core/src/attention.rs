//! Softmax / Softmax₁ activations, ALiBi biases and multi-head attention.
//!
//! Attention matrices are laid out key-by-query: entry `(i, j)` is the weight
//! query `j` puts on key `i`, so activations normalize each column.

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `exp(s) / (1 + Σ exp(sᵢ))`.
///
/// The implicit extra logit sits at 0, so stabilization subtracts
/// `max(0, max s)` rather than `max s`.
pub fn softmax1(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(0.0_f64, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let denom = (-m).exp() + exps.iter().sum::<f64>();
    exps.into_iter().map(|e| e / denom).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

pub fn activate(variant: AttentionVariant, scores: &[f64]) -> Vec<f64> {
    match variant {
        AttentionVariant::VanillaSoftmax => softmax(scores),
        AttentionVariant::Softmax1 => softmax1(scores),
    }
}

/// Applies the activation to every column of `scores`.
pub fn activate_columns(variant: AttentionVariant, scores: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(scores.shape());
    for j in 0..scores.cols() {
        out.set_column(j, &activate(variant, &scores.column(j)));
    }
    out
}

/// Vector-Jacobian product of a column activation.
///
/// Softmax and Softmax₁ share the Jacobian form `pᵢ(δᵢⱼ − pⱼ)`, so given the
/// activation output `probs` the backward pass is the same for both.
pub fn activation_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, cols) = (probs.rows(), probs.cols());
    let mut out = Tensor::zeros(&[n, cols]);
    for j in 0..cols {
        let mut dot = 0.0;
        for i in 0..n {
            dot += probs.at(i, j) * grad_out.at(i, j);
        }
        for i in 0..n {
            *out.at_mut(i, j) = probs.at(i, j) * (grad_out.at(i, j) - dot);
        }
    }
    out
}

/// Bias row for token `i` in a length-`len` sequence: entry `j` is `−m·|j − i|`.
pub fn alibi_bias_row(i: usize, len: usize, slope: f64) -> Result<Vec<f64>> {
    if i >= len {
        return Err(Error::IndexOutOfRange { index: i, len });
    }
    Ok((0..len)
        .map(|j| -slope * (j as f64 - i as f64).abs())
        .collect())
}

/// Geometric slope schedule `m_h = 2^(−8h/H)`, `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64))
        .collect()
}

/// Symmetric `len × len` bias matrix with zero diagonal.
pub fn alibi_matrix(len: usize, slope: f64) -> Tensor {
    let mut t = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in 0..len {
            *t.at_mut(i, j) = -slope * (j as f64 - i as f64).abs();
        }
    }
    t
}

/// One attention head. Projections map the `D`-dim input to the head width;
/// `wo` maps back to `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl HeadParams {
    pub fn zeros(model_dim: usize, head_dim: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[head_dim, model_dim]),
            wk: Tensor::zeros(&[head_dim, model_dim]),
            wv: Tensor::zeros(&[head_dim, model_dim]),
            wo: Tensor::zeros(&[model_dim, head_dim]),
        }
    }
}

/// Intermediate values of one head, kept for diagnostics and backprop.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Pre-activation scores (key × query), after scaling and biases.
    pub scores: Tensor,
    pub probs: Tensor,
    /// `v · probs`, the head output before `wo`.
    pub mixed: Tensor,
}

/// Hook for rewriting the score matrix before the activation (used to
/// fake-quantize it). Receives the head index.
pub type ScoreHook<'a> = &'a mut dyn FnMut(usize, &mut Tensor);

/// `Σ_h Wo_h · Wv_h Z · act(scale · (Wk_h Z)ᵀ (Wq_h Z) + bias_h)`.
///
/// Returns the `D×N` output and per-head traces.
pub fn attention_forward(
    z: &Tensor,
    heads: &[HeadParams],
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<HeadTrace>)> {
    attention_forward_hooked(z, heads, cfg, None)
}

pub(crate) fn attention_forward_hooked(
    z: &Tensor,
    heads: &[HeadParams],
    cfg: &ModelConfig,
    mut score_hook: Option<ScoreHook<'_>>,
) -> Result<(Tensor, Vec<HeadTrace>)> {
    if z.rows() != cfg.model_dim || !z.is_matrix() {
        return Err(Error::ShapeMismatch(format!(
            "attention input {:?}, model_dim {}",
            z.shape(),
            cfg.model_dim
        )));
    }
    if heads.len() != cfg.heads {
        return Err(Error::ShapeMismatch(format!(
            "{} heads given, config has {}",
            heads.len(),
            cfg.heads
        )));
    }
    let n = z.cols();
    let scale = cfg.score_scale();
    let slopes = alibi_slopes(cfg.heads);
    let mut out = Tensor::zeros(&[cfg.model_dim, n]);
    let mut traces = Vec::with_capacity(heads.len());
    for (h, hp) in heads.iter().enumerate() {
        let q = hp.wq.matmul(z)?;
        let k = hp.wk.matmul(z)?;
        let v = hp.wv.matmul(z)?;
        let mut scores = k.t_matmul(&q)?;
        if scale != 1.0 {
            scores = scores.scale(scale);
        }
        if let Some(hook) = score_hook.as_mut() {
            hook(h, &mut scores);
        }
        if cfg.alibi {
            scores.axpy(1.0, &alibi_matrix(n, slopes[h]))?;
        }
        let probs = activate_columns(cfg.variant, &scores);
        let mixed = v.matmul(&probs)?;
        out.axpy(1.0, &hp.wo.matmul(&mixed)?)?;
        traces.push(HeadTrace {
            q,
            k,
            v,
            scores,
            probs,
            mixed,
        });
    }
    Ok((out, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BlockMode;
    use crate::rng::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax1_examples() {
        assert_eq!(softmax1(&[0.0]), vec![0.5]);
        let tiny = softmax1(&[-1e4, -1e4]);
        assert!(tiny.iter().all(|p| p.is_finite() && *p >= 0.0 && *p < 1e-300));
        let p = softmax1(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        assert!(close(&p, &[1.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0], 1e-15));
    }

    #[test]
    fn softmax1_large_scores_stay_finite() {
        let p = softmax1(&[800.0, 799.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p.iter().sum::<f64>() < 1.0 + 1e-15);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0]), vec![1.0]);
        for c in [-50.0, 0.0, 3.5, 1e3] {
            assert!(close(&softmax(&[c; 4]), &[0.25; 4], 1e-15));
        }
        assert!(close(&softmax(&[1f64.ln(), 3f64.ln()]), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn alibi_examples() {
        assert_eq!(
            alibi_bias_row(2, 5, 1.0).unwrap(),
            vec![-2.0, -1.0, 0.0, -1.0, -2.0]
        );
        assert_eq!(alibi_bias_row(0, 1, 3.0).unwrap(), vec![0.0]);
        assert_eq!(
            alibi_bias_row(0, 4, 0.5).unwrap(),
            vec![0.0, -0.5, -1.0, -1.5]
        );
        assert!(matches!(
            alibi_bias_row(4, 4, 1.0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn alibi_slope_schedule() {
        let expected: Vec<f64> = (1..=8).map(|h| 2f64.powi(-h)).collect();
        assert!(close(&alibi_slopes(8), &expected, 1e-15));
        assert!(close(&alibi_slopes(1), &[2f64.powi(-8)], 1e-15));
    }

    #[test]
    fn alibi_matrix_symmetric_zero_diagonal() {
        let b = alibi_matrix(6, 0.3);
        assert_eq!(b, b.transpose());
        assert!((0..6).all(|i| b.at(i, i) == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for variant in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
            let s: Vec<f64> = (0..6).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
            let p = activate(variant, &s);
            let h = 1e-6;
            for k in 0..s.len() {
                let mut sp = s.clone();
                sp[k] += h;
                let mut sm = s.clone();
                sm[k] -= h;
                let (pp, pm) = (activate(variant, &sp), activate(variant, &sm));
                for i in 0..s.len() {
                    let fd = (pp[i] - pm[i]) / (2.0 * h);
                    let an = p[i] * (if i == k { 1.0 } else { 0.0 } - p[k]);
                    assert!((fd - an).abs() < 1e-7, "{variant:?} {i},{k}");
                }
            }
        }
    }

    fn single_head_cfg(variant: AttentionVariant) -> ModelConfig {
        let mut c = ModelConfig::formal(1, 1, 2, 4);
        c.variant = variant;
        c
    }

    #[test]
    fn single_token_zero_scores_halve_value_path() {
        let mut hp = HeadParams::zeros(2, 2);
        hp.wv = Tensor::eye(2);
        hp.wo = Tensor::eye(2);
        let z = Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap();
        let (out1, tr) =
            attention_forward(&z, &[hp.clone()], &single_head_cfg(AttentionVariant::Softmax1))
                .unwrap();
        assert_eq!(tr[0].probs.data(), &[0.5]);
        assert_eq!(out1.data(), &[0.5, -1.0]);
        let (out0, tr) = attention_forward(
            &z,
            &[hp],
            &single_head_cfg(AttentionVariant::VanillaSoftmax),
        )
        .unwrap();
        assert_eq!(tr[0].probs.data(), &[1.0]);
        assert_eq!(out0.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_value_path_gives_zero_output() {
        let mut rng = Rng::new(9);
        let mut hp = HeadParams::zeros(2, 2);
        hp.wq = rng.normal_tensor(&[2, 2], 1.0);
        hp.wk = rng.normal_tensor(&[2, 2], 1.0);
        hp.wo = rng.normal_tensor(&[2, 2], 1.0);
        let z = rng.normal_tensor(&[2, 3], 1.0);
        for v in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
            let (out, _) = attention_forward(&z, &[hp.clone()], &single_head_cfg(v)).unwrap();
            assert!(out.data().iter().all(|x| *x == 0.0));
        }
    }

    /// Scalar-loop transcription with no matrix helpers.
    fn scalar_attention(z: &Tensor, heads: &[HeadParams], cfg: &ModelConfig) -> Vec<Vec<f64>> {
        let (d, n) = (z.rows(), z.cols());
        let slopes = alibi_slopes(heads.len());
        let mut out = vec![vec![0.0; n]; d];
        for (h, hp) in heads.iter().enumerate() {
            let dh = hp.wq.rows();
            let proj = |w: &Tensor, r: usize, col: usize| -> f64 {
                let mut s = 0.0;
                for c in 0..d {
                    s += w.at(r, c) * z.at(c, col);
                }
                s
            };
            for j in 0..n {
                let mut scores = vec![0.0; n];
                for (i, score) in scores.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for r in 0..dh {
                        s += proj(&hp.wk, r, i) * proj(&hp.wq, r, j);
                    }
                    s *= cfg.score_scale();
                    if cfg.alibi {
                        s -= slopes[h] * (i as f64 - j as f64).abs();
                    }
                    *score = s;
                }
                let p = activate(cfg.variant, &scores);
                for (row, out_row) in out.iter_mut().enumerate() {
                    for r in 0..dh {
                        let mut mixed = 0.0;
                        for i in 0..n {
                            mixed += proj(&hp.wv, r, i) * p[i];
                        }
                        out_row[j] += hp.wo.at(row, r) * mixed;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = Rng::new(21);
        for (mode, alibi) in [
            (BlockMode::Formal, false),
            (BlockMode::Practical, false),
            (BlockMode::Practical, true),
        ] {
            for variant in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
                let mut cfg = ModelConfig::formal(1, 2, 4, 8);
                cfg.block_mode = mode;
                cfg.alibi = alibi;
                cfg.variant = variant;
                let dh = cfg.head_dim();
                let heads: Vec<HeadParams> = (0..2)
                    .map(|_| HeadParams {
                        wq: rng.normal_tensor(&[dh, 4], 1.0),
                        wk: rng.normal_tensor(&[dh, 4], 1.0),
                        wv: rng.normal_tensor(&[dh, 4], 1.0),
                        wo: rng.normal_tensor(&[4, dh], 1.0),
                    })
                    .collect();
                let z = rng.normal_tensor(&[4, 3], 1.0);
                let (out, _) = attention_forward(&z, &heads, &cfg).unwrap();
                let oracle = scalar_attention(&z, &heads, &cfg);
                for (i, row) in oracle.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        assert!((out.at(i, j) - v).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
