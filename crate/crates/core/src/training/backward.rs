//! Reverse-mode gradients of the forward pass, written out by hand.

use crate::attention::activation_backward;
use crate::config::{AttentionVariant, BlockMode};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, LayerNormCache, LayerNormParams, Model, ModelParams};
use crate::tensor::Tensor;

use super::mlm::MlmBatch;

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean cross-entropy over masked positions.
    pub loss: f64,
    pub grads: ModelParams,
    pub n_masked: usize,
}

/// `−log p_y` for one column of logits under the given output activation.
pub fn neg_log_prob(variant: AttentionVariant, logits: &[f64], y: usize) -> f64 {
    let (m, extra) = match variant {
        AttentionVariant::VanillaSoftmax => (logits.iter().copied().fold(f64::NEG_INFINITY, f64::max), 0.0),
        AttentionVariant::Softmax1 => {
            let m = logits.iter().copied().fold(0.0_f64, f64::max);
            (m, (-m).exp())
        }
    };
    let lse = m + (extra + logits.iter().map(|z| (z - m).exp()).sum::<f64>()).ln();
    lse - logits[y]
}

/// Mean masked-position cross-entropy and its gradient for every parameter.
pub fn loss_and_grads(model: &Model, batch: &MlmBatch) -> Result<LossAndGrads> {
    let n_masked = batch.n_masked();
    if n_masked == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let act = model.output_activation();
    let norm = 1.0 / n_masked as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for (input, labels) in batch.inputs.iter().zip(&batch.labels) {
        if labels.iter().all(Option::is_none) {
            continue;
        }
        let x = model.embed(input)?;
        let (logits, cache) = model.run(x, Some(input.clone()), None)?;
        let mut d_logits = Tensor::zeros(logits.shape());
        for (j, label) in labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            let col = logits.column(j);
            loss += neg_log_prob(act, &col, y) * norm;
            let p = crate::attention::activate(act, &col);
            for (i, pi) in p.iter().enumerate() {
                *d_logits.at_mut(i, j) = (pi - if i == y { 1.0 } else { 0.0 }) * norm;
            }
        }
        grads.w_out.axpy(1.0, &d_logits.matmul_t(&cache.hidden)?)?;
        let d_hidden = model.params.w_out.t_matmul(&d_logits)?;
        backward_hidden(model, &cache, d_hidden, &mut grads)?;
    }
    Ok(LossAndGrads { loss, grads, n_masked })
}

/// Mean masked-position loss without gradients.
pub fn mlm_loss(model: &Model, batch: &MlmBatch) -> Result<f64> {
    let n_masked = batch.n_masked();
    if n_masked == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let act = model.output_activation();
    let mut loss = 0.0;
    for (input, labels) in batch.inputs.iter().zip(&batch.labels) {
        if labels.iter().all(Option::is_none) {
            continue;
        }
        let logits = model.forward(input)?.logits;
        for (j, label) in labels.iter().enumerate() {
            if let Some(y) = *label {
                loss += neg_log_prob(act, &logits.column(j), y);
            }
        }
    }
    Ok(loss / n_masked as f64)
}

fn layer_norm_backward(c: &LayerNormCache, p: &LayerNormParams, dy: &Tensor, g: &mut LayerNormParams) -> Tensor {
    let (d, n) = (dy.rows(), dy.cols());
    let gamma = p.gamma.data();
    let mut dx = Tensor::zeros(&[d, n]);
    let mut dxhat = vec![0.0; d];
    for j in 0..n {
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
        for i in 0..d {
            let (dyv, xh) = (dy.at(i, j), c.xhat.at(i, j));
            g.gamma.data_mut()[i] += dyv * xh;
            g.beta.data_mut()[i] += dyv;
            dxhat[i] = gamma[i] * dyv;
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for i in 0..d {
            *dx.at_mut(i, j) = c.inv_std[j] * (dxhat[i] - mean_dxhat - c.xhat.at(i, j) * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_row_sums(bias_grad: &mut Tensor, d: &Tensor) {
    for (g, s) in bias_grad.data_mut().iter_mut().zip(d.row_sums()) {
        *g += s;
    }
}

/// Backpropagates `d_hidden` (gradient w.r.t. the final hidden state) through
/// the block stack and the embedding, accumulating into `grads`.
pub(crate) fn backward_hidden(model: &Model, cache: &ForwardCache, d_hidden: Tensor, grads: &mut ModelParams) -> Result<()> {
    let cfg = &model.config;
    let p = &model.params;
    let mut dz = match (&cache.final_ln, &p.final_ln) {
        (Some(c), Some(lp)) => layer_norm_backward(c, lp, &d_hidden, grads.final_ln.as_mut().expect("same layout")),
        _ => d_hidden,
    };
    let scale = cfg.score_scale();
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let lg = &mut grads.layers[l];

        // FFN: ffn_out = W2·relu(W1·ffn_in + b1) + b2.
        let d_ffn_out = &dz;
        lg.w2.axpy(1.0, &d_ffn_out.matmul_t(&lc.hidden)?)?;
        add_row_sums(&mut lg.b2, d_ffn_out);
        let mut d_pre = lp.w2.t_matmul(d_ffn_out)?;
        for (dv, pre) in d_pre.data_mut().iter_mut().zip(lc.pre_act.data()) {
            if *pre <= 0.0 {
                *dv = 0.0;
            }
        }
        lg.w1.axpy(1.0, &d_pre.matmul_t(&lc.ffn_in)?)?;
        add_row_sums(&mut lg.b1, &d_pre);
        let d_ffn_in = lp.w1.t_matmul(&d_pre)?;

        // Gradient w.r.t. the attention output (and, in Practical mode, the
        // residual stream before the FFN).
        let d_attn_out = match cfg.block_mode {
            BlockMode::Practical => {
                let ln2 = lc.ln2.as_ref().expect("practical caches ln2");
                let mut d_resid = dz.clone();
                d_resid.axpy(1.0, &layer_norm_backward(ln2, lp.ln2.as_ref().expect("ln2"), &d_ffn_in, lg.ln2.as_mut().expect("ln2")))?;
                d_resid
            }
            BlockMode::Formal => d_ffn_in,
        };

        let mut d_attn_in = Tensor::zeros(lc.attn_in.shape());
        for (h, tr) in lc.heads.iter().enumerate() {
            let hp = &lp.heads[h];
            let hg = &mut lg.heads[h];
            hg.wo.axpy(1.0, &d_attn_out.matmul_t(&tr.mixed)?)?;
            let d_mixed = hp.wo.t_matmul(&d_attn_out)?;
            let d_v = d_mixed.matmul_t(&tr.probs)?;
            let d_probs = tr.v.t_matmul(&d_mixed)?;
            let mut d_scores = activation_backward(&tr.probs, &d_probs);
            if scale != 1.0 {
                d_scores = d_scores.scale(scale);
            }
            let d_q = tr.k.matmul(&d_scores)?;
            let d_k = tr.q.matmul_t(&d_scores)?;
            hg.wq.axpy(1.0, &d_q.matmul_t(&lc.attn_in)?)?;
            hg.wk.axpy(1.0, &d_k.matmul_t(&lc.attn_in)?)?;
            hg.wv.axpy(1.0, &d_v.matmul_t(&lc.attn_in)?)?;
            d_attn_in.axpy(1.0, &hp.wq.t_matmul(&d_q)?)?;
            d_attn_in.axpy(1.0, &hp.wk.t_matmul(&d_k)?)?;
            d_attn_in.axpy(1.0, &hp.wv.t_matmul(&d_v)?)?;
        }

        dz = match cfg.block_mode {
            BlockMode::Practical => {
                let ln1 = lc.ln1.as_ref().expect("practical caches ln1");
                let mut d_in = d_attn_out;
                d_in.axpy(1.0, &layer_norm_backward(ln1, lp.ln1.as_ref().expect("ln1"), &d_attn_in, lg.ln1.as_mut().expect("ln1")))?;
                d_in
            }
            BlockMode::Formal => d_attn_in,
        };
    }

    if let Some(tokens) = &cache.tokens {
        for (j, &t) in tokens.iter().enumerate() {
            for i in 0..cfg.model_dim {
                *grads.embed.at_mut(i, t) += dz.at(i, j);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::Rng;
    use crate::training::mlm::MlmBatch;

    fn small_config(variant: AttentionVariant, mode: BlockMode) -> ModelConfig {
        let mut cfg = ModelConfig::toy(variant);
        cfg.model_dim = 8;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.ffn_dim = 16;
        cfg.vocab_size = 12;
        cfg.max_seq_len = 16;
        cfg.block_mode = mode;
        if mode == BlockMode::Formal {
            cfg.alibi = false;
            cfg.ffn_dim = 8;
            cfg.output_softmax1 = true;
        }
        cfg
    }

    fn batch() -> MlmBatch {
        MlmBatch {
            inputs: vec![vec![2, 5, 4, 7, 9, 3], vec![2, 11, 10, 4, 3]],
            labels: vec![
                vec![None, None, Some(6), None, Some(9), None],
                vec![None, Some(8), None, Some(5), None],
            ],
        }
    }

    /// Largest per-tensor relative error between analytic and central
    /// finite-difference gradients.
    fn gradient_error(model: &Model, b: &MlmBatch) -> f64 {
        let analytic = loss_and_grads(model, b).unwrap().grads.to_named();
        let named = model.params.to_named();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, t) in &named {
            let mut max_diff: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut p = named.clone();
                    p.get_mut(name).unwrap().data_mut()[idx] += delta;
                    let m = Model::new(model.config.clone(), ModelParams::from_named(&model.config, &p).unwrap()).unwrap();
                    mlm_loss(&m, b).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[name].data()[idx];
                max_diff = max_diff.max((a - numeric).abs());
                max_abs = max_abs.max(a.abs()).max(numeric.abs());
            }
            worst = worst.max(max_diff / max_abs.max(1e-6));
        }
        worst
    }

    #[test]
    fn finite_difference_all_configurations() {
        for variant in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
            for mode in [BlockMode::Practical, BlockMode::Formal] {
                let cfg = small_config(variant, mode);
                let model = Model::init(cfg, &mut Rng::new(21), 0.5).unwrap();
                let err = gradient_error(&model, &batch());
                assert!(err < 1e-5, "{variant:?} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_model_loss_is_log_vocab() {
        let cfg = small_config(AttentionVariant::VanillaSoftmax, BlockMode::Practical);
        let model = Model::new(cfg.clone(), ModelParams::zero_weights(&cfg)).unwrap();
        let out = loss_and_grads(&model, &batch()).unwrap();
        assert!((out.loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
        assert_eq!(out.n_masked, 4);
    }

    #[test]
    fn unused_embeddings_get_zero_gradient() {
        let cfg = small_config(AttentionVariant::Softmax1, BlockMode::Practical);
        let model = Model::init(cfg, &mut Rng::new(3), 0.3).unwrap();
        let g = loss_and_grads(&model, &batch()).unwrap().grads;
        for t in [0, 1, 6, 8] {
            assert!(g.embed.column(t).iter().all(|v| *v == 0.0), "token {t}");
        }
        assert!(g.embed.column(5).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn no_masked_positions() {
        let cfg = small_config(AttentionVariant::Softmax1, BlockMode::Practical);
        let model = Model::init(cfg, &mut Rng::new(3), 0.3).unwrap();
        let b = MlmBatch {
            inputs: vec![vec![2, 5, 3]],
            labels: vec![vec![None; 3]],
        };
        assert!(matches!(loss_and_grads(&model, &b), Err(Error::NoMaskedPositions)));
    }

    #[test]
    fn neg_log_prob_matches_direct_formula() {
        let z = [0.3, -1.2, 2.0];
        for variant in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
            let p = crate::attention::activate(variant, &z);
            for y in 0..3 {
                assert!((neg_log_prob(variant, &z, y) + p[y].ln()).abs() < 1e-12);
            }
        }
    }
}
