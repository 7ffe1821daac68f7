//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.98),
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers, one per parameter slot.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over parallel slices of parameters and gradients.
    /// `decay[i]` selects which slots receive weight decay.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [&mut Tensor], grads: &[&Tensor], decay: &[bool]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if decay[slot] { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gv;
                v[k] = b2 * v[k] + (1.0 - b2) * gv * gv;
                let (mh, vh) = (m[k] / c1, v[k] / c2);
                *pv -= lr * (mh / (vh.sqrt() + cfg.eps) + wd * *pv);
            }
        }
    }
}

/// AdamW step on a full parameter set. Weight decay applies to matrices
/// only; biases and LayerNorm parameters are not decayed.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &AdamConfig, lr: f64) {
    let mut g: Vec<&Tensor> = Vec::new();
    grads.for_each(|_, t| g.push(t));
    let mut p: Vec<&mut Tensor> = Vec::new();
    collect_mut(params, &mut p);
    let decay: Vec<bool> = p.iter().map(|t| t.is_matrix()).collect();
    state.update(cfg, lr, &mut p, &g, &decay);
}

pub(crate) fn collect_mut<'a>(params: &'a mut ModelParams, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut params.embed);
    for layer in &mut params.layers {
        for hp in &mut layer.heads {
            out.push(&mut hp.wq);
            out.push(&mut hp.wk);
            out.push(&mut hp.wv);
            out.push(&mut hp.wo);
        }
        if let Some(ln) = &mut layer.ln1 {
            out.push(&mut ln.gamma);
            out.push(&mut ln.beta);
        }
        if let Some(ln) = &mut layer.ln2 {
            out.push(&mut ln.gamma);
            out.push(&mut ln.beta);
        }
        out.push(&mut layer.w1);
        out.push(&mut layer.b1);
        out.push(&mut layer.w2);
        out.push(&mut layer.b2);
    }
    if let Some(ln) = &mut params.final_ln {
        out.push(&mut ln.gamma);
        out.push(&mut ln.beta);
    }
    out.push(&mut params.w_out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: &Tensor, g: &Tensor, wd: f64, lr: f64) -> Tensor {
        let cfg = AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        };
        let mut p = p0.clone();
        let mut st = AdamState::new();
        st.update(&cfg, lr, &mut [&mut p], &[g], &[true]);
        p
    }

    #[test]
    fn zero_gradient_cases() {
        let p0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let g = Tensor::zeros(&[2, 2]);
        assert_eq!(run(&p0, &g, 0.0, 0.1), p0);
        let p = run(&p0, &g, 0.01, 0.1);
        for (a, b) in p.data().iter().zip(p0.data()) {
            assert!((a - 0.999 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_loss_decreases() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::vector(vec![2.0]).unwrap();
        let mut st = AdamState::new();
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let x = p.data()[0];
            let loss = x * x;
            assert!(loss < last);
            last = loss;
            let g = Tensor::vector(vec![2.0 * x]).unwrap();
            st.update(&cfg, 1e-2, &mut [&mut p], &[&g], &[false]);
        }
    }
}
