//! Adam with standard moment estimates and bias correction.

use crate::diffcore::Scalar;
use crate::error::{Error, Result};
use crate::model::ModelParams;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state: one (m, v) moment pair per parameter tensor, in the
/// canonical parameter order.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<S: Scalar>(params: &ModelParams<S>) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, a| m.push(vec![0.0; a.numel()]));
        let v = m.clone();
        Adam { m, v, step: 0 }
    }

    /// One update with gradients in canonical order (as produced by
    /// gradient collection over the same parameter set).
    pub fn update<S: Scalar>(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &[Vec<S>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut slot = 0;
        let mut err = None;
        params.for_each_mut(|name, a| {
            if err.is_some() {
                return;
            }
            let g = &grads[slot];
            if g.len() != a.numel() {
                err = Some(Error::Contract(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    name,
                    g.len(),
                    a.numel()
                )));
                return;
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for ((p, &gi), (mi, vi)) in a
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gi.to_f64_lossy();
                *mi = BETA1 * *mi + (1.0 - BETA1) * gf;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gf * gf;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + EPS);
                *p = S::of(p.to_f64_lossy() - delta);
            }
            slot += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
