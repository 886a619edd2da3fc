use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};
use crate::error::{Error, Result};

/// Moment estimates and step counter of an Adam run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update of every parameter. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        state: &mut AdamState<T>,
    ) -> Result<()> {
        if state.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer state tracks {} parameters, model has {}",
                state.m.len(),
                params.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id);
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            if m.len() != p.len() {
                return Err(Error::shape("optimizer moment size differs from parameter"));
            }
            let g = grads.get(id);
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::shape("gradient size differs from parameter"));
                }
            }
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad_of(v: f64) -> Gradients<f64> {
        let mut g = Gradients::empty(1);
        g.accumulate(crate::autodiff::ParamId(0), &[v]);
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        Adam::with_lr(1e-4).step(&mut p, &grad_of(1.0), &mut st).unwrap();
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.get(crate::autodiff::ParamId(0)).data[0] - want).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_param_and_counts_step() {
        let mut p = scalar_store(0.5);
        let mut st = AdamState::new(&p);
        Adam::default().step(&mut p, &grad_of(0.0), &mut st).unwrap();
        assert_eq!(p.get(crate::autodiff::ParamId(0)).data[0], 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&ParamStore::<f64>::new());
        assert!(Adam::default().step(&mut p, &grad_of(1.0), &mut st).is_err());
    }
}
