use std::collections::BTreeMap;

use crate::{Gradients, NdError, ParamId, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, created lazily for each parameter the
/// optimizer actually updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F: Real = f32> {
    state: AdamState<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            state: AdamState {
                config,
                step: 0,
                moments: BTreeMap::new(),
            },
        }
    }

    pub fn from_state(state: AdamState<F>) -> Self {
        Adam { state }
    }

    pub fn state(&self) -> &AdamState<F> {
        &self.state
    }

    pub fn into_state(self) -> AdamState<F> {
        self.state
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.config.lr = lr;
    }

    /// Applies one update to every `(id, param)` pair using `grads[id]`.
    /// Parameters without a gradient entry are left untouched.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<F>) -> Result<()>
    where
        I: IntoIterator<Item = (ParamId, &'a mut Tensor<F>)>,
    {
        let st = &mut self.state;
        let params: Vec<_> = params.into_iter().collect();
        for (id, p) in &params {
            if let Some(g) = grads.get(*id) {
                if g.shape() != p.shape() {
                    return Err(NdError::AdamShape {
                        id: id.0,
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
            }
        }
        st.step += 1;
        let t = st.step as i32;
        let c = st.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (lr, eps) = (F::of(c.lr), F::of(c.eps));

        for (id, p) in params {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = st
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let mhat = md[i] * inv_bc1;
                let vhat = vd[i] * inv_bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(NdError::NonFinite { kernel: "adam" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_for(values: &[(usize, Vec<f32>)]) -> Gradients<f32> {
        values
            .iter()
            .map(|(id, v)| (ParamId(*id), Tensor::from_vec(v.clone())))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![0.5f32, -1.0]);
        let before = p.clone();
        let grads = grads_for(&[(0, vec![0.0, 0.0])]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([(ParamId(0), &mut p)], &grads).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![0.0f32]);
        let grads = grads_for(&[(0, vec![0.5])]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([(ParamId(0), &mut p)], &grads).unwrap();
        // closed form: -lr * g / (|g| + eps)
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-9, "{}", p.data()[0]);
        assert_eq!(adam.state().step, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::from_vec(vec![0.0f32; 3]);
        let grads = grads_for(&[(0, vec![0.5, 0.5])]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step([(ParamId(0), &mut p)], &grads),
            Err(NdError::AdamShape { .. })
        ));
        assert_eq!(adam.state().step, 0);
    }

    #[test]
    fn moments_track_parameter_shapes_and_step_increments() {
        let mut a = Tensor::from_vec(vec![1.0f32, 2.0]);
        let mut b = Tensor::from_vec(vec![3.0f32]);
        let grads = grads_for(&[(0, vec![0.1, 0.2]), (1, vec![-0.3])]);
        let mut adam = Adam::new(AdamConfig::default());
        for expected in 1..=3 {
            adam.step([(ParamId(0), &mut a), (ParamId(1), &mut b)], &grads)
                .unwrap();
            assert_eq!(adam.state().step, expected);
        }
        let (m, v) = &adam.state().moments[&ParamId(0)];
        assert_eq!(m.shape(), a.shape());
        assert_eq!(v.shape(), a.shape());
    }
}
