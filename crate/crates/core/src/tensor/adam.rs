use super::{Scalar, Tensor};
use crate::error::{Result, TabsError};

/// Adam hyperparameters. Weight decay is the coupled L2 form: `wd · θ` is
/// added to the gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-5,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub hyper: AdamHyper,
    pub step_count: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moment buffers matching `params`.
    pub fn new<'a>(hyper: AdamHyper, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            hyper,
            step_count: 0,
            m,
            v,
        }
    }

    /// One optimizer step over all parameters. `grads[i]` may be `None` for a
    /// parameter that received no gradient this step, which is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TabsError::config(format!(
                "adam: {} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(TabsError::config(format!(
                    "adam: parameter {i} has shape {:?}, state has {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
            if let Some(g) = grads[i] {
                if g.shape() != p.shape() {
                    return Err(TabsError::config(format!(
                        "adam: gradient {i} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as i32;
        let b1 = T::from_f64(h.beta1);
        let b2 = T::from_f64(h.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - h.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - h.beta2.powi(t));
        let lr = T::from_f64(h.learning_rate);
        let wd = T::from_f64(h.weight_decay);
        let eps = T::from_f64(h.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].map(Tensor::data);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let grad = g.map_or(T::zero(), |g| g[j]) + wd * *theta;
                m[j] = b1 * m[j] + (one - b1) * grad;
                v[j] = b2 * v[j] + (one - b2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(hyper: AdamHyper, grad: f64, steps: usize) -> (f64, AdamState<f64>) {
        let mut params = vec![Tensor::scalar(0.5f64)];
        let g = Tensor::scalar(grad);
        let mut state = AdamState::new(hyper, &params);
        for _ in 0..steps {
            state.step(&mut params, &[Some(&g)]).unwrap();
        }
        (params[0].item(), state)
    }

    #[test]
    fn first_step_closed_form() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let (p, state) = run(hyper, 1.0, 1);
        // m̂ = g and v̂ = g² after bias correction, so Δ = −lr·g/(|g|+eps).
        let expected = 0.5 - 1e-5 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
        assert_eq!(state.step_count, 1);

        let (p, _) = run(hyper, -3.0, 1);
        assert!((p - (0.5 + 1e-5 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let (p, state) = run(hyper, 0.0, 5);
        assert_eq!(p, 0.5);
        assert_eq!(state.step_count, 5);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let hyper = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        let (_, state) = run(hyper, 0.0, 1);
        // g' = 0 + 0.1 · 0.5
        assert!((state.m[0].item() - 0.1 * 0.05).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut state = AdamState::new(AdamHyper::default(), &[Tensor::zeros(&[3])]);
        assert!(state.step(&mut params, &[None]).is_err());
    }
}
