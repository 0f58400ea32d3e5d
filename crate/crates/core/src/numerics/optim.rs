use super::{NumericsError, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &[T],
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<(), NumericsError> {
    let n = param.numel();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NumericsError::Dimension(format!(
            "adam: parameter {:?} ({n} values) with gradient of {} and state of {}",
            param.shape(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(state.t as i32));
    let c2 = T::one() - T::lit(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, states: Vec::new() }
    }

    /// Applies one update using the gradients held in `store`, then
    /// clears them. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        for (p, state) in store.iter_mut().zip(&mut self.states) {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else { continue };
            let st = state.get_or_insert_with(|| AdamState::new(p.tensor.numel()));
            adam_step(&mut p.tensor, &grad, &self.config, st)?;
            p.tensor.zero_grad();
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.iter().flatten().map(|s| s.t).max().unwrap_or(0)
    }

    pub fn states(&self) -> &[Option<AdamState<T>>] {
        &self.states
    }

    pub fn set_state(&mut self, index: usize, state: AdamState<T>) {
        if self.states.len() <= index {
            self.states.resize(index + 1, None);
        }
        self.states[index] = Some(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f32>::zeros(&[1]);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &AdamConfig::default(), &mut st).unwrap();
        assert!((p.data()[0] + 1e-4).abs() < 1e-9, "{}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f32>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(p) = p², grad = 2p. Simulated directly.
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new(1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * p.data()[0];
            adam_step(&mut p, &[g], &cfg, &mut st).unwrap();
            let now = p.data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(2);
        let err = adam_step(&mut p, &[1.0], &AdamConfig::default(), &mut st).unwrap_err();
        assert!(matches!(err, NumericsError::Dimension(_)));
    }
}
