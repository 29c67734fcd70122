use super::{NnError, Tensor};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay applied to matrices (rank ≥ 2) only.
    pub weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    /// Zeroed moments shaped like `params`, with the usual defaults
    /// (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            weight_decay: 0.0,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place. Gradients are validated before anything
    /// is written, so a rejected update leaves params and state untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), NnError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::BadLearningRate(lr));
        }
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(NnError::ParamCount {
                expected: n,
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(NnError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if let Some(coord) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { param: i, coord });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let decay = if p.shape().len() >= 2 { 1.0 - lr * self.weight_decay } else { 1.0 };
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] = pd[j] * decay - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, 0.5])];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
        let mut p = vec![Tensor::vector(vec![1.0])];
        let g = vec![Tensor::vector(vec![2.0])];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_second_step_not_larger() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let g = vec![Tensor::vector(vec![2.0])];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1).unwrap();
        let after_one = p[0].data()[0];
        adam.step(&mut p, &g, 0.1).unwrap();
        let first = (1.0 - after_one).abs();
        let second = (after_one - p[0].data()[0]).abs();
        assert_eq!(adam.step_count(), 2);
        assert!(second <= first + 1e-9);
    }

    #[test]
    fn nan_gradient_rejected_without_mutation() {
        let mut p = vec![Tensor::vector(vec![1.0, 1.0])];
        let g = vec![Tensor::vector(vec![0.1, f64::NAN])];
        let mut adam = Adam::new(&p);
        let err = adam.step(&mut p, &g, 0.1).unwrap_err();
        assert_eq!(err, NnError::NonFinite { param: 0, coord: 1 });
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
