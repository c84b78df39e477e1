use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Moment estimates for Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Canonical betas and epsilon (0.9, 0.999, 1e-8).
    pub fn new(params: &[Tensor<T>], lr: T) -> Self {
        Self::with_hyper(
            params,
            lr,
            T::from_f64_lossy(0.9),
            T::from_f64_lossy(0.999),
            T::from_f64_lossy(1e-8),
        )
    }

    pub fn with_hyper(params: &[Tensor<T>], lr: T, beta1: T, beta2: T, eps: T) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        AdamState {
            step: 0,
            first: zeros(),
            second: zeros(),
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

/// One Adam update of every parameter from its accumulated gradient.
/// Gradients are left untouched.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.first.len() || params.iter().zip(&state.first).any(|(p, m)| p.numel() != m.len()) {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    if let Some(i) = params.iter().position(|p| !p.requires_grad()) {
        return Err(Error::MissingGrad(format!("#{i}")));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let (values, grad) = p.data_and_grad_mut();
        let grad = grad.expect("checked above");
        for (((w, &g), mi), vi) in values.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new([1], vec![v]).unwrap().with_grad();
        t.grad_mut().unwrap()[0] = g;
        t
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = vec![param(1.0, 1.0)];
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 → Δ = lr / (1 + eps)
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] - expected).abs() < 1e-15);
        assert!((ps[0].data()[0] - 0.999).abs() < 1e-9);
        assert_eq!(ps[0].grad().unwrap(), &[1.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut ps = vec![param(0.37, 0.0), param(-2.5, 0.0)];
        let before = ps.clone();
        let mut st = AdamState::new(&ps, 1e-3);
        for _ in 0..5 {
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps, before);
        assert!(st.second_moments().iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut ps = vec![Tensor::<f64>::new([1], vec![1.0]).unwrap()];
        let mut st = AdamState::new(&ps, 1e-3);
        assert!(matches!(adam_step(&mut ps, &mut st), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut ps = vec![param(0.5, 0.3), param(-0.1, -2.0)];
            let mut st = AdamState::new(&ps, 1e-3f64);
            for _ in 0..10 {
                adam_step(&mut ps, &mut st).unwrap();
            }
            ps.iter().map(|p| p.data()[0].to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
