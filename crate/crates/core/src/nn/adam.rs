use super::{NetworkGraph, Scalar};
use crate::error::{shape, Result};

pub const PLATEAU_PATIENCE: usize = 5;
pub const PLATEAU_FACTOR: f64 = 0.1;

/// Adam moments plus the reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Best validation loss seen so far.
    pub best: f64,
    /// Consecutive epochs without improvement.
    pub plateau: usize,
}

impl OptimState {
    pub fn new<T: Scalar>(net: &NetworkGraph<T>, lr: f64) -> Self {
        Self::for_shapes(&net.params().iter().map(|p| p.values.len()).collect::<Vec<_>>(), lr)
    }

    pub fn for_shapes(lens: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            best: f64::INFINITY,
            plateau: 0,
        }
    }

    /// Records an epoch's validation loss; after `PLATEAU_PATIENCE`
    /// consecutive epochs without a decrease the learning rate drops tenfold.
    /// Returns true when the rate changed.
    pub fn observe_validation(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.plateau = 0;
            return false;
        }
        self.plateau += 1;
        if self.plateau >= PLATEAU_PATIENCE {
            self.lr *= PLATEAU_FACTOR;
            self.plateau = 0;
            return true;
        }
        false
    }
}

/// One bias-corrected Adam update of every array in `params`.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape(format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return shape("parameter, gradient and moment shapes differ");
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let delta = state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            p[j] = T::from_f64(p[j].as_f64() - delta);
        }
    }
    Ok(())
}

/// Applies [`adam_step`] to a network's parameter store.
pub fn adam_step_net<T: Scalar>(net: &mut NetworkGraph<T>, grads: &[Vec<T>], state: &mut OptimState) -> Result<()> {
    let mut params: Vec<&mut [T]> = net.params_mut().iter_mut().map(|p| p.values.as_mut_slice()).collect();
    let grads: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
    adam_step(&mut params, &grads, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = OptimState::for_shapes(&[2], 1e-3);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut p = vec![0.5f64; 3];
        let mut s = OptimState::for_shapes(&[3], lr);
        adam_step(&mut [&mut p[..]], &[&[1.0; 3][..]], &mut s).unwrap();
        for v in p {
            assert!((v - 0.5 + lr / (1.0 + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f64; 2];
        let mut s = OptimState::for_shapes(&[2], 1e-3);
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0; 3][..]], &mut s).is_err());
    }

    #[test]
    fn plateau_drops_learning_rate() {
        let mut s = OptimState::for_shapes(&[], 1e-4);
        assert!(!s.observe_validation(1.0));
        for _ in 0..4 {
            assert!(!s.observe_validation(1.0));
        }
        assert!(s.observe_validation(1.5));
        assert!((s.lr - 1e-5).abs() < 1e-20);
    }
}
