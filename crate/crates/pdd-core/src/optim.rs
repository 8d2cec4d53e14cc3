//! Adam with bias correction and the cosine annealing schedule.

use crate::error::{Error, Result};
use crate::param::Param;
use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers, aligned with a fixed parameter ordering
/// supplied by the model. `t` counts completed steps.
#[derive(Clone, Debug)]
pub struct AdamState<P: Real> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<P>>,
    pub v: Vec<Vec<P>>,
}

impl<P: Real> AdamState<P> {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        AdamState {
            config,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![P::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![P::ZERO; n]).collect(),
        }
    }
}

/// One Adam step over an ordered trainable parameter list. Parameters whose
/// gradient did not appear in the graph are left untouched. Any non-finite
/// gradient rejects the whole update.
pub fn adam_step<P: Real>(
    params: &mut [&mut Param<P>],
    grads: &Gradients<P>,
    state: &mut AdamState<P>,
    lr: f64,
) -> Result<()> {
    const OP: &str = "adam_step";
    if params.len() != state.m.len() {
        return Err(Error::arg(
            OP,
            format!("{} params vs {} moment buffers", params.len(), state.m.len()),
        ));
    }
    // Validate every gradient before mutating anything.
    for p in params.iter() {
        if let Some(g) = grads.for_param(p.id()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(
                    OP,
                    format!("non-finite gradient for parameter `{}`", p.name()),
                ));
            }
        }
    }
    state.t += 1;
    let t = state.t;
    let cfg = state.config;
    let b1 = P::from_f64(cfg.beta1);
    let b2 = P::from_f64(cfg.beta2);
    let one_m_b1 = P::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = P::from_f64(1.0 - cfg.beta2);
    let corr1 = P::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let corr2 = P::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let lrp = P::from_f64(lr);
    let eps = P::from_f64(cfg.eps);

    for (idx, p) in params.iter_mut().enumerate() {
        let Some(g) = grads.for_param(p.id()) else {
            continue;
        };
        if g.len() != p.value().numel() {
            return Err(Error::shape(
                OP,
                format!("gradient/parameter size mismatch for `{}`", p.name()),
            ));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut new_value = p.value().data().to_vec();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + one_m_b1 * g[i];
            v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
            let m_hat = m[i] * corr1;
            let v_hat = v[i] * corr2;
            new_value[i] -= lrp * m_hat / (v_hat.sqrt() + eps);
        }
        let t = Tensor::from_vec(p.value().shape().to_vec(), new_value)?;
        p.set_value(t);
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at t = 0 down to `lr_min` at t = T.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Self {
        LrSchedule {
            lr_max,
            lr_min,
            total_steps,
        }
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::arg(
                "lr_at",
                format!("step {t} outside [0, {}]", self.total_steps),
            ));
        }
        // Exact at the endpoints.
        if t == 0 {
            return Ok(self.lr_max);
        }
        if t == self.total_steps {
            return Ok(self.lr_min);
        }
        let frac = t as f64 / self.total_steps as f64;
        Ok(self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * frac)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tape::Tape;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(2e-3, 0.0, 100);
        assert_eq!(s.lr_at(0).unwrap(), 2e-3);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        let mid = s.lr_at(50).unwrap();
        assert!((mid - 1e-3).abs() < 1e-15);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn schedule_monotone_non_increasing() {
        let s = LrSchedule::new(1.0, 0.1, 64);
        let mut prev = f64::INFINITY;
        for t in 0..=64 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Param::new("p", Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let mut tape = Tape::new();
        let x = tape.attach(&p);
        // loss = mse(x, x) has zero gradient everywhere.
        let loss = ops::mse(&mut tape, &x, &x.detached()).unwrap();
        let loss = ops::add(&mut tape, &loss, &Tensor::scalar(0.0)).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        adam_step(&mut [&mut p], &grads, &mut state, 0.1).unwrap();
        assert_eq!(p.value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // Closed form: first Adam step is ~ -lr * sign(g) for |g| >> eps.
        for &g in &[0.5f64, -0.02, 1e-3] {
            let mut p = Param::new("p", Tensor::<f64>::scalar(0.7), true);
            let mut tape = Tape::new();
            let x = tape.attach(&p);
            // loss = g * x  => dloss/dx = g
            let loss = ops::affine(&mut tape, &x, g, 0.0).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let mut state = AdamState::new(AdamConfig::default(), &[1]);
            let lr = 2e-3;
            adam_step(&mut [&mut p], &grads, &mut state, lr).unwrap();
            let delta = p.value().item() - 0.7;
            let expect = -lr * g.signum();
            assert!(
                (delta - expect).abs() < 1e-6 * lr.max(1.0),
                "g={g}: delta {delta} expect {expect}"
            );
        }
    }

    #[test]
    fn nan_grad_rejected_without_mutation() {
        let mut p = Param::new("p", Tensor::<f64>::scalar(1.0), true);
        let grads = Gradients::synthetic(vec![(p.id(), vec![f64::NAN])]);
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        let err = adam_step(&mut [&mut p], &grads, &mut state, 1e-3).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
        assert_eq!(p.value().item(), 1.0);
        assert_eq!(state.t, 0);
    }
}
