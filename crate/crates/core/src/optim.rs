//! Rectified Adam and the PSNR-driven early stopping controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamConfig {
    /// Length of the approximated simple moving average as `t -> inf`.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification factor, `None` while the adaptive step is not yet tractable.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho = self.rho(t);
        if rho <= 4.0 {
            return None;
        }
        let rho_inf = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RAdamState {
    pub hyper: RAdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl RAdamState {
    /// Moment buffers for parameter blocks of the given sizes.
    pub fn new(hyper: RAdamConfig, block_sizes: &[usize]) -> Self {
        RAdamState {
            hyper,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One RAdam update over all parameter blocks.
pub fn radam_step(state: &mut RAdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer has {} blocks, got {} parameter and {} gradient blocks",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (b, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[b].len() || g.len() != state.m[b].len() {
            return Err(Error::ShapeMismatch(format!(
                "block {b}: {} parameters, {} gradients, {} state entries",
                p.len(),
                g.len(),
                state.m[b].len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter block {b} at index {i}")));
        }
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step;
    let bias1 = 1.0 - h.beta1.powi(t as i32);
    let bias2 = 1.0 - h.beta2.powi(t as i32);
    let rect = h.rectification(t);

    for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[b];
        let v = &mut state.v[b];
        for i in 0..p.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            match rect {
                Some(r) => {
                    let v_hat = (v[i] / bias2).sqrt();
                    p[i] -= h.lr * r * m_hat / (v_hat + h.eps);
                }
                None => p[i] -= h.lr * m_hat,
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep training; `improved` when this check set a new best.
    Continue { improved: bool },
    Halt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub interval: usize,
    pub best_psnr: f64,
    pub best_iteration: Option<usize>,
    pub halted: bool,
}

impl EarlyStopState {
    pub fn new(interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidArgument("early stopping interval must be positive".into()));
        }
        Ok(EarlyStopState {
            interval,
            best_psnr: f64::NEG_INFINITY,
            best_iteration: None,
            halted: false,
        })
    }
}

/// Halts when validation PSNR falls strictly below the best seen so far.
pub fn early_stop_check(state: &mut EarlyStopState, iteration: usize, validation_psnr: f64) -> Result<StopDecision> {
    if iteration == 0 || iteration % state.interval != 0 {
        return Err(Error::InvalidArgument(format!(
            "early stopping checked at iteration {iteration}, not a multiple of {}",
            state.interval
        )));
    }
    if state.best_iteration.is_some() && validation_psnr < state.best_psnr {
        state.halted = true;
        return Ok(StopDecision::Halt);
    }
    // Ties keep training and move the best snapshot forward.
    let improved = state.best_iteration.is_none() || validation_psnr > state.best_psnr;
    state.best_psnr = validation_psnr;
    state.best_iteration = Some(iteration);
    Ok(StopDecision::Continue { improved })
}

/// Early stopping that also keeps the parameters of the best check.
#[derive(Clone, Debug)]
pub struct EarlyStopper<T> {
    pub state: EarlyStopState,
    best: Option<T>,
}

impl<T> EarlyStopper<T> {
    pub fn new(interval: usize) -> Result<Self> {
        Ok(EarlyStopper {
            state: EarlyStopState::new(interval)?,
            best: None,
        })
    }

    /// Records a check; `snapshot` is only called when the check becomes the new best.
    pub fn observe(&mut self, iteration: usize, psnr: f64, snapshot: impl FnOnce() -> T) -> Result<StopDecision> {
        let decision = early_stop_check(&mut self.state, iteration, psnr)?;
        if self.state.best_iteration == Some(iteration) {
            self.best = Some(snapshot());
        }
        Ok(decision)
    }

    pub fn best(&self) -> Option<&T> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<T> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_momentum_only() {
        let h = RAdamConfig::default();
        assert!((h.rho_inf() - 1999.0).abs() < 1e-9);
        assert!((h.rho(1) - 1.0).abs() < 1e-9);
        assert!(h.rectification(1).is_none());

        let mut state = RAdamState::new(h, &[2]);
        let mut p = [1.0, -2.0];
        radam_step(&mut state, &mut [&mut p], &[&[0.5, -3.0]]).unwrap();
        // m_hat equals the gradient on step one.
        assert!((p[0] - (1.0 - 0.01 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.01 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = RAdamState::new(RAdamConfig::default(), &[3, 1]);
        let mut a = [0.3, -1.0, 2.0];
        let mut b = [7.0];
        for _ in 0..50 {
            radam_step(&mut state, &mut [&mut a, &mut b], &[&[0.0; 3], &[0.0]]).unwrap();
        }
        assert_eq!(a, [0.3, -1.0, 2.0]);
        assert_eq!(b, [7.0]);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut state = RAdamState::new(RAdamConfig::default(), &[1, 2]);
        let mut a = [0.0];
        let mut b = [0.0, 0.0];
        let err = radam_step(&mut state, &mut [&mut a, &mut b], &[&[0.0], &[1.0, f64::INFINITY]]).unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut state = RAdamState::new(RAdamConfig::default(), &[4]);
            let mut p = [0.1, 0.2, 0.3, 0.4];
            for k in 0..20 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0).sin()).collect();
                radam_step(&mut state, &mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run().map(f64::to_bits), run().map(f64::to_bits));
    }

    #[test]
    fn early_stop_sequences() {
        let mut s = EarlyStopState::new(2000).unwrap();
        for (i, psnr) in [20.0, 21.0, 22.0].into_iter().enumerate() {
            assert!(matches!(early_stop_check(&mut s, 2000 * (i + 1), psnr).unwrap(), StopDecision::Continue { .. }));
        }
        let mut s = EarlyStopState::new(2000).unwrap();
        assert_eq!(early_stop_check(&mut s, 2000, 20.0).unwrap(), StopDecision::Continue { improved: true });
        assert_eq!(early_stop_check(&mut s, 4000, 22.0).unwrap(), StopDecision::Continue { improved: true });
        assert_eq!(early_stop_check(&mut s, 6000, 21.5).unwrap(), StopDecision::Halt);
        assert_eq!(s.best_iteration, Some(4000));
    }

    #[test]
    fn first_check_continues_even_when_poor() {
        let mut s = EarlyStopState::new(10).unwrap();
        assert!(matches!(early_stop_check(&mut s, 10, 0.0).unwrap(), StopDecision::Continue { .. }));
        assert!(early_stop_check(&mut s, 15, 1.0).is_err());
        assert!(EarlyStopState::new(0).is_err());
    }
}
