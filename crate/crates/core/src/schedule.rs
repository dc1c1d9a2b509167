//! DDPM noise schedules and the forward-corruption / reverse-step updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Cosine offset `s` keeping the first betas away from zero.
pub const COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule configuration: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SquaredCosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared_cosine" | "squaredcos_cap_v2" | "cosine" => Ok(ScheduleKind::SquaredCosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(ScheduleError::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Per-step `beta`, `alpha = 1 - beta` and `alpha_bar = prod alpha`.
///
/// All arrays are indexed by the diffusion step `t` in `1..=T`; index 0 holds
/// the identity step (`beta = 0`, `alpha_bar = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S: Scalar = f64> {
    kind: ScheduleKind,
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
}

/// Unnormalized squared-cosine signal level `f(t) = cos^2(((t/T)+s)/(1+s) * pi/2)`.
fn cosine_level<S: Scalar>(t: usize, steps: usize) -> S {
    let s = S::lit(COSINE_OFFSET);
    let frac = S::from_usize_lossy(t) / S::from_usize_lossy(steps);
    let c = ((frac + s) / (S::one() + s) * S::FRAC_PI_2()).cos();
    c * c
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if steps < 1 {
            return Err(ScheduleError::Config("need at least one diffusion step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let (lo, hi) = (S::lit(beta_start), S::lit(beta_end));
        let mut beta = vec![S::zero(); steps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if steps == 1 {
                        lo
                    } else {
                        (lo + (hi - lo) * S::from_usize_lossy(t - 1) / S::from_usize_lossy(steps - 1)).min(hi)
                    };
                }
            }
            ScheduleKind::SquaredCosine => {
                // beta from consecutive cosine alpha_bar ratios, then clipped
                // into the configured range.
                let f0 = cosine_level::<S>(0, steps);
                let mut prev = S::one();
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    let cur = cosine_level::<S>(t, steps) / f0;
                    let raw = S::one() - cur / prev;
                    *b = raw.max(lo).min(hi);
                    prev = cur;
                }
            }
        }
        let alpha: Vec<S> = beta.iter().map(|b| S::one() - *b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = S::one();
        alpha_bar.push(acc);
        for a in &alpha[1..] {
            acc = acc * *a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The schedule used by the policy: squared cosine, 100 steps, beta in `[1e-4, 0.02]`.
    pub fn standard() -> Self {
        Self::new(ScheduleKind::SquaredCosine, DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("standard schedule is valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> S {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[S] {
        &self.beta[1..]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::Usage(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    fn check_len(a: &[S], b: &[S], what: &str) -> Result<(), ScheduleError> {
        if a.len() != b.len() {
            return Err(ScheduleError::Usage(format!("{what}: length {} vs {}", a.len(), b.len())));
        }
        Ok(())
    }

    /// Closed-form corruption `sqrt(abar_t) a0 + sqrt(1 - abar_t) eps`.
    pub fn forward_diffuse(&self, a0: &[S], t: usize, eps: &[S]) -> Result<Vec<S>, ScheduleError> {
        self.check_step(t)?;
        Self::check_len(a0, eps, "forward_diffuse")?;
        let ab = self.alpha_bar[t];
        let (signal, noise) = (ab.sqrt(), (S::one() - ab).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| signal * *a + noise * *e).collect())
    }

    /// One Markov corruption step `sqrt(1 - beta_t) a + sqrt(beta_t) eps`.
    pub fn forward_single_step(&self, prev: &[S], t: usize, eps: &[S]) -> Result<Vec<S>, ScheduleError> {
        self.check_step(t)?;
        Self::check_len(prev, eps, "forward_single_step")?;
        let (keep, noise) = (self.alpha[t].sqrt(), self.beta[t].sqrt());
        Ok(prev.iter().zip(eps).map(|(a, e)| keep * *a + noise * *e).collect())
    }

    /// Noise scale of the reverse step: `eta * sqrt((1-abar_{t-1})/(1-abar_t)) * sqrt(1-alpha_t)`.
    /// Zero at `t = 1`.
    pub fn sigma(&self, t: usize, eta: S) -> S {
        let ratio = (S::one() - self.alpha_bar[t - 1]) / (S::one() - self.alpha_bar[t]);
        eta * ratio.sqrt() * (S::one() - self.alpha[t]).sqrt()
    }

    /// Posterior mean `(a_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)`.
    pub fn posterior_mean(&self, at: &[S], eps_hat: &[S], t: usize) -> Result<Vec<S>, ScheduleError> {
        self.check_step(t)?;
        Self::check_len(at, eps_hat, "posterior_mean")?;
        let coef = (S::one() - self.alpha[t]) / (S::one() - self.alpha_bar[t]).sqrt();
        let inv = S::one() / self.alpha[t].sqrt();
        Ok(at.iter().zip(eps_hat).map(|(a, e)| inv * (*a - coef * *e)).collect())
    }

    /// `a_{t-1} = mu_t + sigma_t z`.
    pub fn reverse_step(&self, at: &[S], eps_hat: &[S], t: usize, eta: S, z: &[S]) -> Result<Vec<S>, ScheduleError> {
        let mut mean = self.posterior_mean(at, eps_hat, t)?;
        Self::check_len(at, z, "reverse_step")?;
        let sigma = self.sigma(t, eta);
        if sigma != S::zero() {
            mean.iter_mut().zip(z).for_each(|(m, zv)| *m = *m + sigma * *zv);
        }
        Ok(mean)
    }

    /// `abar_t / (1 - abar_t)`.
    pub fn snr(&self, t: usize) -> S {
        self.alpha_bar[t] / (S::one() - self.alpha_bar[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_single_step_chain() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 1, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn standard_schedule_respects_bounds() {
        let s = NoiseSchedule::<f64>::standard();
        assert_eq!(s.steps(), 100);
        for t in 1..=100 {
            assert!(s.beta(t) >= 1e-4 && s.beta(t) <= 0.02);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
        assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(100) < 1.0);
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(
                NoiseSchedule::<f64>::new(ScheduleKind::Linear, t, a, b),
                Err(ScheduleError::Config(_))
            ));
        }
    }

    #[test]
    fn noiseless_and_signal_free_limits() {
        let s = NoiseSchedule::<f64>::standard();
        let a0 = [0.3, -0.7];
        let zero = [0.0, 0.0];
        let eps = [1.2, -0.4];
        let t = 37;
        let x = s.forward_diffuse(&a0, t, &zero).unwrap();
        assert_eq!(x, vec![s.alpha_bar(t).sqrt() * 0.3, s.alpha_bar(t).sqrt() * -0.7]);
        let y = s.forward_diffuse(&zero, t, &eps).unwrap();
        let n = (1.0 - s.alpha_bar(t)).sqrt();
        assert_eq!(y, vec![n * 1.2, n * -0.4]);
    }

    #[test]
    fn out_of_range_step_is_usage_error() {
        let s = NoiseSchedule::<f64>::standard();
        assert!(matches!(s.forward_diffuse(&[0.0], 0, &[0.0]), Err(ScheduleError::Usage(_))));
        assert!(matches!(s.forward_diffuse(&[0.0], 101, &[0.0]), Err(ScheduleError::Usage(_))));
        assert!(s.reverse_step(&[0.0], &[0.0], 101, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn final_step_has_no_noise() {
        let s = NoiseSchedule::<f64>::standard();
        assert_eq!(s.sigma(1, 1.0), 0.0);
        assert!(s.sigma(2, 1.0) > 0.0);
        assert_eq!(s.sigma(50, 0.0), 0.0);
    }

    #[test]
    fn exact_inversion_at_first_step() {
        let s = NoiseSchedule::<f64>::standard();
        let a0 = [0.41, -0.93, 0.05, 0.77];
        let eps = [0.3, -1.1, 2.2, 0.01];
        let a1 = s.forward_diffuse(&a0, 1, &eps).unwrap();
        let back = s.reverse_step(&a1, &eps, 1, 0.0, &[0.0; 4]).unwrap();
        for (x, y) in back.iter().zip(&a0) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let s = NoiseSchedule::<f32>::standard();
        assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(100) < 1.0);
        let out = s.reverse_step(&[0.5f32, 0.5], &[0.1, 0.1], 10, 0.0, &[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
