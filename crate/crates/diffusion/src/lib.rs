//! The few-step noise schedule and its conditional distributions.
//!
//! A forward chain corrupts data over `T` steps (small `T`, large per-step
//! variances): each step draws `x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)`.
//! Marginally `x_t ~ N(sqrt(abar_t) x_0, (1 - abar_t) I)` with
//! `abar_t = prod(1 - beta_i)`. Conditioning the chain on both endpoints
//! gives a Gaussian whose mean is a fixed linear blend of `x_0` and `x_t`:
//!
//! ```text
//! mean  = coef_x0[t] * x0 + coef_xt[t] * x_t
//! coef_x0[t] = sqrt(abar_{t-1}) beta_t / (1 - abar_t)
//! coef_xt[t] = sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)
//! var[t]     = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
//! ```
//!
//! These coefficients come from Gaussian conjugacy rather than any printed
//! reference, so the test suite validates them against a Monte-Carlo
//! simulation of the stepwise chain (see `tests/bayes_oracle.rs`). Training
//! uses the posterior to build both real and generated sample pairs.

use lddgan_core::{CoreError, Element, Result, Tensor, Var};

/// Variance floor for the degenerate `t = 1` posterior, which is a point
/// mass at `x0`; the floor keeps the sampling loop uniform.
pub const T1_VARIANCE_FLOOR: f64 = 1e-6;

/// Terminal state must satisfy `abar_T < REJECT_ABAR_T` to build at all;
/// values in `[WARN_ABAR_T, REJECT_ABAR_T)` build with a warning.
pub const REJECT_ABAR_T: f64 = 1e-2;
pub const WARN_ABAR_T: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Geometric,
}

impl std::str::FromStr for ScheduleKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "geometric" => Ok(ScheduleKind::Geometric),
            other => Err(CoreError::Config(format!(
                "unknown schedule kind '{other}' (expected linear or geometric)"
            ))),
        }
    }
}

/// Immutable per-step coefficients of the forward chain.
///
/// Arrays are indexed by timestep `t in 1..=T`; `alpha_bar` additionally has
/// the `t = 0` convention value `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_xt: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Build directly from per-step variances.
    ///
    /// This is the raw constructor used by oracles and by `build_schedule`;
    /// it validates each beta but not the terminal state.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.len() > 64 {
            return Err(CoreError::Config(format!(
                "schedule needs 1..=64 steps, got {}",
                betas.len()
            )));
        }
        for &b in betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(CoreError::Config(format!(
                    "beta values must lie in (0, 1), got {b}"
                )));
            }
        }
        let t_count = betas.len();
        let mut beta = vec![f64::NAN; t_count + 1];
        let mut alpha = vec![f64::NAN; t_count + 1];
        let mut alpha_bar = vec![1.0; t_count + 1];
        for t in 1..=t_count {
            beta[t] = betas[t - 1];
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut coef_x0 = vec![f64::NAN; t_count + 1];
        let mut coef_xt = vec![f64::NAN; t_count + 1];
        let mut posterior_var = vec![f64::NAN; t_count + 1];
        for t in 1..=t_count {
            let denom = 1.0 - alpha_bar[t];
            coef_x0[t] = alpha_bar[t - 1].sqrt() * beta[t] / denom;
            coef_xt[t] = alpha[t].sqrt() * (1.0 - alpha_bar[t - 1]) / denom;
            posterior_var[t] =
                ((1.0 - alpha_bar[t - 1]) / denom * beta[t]).max(T1_VARIANCE_FLOOR);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            coef_x0,
            coef_xt,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "beta index {t} out of range");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "alpha index {t} out of range");
        self.alpha[t]
    }

    /// `t` may be 0 (convention value 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "alpha_bar index {t} out of range");
        self.alpha_bar[t]
    }

    pub fn coef_x0(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps());
        self.coef_x0[t]
    }

    pub fn coef_xt(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps());
        self.coef_xt[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps());
        self.posterior_var[t]
    }

    /// Present when the terminal state is not near-isotropic.
    pub fn terminal_warning(&self) -> Option<String> {
        let terminal = self.alpha_bar(self.steps());
        if terminal >= WARN_ABAR_T {
            Some(format!(
                "terminal alpha_bar[{}] = {terminal:.3e} >= {WARN_ABAR_T:.0e}; \
                 the chain does not quite reach an isotropic state",
                self.steps()
            ))
        } else {
            None
        }
    }
}

/// Build a schedule from interpolated per-step variances.
///
/// `kind` controls interpolation between `beta_min` and `beta_max` over the
/// steps. Schedules whose terminal `alpha_bar` is not below 1e-2 are
/// rejected; see [`NoiseSchedule::terminal_warning`] for the softer gate.
pub fn build_schedule(
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_steps < 1 || t_steps > 64 {
        return Err(CoreError::Config(format!(
            "step count must lie in 1..=64, got {t_steps}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::Config(format!(
            "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = interpolate_betas(t_steps, beta_min, beta_max, kind);
    let sched = NoiseSchedule::from_betas(&betas)?;
    let terminal = sched.alpha_bar(t_steps);
    if terminal >= REJECT_ABAR_T {
        return Err(CoreError::Config(format!(
            "terminal alpha_bar[{t_steps}] = {terminal:.3e} >= {REJECT_ABAR_T:.0e}; \
             increase beta_max or the step count"
        )));
    }
    Ok(sched)
}

fn interpolate_betas(t_steps: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Vec<f64> {
    if t_steps == 1 {
        return vec![beta_max];
    }
    (0..t_steps)
        .map(|i| {
            let frac = i as f64 / (t_steps - 1) as f64;
            match kind {
                ScheduleKind::Linear => beta_min + frac * (beta_max - beta_min),
                ScheduleKind::Geometric => beta_min * (beta_max / beta_min).powf(frac),
            }
        })
        .collect()
}

/// Default schedule for `t_steps`: linear betas from 0.1 up to a beta_max
/// solved so the terminal `alpha_bar` falls just below 1e-5.
pub fn default_schedule(t_steps: usize) -> Result<NoiseSchedule> {
    let beta_min = 0.1f64.min(0.5);
    let target = 1e-5;
    let mut lo = beta_min;
    let mut hi = 1.0 - 1e-9;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let betas = interpolate_betas(t_steps, beta_min.min(mid), mid, ScheduleKind::Linear);
        let abar: f64 = betas.iter().map(|b| 1.0 - b).product();
        if abar > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build_schedule(t_steps, beta_min.min(hi), hi, ScheduleKind::Linear)
}

fn check_match<E: Element>(context: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            context: context.into(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_t(sched: &NoiseSchedule, t: usize, lo: usize) -> Result<()> {
    if t < lo || t > sched.steps() {
        return Err(CoreError::Config(format!(
            "timestep {t} outside [{lo}, {}]",
            sched.steps()
        )));
    }
    Ok(())
}

/// Marginal corruption: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
///
/// `t = 0` is accepted with the convention `abar_0 = 1`, returning `x0`.
pub fn q_sample<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    check_t(sched, t, 0)?;
    check_match("q_sample noise", x0, noise)?;
    let ab = sched.alpha_bar(t);
    let a = E::from_f64(ab.sqrt());
    let b = E::from_f64((1.0 - ab).sqrt());
    x0.zip_map(noise, |x, n| a * x + b * n)
}

/// One forward chain step: `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn forward_step<E: Element>(
    x_prev: &Tensor<E>,
    t: usize,
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    check_t(sched, t, 1)?;
    check_match("forward_step noise", x_prev, noise)?;
    let a = E::from_f64(sched.alpha(t).sqrt());
    let b = E::from_f64(sched.beta(t).sqrt());
    x_prev.zip_map(noise, |x, n| a * x + b * n)
}

/// Mean and variance of the endpoint-conditioned Gaussian.
///
/// For `t = 1` the distribution degenerates to `x0` with the variance floor.
pub fn posterior_params<E: Element>(
    x0: &Tensor<E>,
    x_t: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<E>, f64)> {
    check_t(sched, t, 1)?;
    check_match("posterior endpoints", x0, x_t)?;
    let c0 = E::from_f64(sched.coef_x0(t));
    let ct = E::from_f64(sched.coef_xt(t));
    let mean = x0.zip_map(x_t, |a, b| c0 * a + ct * b)?;
    Ok((mean, sched.posterior_var(t)))
}

/// Draw from the posterior with externally supplied standard noise.
pub fn posterior_sample<E: Element>(
    x0: &Tensor<E>,
    x_t: &Tensor<E>,
    t: usize,
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let (mean, var) = posterior_params(x0, x_t, t, sched)?;
    check_match("posterior noise", x0, noise)?;
    let s = E::from_f64(var.sqrt());
    mean.zip_map(noise, |m, n| m + s * n)
}

/// Per-row coefficient column `[N, 1, ..., 1]` matching `rank`.
fn coef_column<E: Element>(values: &[f64], rank: usize) -> Tensor<E> {
    let mut shape = vec![1usize; rank];
    shape[0] = values.len();
    Tensor::from_vec(&shape, values.iter().map(|&v| E::from_f64(v)).collect()).unwrap()
}

/// Batched [`q_sample`] with one timestep per leading-axis row.
pub fn q_sample_rows<E: Element>(
    x0: &Tensor<E>,
    ts: &[usize],
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    check_match("q_sample noise", x0, noise)?;
    batch_rows(x0, ts, |t| check_t(sched, t, 0))?;
    let row = x0.numel() / ts.len();
    let mut out = Tensor::zeros(x0.shape());
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let a = E::from_f64(ab.sqrt());
        let b = E::from_f64((1.0 - ab).sqrt());
        for k in i * row..(i + 1) * row {
            out.data_mut()[k] = a * x0.data()[k] + b * noise.data()[k];
        }
    }
    Ok(out)
}

/// Batched [`forward_step`] with one timestep per row.
pub fn forward_step_rows<E: Element>(
    x_prev: &Tensor<E>,
    ts: &[usize],
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    check_match("forward_step noise", x_prev, noise)?;
    batch_rows(x_prev, ts, |t| check_t(sched, t, 1))?;
    let row = x_prev.numel() / ts.len();
    let mut out = Tensor::zeros(x_prev.shape());
    for (i, &t) in ts.iter().enumerate() {
        let a = E::from_f64(sched.alpha(t).sqrt());
        let b = E::from_f64(sched.beta(t).sqrt());
        for k in i * row..(i + 1) * row {
            out.data_mut()[k] = a * x_prev.data()[k] + b * noise.data()[k];
        }
    }
    Ok(out)
}

fn batch_rows<E: Element>(
    x: &Tensor<E>,
    ts: &[usize],
    check: impl Fn(usize) -> Result<()>,
) -> Result<()> {
    if x.rank() == 0 || x.shape()[0] != ts.len() {
        return Err(CoreError::ShapeMismatch {
            context: "per-row timesteps".into(),
            left: x.shape().to_vec(),
            right: vec![ts.len()],
        });
    }
    for &t in ts {
        check(t)?;
    }
    Ok(())
}

/// Differentiable posterior draw on the tape, one timestep per row.
///
/// Gradients flow into `x0` (and `x_t`) through the fixed per-row
/// coefficients; this is the path that lets discriminator feedback reach the
/// generator through generated pairs.
pub fn posterior_sample_rows_var<E: Element>(
    x0: &Var<E>,
    x_t: &Var<E>,
    ts: &[usize],
    noise: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Var<E> {
    let rank = x0.shape().len();
    assert_eq!(x0.shape()[0], ts.len(), "row count mismatch");
    let c0: Vec<f64> = ts.iter().map(|&t| sched.coef_x0(t)).collect();
    let ct: Vec<f64> = ts.iter().map(|&t| sched.coef_xt(t)).collect();
    let sd: Vec<f64> = ts.iter().map(|&t| sched.posterior_var(t).sqrt()).collect();
    let tape = x0.tape();
    let c0 = tape.constant(coef_column(&c0, rank));
    let ct = tape.constant(coef_column(&ct, rank));
    let sd = tape.constant(coef_column(&sd, rank));
    let noise = tape.constant(noise.clone());
    x0.mul(&c0).add(&x_t.mul(&ct)).add(&noise.mul(&sd))
}

#[cfg(test)]
mod tests;
