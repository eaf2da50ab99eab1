//! Closed-form forward corruption, x0-parameterized reverse transitions,
//! ancestral sampling, and Gaussian KL machinery for schedule-drift bounds.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scheduler::RealizedSchedule;
use crate::tensor::Tensor;

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_sample(x0: &Tensor, alpha_bar_t: f64, noise: &Tensor) -> Result<Tensor> {
    if !(0.0 < alpha_bar_t && alpha_bar_t <= 1.0) {
        return Err(Error::contract(format!(
            "alpha_bar must lie in (0, 1], got {}",
            alpha_bar_t
        )));
    }
    x0.scale(alpha_bar_t.sqrt()).add(&noise.scale((1.0 - alpha_bar_t).sqrt()))
}

/// Tape version; `alpha_bar_t` is a 1 x 1 node so schedule gradients flow
/// through both coefficients.
pub fn forward_sample_var(tape: &mut Tape, x0: Var, alpha_bar_t: Var, noise: Var) -> Result<Var> {
    let ab = tape.value(alpha_bar_t);
    if !ab.is_scalar() {
        return Err(Error::ShapeMismatch {
            op: "forward_sample",
            detail: format!("alpha_bar shape {:?}", ab.shape()),
        });
    }
    let sqrt_ab = tape.sqrt(alpha_bar_t);
    let neg = tape.neg(alpha_bar_t);
    let one_minus = tape.add_scalar(neg, 1.0);
    let sqrt_om = tape.sqrt(one_minus);
    let signal = tape.scale_by(x0, sqrt_ab)?;
    let corrupt = tape.scale_by(noise, sqrt_om)?;
    tape.add(signal, corrupt)
}

/// Posterior mean of the reverse transition under x0-prediction:
/// mu = (sqrt(abar_{t-1}) beta_t / (1 - abar_t)) x0_hat
///    + (sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)) x_t.
/// At t = 1 the boundary convention abar(0) = 1 collapses this to x0_hat.
pub fn reverse_mean(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    schedule: &RealizedSchedule,
) -> Result<Tensor> {
    if t < 1 || t > schedule.t_steps() {
        return Err(Error::contract(format!(
            "reverse step t = {} outside 1..={}",
            t,
            schedule.t_steps()
        )));
    }
    let ab_t = schedule.alpha_bar_t(t);
    let ab_prev = schedule.alpha_bar_t(t - 1);
    let beta_t = schedule.beta_t(t);
    let alpha_t = schedule.alpha_t(t);
    let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    x0_hat.scale(c0).add(&x_t.scale(ct))
}

/// A model that maps a noisy target draft back to a clean estimate. The
/// conditioning history is passed clean; implementations corrupt it
/// internally if they need a matched-noise view.
pub trait DenoiseModel {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        t: usize,
        schedule: &RealizedSchedule,
        history: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<Tensor>;
}

/// Monte Carlo forecast: a bag of sampled target paths, each `horizon` x
/// `channels`.
#[derive(Debug, Clone)]
pub struct ForecastDistribution {
    pub samples: Vec<Tensor>,
    pub horizon: usize,
    pub channels: usize,
}

impl ForecastDistribution {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> Tensor {
        let mut acc = Tensor::zeros(&[self.horizon, self.channels]);
        for s in &self.samples {
            acc = acc.add(s).expect("uniform shapes");
        }
        acc.scale(1.0 / self.samples.len() as f64)
    }

    /// All sampled values at one (step, channel) grid point.
    pub fn point_samples(&self, step: usize, channel: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.at(step, channel)).collect()
    }
}

// Abort threshold for chains that go non-finite during sampling.
const MAX_FAILED_FRACTION: f64 = 0.01;

/// Run `num_samples` independent reverse chains from pure noise. Each chain
/// forks its own random stream so chains are order-independent. Chains that
/// produce non-finite values are dropped; if more than 1% fail the whole
/// sampling run errors out.
pub fn ancestral_sample(
    model: &dyn DenoiseModel,
    schedule: &RealizedSchedule,
    history: &Tensor,
    horizon: usize,
    channels: usize,
    num_samples: usize,
    rng: &RandomSource,
) -> Result<ForecastDistribution> {
    if num_samples == 0 {
        return Err(Error::contract("need at least one sample chain"));
    }
    let t_total = schedule.t_steps();
    let mut samples = Vec::with_capacity(num_samples);
    let mut failed = 0usize;
    for chain in 0..num_samples {
        let mut chain_rng = rng.fork(chain as u64 + 1);
        match run_chain(model, schedule, history, horizon, channels, t_total, &mut chain_rng) {
            Ok(x) if x.all_finite() => samples.push(x),
            _ => failed += 1,
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * num_samples as f64 {
        return Err(Error::SamplingFailed { failed, total: num_samples });
    }
    if samples.is_empty() {
        return Err(Error::SamplingFailed { failed, total: num_samples });
    }
    Ok(ForecastDistribution { samples, horizon, channels })
}

fn run_chain(
    model: &dyn DenoiseModel,
    schedule: &RealizedSchedule,
    history: &Tensor,
    horizon: usize,
    channels: usize,
    t_total: usize,
    rng: &mut RandomSource,
) -> Result<Tensor> {
    let mut x = rng.normal_tensor(&[horizon, channels]);
    for t in (1..=t_total).rev() {
        let x0_hat = model.predict_x0(&x, t, schedule, history, rng)?;
        let mu = reverse_mean(&x, &x0_hat, t, schedule)?;
        let sigma = schedule.sigma_sq_t(t).sqrt();
        x = if sigma > 0.0 {
            let z = rng.normal_tensor(&[horizon, channels]);
            mu.add(&z.scale(sigma))?
        } else {
            mu
        };
        if !x.all_finite() {
            return Err(Error::Numeric {
                op: "ancestral_sample",
                detail: format!("non-finite state at step {}", t),
            });
        }
    }
    Ok(x)
}

/// KL(N(mu1, v1 I) || N(mu2, v2 I)) in D dimensions.
pub fn kl_isotropic(mu1: &Tensor, v1: f64, mu2: &Tensor, v2: f64) -> Result<f64> {
    if v1 <= 0.0 || v2 <= 0.0 {
        return Err(Error::contract("gaussian variances must be positive"));
    }
    let diff = mu1.sub(mu2)?;
    let d = mu1.len() as f64;
    Ok(0.5 * (d * ((v2 / v1).ln() + v1 / v2 - 1.0) + diff.norm().powi(2) / v2))
}

/// KL between the step-t forward marginals of two schedules for a fixed x0.
pub fn forward_marginal_kl(
    x0: &Tensor,
    base: &RealizedSchedule,
    perturbed: &RealizedSchedule,
    t: usize,
) -> Result<f64> {
    let ab_a = base.alpha_bar_t(t);
    let ab_b = perturbed.alpha_bar_t(t);
    let mu_a = x0.scale(ab_a.sqrt());
    let mu_b = x0.scale(ab_b.sqrt());
    kl_isotropic(&mu_a, 1.0 - ab_a, &mu_b, 1.0 - ab_b)
}

/// Stability constant of the forward-marginal drift bound at step t:
/// C = (t / (1 - beta_max))^2 * (D (1 - a)^2 / (4 a^4) + ||x0||^2 / (8 a^2)),
/// valid whenever both schedules keep alpha_bar_t inside [a, 1 - a].
pub fn drift_constant(t: usize, beta_max: f64, a: f64, dim: usize, x0_norm_sq: f64) -> Result<f64> {
    if !(0.0 < a && a < 0.5) {
        return Err(Error::contract("margin a must lie in (0, 0.5)"));
    }
    if !(0.0 < beta_max && beta_max < 1.0) {
        return Err(Error::contract("beta_max must lie in (0, 1)"));
    }
    let lead = (t as f64 / (1.0 - beta_max)).powi(2);
    let d = dim as f64;
    Ok(lead * (d * (1.0 - a) * (1.0 - a) / (4.0 * a.powi(4)) + x0_norm_sq / (8.0 * a * a)))
}

/// Upper bound C * ||beta' - beta||_inf^2 on the step-t marginal KL drift.
pub fn drift_bound(
    x0: &Tensor,
    base: &RealizedSchedule,
    perturbed: &RealizedSchedule,
    t: usize,
    a: f64,
) -> Result<f64> {
    for s in [base, perturbed] {
        for u in 1..=t {
            let ab = s.alpha_bar_t(u);
            if ab < a || ab > 1.0 - a {
                return Err(Error::PreconditionViolation(format!(
                    "alpha_bar at step {} leaves the margin [{}, {}]",
                    u,
                    a,
                    1.0 - a
                )));
            }
        }
    }
    let beta_max = base
        .beta
        .iter()
        .chain(perturbed.beta.iter())
        .take(2 * t)
        .cloned()
        .fold(0.0, f64::max);
    let c = drift_constant(t, beta_max, a, x0.len(), x0.norm().powi(2))?;
    let inf: f64 = (1..=t)
        .map(|u| (perturbed.beta_t(u) - base.beta_t(u)).abs())
        .fold(0.0, f64::max);
    Ok(c * inf * inf)
}
