//! Diffusion-time machinery: noise schedules, the forward noising marginal,
//! and deterministic DDIM reverse steps in x0-prediction form.

use ndarray::Array1;

use crate::error::{CdmError, Result};

/// Beta/alpha tables for a discrete diffusion process with `T` steps.
///
/// `alpha_bars[t]` is the running product of `alphas[0..=t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }
}

/// A strictly decreasing subsequence of timestep indices used at inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSubsequence {
    pub steps: Vec<usize>,
}

impl TimestepSubsequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(CdmError::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(CdmError::invalid(format!(
            "betas must lie in (0,1), got start={beta_start} end={beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(CdmError::invalid("beta_start must not exceed beta_end"));
    }
    let betas: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|s| beta_start + (beta_end - beta_start) * s as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward marginal: `y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    y0: &Array1<f64>,
    t: usize,
    eps: &Array1<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    if t >= schedule.num_steps() {
        return Err(CdmError::invalid(format!(
            "timestep {t} out of range 0..{}",
            schedule.num_steps()
        )));
    }
    if y0.len() != eps.len() {
        return Err(CdmError::shape(format!("{}", y0.len()), format!("{}", eps.len())));
    }
    let abar = schedule.alpha_bars[t];
    Ok(y0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// Evenly strided decreasing subsequence of `n_sampling` indices.
///
/// Consecutive indices differ by `floor(T / n_sampling)`, the last index is
/// always 0, and the first is pinned to `T - 1`.
pub fn make_ddim_timesteps(t_steps: usize, n_sampling: usize) -> Result<TimestepSubsequence> {
    if t_steps == 0 || n_sampling == 0 {
        return Err(CdmError::invalid("t_steps and n_sampling must be positive"));
    }
    if n_sampling > t_steps {
        return Err(CdmError::invalid(format!(
            "n_sampling {n_sampling} exceeds schedule length {t_steps}"
        )));
    }
    let stride = t_steps / n_sampling;
    let mut steps: Vec<usize> = (0..n_sampling).map(|i| (n_sampling - 1 - i) * stride).collect();
    steps[0] = t_steps - 1;
    Ok(TimestepSubsequence { steps })
}

/// One deterministic DDIM update from `t` down to `t_prev`, driven by the
/// network's clean-signal prediction `y0_hat`. `t_prev = None` is the terminal
/// step and returns `y0_hat` unchanged.
pub fn ddim_step(
    y_t: &Array1<f64>,
    y0_hat: &Array1<f64>,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    if y_t.len() != y0_hat.len() {
        return Err(CdmError::shape(format!("{}", y_t.len()), format!("{}", y0_hat.len())));
    }
    if t >= schedule.num_steps() {
        return Err(CdmError::invalid(format!(
            "timestep {t} out of range 0..{}",
            schedule.num_steps()
        )));
    }
    let prev = match t_prev {
        None => return Ok(y0_hat.clone()),
        Some(p) => p,
    };
    if prev >= t {
        return Err(CdmError::invalid(format!("t_prev {prev} must be below t {t}")));
    }
    let abar_t = schedule.alpha_bars[t];
    if 1.0 - abar_t <= 0.0 {
        return Err(CdmError::invalid(format!(
            "alpha_bar[{t}] = 1 leaves the noise estimate undefined"
        )));
    }
    let abar_prev = schedule.alpha_bars[prev];
    // eps_hat = (y_t - sqrt(abar_t) * y0_hat) / sqrt(1 - abar_t)
    let eps_hat = (y_t - &(y0_hat * abar_t.sqrt())) / (1.0 - abar_t).sqrt();
    Ok(y0_hat * abar_prev.sqrt() + &(eps_hat * (1.0 - abar_prev).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Product of betas->alphas carried in double-double arithmetic, used as an
    // extended-precision oracle for the running product.
    fn dd_alpha_bar_last(t_steps: usize, beta_start: f64, beta_end: f64) -> f64 {
        // (hi, lo) two-float accumulator
        let two_prod = |a: f64, b: f64| {
            let p = a * b;
            let e = a.mul_add(b, -p);
            (p, e)
        };
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        for s in 0..t_steps {
            let beta = beta_start + (beta_end - beta_start) * s as f64 / (t_steps - 1) as f64;
            let a = 1.0 - beta;
            let (p, e) = two_prod(hi, a);
            let t = lo.mul_add(a, e);
            hi = p + t;
            lo = t - (hi - p);
        }
        hi
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas, vec![0.5]);
        assert_eq!(s.alpha_bars, vec![0.5]);
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta0() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn last_alpha_bar_matches_extended_precision_product() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let oracle = dd_alpha_bar_last(1000, 1e-4, 0.02);
        let rel = (s.alpha_bars[999] - oracle).abs() / oracle;
        assert!(rel < 1e-12, "rel err {rel}");
    }

    #[test]
    fn alpha_bars_strictly_decreasing_and_products() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 0..s.num_steps() {
            if t > 0 {
                assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            }
            prod *= s.alphas[t];
            let rel = (s.alpha_bars[t] - prod).abs() / prod;
            assert!(rel < 1e-12);
            assert!(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] <= s.alphas[0]);
            assert!(s.alphas[0] < 1.0);
        }
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn forward_diffuse_zero_noise_and_zero_signal() {
        let s = make_linear_schedule(10, 0.1, 0.2).unwrap();
        let y0 = array![1.0, -2.0, 0.5];
        let zeros = Array1::zeros(3);
        let t = 4;
        let yt = forward_diffuse(&y0, t, &zeros, &s).unwrap();
        let scale = s.alpha_bars[t].sqrt();
        for i in 0..3 {
            assert!((yt[i] - scale * y0[i]).abs() < 1e-15);
        }
        let eps = array![0.3, 0.7, -1.1];
        let yt = forward_diffuse(&zeros, t, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bars[t]).sqrt();
        for i in 0..3 {
            assert!((yt[i] - scale * eps[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_analytic_case() {
        // abar = 0.64 via a single step with beta = 0.36
        let s = make_linear_schedule(1, 0.36, 0.36).unwrap();
        let y0 = array![1.0, 2.0];
        let eps = array![0.5, -0.5];
        let yt = forward_diffuse(&y0, 0, &eps, &s).unwrap();
        assert!((yt[0] - 1.1).abs() < 1e-12);
        assert!((yt[1] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_rejects_mismatch() {
        let s = make_linear_schedule(10, 0.1, 0.2).unwrap();
        let y0 = array![1.0, 2.0];
        let eps = array![1.0];
        assert!(forward_diffuse(&y0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&y0, 10, &Array1::zeros(2), &s).is_err());
    }

    #[test]
    fn timesteps_full_sequence() {
        let ts = make_ddim_timesteps(4, 4).unwrap();
        assert_eq!(ts.steps, vec![3, 2, 1, 0]);
    }

    #[test]
    fn timesteps_single_step() {
        let ts = make_ddim_timesteps(1000, 1).unwrap();
        assert_eq!(ts.steps, vec![999]);
    }

    #[test]
    fn timesteps_strided_enumeration() {
        let ts = make_ddim_timesteps(1000, 30).unwrap();
        assert_eq!(ts.len(), 30);
        assert_eq!(ts.steps[0], 999);
        assert_eq!(*ts.steps.last().unwrap(), 0);
        // enumeration oracle: stride floor(1000/30) = 33 between interior steps
        for i in 1..30 {
            assert_eq!(ts.steps[i], (30 - 1 - i) * 33);
        }
        for w in ts.steps.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn timesteps_rejects_oversampling() {
        assert!(make_ddim_timesteps(10, 11).is_err());
        assert!(make_ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_step_self_consistency() {
        let s = make_linear_schedule(50, 0.01, 0.2).unwrap();
        let y0 = array![0.7, -1.4, 2.2];
        let eps = array![0.1, 0.6, -0.9];
        let (t, t_prev) = (37, 12);
        let yt = forward_diffuse(&y0, t, &eps, &s).unwrap();
        let stepped = ddim_step(&yt, &y0, t, Some(t_prev), &s).unwrap();
        let direct = forward_diffuse(&y0, t_prev, &eps, &s).unwrap();
        for i in 0..3 {
            assert!((stepped[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_terminal_returns_prediction() {
        let s = make_linear_schedule(50, 0.01, 0.2).unwrap();
        let yt = array![3.0, -3.0];
        let y0_hat = array![0.25, 0.75];
        let out = ddim_step(&yt, &y0_hat, 0, None, &s).unwrap();
        assert_eq!(out, y0_hat);
    }

    #[test]
    fn ddim_step_scalar_high_precision_case() {
        // abar_0 = 0.81, abar_1 = 0.25: beta_0 = 0.19, beta_1 = 1 - 0.25/0.81
        let betas = vec![0.19, 1.0 - 0.25 / 0.81];
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = vec![alphas[0], alphas[0] * alphas[1]];
        let s = NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        };
        assert!((s.alpha_bars[1] - 0.25).abs() < 1e-15);
        let out = ddim_step(&array![1.0], &array![0.5], 1, Some(0), &s).unwrap();
        // eps_hat = (1 - 0.5*0.5)/sqrt(0.75); y_prev = 0.9*0.5 + sqrt(0.19)*eps_hat
        let eps_hat = 0.75f64 / 0.75f64.sqrt();
        let expect = 0.45 + 0.19f64.sqrt() * eps_hat;
        assert!((out[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn ddim_step_rejects_degenerate_alpha_bar() {
        let s = NoiseSchedule {
            betas: vec![0.0],
            alphas: vec![1.0],
            alpha_bars: vec![1.0],
        };
        assert!(ddim_step(&array![1.0], &array![0.5], 0, Some(0), &s).is_err());
        let s2 = make_linear_schedule(10, 0.1, 0.2).unwrap();
        assert!(ddim_step(&array![1.0], &array![0.5], 3, Some(5), &s2).is_err());
    }
}
