//! Brute-force check of the closed-form contrastive optimum.
//!
//! At each probe `(x_t, t, y)` the pointwise objectives
//!
//! ```text
//! FM(v)  = E[ ||v - u+||^2 | x_t, y ]
//! ΔFM(v) = FM(v) - lambda * E[ ||v - u-||^2 ]
//! ```
//!
//! are estimated by Monte Carlo and minimised by nested grid search. Positives
//! are class draws importance-weighted by the likelihood of `x_t`; negatives are
//! every dataset point paired with antithetic noise at the same `t`. Both fits
//! share the same draws. The ΔFM minimiser is then compared against
//! [`optimal_velocity_shift`] applied to the FM minimiser.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{two_gaussians, GaussianMixtureSpec, LabeledPointCloud, DEFAULT_SEPARATION};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::objective::{check_lambda, optimal_velocity_shift, MeanTrajectory};
use crate::rng::{stream, substream, Stream};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub separation: f64,
    pub scale: f64,
    pub n_per_class: usize,
    pub probes: usize,
    pub lambdas: Vec<f64>,
    pub positive_samples: usize,
    pub tolerance: f64,
    pub t_range: (f64, f64),
    pub seed: u64,
    /// Replace the `1 - lambda` denominator with `1 + lambda`. Negative control.
    pub corrupt_shift: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            separation: DEFAULT_SEPARATION,
            scale: 1.0,
            n_per_class: 2000,
            probes: 50,
            lambdas: vec![0.05, 0.5],
            positive_samples: 100_000,
            tolerance: 0.02,
            t_range: (0.05, 0.95),
            seed: 0,
            corrupt_shift: false,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for &l in &self.lambdas {
            check_lambda(l)?;
        }
        if self.lambdas.is_empty() {
            return Err(Error::invalid("lambdas", "at least one value required"));
        }
        if self.probes == 0 || self.positive_samples == 0 || self.n_per_class == 0 {
            return Err(Error::invalid("probes", "probe and sample counts must be positive"));
        }
        let (lo, hi) = self.t_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("t_range", "need 0 <= lo <= hi < 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub t: f64,
    pub x_t: Vec<f64>,
    pub label: usize,
    pub lambda: f64,
    pub brute_force: Vec<f64>,
    pub formula: Vec<f64>,
    pub relative_error: f64,
    /// Distance between the Monte Carlo FM minimiser and the analytic posterior velocity.
    pub fm_vs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Max abs gap between the score implied by the analytic velocity and the analytic score.
    pub score_error: f64,
    /// Max abs error of reconstructing `x` through interpolate / target / denoise.
    pub denoise_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub probes: Vec<ProbeResult>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub consistency: ConsistencyReport,
    pub passed: bool,
}

/// Self-normalised weighted sums of a target set: `sum w`, `sum w u`, `sum w ||u||^2`.
#[derive(Debug, Clone)]
struct Moments {
    weight: f64,
    first: Vec<f64>,
    second: f64,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { weight: 0.0, first: vec![0.0; d], second: 0.0 }
    }

    fn add(&mut self, w: f64, u: &[f64]) {
        self.weight += w;
        for (f, x) in self.first.iter_mut().zip(u) {
            *f += w * x;
        }
        self.second += w * u.iter().map(|x| x * x).sum::<f64>();
    }

    /// `E ||v - u||^2` under the normalised weights, expanded from the sums.
    fn expected_sq(&self, v: &[f64]) -> f64 {
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let vu: f64 = v.iter().zip(&self.first).map(|(a, b)| a * b).sum();
        vv - 2.0 * vu / self.weight + self.second / self.weight
    }
}

/// Nested grid search for the minimiser of `f` around `center`.
pub fn grid_minimize(f: impl Fn(&[f64]) -> f64, center: &[f64], half_width: f64, tol: f64) -> Vec<f64> {
    const PER_AXIS: usize = 21;
    let d = center.len();
    let mut best = center.to_vec();
    let mut half = half_width;
    while half > tol {
        let step = 2.0 * half / (PER_AXIS - 1) as f64;
        let origin = best.clone();
        let mut best_val = f64::INFINITY;
        let mut idx = vec![0usize; d];
        loop {
            let v: Vec<f64> = (0..d).map(|k| origin[k] - half + idx[k] as f64 * step).collect();
            let val = f(&v);
            if val < best_val {
                best_val = val;
                best = v;
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] < PER_AXIS {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        half = 2.0 * step;
    }
    best
}

struct Probe {
    t: f64,
    x_t: Vec<f64>,
    label: usize,
}

fn draw_probes(spec: &GaussianMixtureSpec, config: &OracleConfig, schedule: Schedule) -> Result<Vec<Probe>> {
    let mut rng = stream(config.seed, Stream::Probes);
    let (lo, hi) = config.t_range;
    (0..config.probes)
        .map(|_| {
            let label = rng.random_range(0..spec.num_classes());
            let t = lo + (hi - lo) * rng.random::<f64>();
            let x = spec.sample_class(label, 1, &mut rng)?.remove(0);
            let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            Ok(Probe { t, x_t: schedule.interpolate(&x, &eps, t)?, label })
        })
        .collect()
}

/// Positive moments: class draws `x_k` with `eps_k` solved from `x_t`, weighted by `p(x_t | x_k)`.
fn positive_moments(
    probe: &Probe,
    draws: &[Vec<f64>],
    schedule: Schedule,
) -> Result<Moments> {
    let c = schedule.eval(probe.t)?;
    let d = probe.x_t.len();
    let log_w: Vec<f64> = draws
        .iter()
        .map(|x| {
            let r2: f64 = probe.x_t.iter().zip(x).map(|(xt, xk)| (xt - c.alpha * xk).powi(2)).sum();
            -r2 / (2.0 * c.sigma * c.sigma)
        })
        .collect();
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut m = Moments::new(d);
    for (x, lw) in draws.iter().zip(&log_w) {
        let eps: Vec<f64> = probe.x_t.iter().zip(x).map(|(xt, xk)| (xt - c.alpha * xk) / c.sigma).collect();
        let u: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| c.alpha_dot * a + c.sigma_dot * e).collect();
        m.add((lw - top).exp(), &u);
    }
    Ok(m)
}

/// Negative moments over every dataset point with noise `+eps` and `-eps`.
fn negative_moments(t: f64, data: &LabeledPointCloud, noise: &[Vec<f64>], schedule: Schedule) -> Result<Moments> {
    let mut m = Moments::new(data.dim());
    for (x, e) in data.points().iter().zip(noise) {
        let minus: Vec<f64> = e.iter().map(|v| -v).collect();
        m.add(1.0, &schedule.target_velocity(x, e, t)?);
        m.add(1.0, &schedule.target_velocity(x, &minus, t)?);
    }
    Ok(m)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-9)
}

fn consistency(spec: &GaussianMixtureSpec, probes: &[Probe], schedule: Schedule, seed: u64) -> Result<ConsistencyReport> {
    let mut score_error = 0.0f64;
    for p in probes {
        let v = spec.optimal_velocity(&p.x_t, p.t, Label::Class(p.label), schedule)?;
        let implied = schedule.velocity_to_score(&p.x_t, &v, p.t)?;
        let direct = spec.score(&p.x_t, p.t, Label::Class(p.label), schedule)?;
        for (a, b) in implied.iter().zip(&direct) {
            score_error = score_error.max((a - b).abs());
        }
    }
    let mut rng = stream(seed, Stream::Probes);
    let mut denoise_error = 0.0f64;
    for p in probes {
        let x: Vec<f64> = (0..p.x_t.len()).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let eps: Vec<f64> = (0..p.x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
        let xt = schedule.interpolate(&x, &eps, p.t)?;
        let v = schedule.target_velocity(&x, &eps, p.t)?;
        for (a, b) in schedule.denoise_expectation(&xt, &v, p.t)?.iter().zip(&x) {
            denoise_error = denoise_error.max((a - b).abs());
        }
    }
    Ok(ConsistencyReport {
        score_error,
        denoise_error,
        passed: score_error <= 1e-8 && denoise_error <= 1e-12,
    })
}

/// Run the full comparison on the builtin two-Gaussian dataset.
pub fn run(config: &OracleConfig, schedule: Schedule) -> Result<OracleReport> {
    config.validate()?;
    let (data, spec) = two_gaussians(config.separation, config.scale, config.n_per_class, config.seed)?;
    let probes = draw_probes(&spec, config, schedule)?;
    let t_hat = MeanTrajectory::analytic(data.points())?;
    let mut noise_rng = stream(config.seed, Stream::Noise);
    let neg_noise: Vec<Vec<f64>> = (0..data.len())
        .map(|_| (0..data.dim()).map(|_| noise_rng.sample(StandardNormal)).collect())
        .collect();

    let mut results = Vec::new();
    for (i, probe) in probes.iter().enumerate() {
        let mut draw_rng = substream(config.seed, Stream::Probes, i as u64);
        let draws = spec.sample_class(probe.label, config.positive_samples, &mut draw_rng)?;
        let pos = positive_moments(probe, &draws, schedule)?;
        let neg = negative_moments(probe.t, &data, &neg_noise, schedule)?;
        let reach = (pos.second / pos.weight).sqrt().max((neg.second / neg.weight).sqrt());
        let half_width = 4.0 * reach + 1.0;
        let tol = 1e-9 * half_width;
        let zero = vec![0.0; data.dim()];
        let v_fm = grid_minimize(|v| pos.expected_sq(v), &zero, half_width, tol);
        let analytic = spec.optimal_velocity(&probe.x_t, probe.t, Label::Class(probe.label), schedule)?;
        let m = t_hat.at(schedule, probe.t)?;
        for &lambda in &config.lambdas {
            let brute = grid_minimize(
                |v| pos.expected_sq(v) - lambda * neg.expected_sq(v),
                &zero,
                half_width / (1.0 - lambda),
                tol,
            );
            let formula = if config.corrupt_shift {
                v_fm.iter().zip(&m).map(|(v, t)| (v - lambda * t) / (1.0 + lambda)).collect()
            } else {
                optimal_velocity_shift(&v_fm, &m, lambda)?
            };
            results.push(ProbeResult {
                t: probe.t,
                x_t: probe.x_t.clone(),
                label: probe.label,
                lambda,
                relative_error: relative_error(&brute, &formula),
                fm_vs_analytic: relative_error(&v_fm, &analytic),
                brute_force: brute,
                formula,
            });
        }
    }
    let max_relative_error = results.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let consistency = consistency(&spec, &probes, schedule, config.seed)?;
    Ok(OracleReport {
        passed: max_relative_error <= config.tolerance && consistency.passed,
        probes: results,
        max_relative_error,
        tolerance: config.tolerance,
        consistency,
    })
}
