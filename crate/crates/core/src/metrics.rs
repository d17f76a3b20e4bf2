//! Sample-quality metrics for low-dimensional problems.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::GaussianMixtureSpec;
use crate::error::{check_dim, Error, Result};
use crate::model::{Label, VelocityModel};
use crate::rng::{stream, Stream};
use crate::sampler::{initial_noise, trajectories, GuidanceConfig, SamplerConfig, TrajectoryRecord};
use crate::schedule::Schedule;

/// Largest equal-size problem solved exactly by [`wasserstein2`].
pub const EXACT_LIMIT: usize = 4096;
pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Mode {
    /// Exact when sizes match and are at most [`EXACT_LIMIT`], sliced otherwise.
    Auto,
    Exact,
    Sliced { projections: usize, seed: u64 },
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let d = a[0].len();
    for p in a.iter().chain(b) {
        check_dim(d, p.len())?;
    }
    Ok(d)
}

/// Minimum-cost perfect matching of `a` onto `b` under squared Euclidean cost.
///
/// Shortest augmenting paths with vertex potentials, `O(n^3)`.
/// Returns `assignment[i] = j`.
pub fn assignment(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<usize>> {
    check_sets(a, b)?;
    if a.len() != b.len() {
        return Err(Error::invalid("b", format!("exact matching needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    // 1-based rows/columns; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &a[i0 - 1];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = sq_dist(row, &b[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    Ok(out)
}

fn exact_w2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() > EXACT_LIMIT {
        return Err(Error::invalid("a", format!("exact mode is limited to {EXACT_LIMIT} points")));
    }
    let m = assignment(a, b)?;
    let total: f64 = m.iter().enumerate().map(|(i, &j)| sq_dist(&a[i], &b[j])).sum();
    Ok((total / a.len() as f64).sqrt())
}

/// Squared 1-D W2 between two empirical measures via their quantile functions.
fn w2_squared_1d(mut x: Vec<f64>, mut y: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0;
    let mut acc = 0.0;
    while i < x.len() && j < y.len() {
        let next_x = (i + 1) as f64 / n;
        let next_y = (j + 1) as f64 / m;
        let next = next_x.min(next_y);
        acc += (next - level) * (x[i] - y[j]).powi(2);
        level = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    acc
}

fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, seed: u64) -> Result<f64> {
    let d = check_sets(a, b)?;
    if projections == 0 {
        return Err(Error::invalid("projections", "must be at least 1"));
    }
    let mut rng = stream(seed, Stream::Projections);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |s: &[Vec<f64>]| s.iter().map(|p| p.iter().zip(&dir).map(|(x, w)| x * w).sum()).collect();
        total += w2_squared_1d(proj(a), proj(b));
    }
    Ok((total / projections as f64).sqrt())
}

/// Empirical 2-Wasserstein distance, exact where feasible.
pub fn wasserstein2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    wasserstein2_with(a, b, W2Mode::Auto)
}

pub fn wasserstein2_with(a: &[Vec<f64>], b: &[Vec<f64>], mode: W2Mode) -> Result<f64> {
    check_sets(a, b)?;
    match mode {
        W2Mode::Exact => exact_w2(a, b),
        W2Mode::Auto if a.len() == b.len() && a.len() <= EXACT_LIMIT => exact_w2(a, b),
        W2Mode::Auto => sliced_w2(a, b, DEFAULT_PROJECTIONS, 0),
        W2Mode::Sliced { projections, seed } => sliced_w2(a, b, projections, seed),
    }
}

/// Share of samples whose posterior for their intended class is at most `threshold`.
pub fn ambiguity_fraction(
    samples: &[Vec<f64>],
    intended: &[usize],
    spec: &GaussianMixtureSpec,
    threshold: f64,
) -> Result<f64> {
    let k = spec.num_classes();
    if !(threshold >= 1.0 / k as f64 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} is outside [1/{k}, 1]")));
    }
    check_dim(samples.len(), intended.len())?;
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut ambiguous = 0usize;
    for (x, &c) in samples.iter().zip(intended) {
        if c >= k {
            return Err(Error::LabelOutOfRange { label: c, num_classes: k });
        }
        if spec.class_posterior(x)?[c] <= threshold {
            ambiguous += 1;
        }
    }
    Ok(ambiguous as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowOverlap {
    /// `exp(-mean_distance)`, in `(0, 1]`.
    pub score: f64,
    pub mean_distance: f64,
}

/// Mean over time of the average nearest-neighbour distance from set-`a` states to set-`b` states.
pub fn flow_overlap(a: &[Vec<TrajectoryRecord>], b: &[Vec<TrajectoryRecord>]) -> Result<FlowOverlap> {
    let first = a.first().ok_or(Error::Empty("trajectories"))?;
    if b.is_empty() {
        return Err(Error::Empty("trajectories"));
    }
    let grid: Vec<f64> = first.iter().map(|r| r.t).collect();
    if grid.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    for traj in a.iter().chain(b) {
        if traj.len() != grid.len() || traj.iter().zip(&grid).any(|(r, &t)| r.t != t) {
            return Err(Error::invalid("trajectories", "time grids differ"));
        }
    }
    let mut total = 0.0;
    for k in 0..grid.len() {
        let mut step = 0.0;
        for ta in a {
            let x = &ta[k].state;
            let nearest = b
                .iter()
                .map(|tb| sq_dist(x, &tb[k].state))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            step += nearest;
        }
        total += step / a.len() as f64;
    }
    let mean_distance = total / grid.len() as f64;
    Ok(FlowOverlap {
        score: (-mean_distance).exp(),
        mean_distance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub wasserstein2: f64,
    pub ambiguity_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wasserstein2: f64,
    pub ambiguity_fraction: f64,
    pub flow_overlap: f64,
    pub flow_distance: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "wasserstein2={}", self.wasserstein2);
        let _ = writeln!(s, "ambiguity_fraction={}", self.ambiguity_fraction);
        let _ = writeln!(s, "flow_overlap={}", self.flow_overlap);
        let _ = writeln!(s, "flow_distance={}", self.flow_distance);
        for c in &self.per_class {
            let _ = writeln!(s, "class{}.wasserstein2={}", c.class, c.wasserstein2);
            let _ = writeln!(s, "class{}.ambiguity_fraction={}", c.class, c.ambiguity_fraction);
        }
        s
    }

    pub const CSV_HEADER: &'static str = "scope,wasserstein2,ambiguity_fraction,flow_overlap,flow_distance";

    /// One row per class, then the aggregate row; no header.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .per_class
            .iter()
            .map(|c| format!("class{},{},{},,", c.class, c.wasserstein2, c.ambiguity_fraction))
            .collect();
        rows.push(format!(
            "all,{},{},{},{}",
            self.wasserstein2, self.ambiguity_fraction, self.flow_overlap, self.flow_distance
        ));
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub samples_per_class: usize,
    pub flows_per_class: usize,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub threshold: f64,
    /// Seed for the fresh reference samples.
    pub reference_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 512,
            flows_per_class: 128,
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::disabled(),
            threshold: 0.5,
            reference_seed: 1_000_003,
        }
    }
}

fn class_sampler(config: &SamplerConfig, class: usize, salt: u64) -> SamplerConfig {
    SamplerConfig {
        seed: config
            .seed
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
            .wrapping_add((class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt),
        ..*config
    }
}

/// Generated samples for every class of `spec`, keyed by class index.
pub fn generate<M: VelocityModel + ?Sized>(
    model: &M,
    num_classes: usize,
    n_per_class: usize,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..num_classes)
        .map(|c| {
            let cfg = class_sampler(config, c, 0);
            crate::sampler::sample(model, n_per_class, Label::Class(c), &cfg, guidance, schedule)
        })
        .collect()
}

/// Full trajectories (every step recorded) for every class.
pub fn generate_flows<M: VelocityModel + ?Sized>(
    model: &M,
    num_classes: usize,
    n_per_class: usize,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<Vec<Vec<TrajectoryRecord>>>> {
    (0..num_classes)
        .map(|c| {
            let cfg = class_sampler(config, c, 0xF10);
            let eps = initial_noise(n_per_class, model.dim(), cfg.seed);
            trajectories(model, &eps, Label::Class(c), &cfg, guidance, schedule, 1)
        })
        .collect()
}

/// Sample every class of `spec` from `model` and score against fresh reference draws.
///
/// Flow overlap is measured between classes 0 and 1.
pub fn evaluate<M: VelocityModel + ?Sized>(
    model: &M,
    spec: &GaussianMixtureSpec,
    config: &EvalConfig,
    schedule: Schedule,
) -> Result<MetricsReport> {
    check_dim(spec.dim(), model.dim())?;
    let k = spec.num_classes();
    if k < 2 || k > model.num_classes() {
        return Err(Error::invalid("spec", format!("needs 2..={} classes, has {k}", model.num_classes())));
    }
    let n = config.samples_per_class;
    let generated = generate(model, k, n, &config.sampler, &config.guidance, schedule)?;
    let reference = spec.sample_cloud(n, config.reference_seed)?;
    let mut per_class = Vec::with_capacity(k);
    let (mut all_gen, mut all_ref, mut intended) = (Vec::new(), Vec::new(), Vec::new());
    for (c, gen) in generated.into_iter().enumerate() {
        let truth: Vec<Vec<f64>> = reference.class_points(c).into_iter().map(<[f64]>::to_vec).collect();
        per_class.push(ClassMetrics {
            class: c,
            wasserstein2: wasserstein2(&gen, &truth)?,
            ambiguity_fraction: ambiguity_fraction(&gen, &vec![c; gen.len()], spec, config.threshold)?,
        });
        intended.extend(std::iter::repeat_n(c, gen.len()));
        all_gen.extend(gen);
        all_ref.extend(truth);
    }
    let flows = generate_flows(model, 2, config.flows_per_class, &config.sampler, &config.guidance, schedule)?;
    let overlap = flow_overlap(&flows[0], &flows[1])?;
    Ok(MetricsReport {
        wasserstein2: wasserstein2(&all_gen, &all_ref)?,
        ambiguity_fraction: ambiguity_fraction(&all_gen, &intended, spec, config.threshold)?,
        flow_overlap: overlap.score,
        flow_distance: overlap.mean_distance,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Stream::Data);
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, a: &[Vec<f64>], b: &[Vec<f64>], best: &mut f64) {
            if k == perm.len() {
                let c: f64 = perm.iter().enumerate().map(|(i, &j)| sq_dist(&a[i], &b[j])).sum();
                *best = best.min(c);
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, a, b, best);
                perm.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        permute(0, &mut (0..a.len()).collect(), a, b, &mut best);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn trivial_cases() {
        let a = cloud(20, 2, 1);
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        let w = wasserstein2(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(w, 5.0);
        assert!(wasserstein2(&[], &a).is_err());
        assert!(wasserstein2(&a, &cloud(5, 3, 1)).is_err());
        assert!(wasserstein2_with(&a, &cloud(21, 2, 1), W2Mode::Exact).is_err());
    }

    #[test]
    fn exact_matches_brute_force_on_subsets() {
        let a = cloud(64, 2, 2);
        let b: Vec<Vec<f64>> = cloud(64, 2, 3).into_iter().map(|p| vec![p[0] + 0.5, p[1]]).collect();
        assert!(wasserstein2(&a, &b).unwrap() > 0.0);
        for s in 0..10 {
            let idx: Vec<usize> = (0..6).map(|i| (s * 6 + i) % 64).collect();
            let sa: Vec<_> = idx.iter().map(|&i| a[i].clone()).collect();
            let sb: Vec<_> = idx.iter().map(|&i| b[(i * 7 + s) % 64].clone()).collect();
            assert_eq!(wasserstein2(&sa, &sb).unwrap(), brute_force(&sa, &sb));
        }
    }

    #[test]
    fn assignment_is_a_permutation() {
        let m = assignment(&cloud(50, 3, 4), &cloud(50, 3, 5)).unwrap();
        let mut seen = m.clone();
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sliced_agrees_in_one_dimension() {
        let a = cloud(200, 1, 6);
        let b: Vec<Vec<f64>> = cloud(200, 1, 7).into_iter().map(|p| vec![2.0 * p[0] + 1.0]).collect();
        let exact = wasserstein2(&a, &b).unwrap();
        let sliced = wasserstein2_with(&a, &b, W2Mode::Sliced { projections: 4, seed: 0 }).unwrap();
        assert!((exact - sliced).abs() < 1e-12, "{exact} vs {sliced}");
    }

    #[test]
    fn sliced_handles_unequal_sizes() {
        // 1-D: {0} vs {0, 2}: half the mass moves 2, so W2^2 = 2.
        let w = wasserstein2(&[vec![0.0]], &[vec![0.0], vec![2.0]]).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-12);
        let big = wasserstein2(&cloud(300, 2, 8), &cloud(500, 2, 9)).unwrap();
        assert!(big > 0.0 && big < 0.5, "{big}");
    }

    #[test]
    fn ambiguity_examples() {
        let spec = GaussianMixtureSpec::isotropic(vec![vec![-5.0, 0.0], vec![5.0, 0.0]], 1.0).unwrap();
        let at_means = vec![vec![-5.0, 0.0], vec![5.0, 0.0]];
        assert_eq!(ambiguity_fraction(&at_means, &[0, 1], &spec, 0.5).unwrap(), 0.0);
        let mid = vec![vec![0.0, 0.0]; 4];
        assert_eq!(ambiguity_fraction(&mid, &[0, 1, 0, 1], &spec, 0.5).unwrap(), 1.0);
        assert!(ambiguity_fraction(&mid, &[0, 1, 0, 1], &spec, 0.5 - 1e-9).is_err());
        assert!(ambiguity_fraction(&mid, &[0, 2, 0, 1], &spec, 0.6).is_err());
    }

    #[test]
    fn ambiguity_uniform_box_matches_grid_integration() {
        let spec = GaussianMixtureSpec {
            classes: vec![
                vec![crate::data::Component { mean: vec![-1.0, 0.5], variance: vec![0.5, 2.0], weight: 1.0 }],
                vec![crate::data::Component { mean: vec![1.5, 0.0], variance: vec![1.5, 0.7], weight: 1.0 }],
            ],
        };
        let half = 6.0;
        let g = 400;
        let h = 2.0 * half / g as f64;
        let mut cells = 0usize;
        for i in 0..g {
            for j in 0..g {
                let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
                if spec.class_posterior(&x).unwrap()[0] <= 0.7 {
                    cells += 1;
                }
            }
        }
        let oracle = cells as f64 / (g * g) as f64;
        let mut rng = substream(3, Stream::Probes, 0);
        let pts: Vec<Vec<f64>> = (0..40_000)
            .map(|_| vec![rng.random_range(-half..half), rng.random_range(-half..half)])
            .collect();
        let f = ambiguity_fraction(&pts, &vec![0; pts.len()], &spec, 0.7).unwrap();
        assert!((f - oracle).abs() < 0.01, "{f} vs {oracle}");
    }

    #[test]
    fn ambiguity_is_relabel_invariant() {
        let spec = GaussianMixtureSpec::isotropic(vec![vec![-1.0, 0.0], vec![1.0, 0.3], vec![0.0, 1.0]], 0.8).unwrap();
        let swapped = GaussianMixtureSpec {
            classes: vec![spec.classes[2].clone(), spec.classes[0].clone(), spec.classes[1].clone()],
        };
        let pts = cloud(300, 2, 10);
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let relabeled: Vec<usize> = labels.iter().map(|&c| (c + 1) % 3).collect();
        assert_eq!(
            ambiguity_fraction(&pts, &labels, &spec, 0.5).unwrap(),
            ambiguity_fraction(&pts, &relabeled, &swapped, 0.5).unwrap()
        );
    }

    fn straight(offset: f64, n: usize) -> Vec<Vec<TrajectoryRecord>> {
        (0..n)
            .map(|i| {
                (0..=4)
                    .map(|k| TrajectoryRecord {
                        step: k,
                        t: k as f64 / 4.0,
                        state: vec![offset + i as f64 * 0.1, k as f64],
                        expectation: vec![0.0, 0.0],
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn flow_overlap_examples() {
        let a = straight(0.0, 5);
        let same = flow_overlap(&a, &a).unwrap();
        assert_eq!((same.score, same.mean_distance), (1.0, 0.0));
        let mut prev = 1.0;
        for off in [0.5, 1.0, 2.0, 4.0] {
            let o = flow_overlap(&a, &straight(off, 5)).unwrap();
            assert!(o.score < prev);
            prev = o.score;
        }
        let mut short = straight(0.0, 5);
        short[2].pop();
        assert!(flow_overlap(&a, &short).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport {
            wasserstein2: 0.5,
            ambiguity_fraction: 0.25,
            flow_overlap: 0.1,
            flow_distance: 2.3,
            per_class: vec![
                ClassMetrics { class: 0, wasserstein2: 0.4, ambiguity_fraction: 0.2 },
                ClassMetrics { class: 1, wasserstein2: 0.6, ambiguity_fraction: 0.3 },
            ],
        };
        assert_eq!(r.csv_rows().len(), 3);
        assert_eq!(r.csv_rows()[2], "all,0.5,0.25,0.1,2.3");
        assert!(r.to_key_value().contains("class1.ambiguity_fraction=0.3\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn w2_is_a_metric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
            let (a, b, c) = (cloud(12, 2, s1), cloud(12, 2, s2 + 1000), cloud(12, 2, s3 + 2000));
            let ab = wasserstein2(&a, &b).unwrap();
            prop_assert!((ab - wasserstein2(&b, &a).unwrap()).abs() < 1e-12);
            let ac = wasserstein2(&a, &c).unwrap();
            let cb = wasserstein2(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn w2_is_translation_invariant(s in 0u64..1000, cx in -5.0f64..5.0, cy in -5.0f64..5.0) {
            let a = cloud(16, 2, s);
            let b = cloud(16, 2, s + 7);
            let shift = |p: &Vec<Vec<f64>>| p.iter().map(|q| vec![q[0] + cx, q[1] + cy]).collect::<Vec<_>>();
            let w = wasserstein2(&a, &b).unwrap();
            prop_assert!((w - wasserstein2(&shift(&a), &shift(&b)).unwrap()).abs() < 1e-10);
        }
    }
}
