//! Class-conditional datasets.
//!
//! Synthetic data comes from diagonal Gaussian mixtures, which give closed forms
//! for the class posterior and for the optimal (population) velocity field of the
//! interpolant. User data can be loaded from CSV with a `class,dim0,dim1,...` header.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Label, VelocityModel};
use crate::rng::{stream, Stream};
use crate::schedule::Schedule;

/// Separation between the two unit-variance class means that makes their overlap
/// coefficient 0.5, i.e. `2 * Phi^{-1}(0.75)`.
pub const DEFAULT_SEPARATION: f64 = 1.348_979_500_392_163_4;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    dim: usize,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        check_dim(points.len(), labels.len())?;
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::invalid("points", "zero-dimensional points"));
        }
        for p in &points {
            check_dim(dim, p.len())?;
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            points,
            labels,
            num_classes,
            dim,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_points(&self, class: usize) -> Vec<&[f64]> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(p, _)| p.as_slice())
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in &self.points {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.points.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variance: Vec<f64>,
    pub weight: f64,
}

/// Per-class diagonal Gaussian mixtures with equal class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub classes: Vec<Vec<Component>>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn diag_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((&xi, &mi), &vi)| -0.5 * ((xi - mi).powi(2) / vi + vi.ln() + LN_2PI))
        .sum()
}

impl GaussianMixtureSpec {
    /// One isotropic Gaussian component per class.
    pub fn isotropic(means: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        let spec = Self {
            classes: means
                .into_iter()
                .map(|mean| {
                    let d = mean.len();
                    vec![Component {
                        mean,
                        variance: vec![scale * scale; d],
                        weight: 1.0,
                    }]
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Empty("mixture classes"));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("mean", "zero-dimensional component"));
        }
        for comps in &self.classes {
            if comps.is_empty() {
                return Err(Error::Empty("class components"));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 || comps.iter().any(|c| !(c.weight >= 0.0)) {
                return Err(Error::invalid("weight", format!("class weights sum to {total}")));
            }
            for c in comps {
                check_dim(dim, c.mean.len())?;
                check_dim(dim, c.variance.len())?;
                if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(Error::invalid("variance", "covariances must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Components (with mixture weights) that make up `p(x | label)`; `Null` is the marginal.
    fn components(&self, label: Label) -> Result<Vec<(&Component, f64)>> {
        match label {
            Label::Class(c) => self
                .classes
                .get(c)
                .map(|comps| comps.iter().map(|k| (k, k.weight)).collect())
                .ok_or(Error::LabelOutOfRange {
                    label: c,
                    num_classes: self.num_classes(),
                }),
            Label::Null => {
                let share = 1.0 / self.num_classes() as f64;
                Ok(self
                    .classes
                    .iter()
                    .flat_map(|comps| comps.iter().map(move |k| (k, k.weight * share)))
                    .collect())
            }
        }
    }

    pub fn class_log_density(&self, class: usize, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let terms: Vec<f64> = self
            .components(Label::Class(class))?
            .into_iter()
            .map(|(c, w)| w.ln() + diag_log_density(x, &c.mean, &c.variance))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Bayes posterior over classes with equal priors.
    pub fn class_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logs = (0..self.num_classes())
            .map(|c| self.class_log_density(c, x))
            .collect::<Result<Vec<_>>>()?;
        let norm = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - norm).exp()).collect())
    }

    pub fn sample_class(&self, class: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let comps = self.components(Label::Class(class))?;
        Ok((0..n)
            .map(|_| {
                let comp = if comps.len() == 1 {
                    comps[0].0
                } else {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    comps
                        .iter()
                        .find(|(_, w)| {
                            acc += w;
                            u < acc
                        })
                        .unwrap_or(comps.last().expect("nonempty"))
                        .0
                };
                comp.mean
                    .iter()
                    .zip(&comp.variance)
                    .map(|(&m, &v)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + v.sqrt() * z
                    })
                    .collect()
            })
            .collect())
    }

    /// `n_per_class` points per class drawn from the given seed.
    pub fn sample_cloud(&self, n_per_class: usize, seed: u64) -> Result<LabeledPointCloud> {
        if n_per_class == 0 {
            return Err(Error::invalid("n_per_class", "must be at least 1"));
        }
        let mut rng = stream(seed, Stream::Data);
        let mut points = Vec::with_capacity(n_per_class * self.num_classes());
        let mut labels = Vec::with_capacity(points.capacity());
        for c in 0..self.num_classes() {
            points.extend(self.sample_class(c, n_per_class, &mut rng)?);
            labels.extend(std::iter::repeat_n(c, n_per_class));
        }
        LabeledPointCloud::new(points, labels, self.num_classes())
    }

    /// Per-component posterior responsibilities and conditional quantities at `x_t`.
    fn posterior_terms(
        &self,
        x_t: &[f64],
        t: f64,
        label: Label,
        schedule: Schedule,
    ) -> Result<Vec<(f64, &Component, Vec<f64>, Vec<f64>)>> {
        check_dim(self.dim(), x_t.len())?;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { t });
        }
        let c = schedule.eval(t)?;
        let comps = self.components(label)?;
        let mut logs = Vec::with_capacity(comps.len());
        let mut terms = Vec::with_capacity(comps.len());
        for (comp, w) in comps {
            // x_t | component ~ N(alpha mu, alpha^2 Sigma + sigma^2 I)
            let cov: Vec<f64> = comp
                .variance
                .iter()
                .map(|v| c.alpha * c.alpha * v + c.sigma * c.sigma)
                .collect();
            if cov.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("covariance", "singular marginal covariance"));
            }
            let mean: Vec<f64> = comp.mean.iter().map(|m| c.alpha * m).collect();
            let whitened: Vec<f64> = x_t
                .iter()
                .zip(&mean)
                .zip(&cov)
                .map(|((x, m), v)| (x - m) / v)
                .collect();
            logs.push(w.ln() + diag_log_density(x_t, &mean, &cov));
            terms.push((comp, cov, whitened));
        }
        let norm = log_sum_exp(&logs);
        Ok(terms
            .into_iter()
            .zip(logs)
            .map(|((comp, cov, white), l)| ((l - norm).exp(), comp, cov, white))
            .collect())
    }

    /// Population velocity `alpha_dot E[x | x_t] + sigma_dot E[eps | x_t]`.
    pub fn optimal_velocity(
        &self,
        x_t: &[f64],
        t: f64,
        label: Label,
        schedule: Schedule,
    ) -> Result<Vec<f64>> {
        let c = schedule.eval(t)?;
        let mut v = vec![0.0; x_t.len()];
        for (r, comp, _cov, white) in self.posterior_terms(x_t, t, label, schedule)? {
            for i in 0..v.len() {
                let ex = comp.mean[i] + c.alpha * comp.variance[i] * white[i];
                let ee = c.sigma * white[i];
                v[i] += r * (c.alpha_dot * ex + c.sigma_dot * ee);
            }
        }
        Ok(v)
    }

    /// Analytic score of the interpolant marginal at time `t`.
    pub fn score(&self, x_t: &[f64], t: f64, label: Label, schedule: Schedule) -> Result<Vec<f64>> {
        let mut s = vec![0.0; x_t.len()];
        for (r, _comp, _cov, white) in self.posterior_terms(x_t, t, label, schedule)? {
            for i in 0..s.len() {
                s[i] -= r * white[i];
            }
        }
        Ok(s)
    }

    /// Class responsibilities `p(y | x_t)` at time `t` under equal priors.
    pub fn class_responsibilities(&self, x_t: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
        let share = 1.0 / self.num_classes() as f64;
        let mut logs = Vec::with_capacity(self.num_classes());
        for class in 0..self.num_classes() {
            let c = schedule.eval(t)?;
            let terms: Vec<f64> = self.classes[class]
                .iter()
                .map(|k| {
                    let mean: Vec<f64> = k.mean.iter().map(|m| c.alpha * m).collect();
                    let cov: Vec<f64> = k
                        .variance
                        .iter()
                        .map(|v| c.alpha * c.alpha * v + c.sigma * c.sigma)
                        .collect();
                    k.weight.ln() + diag_log_density(x_t, &mean, &cov)
                })
                .collect();
            logs.push(share.ln() + log_sum_exp(&terms));
        }
        let norm = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - norm).exp()).collect())
    }
}

/// The analytic optimal velocity of a mixture, usable wherever a trained model is.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub spec: GaussianMixtureSpec,
    pub schedule: Schedule,
}

impl VelocityModel for OracleField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn velocity_batch(&self, states: &[f64], t: f64, label: Label) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(states.len());
        for x in states.chunks(d) {
            check_dim(d, x.len())?;
            out.extend(self.spec.optimal_velocity(x, t, label, self.schedule)?);
        }
        Ok(out)
    }
}

/// Two isotropic 2-D classes at `(-separation / 2, 0)` and `(+separation / 2, 0)`.
pub fn two_gaussians(
    separation: f64,
    scale: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<(LabeledPointCloud, GaussianMixtureSpec)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale", "must be positive"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid("separation", "must be finite and non-negative"));
    }
    let spec = GaussianMixtureSpec::isotropic(
        vec![vec![-separation / 2.0, 0.0], vec![separation / 2.0, 0.0]],
        scale,
    )?;
    let cloud = spec.sample_cloud(n_per_class, seed)?;
    Ok((cloud, spec))
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Overlap coefficient `∫ min(p_0, p_1)` of two isotropic Gaussians whose means are
/// `separation` apart. Orthogonal directions integrate to one, leaving a 1-D
/// integral along the mean axis (composite Simpson).
pub fn overlap_coefficient(separation: f64, scale: f64) -> f64 {
    let half = separation / 2.0;
    let lo = -half - 12.0 * scale;
    let hi = half + 12.0 * scale;
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| normal_pdf(x, -half, scale).min(normal_pdf(x, half, scale));
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Bisection for the separation giving a target overlap coefficient.
pub fn separation_for_overlap(target: f64, scale: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid("target", "overlap must lie in (0, 1)"));
    }
    let (mut lo, mut hi) = (0.0, 20.0 * scale);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if overlap_coefficient(mid, scale) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A cloud read from CSV together with the original label of each dense index.
#[derive(Debug, Clone)]
pub struct LoadedCloud {
    pub cloud: LabeledPointCloud,
    pub label_map: Vec<i64>,
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.is_empty() || header.get(0) != Some("class") || header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            reason: "header must be `class,dim0,...`".into(),
        });
    }
    let dim = header.len() - 1;
    let mut raw_labels = Vec::new();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} columns, found {}", dim + 1, record.len()),
            });
        }
        let label: i64 = record[0].parse().map_err(|_| Error::Parse {
            line,
            reason: format!("bad class label `{}`", &record[0]),
        })?;
        let point = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("bad coordinate `{f}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        raw_labels.push(label);
        points.push(point);
    }
    if points.is_empty() {
        return Err(Error::Empty("csv file has no rows"));
    }
    let dense: BTreeMap<i64, usize> = raw_labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let labels = raw_labels.iter().map(|l| dense[l]).collect();
    let label_map: Vec<i64> = dense.keys().copied().collect();
    let cloud = LabeledPointCloud::new(points, labels, label_map.len())?;
    Ok(LoadedCloud { cloud, label_map })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Write `class,dim0,...` rows. Floats use the shortest round-trip representation.
pub fn write_labeled_rows<'a>(
    mut w: impl Write,
    dim: usize,
    rows: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let mut header = String::from("class");
    for i in 0..dim {
        header.push_str(&format!(",dim{i}"));
    }
    writeln!(w, "{header}")?;
    for (label, point) in rows {
        check_dim(dim, point.len())?;
        write!(w, "{label}")?;
        for v in point {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_csv(cloud: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_labeled_rows(
        &mut file,
        cloud.dim(),
        cloud.labels().iter().copied().zip(cloud.points().iter().map(|p| p.as_slice())),
    )?;
    file.flush()?;
    Ok(())
}
