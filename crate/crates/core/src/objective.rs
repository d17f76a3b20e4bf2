//! Flow-matching (FM) and contrastive flow-matching (ΔFM) objectives.
//!
//! Per sample `i` of a batch: draw `t ~ U(0, 1)`, form `x_t = alpha x_i + sigma eps_i`,
//! predict `v_hat = v(x_t, t, y_i)` and compare it against the positive target
//! `alpha_dot x_i + sigma_dot eps_i`. ΔFM additionally picks another batch element
//! `j != i` and subtracts `lambda * ||v_hat - (alpha_dot x_j + sigma_dot eps_j)||^2`,
//! evaluated at the same `t`.
//!
//! Time draws and negative indices come from separate streams, so an FM and a
//! ΔFM evaluation with the same seed see identical `t` sequences.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{BatchInput, BatchModel, Label, ObjectiveValue};
use crate::rng::{stream, Stream, StreamRng};
use crate::schedule::Schedule;

pub const DEFAULT_LAMBDA: f64 = 0.05;

/// One training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x: Vec<f64>,
    pub y: Label,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Any other index of the batch, uniformly; same-class negatives allowed.
    #[default]
    UniformExcludingSelf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub negative_policy: NegativePolicy,
    pub seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            negative_policy: NegativePolicy::UniformExcludingSelf,
            seed: 0,
        }
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid("lambda", format!("{lambda} is outside [0, 1)")))
    }
}

impl ObjectiveConfig {
    pub fn new(lambda: f64, seed: u64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            seed,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub fm_term: f64,
    pub contrastive_term: f64,
    pub total: f64,
}

/// Random streams consumed by the objectives.
#[derive(Debug, Clone)]
pub struct ObjectiveStreams {
    pub time: StreamRng,
    pub negatives: StreamRng,
}

impl ObjectiveStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            time: stream(seed, Stream::Time),
            negatives: stream(seed, Stream::Negatives),
        }
    }
}

/// Uniform index over `{0..n} \ {i}`.
pub fn sample_negative(n: usize, i: usize, rng: &mut impl Rng) -> Result<usize> {
    if n < 2 {
        return Err(Error::NoNegatives(n));
    }
    if i >= n {
        return Err(Error::invalid("i", format!("index {i} outside batch of {n}")));
    }
    let j = rng.random_range(0..n - 1);
    Ok(if j >= i { j + 1 } else { j })
}

/// A batch with its times drawn and its regression targets resolved.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub input: BatchInput,
    pub positive: Vec<f64>,
    /// Negative targets and the index each was drawn from; absent for plain FM.
    pub negative: Option<(Vec<f64>, Vec<usize>)>,
    pub lambda: f64,
    dim: usize,
}

fn batch_dim(batch: &[FlowSample]) -> Result<usize> {
    let first = batch.first().ok_or(Error::Empty("batch"))?;
    let d = first.x.len();
    for s in batch {
        check_dim(d, s.x.len())?;
        check_dim(d, s.eps.len())?;
    }
    Ok(d)
}

fn prepare(
    batch: &[FlowSample],
    schedule: Schedule,
    streams: &mut ObjectiveStreams,
    contrastive: Option<&ObjectiveConfig>,
) -> Result<PreparedBatch> {
    let d = batch_dim(batch)?;
    let n = batch.len();
    if let Some(cfg) = contrastive {
        cfg.validate()?;
        if n < 2 {
            return Err(Error::NoNegatives(n));
        }
    }
    let mut input = BatchInput {
        states: Vec::with_capacity(n * d),
        times: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    let mut positive = Vec::with_capacity(n * d);
    let mut negative = contrastive.map(|_| (Vec::with_capacity(n * d), Vec::with_capacity(n)));
    for (i, s) in batch.iter().enumerate() {
        let t: f64 = streams.time.random();
        input.states.extend(schedule.interpolate(&s.x, &s.eps, t)?);
        input.times.push(t);
        input.labels.push(s.y);
        positive.extend(schedule.target_velocity(&s.x, &s.eps, t)?);
        if let Some((targets, indices)) = negative.as_mut() {
            let j = sample_negative(n, i, &mut streams.negatives)?;
            targets.extend(schedule.target_velocity(&batch[j].x, &batch[j].eps, t)?);
            indices.push(j);
        }
    }
    Ok(PreparedBatch {
        input,
        positive,
        negative,
        lambda: contrastive.map_or(0.0, |c| c.lambda),
        dim: d,
    })
}

impl PreparedBatch {
    pub fn for_fm(batch: &[FlowSample], schedule: Schedule, streams: &mut ObjectiveStreams) -> Result<Self> {
        prepare(batch, schedule, streams, None)
    }

    pub fn for_delta_fm(
        batch: &[FlowSample],
        schedule: Schedule,
        config: &ObjectiveConfig,
        streams: &mut ObjectiveStreams,
    ) -> Result<Self> {
        prepare(batch, schedule, streams, Some(config))
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Loss report and `d total / d outputs` for the model outputs on this batch.
    pub fn evaluate(&self, outputs: &[f64]) -> Result<(LossReport, Vec<f64>)> {
        check_dim(self.positive.len(), outputs.len())?;
        let n = self.len() as f64;
        let d = self.dim;
        let mut fm = 0.0;
        let mut con = 0.0;
        let mut grad = vec![0.0; outputs.len()];
        for r in 0..self.len() {
            let rows = r * d..(r + 1) * d;
            let mut pos_sq = 0.0;
            let mut neg_sq = 0.0;
            for k in rows {
                let res = outputs[k] - self.positive[k];
                pos_sq += res * res;
                match &self.negative {
                    Some((neg, _)) => {
                        let nres = outputs[k] - neg[k];
                        neg_sq += nres * nres;
                        grad[k] = (2.0 * res - 2.0 * self.lambda * nres) / n;
                    }
                    None => grad[k] = (2.0 * res) / n,
                }
            }
            fm += pos_sq;
            con += neg_sq;
        }
        let fm_term = fm / n;
        let contrastive_term = con / n;
        let report = LossReport {
            fm_term,
            contrastive_term,
            total: fm_term - self.lambda * contrastive_term,
        };
        Ok((report, grad))
    }

    /// Adapter for [`crate::VelocityField::loss_and_gradient`] that also keeps the report.
    pub fn objective<'a>(
        &'a self,
        report: &'a mut Option<LossReport>,
    ) -> impl FnOnce(&[f64]) -> Result<ObjectiveValue> + 'a {
        move |out: &[f64]| {
            let (r, d_outputs) = self.evaluate(out)?;
            *report = Some(r);
            Ok(ObjectiveValue {
                loss: r.total,
                d_outputs,
            })
        }
    }
}

pub fn fm_loss(
    model: &impl BatchModel,
    batch: &[FlowSample],
    schedule: Schedule,
    streams: &mut ObjectiveStreams,
) -> Result<LossReport> {
    let prepared = PreparedBatch::for_fm(batch, schedule, streams)?;
    let out = model.forward_batch(&prepared.input)?;
    Ok(prepared.evaluate(&out)?.0)
}

pub fn delta_fm_loss(
    model: &impl BatchModel,
    batch: &[FlowSample],
    schedule: Schedule,
    config: &ObjectiveConfig,
    streams: &mut ObjectiveStreams,
) -> Result<LossReport> {
    let prepared = PreparedBatch::for_delta_fm(batch, schedule, config, streams)?;
    let out = model.forward_batch(&prepared.input)?;
    Ok(prepared.evaluate(&out)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanTrajectoryMode {
    /// Noise mean taken as exactly zero.
    #[default]
    Analytic,
    /// Noise mean estimated from draws.
    Empirical,
}

/// The dataset-averaged target velocity `T(t) = alpha_dot(t) mean(x) + sigma_dot(t) mean(eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    pub data_mean: Vec<f64>,
    pub noise_mean: Vec<f64>,
    pub mode: MeanTrajectoryMode,
}

impl MeanTrajectory {
    pub fn analytic(points: &[Vec<f64>]) -> Result<Self> {
        let data_mean = point_mean(points)?;
        Ok(Self {
            noise_mean: vec![0.0; data_mean.len()],
            data_mean,
            mode: MeanTrajectoryMode::Analytic,
        })
    }

    /// Noise mean estimated from `noise_samples` standard-normal draws.
    pub fn empirical(points: &[Vec<f64>], noise_samples: usize, seed: u64) -> Result<Self> {
        if noise_samples == 0 {
            return Err(Error::invalid("noise_samples", "must be at least 1"));
        }
        let data_mean = point_mean(points)?;
        let mut rng = stream(seed, Stream::Noise);
        let mut noise_mean = vec![0.0; data_mean.len()];
        for _ in 0..noise_samples {
            for m in noise_mean.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *m += z;
            }
        }
        noise_mean.iter_mut().for_each(|m| *m /= noise_samples as f64);
        Ok(Self {
            data_mean,
            noise_mean,
            mode: MeanTrajectoryMode::Empirical,
        })
    }

    pub fn from_data_mean(data_mean: Vec<f64>) -> Self {
        Self {
            noise_mean: vec![0.0; data_mean.len()],
            data_mean,
            mode: MeanTrajectoryMode::Analytic,
        }
    }

    pub fn dim(&self) -> usize {
        self.data_mean.len()
    }

    pub fn at(&self, schedule: Schedule, t: f64) -> Result<Vec<f64>> {
        let c = schedule.eval(t)?;
        Ok(self
            .data_mean
            .iter()
            .zip(&self.noise_mean)
            .map(|(&x, &e)| c.alpha_dot * x + c.sigma_dot * e)
            .collect())
    }
}

fn point_mean(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = points.first().ok_or(Error::Empty("dataset"))?;
    let mut m = vec![0.0; first.len()];
    for p in points {
        check_dim(m.len(), p.len())?;
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= points.len() as f64);
    Ok(m)
}

/// Mean trajectory at `t`; empirical mode uses 10^6 noise draws from `seed`.
pub fn mean_trajectory(
    points: &[Vec<f64>],
    schedule: Schedule,
    t: f64,
    mode: MeanTrajectoryMode,
    seed: u64,
) -> Result<Vec<f64>> {
    let traj = match mode {
        MeanTrajectoryMode::Analytic => MeanTrajectory::analytic(points)?,
        MeanTrajectoryMode::Empirical => MeanTrajectory::empirical(points, 1_000_000, seed)?,
    };
    traj.at(schedule, t)
}

/// Minimiser of the ΔFM objective given the FM minimiser: `(v_fm - lambda T) / (1 - lambda)`.
pub fn optimal_velocity_shift(v_fm: &[f64], t_hat: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dim(v_fm.len(), t_hat.len())?;
    Ok(v_fm
        .iter()
        .zip(t_hat)
        .map(|(&v, &m)| (v - lambda * m) / (1.0 - lambda))
        .collect())
}
