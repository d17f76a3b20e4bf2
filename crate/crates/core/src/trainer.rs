//! Batch step and training loop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledPointCloud;
use crate::error::{Error, Result};
use crate::model::{Label, VelocityField};
use crate::objective::{
    check_lambda, FlowSample, LossReport, NegativePolicy, ObjectiveConfig, ObjectiveStreams, PreparedBatch,
};
use crate::rng::{stream, Stream, StreamRng};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdaptiveMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Plain flow matching; `lambda` is ignored.
    Fm,
    #[default]
    DeltaFm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub negative_policy: NegativePolicy,
    pub p_uncond: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::DeltaFm,
            batch_size: 256,
            iterations: 20_000,
            learning_rate: 1e-3,
            lambda: crate::objective::DEFAULT_LAMBDA,
            negative_policy: NegativePolicy::UniformExcludingSelf,
            p_uncond: 0.1,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoments,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objective == ObjectiveKind::DeltaFm {
            check_lambda(self.lambda)?;
        }
        let min_batch = if self.objective == ObjectiveKind::DeltaFm && self.lambda > 0.0 { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::invalid("batch_size", format!("must be at least {min_batch}")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::invalid("p_uncond", "must lie in [0, 1]"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        Ok(())
    }

    /// The objective selected by this config.
    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Fm => Objective::Fm,
            ObjectiveKind::DeltaFm => Objective::DeltaFm(ObjectiveConfig {
                lambda: self.lambda,
                negative_policy: self.negative_policy,
                seed: self.seed,
            }),
        }
    }

    pub fn optimizer_for(&self, num_params: usize) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.learning_rate),
            OptimizerKind::AdaptiveMoments => {
                Optimizer::adam(self.learning_rate, self.beta1, self.beta2, self.epsilon, num_params)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Fm,
    DeltaFm(ObjectiveConfig),
}

/// Optimizer with its running state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, epsilon: f64, num_params: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        crate::error::check_dim(params.len(), grad.len())?;
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
                m,
                v,
                step,
            } => {
                crate::error::check_dim(m.len(), params.len())?;
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + *epsilon);
                }
            }
        }
        Ok(())
    }
}

/// One optimizer update on the mean-reduced gradient of the selected objective.
pub fn train_step(
    model: &mut VelocityField,
    batch: &[FlowSample],
    schedule: Schedule,
    objective: &Objective,
    streams: &mut ObjectiveStreams,
    optimizer: &mut Optimizer,
) -> Result<LossReport> {
    let prepared = match objective {
        Objective::Fm => PreparedBatch::for_fm(batch, schedule, streams)?,
        Objective::DeltaFm(cfg) => PreparedBatch::for_delta_fm(batch, schedule, cfg, streams)?,
    };
    let mut report = None;
    let tape = model.loss_and_gradient(&prepared.input, prepared.objective(&mut report))?;
    optimizer.update(model.parameters_mut(), &tape.gradient)?;
    Ok(report.expect("objective closure runs exactly once"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub fm_term: f64,
    pub contrastive_term: f64,
    pub total: f64,
}

/// Draws training batches: indices with replacement, fresh noise, condition dropout.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: StreamRng,
    noise: StreamRng,
    dropout: StreamRng,
    p_uncond: f64,
}

impl BatchSampler {
    pub fn new(seed: u64, p_uncond: f64) -> Self {
        Self {
            indices: stream(seed, Stream::BatchIndices),
            noise: stream(seed, Stream::Noise),
            dropout: stream(seed, Stream::Dropout),
            p_uncond,
        }
    }

    pub fn draw(&mut self, data: &LabeledPointCloud, batch_size: usize) -> Result<Vec<FlowSample>> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let d = data.dim();
        Ok((0..batch_size)
            .map(|_| {
                let i = self.indices.random_range(0..data.len());
                let dropped = self.dropout.random::<f64>() < self.p_uncond;
                FlowSample {
                    x: data.points()[i].clone(),
                    y: if dropped { Label::Null } else { Label::Class(data.labels()[i]) },
                    eps: (0..d).map(|_| self.noise.sample(StandardNormal)).collect(),
                }
            })
            .collect())
    }
}

pub fn train(
    model: VelocityField,
    data: &LabeledPointCloud,
    config: &TrainConfig,
    schedule: Schedule,
) -> Result<(VelocityField, Vec<LossRecord>)> {
    train_with(model, data, config, schedule, |_, _| Ok(()))
}

/// Like [`train`], calling `observe` after every update (for logging or checkpoints).
pub fn train_with<F>(
    mut model: VelocityField,
    data: &LabeledPointCloud,
    config: &TrainConfig,
    schedule: Schedule,
    mut observe: F,
) -> Result<(VelocityField, Vec<LossRecord>)>
where
    F: FnMut(&LossRecord, &VelocityField) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let arch = model.architecture();
    crate::error::check_dim(arch.input_dim, data.dim())?;
    if data.num_classes() > arch.num_classes {
        return Err(Error::LabelOutOfRange {
            label: data.num_classes() - 1,
            num_classes: arch.num_classes,
        });
    }
    let objective = config.objective();
    let mut optimizer = config.optimizer_for(model.parameters().len());
    let mut streams = ObjectiveStreams::new(config.seed);
    let mut sampler = BatchSampler::new(config.seed, config.p_uncond);
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = sampler.draw(data, config.batch_size)?;
        let r = train_step(&mut model, &batch, schedule, &objective, &mut streams, &mut optimizer)?;
        let record = LossRecord {
            iteration,
            fm_term: r.fm_term,
            contrastive_term: r.contrastive_term,
            total: r.total,
        };
        observe(&record, &model)?;
        history.push(record);
    }
    Ok((model, history))
}
