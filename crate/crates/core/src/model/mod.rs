//! Velocity-field network `v(x_t, t, y)`.
//!
//! A dense network over the concatenation `[x_t, fourier(t), embed(y)]` with
//! SiLU hidden activations and a linear output layer. Gradients are computed
//! by an explicit reverse sweep over cached activations; everything is `f64`.
//!
//! Parameter layout (flat vector):
//! `[class embedding table ((num_classes + 1) x embed) | W_0 | b_0 | W_1 | b_1 | ... ]`
//! with each `W_l` stored row-major as `fan_in x fan_out`. The last embedding row
//! is the null class.

pub mod checkpoint;
mod dense;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Stream};
use crate::schedule::check_time;

/// Class condition. `Null` is the unconditional slot used for guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Null => None,
        }
    }
}

/// Anything that can play the role of a velocity field during sampling.
pub trait VelocityModel {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Velocities for `n` row-major states sharing time `t` and condition `label`.
    fn velocity_batch(&self, states: &[f64], t: f64, label: Label) -> Result<Vec<f64>>;

    fn velocity(&self, x: &[f64], t: f64, label: Label) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        self.velocity_batch(x, t, label)
    }
}

/// A model evaluated on a batch whose rows carry their own times and labels.
pub trait BatchModel {
    fn forward_batch(&self, batch: &BatchInput) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub time_features: usize,
    pub class_embed_dim: usize,
}

impl Architecture {
    /// Two hidden layers of 64, 8 Fourier pairs, 16-wide class embedding.
    pub fn toy(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            num_classes,
            time_features: 8,
            class_embed_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("time_features", self.time_features),
            ("class_embed_dim", self.class_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "need at least one hidden layer, all widths >= 1"));
        }
        Ok(())
    }

    /// Width of the network input row.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + 2 * self.time_features + self.class_embed_dim
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.feature_dim());
        dims.extend(&self.hidden);
        dims.push(self.input_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn embedding_len(&self) -> usize {
        (self.num_classes + 1) * self.class_embed_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding_len()
            + self
                .layer_shapes()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    /// Geometrically spaced angular frequencies from 1 to 32 rad per unit time.
    pub fn frequencies(&self) -> Vec<f64> {
        let k = self.time_features;
        (0..k)
            .map(|i| {
                let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                2f64.powf(5.0 * frac)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Loss and exact parameter gradient from one reverse sweep.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// What an objective returns given the batch outputs: the scalar loss and
/// `d loss / d output` with the same row-major shape as the outputs.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub d_outputs: Vec<f64>,
}

/// Inputs for one batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchInput {
    pub states: Vec<f64>,
    pub times: Vec<f64>,
    pub labels: Vec<Label>,
}

impl BatchInput {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    arch: Architecture,
    params: Vec<f64>,
    frequencies: Vec<f64>,
    slots: Vec<LayerSlot>,
}

struct ForwardCache {
    /// `acts[0]` is the input row block, `acts[l + 1]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl VelocityField {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeroed(arch);
        let mut rng = stream(seed, Stream::Init);
        let emb = model.arch.embedding_len();
        for p in &mut model.params[..emb] {
            *p = rng.random_range(-1.0..1.0);
        }
        for slot in model.slots.clone() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for p in &mut model.params[slot.weights..slot.weights + slot.fan_in * slot.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_parameters(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeroed(arch);
        check_dim(model.params.len(), params.len())?;
        model.params = params;
        Ok(model)
    }

    fn zeroed(arch: Architecture) -> Self {
        let mut offset = arch.embedding_len();
        let slots = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let weights = offset;
                let bias = weights + fan_in * fan_out;
                offset = bias + fan_out;
                LayerSlot {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect();
        Self {
            params: vec![0.0; arch.parameter_count()],
            frequencies: arch.frequencies(),
            slots,
            arch,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the embedding row for `label` inside the parameter vector.
    pub fn embedding_range(&self, label: Label) -> Result<std::ops::Range<usize>> {
        let row = self.label_row(label)?;
        let e = self.arch.class_embed_dim;
        Ok(row * e..(row + 1) * e)
    }

    fn label_row(&self, label: Label) -> Result<usize> {
        match label {
            Label::Class(c) if c < self.arch.num_classes => Ok(c),
            Label::Class(c) => Err(Error::LabelOutOfRange {
                label: c,
                num_classes: self.arch.num_classes,
            }),
            Label::Null => Ok(self.arch.num_classes),
        }
    }

    pub fn forward(&self, x_t: &[f64], t: f64, y: Label) -> Result<Vec<f64>> {
        check_dim(self.arch.input_dim, x_t.len())?;
        self.forward_batch(&BatchInput {
            states: x_t.to_vec(),
            times: vec![t],
            labels: vec![y],
        })
    }

    pub fn forward_batch(&self, batch: &BatchInput) -> Result<Vec<f64>> {
        Ok(self.run_forward(batch)?.output)
    }

    /// Evaluate an objective on the batch outputs without the reverse sweep.
    pub fn loss<F>(&self, batch: &BatchInput, objective: F) -> Result<f64>
    where
        F: FnOnce(&[f64]) -> Result<ObjectiveValue>,
    {
        let out = self.forward_batch(batch)?;
        Ok(objective(&out)?.loss)
    }

    pub fn loss_and_gradient<F>(&self, batch: &BatchInput, objective: F) -> Result<GradientTape>
    where
        F: FnOnce(&[f64]) -> Result<ObjectiveValue>,
    {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let cache = self.run_forward(batch)?;
        let value = objective(&cache.output)?;
        check_dim(cache.output.len(), value.d_outputs.len())?;
        let gradient = self.backward(batch, &cache, value.d_outputs);
        Ok(GradientTape {
            loss: value.loss,
            gradient,
        })
    }

    fn features(&self, batch: &BatchInput) -> Result<Vec<f64>> {
        let n = batch.len();
        let d = self.arch.input_dim;
        check_dim(n * d, batch.states.len())?;
        check_dim(n, batch.labels.len())?;
        let width = self.arch.feature_dim();
        let e = self.arch.class_embed_dim;
        let mut rows = vec![0.0; n * width];
        for (r, row) in rows.chunks_exact_mut(width).enumerate() {
            let t = batch.times[r];
            check_time(t)?;
            let emb = self.embedding_range(batch.labels[r])?;
            let (x, rest) = row.split_at_mut(d);
            x.copy_from_slice(&batch.states[r * d..(r + 1) * d]);
            let (fourier, embed) = rest.split_at_mut(2 * self.arch.time_features);
            for (pair, &w) in fourier.chunks_exact_mut(2).zip(&self.frequencies) {
                let (s, c) = (w * t).sin_cos();
                pair[0] = s;
                pair[1] = c;
            }
            debug_assert_eq!(embed.len(), e);
            embed.copy_from_slice(&self.params[emb]);
        }
        Ok(rows)
    }

    fn run_forward(&self, batch: &BatchInput) -> Result<ForwardCache> {
        let n = batch.len();
        let input = self.features(batch)?;
        let hidden_layers = self.slots.len() - 1;
        let mut acts = Vec::with_capacity(hidden_layers + 1);
        let mut pre = Vec::with_capacity(hidden_layers);
        acts.push(input);
        for slot in &self.slots[..hidden_layers] {
            let z = self.affine(acts.last().expect("input present"), n, slot);
            acts.push(z.iter().map(|&v| dense::silu(v)).collect());
            pre.push(z);
        }
        let last = self.slots[hidden_layers];
        let output = self.affine(acts.last().expect("input present"), n, &last);
        Ok(ForwardCache { acts, pre, output })
    }

    fn affine(&self, x: &[f64], n: usize, slot: &LayerSlot) -> Vec<f64> {
        let bias = &self.params[slot.bias..slot.bias + slot.fan_out];
        let mut out: Vec<f64> = bias.iter().copied().cycle().take(n * slot.fan_out).collect();
        let w = &self.params[slot.weights..slot.weights + slot.fan_in * slot.fan_out];
        dense::gemm(n, slot.fan_in, slot.fan_out, x, false, w, false, &mut out, true);
        out
    }

    fn backward(&self, batch: &BatchInput, cache: &ForwardCache, d_out: Vec<f64>) -> Vec<f64> {
        let n = batch.len();
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_out;
        for (l, slot) in self.slots.iter().enumerate().rev() {
            if l + 1 < self.slots.len() {
                // delta currently holds d/d(activation); convert to d/d(pre-activation).
                for (dv, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *dv *= dense::silu_grad(z);
                }
            }
            let x = &cache.acts[l];
            let (gw, gb) = grad[slot.weights..slot.bias + slot.fan_out]
                .split_at_mut(slot.fan_in * slot.fan_out);
            dense::gemm(slot.fan_in, n, slot.fan_out, x, true, &delta, false, gw, false);
            for row in delta.chunks_exact(slot.fan_out) {
                for (g, &dv) in gb.iter_mut().zip(row) {
                    *g += dv;
                }
            }
            let w = &self.params[slot.weights..slot.weights + slot.fan_in * slot.fan_out];
            let mut d_in = vec![0.0; n * slot.fan_in];
            dense::gemm(n, slot.fan_out, slot.fan_in, &delta, false, w, true, &mut d_in, false);
            delta = d_in;
        }
        // delta is now d/d(input features); route the embedding slice to the table.
        let width = self.arch.feature_dim();
        let e = self.arch.class_embed_dim;
        let offset = width - e;
        for (r, row) in delta.chunks_exact(width).enumerate() {
            let range = self
                .embedding_range(batch.labels[r])
                .expect("labels validated in forward");
            for (g, &dv) in grad[range].iter_mut().zip(&row[offset..]) {
                *g += dv;
            }
        }
        grad
    }
}

impl BatchModel for VelocityField {
    fn forward_batch(&self, batch: &BatchInput) -> Result<Vec<f64>> {
        VelocityField::forward_batch(self, batch)
    }
}

impl VelocityModel for VelocityField {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn velocity_batch(&self, states: &[f64], t: f64, label: Label) -> Result<Vec<f64>> {
        let d = self.arch.input_dim;
        if states.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: states.len() % d,
            });
        }
        let n = states.len() / d;
        self.forward_batch(&BatchInput {
            states: states.to_vec(),
            times: vec![t; n],
            labels: vec![label; n],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 2,
            hidden: vec![16, 16],
            num_classes: 2,
            time_features: 4,
            class_embed_dim: 5,
        }
    }

    fn random_batch(n: usize, seed: u64) -> BatchInput {
        let mut rng = stream(seed, Stream::Data);
        BatchInput {
            states: (0..2 * n).map(|_| rng.sample(StandardNormal)).collect(),
            times: (0..n).map(|_| rng.random::<f64>()).collect(),
            labels: (0..n)
                .map(|i| match i % 3 {
                    0 => Label::Class(0),
                    1 => Label::Class(1),
                    _ => Label::Null,
                })
                .collect(),
        }
    }

    fn squared_error(targets: Vec<f64>) -> impl Fn(&[f64]) -> Result<ObjectiveValue> {
        move |out: &[f64]| {
            let n = out.len() as f64;
            let loss = out.iter().zip(&targets).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n;
            let d_outputs = out.iter().zip(&targets).map(|(o, t)| 2.0 * (o - t) / n).collect();
            Ok(ObjectiveValue { loss, d_outputs })
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = Architecture::toy(2, 2);
        let a = VelocityField::init(arch.clone(), 7).unwrap();
        let b = VelocityField::init(arch.clone(), 7).unwrap();
        let c = VelocityField::init(arch, 8).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn init_rejects_zero_dims() {
        let mut arch = Architecture::toy(0, 2);
        assert!(VelocityField::init(arch.clone(), 0).is_err());
        arch.input_dim = 2;
        arch.hidden = vec![64, 0];
        assert!(VelocityField::init(arch, 0).is_err());
    }

    #[test]
    fn biases_start_at_zero() {
        let m = VelocityField::init(small_arch(), 3).unwrap();
        for slot in &m.slots {
            assert!(m.params[slot.bias..slot.bias + slot.fan_out].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn forward_shape_purity_and_conditioning() {
        for (d, seed) in [(1, 1), (2, 2), (5, 3)] {
            let m = VelocityField::init(Architecture::toy(d, 3), seed).unwrap();
            let x: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
            let a = m.forward(&x, 0.37, Label::Class(1)).unwrap();
            let b = m.forward(&x, 0.37, Label::Class(1)).unwrap();
            assert_eq!(a.len(), d);
            assert_eq!(a, b);
            let c = m.forward(&x, 0.37, Label::Class(2)).unwrap();
            assert_ne!(a, c);
            let u = m.forward(&x, 0.37, Label::Null).unwrap();
            assert_ne!(a, u);
        }
    }

    #[test]
    fn forward_rejects_bad_labels_and_times() {
        let m = VelocityField::init(small_arch(), 1).unwrap();
        assert!(matches!(
            m.forward(&[0.0, 0.0], 0.5, Label::Class(2)),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(m.forward(&[0.0, 0.0], 1.5, Label::Class(0)).is_err());
        assert!(m.forward(&[0.0], 0.5, Label::Class(0)).is_err());
    }

    #[test]
    fn forward_does_not_depend_on_batch_composition() {
        let m = VelocityField::init(small_arch(), 11).unwrap();
        let batch = random_batch(9, 4);
        let out = m.forward_batch(&batch).unwrap();
        for i in 0..batch.len() {
            let single = m
                .forward(&batch.states[2 * i..2 * i + 2], batch.times[i], batch.labels[i])
                .unwrap();
            for (a, b) in single.iter().zip(&out[2 * i..2 * i + 2]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut m = VelocityField::init(small_arch(), 5).unwrap();
        let batch = random_batch(8, 6);
        let mut rng = stream(99, Stream::Data);
        let targets: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let tape = m.loss_and_gradient(&batch, squared_error(targets.clone())).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..m.params.len() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = m.loss(&batch, squared_error(targets.clone())).unwrap();
            m.params[i] = orig - h;
            let down = m.loss(&batch, squared_error(targets.clone())).unwrap();
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - tape.gradient[i]).abs() / fd.abs().max(tape.gradient[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn tape_loss_matches_plain_evaluation() {
        let m = VelocityField::init(small_arch(), 5).unwrap();
        let batch = random_batch(8, 7);
        let targets = vec![0.25; 16];
        let tape = m.loss_and_gradient(&batch, squared_error(targets.clone())).unwrap();
        let plain = m.loss(&batch, squared_error(targets)).unwrap();
        assert!((tape.loss - plain).abs() <= 1e-12);
    }

    #[test]
    fn output_bias_gradient_vanishes_at_its_minimiser() {
        // Loss is quadratic in the output bias; its minimiser is the mean residual shift.
        let mut m = VelocityField::init(small_arch(), 8).unwrap();
        let batch = random_batch(12, 9);
        let targets: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        let out = m.forward_batch(&batch).unwrap();
        let last = *m.slots.last().unwrap();
        for k in 0..2 {
            let shift: f64 = (0..12).map(|r| targets[2 * r + k] - out[2 * r + k]).sum::<f64>() / 12.0;
            m.params[last.bias + k] += shift;
        }
        let tape = m.loss_and_gradient(&batch, squared_error(targets)).unwrap();
        for k in 0..2 {
            assert!(tape.gradient[last.bias + k].abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = VelocityField::init(small_arch(), 1).unwrap();
        let r = m.loss_and_gradient(&BatchInput::default(), squared_error(vec![]));
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
