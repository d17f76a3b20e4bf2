//! Euler ODE and Euler–Maruyama SDE sampling with classifier-free guidance.
//!
//! Time runs on a uniform grid from `t = 0` (noise) to `t = 1` (data). The SDE
//! uses drift `v + (w_t / 2) * score` and diffusion `sqrt(w_t)`, which leaves
//! the marginals of the probability-flow ODE unchanged; its last step is taken
//! with the ODE rule since the score is singular at `t = 1`.
//!
//! Guidance bounds `sigma_low`/`sigma_high` are applied to `t` directly.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Label, VelocityModel};
use crate::objective::MeanTrajectory;
use crate::rng::{substream, Stream, StreamRng};
use crate::schedule::{check_time, Schedule};

pub const DEFAULT_NFE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    EulerOde,
    #[default]
    EulerMaruyama,
}

/// Rule for the SDE diffusion coefficient `w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionScale {
    /// `w_t = sigma(t)`.
    #[default]
    Sigma,
    Zero,
    Constant(f64),
}

impl DiffusionScale {
    pub fn at(&self, schedule: Schedule, t: f64) -> Result<f64> {
        Ok(match *self {
            DiffusionScale::Sigma => schedule.eval(t)?.sigma,
            DiffusionScale::Zero => 0.0,
            DiffusionScale::Constant(w) => w,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub nfe: usize,
    pub diffusion: DiffusionScale,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::EulerMaruyama,
            nfe: DEFAULT_NFE,
            diffusion: DiffusionScale::Sigma,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn ode(nfe: usize) -> Self {
        Self {
            kind: SamplerKind::EulerOde,
            nfe,
            ..Self::default()
        }
    }

    pub fn sde(nfe: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::EulerMaruyama,
            nfe,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::invalid("nfe", "must be at least 1"));
        }
        if let DiffusionScale::Constant(w) = self.diffusion {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("diffusion", "constant scale must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// `w v_c + (1 - w) v_u`.
    #[default]
    StandardCfg,
    /// `(1 - lambda) [w v_c + (1 - w) v_u] + lambda T(t)`.
    HatCfg,
    /// `(w + lambda) v_c - (1 - w) v_u - lambda T(t)`.
    TildeCfg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub w: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub lambda: f64,
    pub t_hat: Option<MeanTrajectory>,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            w: 1.0,
            sigma_low: 0.0,
            sigma_high: 1.0,
            lambda: 0.0,
            t_hat: None,
            mode: GuidanceMode::StandardCfg,
        }
    }

    /// Grid-searched setting for contrastive models: w = 1.85 on t in [0, 0.65].
    pub fn delta_fm_preset(lambda: f64, t_hat: MeanTrajectory) -> Self {
        Self {
            enabled: true,
            w: 1.85,
            sigma_low: 0.0,
            sigma_high: 0.65,
            lambda,
            t_hat: Some(t_hat),
            mode: GuidanceMode::HatCfg,
        }
    }

    /// Grid-searched setting for plain flow matching: w = 1.75 on t in [0, 0.75].
    pub fn fm_preset() -> Self {
        Self {
            enabled: true,
            w: 1.75,
            sigma_low: 0.0,
            sigma_high: 0.75,
            lambda: 0.0,
            t_hat: None,
            mode: GuidanceMode::StandardCfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.sigma_low && self.sigma_low <= self.sigma_high && self.sigma_high <= 1.0) {
            return Err(Error::invalid("sigma_low/sigma_high", "need 0 <= sigma_low <= sigma_high <= 1"));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::invalid("w", "must be finite and non-negative"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be finite"));
        }
        Ok(())
    }

    pub fn active_at(&self, t: f64) -> bool {
        self.enabled && self.sigma_low <= t && t <= self.sigma_high
    }

    fn mean_trajectory(&self) -> Result<Option<&MeanTrajectory>> {
        match self.mode {
            GuidanceMode::StandardCfg => Ok(None),
            GuidanceMode::HatCfg => self.t_hat.as_ref().map(Some).ok_or(Error::MissingMeanTrajectory("hat_cfg")),
            GuidanceMode::TildeCfg => self.t_hat.as_ref().map(Some).ok_or(Error::MissingMeanTrajectory("tilde_cfg")),
        }
    }
}

/// Combine conditional and unconditional velocities of one row.
pub fn combine(
    mode: GuidanceMode,
    w: f64,
    lambda: f64,
    v_c: &[f64],
    v_u: &[f64],
    t_hat: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_dim(v_c.len(), v_u.len())?;
    let m = |k: usize| t_hat.map_or(0.0, |m| m[k]);
    if let Some(m) = t_hat {
        check_dim(v_c.len(), m.len())?;
    }
    Ok((0..v_c.len())
        .map(|k| match mode {
            GuidanceMode::StandardCfg => w * v_c[k] + (1.0 - w) * v_u[k],
            GuidanceMode::HatCfg => (1.0 - lambda) * (w * v_c[k] + (1.0 - w) * v_u[k]) + lambda * m(k),
            GuidanceMode::TildeCfg => (w + lambda) * v_c[k] - (1.0 - w) * v_u[k] - lambda * m(k),
        })
        .collect())
}

/// Guided velocities for row-major `states` sharing `t` and `y`.
pub fn guided_velocity_batch<M: VelocityModel + ?Sized>(
    model: &M,
    states: &[f64],
    t: f64,
    y: Label,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<f64>> {
    let t_hat = if guidance.enabled { guidance.mean_trajectory()? } else { None };
    let v_c = model.velocity_batch(states, t, y)?;
    if !guidance.active_at(t) {
        return Ok(v_c);
    }
    let v_u = model.velocity_batch(states, t, Label::Null)?;
    let m = t_hat.map(|m| m.at(schedule, t)).transpose()?;
    let d = model.dim();
    let mut out = Vec::with_capacity(v_c.len());
    for (c, u) in v_c.chunks(d).zip(v_u.chunks(d)) {
        out.extend(combine(guidance.mode, guidance.w, guidance.lambda, c, u, m.as_deref())?);
    }
    Ok(out)
}

pub fn guided_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    x_t: &[f64],
    t: f64,
    y: Label,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<f64>> {
    check_dim(model.dim(), x_t.len())?;
    guided_velocity_batch(model, x_t, t, y, guidance, schedule)
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    check_time(t)?;
    check_time(t + dt)
}

fn axpy(x: &[f64], dt: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + dt * b).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn step_ode<M: VelocityModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    dt: f64,
    y: Label,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<f64>> {
    check_step(t, dt)?;
    let v = guided_velocity(model, x, t, y, guidance, schedule)?;
    Ok(axpy(x, dt, &v))
}

/// One Euler–Maruyama step with an explicit standard-normal draw `xi`.
///
/// The step that reaches `t = 1` and any step with `w_t = 0` ignore `xi`.
#[allow(clippy::too_many_arguments)]
pub fn step_sde_with_noise<M: VelocityModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    dt: f64,
    y: Label,
    guidance: &GuidanceConfig,
    schedule: Schedule,
    diffusion: DiffusionScale,
    xi: &[f64],
) -> Result<Vec<f64>> {
    check_step(t, dt)?;
    check_dim(x.len(), xi.len())?;
    let v = guided_velocity(model, x, t, y, guidance, schedule)?;
    sde_update(x, &v, t, dt, schedule, diffusion, |_| xi.to_vec())
}

/// One Euler–Maruyama step drawing its noise from `rng` only when it is needed.
#[allow(clippy::too_many_arguments)]
pub fn step_sde<M: VelocityModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    dt: f64,
    y: Label,
    guidance: &GuidanceConfig,
    schedule: Schedule,
    diffusion: DiffusionScale,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_step(t, dt)?;
    let v = guided_velocity(model, x, t, y, guidance, schedule)?;
    sde_update(x, &v, t, dt, schedule, diffusion, |d| standard_normal(d, rng))
}

fn is_final_step(t: f64, dt: f64) -> bool {
    t + dt >= Schedule::HORIZON
}

fn sde_update(
    x: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
    schedule: Schedule,
    diffusion: DiffusionScale,
    noise: impl FnOnce(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let w = diffusion.at(schedule, t)?;
    if w == 0.0 || is_final_step(t, dt) {
        return Ok(axpy(x, dt, v));
    }
    let score = schedule.velocity_to_score(x, v, t)?;
    let xi = noise(x.len());
    let amp = (w * dt).sqrt();
    Ok((0..x.len())
        .map(|k| x[k] + dt * (v[k] + 0.5 * w * score[k]) + amp * xi[k])
        .collect())
}

fn standard_normal(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Initial noise for `n` trajectories; trajectory `i` draws from its own substream.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| standard_normal(dim, &mut substream(seed, Stream::Noise, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub t: f64,
    pub state: Vec<f64>,
    /// Posterior-mean estimate of the final sample implied by the velocity at this state.
    pub expectation: Vec<f64>,
}

fn grid_time(k: usize, nfe: usize) -> f64 {
    k as f64 / nfe as f64
}

/// Integrate every trajectory in `eps` together, returning one record list per trajectory.
///
/// With `record_every = None` only the final state is kept.
#[allow(clippy::too_many_arguments)]
fn integrate<M: VelocityModel + ?Sized>(
    model: &M,
    eps: &[Vec<f64>],
    y: Label,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
    record_every: Option<usize>,
) -> Result<Vec<Vec<TrajectoryRecord>>> {
    config.validate()?;
    guidance.validate()?;
    if let Label::Class(c) = y {
        if c >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: c,
                num_classes: model.num_classes(),
            });
        }
    }
    let d = model.dim();
    let n = eps.len();
    let mut states = Vec::with_capacity(n * d);
    for e in eps {
        check_dim(d, e.len())?;
        states.extend_from_slice(e);
    }
    let mut rngs: Vec<StreamRng> = (0..n)
        .map(|i| substream(config.seed, Stream::Sampler, i as u64))
        .collect();
    let mut records = vec![Vec::new(); n];
    let nfe = config.nfe;
    let wants = |k: usize| match record_every {
        Some(every) => k == 0 || k == nfe || k % every == 0,
        None => false,
    };
    let push = |records: &mut Vec<Vec<TrajectoryRecord>>, k: usize, t: f64, states: &[f64], v: Option<&[f64]>| -> Result<()> {
        let zeros = vec![0.0; d];
        for i in 0..n {
            let x = &states[i * d..(i + 1) * d];
            let vi = v.map_or(zeros.as_slice(), |v| &v[i * d..(i + 1) * d]);
            records[i].push(TrajectoryRecord {
                step: k,
                t,
                state: x.to_vec(),
                expectation: schedule.denoise_expectation(x, vi, t)?,
            });
        }
        Ok(())
    };

    for k in 0..nfe {
        let t = grid_time(k, nfe);
        let dt = grid_time(k + 1, nfe) - t;
        let v = guided_velocity_batch(model, &states, t, y, guidance, schedule)?;
        if wants(k) {
            push(&mut records, k, t, &states, Some(&v))?;
        }
        let mut next = Vec::with_capacity(states.len());
        for i in 0..n {
            let x = &states[i * d..(i + 1) * d];
            let vi = &v[i * d..(i + 1) * d];
            next.extend(match config.kind {
                SamplerKind::EulerOde => axpy(x, dt, vi),
                SamplerKind::EulerMaruyama => {
                    let rng = &mut rngs[i];
                    sde_update(x, vi, t, dt, schedule, config.diffusion, |d| standard_normal(d, rng))?
                }
            });
        }
        states = next;
    }
    // At t = 1 the posterior mean is the state itself, whatever the velocity.
    push(&mut records, nfe, 1.0, &states, None)?;
    Ok(records)
}

/// Final states of trajectories started from the given noise.
pub fn sample_from<M: VelocityModel + ?Sized>(
    model: &M,
    eps: &[Vec<f64>],
    y: Label,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<Vec<f64>>> {
    Ok(integrate(model, eps, y, config, guidance, schedule, None)?
        .into_iter()
        .map(|mut r| r.pop().expect("final record").state)
        .collect())
}

/// `n` samples for condition `y` from fresh noise seeded by `config.seed`.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    n: usize,
    y: Label,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
) -> Result<Vec<Vec<f64>>> {
    let eps = initial_noise(n, model.dim(), config.seed);
    sample_from(model, &eps, y, config, guidance, schedule)
}

/// Records at step 0, every `record_every` steps, and the final step.
#[allow(clippy::too_many_arguments)]
pub fn trajectory<M: VelocityModel + ?Sized>(
    model: &M,
    eps: &[f64],
    y: Label,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
    record_every: usize,
) -> Result<Vec<TrajectoryRecord>> {
    Ok(trajectories(model, &[eps.to_vec()], y, config, guidance, schedule, record_every)?
        .pop()
        .expect("one trajectory"))
}

/// Batched [`trajectory`]; trajectory `i` uses SDE substream `i`.
#[allow(clippy::too_many_arguments)]
pub fn trajectories<M: VelocityModel + ?Sized>(
    model: &M,
    eps: &[Vec<f64>],
    y: Label,
    config: &SamplerConfig,
    guidance: &GuidanceConfig,
    schedule: Schedule,
    record_every: usize,
) -> Result<Vec<Vec<TrajectoryRecord>>> {
    if record_every == 0 {
        return Err(Error::invalid("record_every", "must be at least 1"));
    }
    integrate(model, eps, y, config, guidance, schedule, Some(record_every))
}

fn label_field(y: Label) -> String {
    match y {
        Label::Class(c) => c.to_string(),
        Label::Null => "null".to_string(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Samples as CSV with header `class,dim0,dim1,...`.
pub fn write_samples_csv<W: Write>(out: W, groups: &[(Label, Vec<Vec<f64>>)]) -> Result<()> {
    let dim = groups.iter().flat_map(|(_, s)| s.first()).map(Vec::len).next().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["class".to_string()];
    header.extend((0..dim).map(|k| format!("dim{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (y, samples) in groups {
        for s in samples {
            check_dim(dim, s.len())?;
            let mut row = vec![label_field(*y)];
            row.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trajectories as CSV with header `traj_id,step,t,state0..,expectation0..`.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[(usize, &[TrajectoryRecord])]) -> Result<()> {
    let dim = trajectories
        .iter()
        .flat_map(|(_, r)| r.first())
        .map(|r| r.state.len())
        .next()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["traj_id".to_string(), "step".to_string(), "t".to_string()];
    header.extend((0..dim).map(|k| format!("state{k}")));
    header.extend((0..dim).map(|k| format!("expectation{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, records) in trajectories {
        for r in records.iter() {
            check_dim(dim, r.state.len())?;
            let mut row = vec![id.to_string(), r.step.to_string(), r.t.to_string()];
            row.extend(r.state.iter().chain(&r.expectation).map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a trajectory dump back into `(traj_id, records)` groups, in file order.
pub fn read_trajectories_csv<R: std::io::Read>(input: R) -> Result<Vec<(usize, Vec<TrajectoryRecord>)>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ["traj_id", "step", "t"] || (cols.len() - 3) % 2 != 0 {
        return Err(Error::Parse {
            line: 1,
            reason: "expected header traj_id,step,t,state..,expectation..".into(),
        });
    }
    let dim = (cols.len() - 3) / 2;
    let mut out: Vec<(usize, Vec<TrajectoryRecord>)> = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        let field = |k: usize| -> Result<&str> {
            row.get(k).ok_or_else(|| Error::Parse { line, reason: format!("missing column {k}") })
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.trim().parse().map_err(|e| Error::Parse { line, reason: format!("column {k}: {e}") })
        };
        let id: usize = field(0)?.trim().parse().map_err(|e| Error::Parse { line, reason: format!("traj_id: {e}") })?;
        let step: usize = field(1)?.trim().parse().map_err(|e| Error::Parse { line, reason: format!("step: {e}") })?;
        let record = TrajectoryRecord {
            step,
            t: num(2)?,
            state: (0..dim).map(|k| num(3 + k)).collect::<Result<_>>()?,
            expectation: (0..dim).map(|k| num(3 + dim + k)).collect::<Result<_>>()?,
        };
        match out.iter_mut().find(|(tid, _)| *tid == id) {
            Some((_, recs)) => recs.push(record),
            None => out.push((id, vec![record])),
        }
    }
    Ok(out)
}
