//! Subcommand implementations. Each returns its main artifact so tests can inspect it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use deltafm::data::{load_csv, LabeledPointCloud, OracleField};
use deltafm::metrics::{evaluate, MetricsReport};
use deltafm::model::checkpoint;
use deltafm::oracle::{self, OracleConfig, OracleReport};
use deltafm::sampler::{
    self, initial_noise, trajectories, write_samples_csv, write_trajectories_csv, GuidanceConfig, GuidanceMode,
    SamplerKind, TrajectoryRecord,
};
use deltafm::trainer::{train_with, LossRecord, ObjectiveKind};
use deltafm::{Label, Schedule, VelocityField, VelocityModel};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, RunConfig};
use crate::error::CliError;
use crate::plot;
use crate::{
    EvalArgs, GuidanceArg, ObjectiveArg, OracleArgs, Overrides, PlotArgs, PlotKind, SampleArgs, SamplerArg,
    SamplingFlags, SweepArgs, SweepAxis, TrainArgs,
};

const SCHEDULE: Schedule = Schedule::Linear;

pub const DEFAULT_LAMBDA_SWEEP: [f64; 6] = [0.0, 0.001, 0.01, 0.05, 0.1, 0.15];
pub const DEFAULT_NFE_SWEEP: [usize; 5] = [10, 25, 50, 100, 250];
pub const DEFAULT_BATCH_SWEEP: [usize; 3] = [256, 512, 1024];

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Config file with command-line overrides applied and re-validated.
pub fn resolve_config(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(o.config.as_deref())?;
    if let Some(d) = &o.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = o.iterations {
        cfg.train.iterations = n;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if let Some(obj) = o.objective {
        cfg.train.objective = match obj {
            ObjectiveArg::Fm => ObjectiveKind::Fm,
            ObjectiveArg::DeltaFm => ObjectiveKind::DeltaFm,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let mut f = create(path)?;
    f.write_all(contents).and_then(|_| f.flush()).map_err(CliError::io(path))
}

/// Train from an already-resolved config. Progress goes to stderr.
pub fn train_model(
    cfg: &RunConfig,
    data: &LabeledPointCloud,
    quiet: bool,
) -> Result<(VelocityField, Vec<LossRecord>), CliError> {
    let model = VelocityField::init(cfg.model.clone(), cfg.init_seed)?;
    let total = cfg.train.iterations;
    let every = (total / 10).max(1);
    Ok(train_with(model, data, &cfg.train, SCHEDULE, |r, _| {
        if !quiet && (r.iteration + 1) % every == 0 {
            eprintln!(
                "iter {:>6}/{total}  fm={:.5}  contrastive={:.5}  total={:.5}",
                r.iteration + 1,
                r.fm_term,
                r.contrastive_term,
                r.total
            );
        }
        Ok(())
    })?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub history: Vec<LossRecord>,
}

fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in history {
        w.serialize(r)
            .map_err(|e| CliError::io(path)(std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Write `model.ckpt`, its digest, `loss.csv` and the resolved `config.toml` into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    model: &VelocityField,
    history: &[LossRecord],
) -> Result<(PathBuf, String), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let ckpt = dir.join("model.ckpt");
    let bytes = checkpoint::to_bytes(model);
    write_file(&ckpt, &bytes)?;
    let digest = sha256_hex(&bytes);
    write_file(&dir.join("model.ckpt.sha256"), format!("{digest}  model.ckpt\n").as_bytes())?;
    write_loss_csv(&dir.join("loss.csv"), history)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok((ckpt, digest))
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let cfg = resolve_config(&args.overrides)?;
    let data = cfg.dataset.load()?;
    let (model, history) = train_model(&cfg, &data.cloud, args.quiet)?;
    let dir = cfg.resolved_output_dir();
    let (checkpoint, digest) = write_run(&dir, &cfg, &model, &history)?;
    println!("sha256 {digest}  {}", checkpoint.display());
    Ok(TrainOutcome { dir, checkpoint, digest, history })
}

pub fn load_checkpoint(path: &Path) -> Result<VelocityField, CliError> {
    checkpoint::load(path).map_err(|e| CliError::at_path(path, e))
}

fn parse_label(s: &str) -> Result<Label, CliError> {
    if s.eq_ignore_ascii_case("null") {
        return Ok(Label::Null);
    }
    s.trim()
        .parse()
        .map(Label::Class)
        .map_err(|_| CliError::field("--class", format!("`{s}` is neither a class index nor `null`")))
}

/// Apply sampler flags on top of the config.
fn apply_sampler_flags(cfg: &mut RunConfig, f: &SamplingFlags) -> Result<(), CliError> {
    if let Some(k) = f.sampler {
        cfg.sampler.kind = match k {
            SamplerArg::Ode => SamplerKind::EulerOde,
            SamplerArg::Sde => SamplerKind::EulerMaruyama,
        };
    }
    if let Some(n) = f.nfe {
        cfg.sampler.nfe = n;
    }
    if let Some(s) = f.sample_seed {
        cfg.sampler.seed = s;
    }
    cfg.sampler.validate().map_err(|e| CliError::nested("sampler", e))
}

/// Guidance from config defaults, then the named preset, then explicit flags.
///
/// The mean trajectory is only computed (from the config's dataset) when the rule needs it.
fn guidance_from_flags(
    cfg: &RunConfig,
    f: &SamplingFlags,
    data: Option<&LabeledPointCloud>,
) -> Result<GuidanceConfig, CliError> {
    let mut g = cfg.guidance_config(None)?;
    match f.guidance {
        None => {}
        Some(GuidanceArg::None) => g.enabled = false,
        Some(GuidanceArg::Standard) => {
            let p = GuidanceConfig::fm_preset();
            (g.enabled, g.w, g.sigma_low, g.sigma_high, g.mode) = (true, p.w, p.sigma_low, p.sigma_high, p.mode);
        }
        Some(arg @ (GuidanceArg::Hat | GuidanceArg::Tilde)) => {
            (g.enabled, g.w, g.sigma_low, g.sigma_high) = (true, 1.85, 0.0, 0.65);
            g.mode = if arg == GuidanceArg::Hat { GuidanceMode::HatCfg } else { GuidanceMode::TildeCfg };
        }
    }
    if let Some(w) = f.w {
        g.w = w;
    }
    if let Some(lo) = f.sigma_low {
        g.sigma_low = lo;
    }
    if let Some(hi) = f.sigma_high {
        g.sigma_high = hi;
    }
    if let Some(l) = f.guidance_lambda {
        if !(0.0..1.0).contains(&l) {
            return Err(CliError::field("--guidance-lambda", format!("{l} is outside [0, 1)")));
        }
        g.lambda = l;
    }
    if g.enabled && g.mode != GuidanceMode::StandardCfg {
        let owned;
        let cloud = match data {
            Some(d) => d,
            None => {
                owned = cfg.dataset.load()?.cloud;
                &owned
            }
        };
        g.t_hat = Some(crate::config::mean_trajectory(cloud, cfg.guidance.mean_trajectory, cfg.sampler.seed)?);
    }
    g.validate().map_err(|e| CliError::nested("guidance", e))?;
    Ok(g)
}

fn class_path(base: &Path, label: Label, several: bool) -> PathBuf {
    if !several {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectories");
    let tag = match label {
        Label::Class(c) => c.to_string(),
        Label::Null => "null".into(),
    };
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_class{tag}.{ext}"),
        None => format!("{stem}_class{tag}"),
    };
    base.with_file_name(name)
}

pub fn sample(args: &SampleArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_sampler_flags(&mut cfg, &args.sampling)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let guidance = guidance_from_flags(&cfg, &args.sampling, None)?;
    if args.n == 0 {
        return Err(CliError::field("--n", "must be at least 1"));
    }
    let labels: Vec<Label> = if args.classes.is_empty() {
        (0..model.num_classes()).map(Label::Class).collect()
    } else {
        args.classes.iter().map(|s| parse_label(s)).collect::<Result<_, _>>()?
    };
    for l in &labels {
        if let Label::Class(c) = *l {
            if c >= model.num_classes() {
                return Err(deltafm::Error::LabelOutOfRange { label: c, num_classes: model.num_classes() }.into());
            }
        }
    }
    let mut groups = Vec::with_capacity(labels.len());
    for &y in &labels {
        groups.push((y, sampler::sample(&model, args.n, y, &cfg.sampler, &guidance, SCHEDULE)?));
    }
    match &args.out {
        Some(p) => {
            let mut f = create(p)?;
            write_samples_csv(&mut f, &groups).map_err(|e| CliError::at_path(p, e))?;
            f.flush().map_err(CliError::io(p))?;
        }
        None => write_samples_csv(std::io::stdout().lock(), &groups)?,
    }
    if let Some(base) = &args.trajectories {
        let eps = initial_noise(args.n, model.dim(), cfg.sampler.seed);
        for &y in &labels {
            let trajs = trajectories(&model, &eps, y, &cfg.sampler, &guidance, SCHEDULE, args.record_every)?;
            let path = class_path(base, y, labels.len() > 1);
            let indexed: Vec<(usize, &[TrajectoryRecord])> =
                trajs.iter().enumerate().map(|(i, t)| (i, t.as_slice())).collect();
            let mut f = create(&path)?;
            write_trajectories_csv(&mut f, &indexed).map_err(|e| CliError::at_path(&path, e))?;
            f.flush().map_err(CliError::io(&path))?;
        }
    }
    Ok(())
}

fn require_spec(cfg: &RunConfig) -> Result<(), CliError> {
    if matches!(cfg.dataset, DatasetConfig::Csv { .. }) {
        return Err(CliError::Usage(
            "evaluation needs an analytic dataset (two_gaussians or mixture); CSV data has no known posterior".into(),
        ));
    }
    Ok(())
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_file(&dir.join("metrics.txt"), report.to_key_value().as_bytes())?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for row in report.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_file(&dir.join("metrics.csv"), csv.as_bytes())
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    if let Some(n) = args.samples_per_class {
        cfg.eval.samples_per_class = n;
    }
    require_spec(&cfg)?;
    apply_sampler_flags(&mut cfg, &args.sampling)?;
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let spec = data.spec.expect("analytic dataset has a spec");
    let guidance = guidance_from_flags(&cfg, &args.sampling, Some(&data.cloud))?;
    let eval_cfg = cfg.eval_config(guidance);
    let report = match &args.checkpoint {
        Some(path) => {
            let model = load_checkpoint(path)?;
            evaluate(&model, &spec, &eval_cfg, SCHEDULE)?
        }
        None => {
            let field = OracleField { spec: spec.clone(), schedule: SCHEDULE };
            evaluate(&field, &spec, &eval_cfg, SCHEDULE)?
        }
    };
    write_report(&cfg.resolved_output_dir(), &report)?;
    print!("{}", report.to_key_value());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: MetricsReport,
}

fn parse_values<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>, CliError> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.is_empty() {
        return Err(CliError::Usage("--values is empty".into()));
    }
    parts
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("cannot parse sweep value `{s}`"))))
        .collect()
}

pub fn sweep(args: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    let cfg = resolve_config(&args.overrides)?;
    require_spec(&cfg)?;
    let data = cfg.dataset.load()?;
    let spec = data.spec.clone().expect("analytic dataset has a spec");
    let guidance = guidance_from_flags(&cfg, &SamplingFlags::default(), Some(&data.cloud))?;
    let say = |msg: String| {
        if !args.quiet {
            eprintln!("{msg}");
        }
    };
    let run = |c: &RunConfig| -> Result<MetricsReport, CliError> {
        c.validate()?;
        let (model, _) = train_model(c, &data.cloud, true)?;
        let mut g = guidance.clone();
        g.lambda = c.guidance.lambda.unwrap_or(c.train.lambda);
        Ok(evaluate(&model, &spec, &c.eval_config(g), SCHEDULE)?)
    };
    let mut rows = Vec::new();
    match args.axis {
        SweepAxis::Lambda => {
            let values = match &args.values {
                Some(v) => parse_values::<f64>(v)?,
                None => DEFAULT_LAMBDA_SWEEP.to_vec(),
            };
            for v in values {
                let mut c = cfg.clone();
                c.train.lambda = v;
                say(format!("lambda = {v}"));
                rows.push(SweepRow { value: v.to_string(), report: run(&c)? });
            }
        }
        SweepAxis::BatchSize => {
            let values = match &args.values {
                Some(v) => parse_values::<usize>(v)?,
                None => DEFAULT_BATCH_SWEEP.to_vec(),
            };
            for v in values {
                let mut c = cfg.clone();
                c.train.batch_size = v;
                say(format!("batch_size = {v}"));
                rows.push(SweepRow { value: v.to_string(), report: run(&c)? });
            }
        }
        SweepAxis::Nfe => {
            let values = match &args.values {
                Some(v) => parse_values::<usize>(v)?,
                None => DEFAULT_NFE_SWEEP.to_vec(),
            };
            say("training once for the nfe sweep".into());
            let (model, _) = train_model(&cfg, &data.cloud, true)?;
            for v in values {
                let mut c = cfg.clone();
                c.sampler.nfe = v;
                c.validate()?;
                say(format!("nfe = {v}"));
                let report = evaluate(&model, &spec, &c.eval_config(guidance.clone()), SCHEDULE)?;
                rows.push(SweepRow { value: v.to_string(), report });
            }
        }
    }
    let axis = match args.axis {
        SweepAxis::Lambda => "lambda",
        SweepAxis::Nfe => "nfe",
        SweepAxis::BatchSize => "batch_size",
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolved_output_dir().join(format!("sweep_{axis}.csv")));
    let mut text = String::from("axis,value,wasserstein2,ambiguity_fraction,flow_overlap,flow_distance\n");
    for r in &rows {
        text.push_str(&format!(
            "{axis},{},{},{},{},{}\n",
            r.value, r.report.wasserstein2, r.report.ambiguity_fraction, r.report.flow_overlap, r.report.flow_distance
        ));
    }
    write_file(&out, text.as_bytes())?;
    print!("{text}");
    Ok(rows)
}

pub fn oracle_check(args: &OracleArgs) -> Result<OracleReport, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let DatasetConfig::TwoGaussians { separation, scale, seed, .. } = cfg.dataset else {
        return Err(CliError::Usage("oracle-check runs on the builtin two_gaussians dataset".into()));
    };
    let mut oc = OracleConfig { separation, scale, seed, corrupt_shift: args.corrupt_shift, ..OracleConfig::default() };
    if let Some(p) = args.probes {
        oc.probes = p;
    }
    if let Some(l) = &args.lambdas {
        oc.lambdas = parse_values(l)?;
    }
    if let Some(n) = args.positive_samples {
        oc.positive_samples = n;
    }
    if let Some(t) = args.tolerance {
        oc.tolerance = t;
    }
    if let Some(s) = args.seed {
        oc.seed = s;
    }
    oc.validate().map_err(|e| CliError::nested("oracle", e))?;
    let report = oracle::run(&oc, SCHEDULE)?;
    for (i, p) in report.probes.iter().enumerate() {
        println!(
            "probe {i:>3}  lambda={:<6} t={:.3}  class={}  relative_error={:.3e}",
            p.lambda, p.t, p.label, p.relative_error
        );
    }
    let c = &report.consistency;
    println!(
        "consistency: score_error={:.3e} denoise_error={:.3e} {}",
        c.score_error,
        c.denoise_error,
        if c.passed { "ok" } else { "bad" }
    );
    println!("max relative error {:.3e} (tolerance {})", report.max_relative_error, report.tolerance);
    if report.passed {
        println!("PASS");
        Ok(report)
    } else {
        println!("FAIL");
        Err(CliError::CheckFailed(format!(
            "closed-form optimum disagrees with brute force (max relative error {:.3e})",
            report.max_relative_error
        )))
    }
}

fn read_groups(paths: &[PathBuf]) -> Result<plot::TrajectoryGroups, CliError> {
    paths
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(CliError::io(p))?;
            let groups = sampler::read_trajectories_csv(std::io::BufReader::new(f)).map_err(|e| CliError::at_path(p, e))?;
            Ok(groups.into_iter().map(|(_, r)| r).collect())
        })
        .collect()
}

fn read_loss(path: &Path) -> Result<Vec<LossRecord>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path)(std::io::Error::other(e.to_string())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CliError::Data {
                path: path.to_path_buf(),
                source: deltafm::Error::Parse { line: i as u64 + 2, reason: e.to_string() },
            })
        })
        .collect()
}

fn run_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem == "loss" => dir.to_string(),
        _ => stem.to_string(),
    }
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let data = match &args.data {
        Some(p) => Some(load_csv(p).map_err(|e| CliError::at_path(p, e))?.cloud),
        None => None,
    };
    let svg = match args.kind {
        PlotKind::Flows => plot::flows(&read_groups(&args.inputs)?, data.as_ref())?,
        PlotKind::Panels => {
            if args.delta_fm.is_empty() {
                return Err(CliError::Usage("panels needs --delta-fm trajectory files".into()));
            }
            plot::panels(&read_groups(&args.inputs)?, &read_groups(&args.delta_fm)?, data.as_ref())?
        }
        PlotKind::DenoiseStrip => plot::denoise_strip(&read_groups(&args.inputs)?)?,
        PlotKind::LossCurves => {
            let runs = args
                .inputs
                .iter()
                .map(|p| Ok((run_label(p), read_loss(p)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            plot::loss_curves(&runs)?
        }
    };
    write_file(&args.out, svg.as_bytes())
}
