use deltafm::data::{two_gaussians, OracleField, DEFAULT_SEPARATION};
use deltafm::model::{checkpoint, Architecture};
use deltafm::sampler::{sample, GuidanceConfig, SamplerConfig};
use deltafm::trainer::{train, TrainConfig};
use deltafm::{Label, Schedule, VelocityField};

#[test]
fn fm_term_drops_during_training() {
    let (data, _) = two_gaussians(DEFAULT_SEPARATION, 1.0, 2000, 3).unwrap();
    let model = VelocityField::init(Architecture::toy(2, 2), 3).unwrap();
    let cfg = TrainConfig { iterations: 2000, seed: 3, ..TrainConfig::default() };
    let (_, history) = train(model, &data, &cfg, Schedule::Linear).unwrap();
    assert_eq!(history.len(), 2000);
    let head = history[..10].iter().map(|r| r.fm_term).sum::<f64>() / 10.0;
    let tail = &history[1800..];
    let tail = tail.iter().map(|r| r.fm_term).sum::<f64>() / tail.len() as f64;
    assert!(tail < head, "head {head} tail {tail}");
}

fn own_class_fraction(samples: &[Vec<f64>], spec: &deltafm::data::GaussianMixtureSpec) -> f64 {
    let hits = samples.iter().filter(|x| spec.class_posterior(x).unwrap()[0] > 0.5).count();
    hits as f64 / samples.len() as f64
}

#[test]
fn trained_samples_land_in_their_class_like_the_exact_field() {
    let (data, spec) = two_gaussians(DEFAULT_SEPARATION, 1.0, 5000, 0).unwrap();
    let model = VelocityField::init(Architecture::toy(2, 2), 0).unwrap();
    let (model, _) = train(model, &data, &TrainConfig::default(), Schedule::Linear).unwrap();

    let cfg = SamplerConfig::default();
    let g = GuidanceConfig::disabled();
    let learned = sample(&model, 4000, Label::Class(0), &cfg, &g, Schedule::Linear).unwrap();
    let exact = OracleField { spec: spec.clone(), schedule: Schedule::Linear };
    let reference = sample(&exact, 4000, Label::Class(0), &cfg, &g, Schedule::Linear).unwrap();

    let got = own_class_fraction(&learned, &spec);
    let want = own_class_fraction(&reference, &spec);
    // The exact field reproduces the data, whose own-class rate is 1 - Bayes error = 0.75.
    assert!((want - 0.75).abs() < 0.03, "exact field {want}");
    assert!(got >= want - 0.03, "learned {got} vs exact {want}");
}

#[test]
fn checkpointed_model_samples_identically() {
    let model = VelocityField::init(Architecture::toy(2, 2), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let cfg = SamplerConfig::sde(25, 2);
    let g = GuidanceConfig::fm_preset();
    assert_eq!(
        sample(&model, 64, Label::Class(1), &cfg, &g, Schedule::Linear).unwrap(),
        sample(&loaded, 64, Label::Class(1), &cfg, &g, Schedule::Linear).unwrap()
    );
}
