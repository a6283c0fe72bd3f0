use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::data::{synthetic_labeled, synthetic_series};
use crate::model::ModelConfig;

fn pretrained(c: usize) -> SiameseModel<f32> {
    SiameseModel::new(ModelConfig::tiny(c), 9).unwrap()
}

fn quick_cfg(task: Task, mode: TrainMode) -> FinetuneConfig {
    FinetuneConfig {
        task,
        mode,
        horizon: 4,
        learning_rate: 1e-2,
        epochs: Some(2),
        batch_size: Some(8),
        steps_per_epoch: Some(3),
        seed: 1,
        ..FinetuneConfig::default()
    }
}

fn bits(m: &SiameseModel<f32>, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u32>)> {
    m.params
        .iter()
        .filter(|(_, n, _)| keep(n))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn linear_probe_only_moves_the_head() {
    let frame = synthetic_series(120, 2, 3);
    let cfg = quick_cfg(Task::Forecast, TrainMode::LinearProbe);
    let base = pretrained(2);
    let before = bits(&base, |_| true);
    let model = prepare(base, cfg.head_spec(2, 0), cfg.mode, 0).unwrap();
    let head_before = bits(&model, |n| n.starts_with("head."));
    let out = finetune_forecast(model, &frame, &cfg, Exec::Parallel, |_| {}).unwrap();
    assert_eq!(bits(&out.model, |n| !n.starts_with("head.")), before);
    assert_ne!(bits(&out.model, |n| n.starts_with("head.")), head_before);
}

#[test]
fn full_mode_trains_the_encoder_but_not_lineages() {
    let frame = synthetic_series(120, 2, 3);
    let cfg = quick_cfg(Task::Forecast, TrainMode::Full);
    let base = pretrained(2);
    let model = prepare(base.clone(), cfg.head_spec(2, 0), cfg.mode, 0).unwrap();
    let out = finetune_forecast(model, &frame, &cfg, Exec::Parallel, |_| {}).unwrap();
    let lineage = |n: &str| n == "lineage.table";
    assert_eq!(bits(&out.model, lineage), bits(&base, lineage));
    let enc = |n: &str| n.starts_with("encoder.0.attn");
    assert_ne!(bits(&out.model, enc), bits(&base, enc));
}

#[test]
fn zero_epochs_is_zero_shot_evaluation() {
    let frame = synthetic_series(200, 2, 5);
    let (train, test) = (frame.slice(0..120), frame.slice(120..200));
    let cfg = FinetuneConfig {
        epochs: Some(0),
        ..quick_cfg(Task::Forecast, TrainMode::Full)
    };
    let data = Dataset::Forecast {
        train: &train,
        test: &test,
    };
    let (model, report) = finetune(pretrained(2), data, &cfg, Exec::Parallel, |_| {}).unwrap();
    let fresh = prepare(pretrained(2), cfg.head_spec(2, 0), cfg.mode, cfg.seed).unwrap();
    let direct = evaluate_forecast(&fresh, &test, Exec::Sequential).unwrap().unwrap();
    assert_eq!(report, MetricsReport::Forecast(ForecastReport { rows: vec![direct] }));
    assert_eq!(bits(&model, |_| true), bits(&fresh, |_| true));
}

#[test]
fn mean_predictor_matches_an_outside_oracle() {
    let frame = synthetic_series(100, 3, 8);
    let mut model = prepare(
        pretrained(3),
        HeadSpec::Forecast {
            horizon: 5,
            fusion: Fusion::Single,
        },
        TrainMode::Full,
        0,
    )
    .unwrap();
    let head = model.head.clone().unwrap();
    for id in [head.proj.w, head.proj.b] {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let got = evaluate_forecast(&model, &frame, Exec::Parallel).unwrap().unwrap();
    let (mut se, mut n) = (0.0f64, 0usize);
    for s in forecast_starts(100, 8, 5) {
        for c in 0..3 {
            let mean = (s..s + 8).map(|t| frame.value(t, c) as f64).sum::<f64>() / 8.0;
            for t in s + 8..s + 13 {
                se += (frame.value(t, c) as f64 - mean).powi(2);
                n += 1;
            }
        }
    }
    assert_eq!(got.windows, forecast_starts(100, 8, 5).len());
    assert!((got.mse - se / n as f64).abs() < 1e-5, "{} vs {}", got.mse, se / n as f64);
}

#[test]
fn zero_predictor_on_unit_variance_targets() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets: Vec<Vec<f32>> = (0..1000)
        .map(|_| (0..24).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let zeros = vec![vec![0.0; 24]; 1000];
    let (mse, _) = forecast_errors(&zeros, &targets).unwrap();
    assert!((mse - 1.0).abs() < 0.05, "{mse}");
}

#[test]
fn classification_training_beats_chance() {
    let data = synthetic_labeled(96, 8, 1, 2, 4);
    let (train, test) = data.split_at(64);
    let cfg = FinetuneConfig {
        epochs: Some(15),
        batch_size: Some(16),
        steps_per_epoch: None,
        learning_rate: 5e-3,
        ..quick_cfg(Task::Classify, TrainMode::Full)
    };
    let data = Dataset::Classify {
        train,
        test,
        classes: 2,
    };
    let mut losses = Vec::new();
    let (_, report) = finetune(pretrained(1), data, &cfg, Exec::Parallel, |l| {
        losses.push(l.mean_loss)
    })
    .unwrap();
    let MetricsReport::Classify(m) = report else { unreachable!() };
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert!(m.accuracy > 0.7, "{m:?}");
    assert!(m.auroc.unwrap() > 0.7);
}

#[test]
fn extended_fusion_forecasts_from_longer_inputs() {
    let frame = synthetic_series(120, 2, 6);
    let cfg = FinetuneConfig {
        fusion: FusionKind::Extended,
        extended_segments: 3,
        ..quick_cfg(Task::Forecast, TrainMode::Full)
    };
    let model = prepare(pretrained(2), cfg.head_spec(2, 0), cfg.mode, 0).unwrap();
    let out = finetune_forecast(model, &frame, &cfg, Exec::Parallel, |_| {}).unwrap();
    let m = evaluate_forecast(&out.model, &frame, Exec::Parallel).unwrap().unwrap();
    assert_eq!(m.windows, forecast_starts(120, 24, 4).len());
    assert!(m.mse.is_finite());
}

#[test]
fn bad_fusion_and_mismatched_data_are_rejected() {
    let spec = HeadSpec::Forecast {
        horizon: 4,
        fusion: Fusion::Fixed { lineages: 4 },
    };
    assert!(matches!(
        prepare(pretrained(2), spec, TrainMode::Full, 0),
        Err(Error::Config(_))
    ));
    let cfg = quick_cfg(Task::Forecast, TrainMode::Full);
    let model = prepare(pretrained(2), cfg.head_spec(2, 0), cfg.mode, 0).unwrap();
    let frame = synthetic_series(100, 3, 0);
    assert!(matches!(
        finetune_forecast(model.clone(), &frame, &cfg, Exec::Sequential, |_| {}),
        Err(Error::Data(_))
    ));
    assert_eq!(evaluate_forecast(&model, &synthetic_series(10, 2, 0), Exec::Sequential).unwrap(), None);
}

#[test]
fn modes_and_fusions_parse() {
    assert_eq!("linear-probe".parse::<TrainMode>().unwrap(), TrainMode::LinearProbe);
    assert_eq!("extended".parse::<FusionKind>().unwrap(), FusionKind::Extended);
    assert!("bogus".parse::<FusionKind>().is_err());
}

#[test]
fn defaults_follow_the_task() {
    let f = FinetuneConfig::default();
    assert_eq!((f.epochs(), f.batch_size(), f.learning_rate), (10, 32, 1e-4));
    let c = FinetuneConfig {
        task: Task::Classify,
        ..f
    };
    assert_eq!((c.epochs(), c.batch_size()), (50, 64));
    assert_eq!(c.resolve_fusion(3), Fusion::Fixed { lineages: 4 });
}
