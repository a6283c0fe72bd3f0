use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use timesiam::data::{make_pretrain_batch, stream_rng, synthetic_series};
use timesiam::finetune::{evaluate_forecast, prepare, FinetuneConfig, TrainMode};
use timesiam::model::{LossMode, ModelConfig, SiameseModel};
use timesiam::training::batch_gradients;
use timesiam::Exec;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_config() -> ModelConfig {
    ModelConfig {
        input_len: 48,
        d_model: 32,
        d_ff: 64,
        n_heads: 4,
        e_layers: 2,
        patch_len: 8,
        ..ModelConfig::tiny(3)
    }
}

fn pretrain_step(c: &mut Criterion) {
    let cfg = small_config();
    let model = SiameseModel::<f32>::new(cfg.clone(), 1).unwrap();
    let frame = synthetic_series(2000, cfg.channels, 1);
    let mut group = c.benchmark_group("pretrain_batch_gradients");
    for batch in [8usize, 32] {
        let pairs = make_pretrain_batch(
            &frame,
            cfg.input_len,
            cfg.sampling_range,
            &cfg.mask,
            batch,
            &mut stream_rng(1, 0, 0),
        )
        .unwrap();
        for (name, exec) in STRATEGIES {
            group.bench_with_input(BenchmarkId::new(name, batch), &pairs, |b, pairs| {
                b.iter(|| {
                    black_box(
                        batch_gradients(&model.params, exec, pairs.len(), |i, tape| {
                            Ok(model.pretrain_forward(tape, &pairs[i], LossMode::All)?.loss)
                        })
                        .unwrap(),
                    )
                })
            });
        }
    }
    group.finish();
}

fn forecast_eval(c: &mut Criterion) {
    let cfg = small_config();
    let ft = FinetuneConfig {
        horizon: 24,
        ..FinetuneConfig::default()
    };
    let model = prepare(
        SiameseModel::new(cfg.clone(), 2).unwrap(),
        ft.head_spec(cfg.lineages, 0),
        TrainMode::Full,
        2,
    )
    .unwrap();
    let test = synthetic_series(400, cfg.channels, 2);
    let mut group = c.benchmark_group("evaluate_forecast");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| b.iter(|| black_box(evaluate_forecast(&model, &test, exec).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, pretrain_step, forecast_eval);
criterion_main!(benches);
