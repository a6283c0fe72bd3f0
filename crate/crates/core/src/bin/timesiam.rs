use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use timesiam::config::{RunConfig, Splits};
use timesiam::data::{
    apply_mask, instance_normalize, load_labeled_windows, sample_siamese_pair_at,
    synthetic_labeled, synthetic_series, LabeledWindow, MaskRule, MaskSpec, TimeSeriesFrame,
};
use timesiam::finetune::{
    self, evaluate_classify, evaluate_forecast, lineage_diversity_pca, Dataset, ForecastReport,
    FusionKind, HeadSpec, MetricsReport, Task, TrainMode,
};
use timesiam::model::{LossMode, ModelConfig, SiameseModel};
use timesiam::tensor::grad_check;
use timesiam::training::{pretrain, Checkpoint, TrainingMeta};
use timesiam::{Error, Exec, Result};

#[derive(Parser, Debug)]
#[command(name = "timesiam", version, about = "Siamese time-series pre-training")]
struct Cli {
    /// Batch scheduling.
    #[arg(long, value_enum, default_value_t = ExecArg::Parallel, global = true)]
    exec: ExecArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Synthetic {
    /// Seasonal sine mixture with AR(1) noise.
    Sine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a Siamese model and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Attach a head to a pre-trained checkpoint and train it.
    Finetune(FinetuneArgs),
    /// Report test metrics of a fine-tuned checkpoint.
    Evaluate(EvaluateArgs),
    /// Print the mask produced by one rule.
    MaskDemo(MaskDemoArgs),
    /// Write past, masked current, reconstruction and truth as CSV.
    Reconstruct(ReconstructArgs),
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Project per-lineage representations onto two principal components.
    Pca(PcaArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input data file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use a bundled generator instead of --data.
    #[arg(long, value_enum)]
    synthetic: Option<Synthetic>,
    /// Overrides the configured seed and TIMESIAM_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Also write the effective configuration here.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Forecast)]
    task: TaskArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Lineages averaged by fixed fusion.
    #[arg(long)]
    lineages: Option<usize>,
    /// Input steps for extended fusion (a multiple of the window length).
    #[arg(long)]
    input_len: Option<usize>,
    /// Forecast horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,
    /// Separate labelled test file for classification.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Fine-tuned checkpoint; metrics go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Forecast,
    Classify,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    LinearProbe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Fixed,
    Extended,
    Single,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Args, Debug)]
struct MaskDemoArgs {
    #[arg(long, default_value = "channel_continuous")]
    rule: String,
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
    #[arg(long = "T", default_value_t = 96)]
    t: usize,
    #[arg(long = "C", default_value_t = 1)]
    c: usize,
    #[arg(long, default_value_t = 12)]
    mean_segment_length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `#`/`.` grid instead of CSV.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the checkpoint's mask ratio.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    rule: Option<String>,
    /// Start of the current window within the test split.
    #[arg(long)]
    start: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    size: String,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    windows: usize,
    #[arg(long)]
    lineages: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = match cli.exec {
        ExecArg::Sequential => Exec::Sequential,
        ExecArg::Parallel => Exec::Parallel,
    };
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, exec),
        Command::Finetune(a) => cmd_finetune(a, exec),
        Command::Evaluate(a) => cmd_evaluate(a, exec),
        Command::MaskDemo(a) => cmd_mask_demo(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Pca(a) => cmd_pca(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Config file, then TIMESIAM_SEED, then --seed.
fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if common.data.is_some() {
        cfg.data.path = common.data.clone();
    }
    Ok(cfg)
}

fn load_series(common: &Common, cfg: &RunConfig) -> Result<TimeSeriesFrame> {
    match (&cfg.data.path, common.synthetic) {
        (_, Some(Synthetic::Sine)) => Ok(cfg.data.synthetic(cfg.seed)),
        (Some(path), None) => cfg.data.load(path),
        (None, None) => Err(Error::Data(
            "missing --data (or --synthetic sine, or data.path in --config)".into(),
        )),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dump_config(path: &Option<PathBuf>, cfg: &RunConfig) -> Result<()> {
    match path {
        Some(p) => write_text(p, &cfg.to_toml()),
        None => Ok(()),
    }
}

fn cmd_pretrain(a: PretrainArgs, exec: Exec) -> Result<()> {
    let mut cfg = run_config(&a.common)?;
    if a.common.synthetic.is_some() && a.common.config.is_none() {
        cfg.model = ModelConfig {
            input_len: 48,
            ..ModelConfig::tiny(cfg.data.synthetic_channels)
        };
        cfg.pretrain.epochs = 2;
        cfg.pretrain.steps_per_epoch = Some(5);
        cfg.pretrain.batch_size = 8;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if a.steps_per_epoch.is_some() {
        cfg.pretrain.steps_per_epoch = a.steps_per_epoch;
    }
    let frame = load_series(&a.common, &cfg)?;
    cfg.model.channels = frame.channels();
    cfg.validate()?;
    dump_config(&a.dump_config, &cfg)?;
    let splits = Splits::new(&frame, cfg.data.sizes(), 0)?;
    let out = pretrain(&splits.train, &cfg.model, &cfg.pretrain, exec, |log| println!("{log}"))?;
    out.checkpoint(cfg.seed).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn load_pretrained(path: &Path) -> Result<SiameseModel<f32>> {
    let ck = Checkpoint::load(path)?;
    if ck.head.is_some() {
        return Err(Error::Usage(format!(
            "{} is already fine-tuned; pass a pre-trained checkpoint",
            path.display()
        )));
    }
    ck.to_model()
}

fn classify_data(
    common: &Common,
    cfg: &RunConfig,
    window_len: usize,
    channels: usize,
) -> Result<(Vec<LabeledWindow>, usize)> {
    match (&cfg.data.path, common.synthetic) {
        (_, Some(Synthetic::Sine)) => Ok((
            synthetic_labeled(240, window_len, channels, 3, cfg.seed),
            3,
        )),
        (Some(path), None) => load_labeled_windows(path),
        (None, None) => Err(Error::Data(
            "missing --data (or --synthetic sine, or data.path in --config)".into(),
        )),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_finetune(a: FinetuneArgs, exec: Exec) -> Result<()> {
    let mut cfg = run_config(&a.common)?;
    let pretrained = load_pretrained(&a.checkpoint)?;
    let t = pretrained.config.input_len;
    let ft = &mut cfg.finetune;
    ft.task = match a.task {
        TaskArg::Forecast => Task::Forecast,
        TaskArg::Classify => Task::Classify,
    };
    if let Some(m) = a.mode {
        ft.mode = match m {
            ModeArg::Full => TrainMode::Full,
            ModeArg::LinearProbe => TrainMode::LinearProbe,
        };
    }
    if let Some(f) = a.fusion {
        ft.fusion = match f {
            FusionArg::Fixed => FusionKind::Fixed,
            FusionArg::Extended => FusionKind::Extended,
            FusionArg::Single => FusionKind::Single,
        };
    }
    if a.lineages.is_some() {
        ft.lineages_used = a.lineages;
    }
    if let Some(len) = a.input_len {
        if len == 0 || len % t != 0 {
            return Err(Error::Config(format!(
                "extended input of {len} steps: length must be a multiple of {t}"
            )));
        }
        ft.extended_segments = len / t;
    }
    if a.epochs.is_some() {
        ft.epochs = a.epochs;
    }
    if a.steps_per_epoch.is_some() {
        ft.steps_per_epoch = a.steps_per_epoch;
    }
    cfg.model = pretrained.config.clone();
    cfg.validate()?;
    dump_config(&a.dump_config, &cfg)?;
    let ft = cfg.finetune.clone();
    let lineages = pretrained.config.lineages;
    let fusion = ft.resolve_fusion(lineages);
    fusion.validate(&pretrained)?;
    let input_len = fusion.input_len(t);
    let log = |l: &timesiam::training::EpochLog| println!("{l}");

    let report = match ft.task {
        Task::Forecast => {
            let frame = load_series(&a.common, &cfg)?;
            check_channels(&pretrained, frame.channels())?;
            let splits = Splits::new(&frame, cfg.data.sizes(), input_len)?;
            let horizons = if a.horizon.is_empty() {
                vec![ft.horizon]
            } else {
                a.horizon.clone()
            };
            let mut rows = Vec::new();
            for &h in &horizons {
                if splits.test.len() < input_len + h {
                    eprintln!("warning: skipping horizon {h}: test split too short");
                    continue;
                }
                let hcfg = finetune::FinetuneConfig {
                    horizon: h,
                    ..ft.clone()
                };
                println!("horizon={h}");
                let data = Dataset::Forecast {
                    train: &splits.train,
                    test: &splits.test,
                };
                let (model, report) = finetune::finetune(pretrained.clone(), data, &hcfg, exec, log)?;
                let MetricsReport::Forecast(r) = report else { unreachable!() };
                rows.extend(r.rows);
                let path = if horizons.len() == 1 {
                    a.out.clone()
                } else {
                    sibling(&a.out, &format!(".h{h}"))
                };
                save_finetuned(&model, &path, cfg.seed)?;
            }
            if rows.is_empty() {
                return Err(Error::Data("no horizon fits the test split".into()));
            }
            MetricsReport::Forecast(ForecastReport { rows })
        }
        Task::Classify => {
            let (mut train, classes) =
                classify_data(&a.common, &cfg, input_len, pretrained.config.channels)?;
            let test = match &a.test_data {
                Some(p) => load_labeled_windows(p)?.0,
                None => {
                    let cut = train.len() - train.len() / 5;
                    train.split_off(cut)
                }
            };
            let data = Dataset::Classify {
                train: &train,
                test: &test,
                classes,
            };
            let (model, report) = finetune::finetune(pretrained, data, &ft, exec, log)?;
            save_finetuned(&model, &a.out, cfg.seed)?;
            report
        }
    };
    print!("{}", report.to_key_values());
    write_text(&sibling(&a.out, ".metrics.txt"), &report.to_key_values())?;
    write_text(&sibling(&a.out, ".metrics.csv"), &report.to_csv())?;
    Ok(())
}

fn check_channels(model: &SiameseModel<f32>, channels: usize) -> Result<()> {
    if model.config.channels != channels {
        return Err(Error::Data(format!(
            "data has {channels} channels, checkpoint expects {}",
            model.config.channels
        )));
    }
    Ok(())
}

fn save_finetuned(model: &SiameseModel<f32>, path: &Path, seed: u64) -> Result<()> {
    let meta = TrainingMeta {
        seed,
        ..TrainingMeta::default()
    };
    Checkpoint::from_model(model, meta).save(path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, exec: Exec) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let spec = model
        .head_spec()
        .ok_or_else(|| Error::Usage("checkpoint has no head; run finetune first".into()))?;
    let input_len = spec.fusion().input_len(model.config.input_len);
    let report = match (spec, a.task) {
        (HeadSpec::Forecast { horizon, .. }, None | Some(TaskArg::Forecast)) => {
            let frame = load_series(&a.common, &cfg)?;
            check_channels(&model, frame.channels())?;
            let splits = Splits::new(&frame, cfg.data.sizes(), input_len)?;
            let row = evaluate_forecast(&model, &splits.test, exec)?.ok_or_else(|| {
                Error::Data(format!("test split too short for horizon {horizon}"))
            })?;
            MetricsReport::Forecast(ForecastReport { rows: vec![row] })
        }
        (HeadSpec::Classify { .. }, None | Some(TaskArg::Classify)) => {
            let (windows, _) = classify_data(&a.common, &cfg, input_len, model.config.channels)?;
            MetricsReport::Classify(evaluate_classify(&model, &windows, exec)?)
        }
        _ => return Err(Error::Config("--task does not match the checkpoint head".into())),
    };
    print!("{}", report.to_key_values());
    Ok(())
}

fn cmd_mask_demo(a: MaskDemoArgs) -> Result<()> {
    let rule: MaskRule = a.rule.parse()?;
    let spec = MaskSpec {
        rule,
        ratio: a.ratio,
        mean_segment_length: a.mean_segment_length,
    };
    if a.t == 0 || a.c == 0 {
        return Err(Error::Config("--T and --C must be positive".into()));
    }
    let window = timesiam::Tensor::zeros(&[a.t, a.c]);
    let (_, mask) = apply_mask(&window, &spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let mut s = String::new();
    if a.ascii {
        for t in 0..a.t {
            for c in 0..a.c {
                s.push(if mask[t * a.c + c] { '#' } else { '.' });
            }
            s.push('\n');
        }
    } else {
        s.push('t');
        for c in 0..a.c {
            let _ = write!(s, ",c{c}");
        }
        s.push('\n');
        for t in 0..a.t {
            let _ = write!(s, "{t}");
            for c in 0..a.c {
                let _ = write!(s, ",{}", mask[t * a.c + c] as u8);
            }
            s.push('\n');
        }
    }
    print!("{s}");
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let mc = &model.config;
    let frame = load_series(&a.common, &cfg)?;
    check_channels(&model, frame.channels())?;
    let splits = Splits::new(&frame, cfg.data.sizes(), mc.max_distance())?;
    let series = &splits.test;
    if series.len() < mc.input_len {
        return Err(Error::Data("test split is shorter than one window".into()));
    }
    let start = a.start.unwrap_or(series.len() - mc.input_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = sample_siamese_pair_at(series, start, mc.input_len, mc.sampling_range, &mut rng)?;
    let mut spec = mc.mask;
    if let Some(r) = a.ratio {
        spec.ratio = r;
    }
    if let Some(rule) = &a.rule {
        spec.rule = rule.parse()?;
    }
    let (x_past, _) = instance_normalize(&raw.x_past);
    let (x_curr, _) = instance_normalize(&raw.x_curr);
    let (x_curr_masked, mask) = apply_mask(&x_curr, &spec, &mut rng)?;
    let pair = timesiam::data::SiamesePair {
        x_past,
        x_curr,
        x_curr_masked,
        mask,
        ..raw
    };
    let mut tape = model.tape();
    let out = model.pretrain_forward(&mut tape, &pair, LossMode::All)?;
    tape.ensure_finite(out.x_hat, "reconstruct")?;
    let x_hat = tape.value(out.x_hat);
    let c = mc.channels;
    let mut s = String::from("channel,series,t,value\n");
    for ch in 0..c {
        let blocks: [(&str, &[f32]); 4] = [
            ("past", pair.x_past.data()),
            ("masked_current", pair.x_curr_masked.data()),
            ("reconstruction", x_hat),
            ("ground_truth", pair.x_curr.data()),
        ];
        for (name, data) in blocks {
            for t in 0..mc.input_len {
                let _ = writeln!(s, "{ch},{name},{t},{}", data[t * c + ch]);
            }
        }
    }
    write_text(&a.out, &s)?;
    eprintln!(
        "d={} lineage={} loss={:.6}; wrote {}",
        pair.d,
        out.lineage,
        tape.scalar(out.loss),
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.size != "tiny" {
        return Err(Error::Config(format!("unknown size {:?}; only tiny is supported", a.size)));
    }
    let cfg = ModelConfig::tiny(2);
    let model = SiameseModel::<f64>::new(cfg.clone(), a.seed)?;
    let frame = synthetic_series(200, 2, a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let raw = sample_siamese_pair_at(&frame, 100, cfg.input_len, cfg.sampling_range, &mut rng)?;
    let (x_past, _) = instance_normalize(&raw.x_past);
    let (x_curr, _) = instance_normalize(&raw.x_curr);
    let (x_curr_masked, mask) = apply_mask(&x_curr, &cfg.mask, &mut rng)?;
    let pair = timesiam::data::SiamesePair {
        x_past,
        x_curr,
        x_curr_masked,
        mask,
        ..raw
    };
    let report = grad_check(
        &model.params,
        |tape| Ok(model.pretrain_forward(tape, &pair, LossMode::All)?.loss),
        a.samples,
        1e-5,
        a.seed,
        |_| true,
    )?;
    println!(
        "coords_checked={} max_rel_error={:.3e}",
        report.coords_checked, report.max_rel_error
    );
    if report.max_rel_error >= a.tolerance {
        let (name, i) = report.worst.unwrap_or_default();
        return Err(Error::NonFinite {
            op: "gradient check",
        })
        .inspect_err(|_| eprintln!("worst coordinate: {name}[{i}]"));
    }
    Ok(())
}

fn cmd_pca(a: PcaArgs, exec: Exec) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let frame = load_series(&a.common, &cfg)?;
    check_channels(&model, frame.channels())?;
    let splits = Splits::new(&frame, cfg.data.sizes(), model.config.input_len)?;
    let t = model.config.input_len;
    let series = &splits.test;
    if series.len() < t + 1 || a.windows < 2 {
        return Err(Error::Data("need at least two test windows".into()));
    }
    let last = series.len() - t;
    let windows: Vec<_> = (0..a.windows)
        .map(|i| series.window(i * last / (a.windows - 1), t))
        .collect::<Result<_>>()?;
    let n = a.lineages.unwrap_or(model.config.lineages + 1);
    let out = lineage_diversity_pca(&model, &windows, n, exec)?;
    if out.degenerate {
        eprintln!("warning: representations have rank < 2; missing components are zero");
    }
    write_text(&a.out, &out.to_csv())?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
