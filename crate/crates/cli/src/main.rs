//! `sret`: parameter and cost reports, gradient checks, training, loss
//! landscapes and config emission for recursive vision transformers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sret::accounting::{count_macs, verify_cost_equivalence};
use sret::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sret::config::RunConfig;
use sret::diagnostics::model_gradcheck;
use sret::model::build_model;
use sret::train::{
    initial_loss, landscape_slice, landscape_to_csv, load_image_dir, metrics_to_csv, train_loop, Dataset, EpochMetrics,
    LossMode, SynthDataset, TrainState,
};
use sret::Scalar;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "sret", version, about = "Recursive vision transformers with sliced group attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameter and multiply-accumulate counts.
    Count(CountArgs),
    /// Check that N recursions of G-slice attention cost N/G of global attention.
    Verify(VerifyArgs),
    /// Compare autodiff gradients of a freshly built model with central differences.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic data or an image directory and write a checkpoint.
    Train(TrainArgs),
    /// Loss over a 2-D slice around a checkpoint's weights.
    Landscape(LandscapeArgs),
    /// Print a preset as a config file.
    EmitConfig(EmitArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Named preset (sret_t, sret_tl, sret_s, deit_t, mixer_b16_recursive, desk).
    #[arg(long)]
    preset: Option<String>,
    /// Config file with a [model] table and an optional [train] table.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn load(&self) -> anyhow::Result<RunConfig> {
        match (&self.preset, &self.config) {
            (Some(name), _) => Ok(RunConfig::from_preset(name)?),
            (None, Some(path)) => RunConfig::load(path).with_context(|| format!("reading {}", path.display())),
            (None, None) => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Recursions per physical block.
    #[arg(long)]
    recursions: Option<usize>,
    /// Input side length in pixels; defaults to the config's.
    #[arg(long)]
    resolution: Option<usize>,
    /// Replace every group count with 1.
    #[arg(long)]
    global_attention: bool,
    /// Also write the per-layer rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Tokens.
    #[arg(long = "L", default_value_t = 196)]
    tokens: u64,
    /// Embedding width.
    #[arg(long = "D", default_value_t = 64)]
    dim: u64,
    /// Recursions.
    #[arg(long = "N", default_value_t = 1)]
    recursions: usize,
    /// Groups per recursion.
    #[arg(long = "G", default_value_t = 1)]
    groups: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled from each parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    /// Check the recursive and unrolled branches together.
    #[arg(long)]
    mixed_depth: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Governs initialization, data and batch order; must match when resuming.
    #[arg(long)]
    seed: u64,
    #[arg(long, required_unless_present_any = ["config", "resume"], conflicts_with = "resume")]
    preset: Option<String>,
    #[arg(long, conflicts_with_all = ["preset", "resume"])]
    config: Option<PathBuf>,
    /// Continue a run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Distill from this teacher checkpoint instead of one-hot labels.
    #[arg(long, value_name = "TEACHER")]
    distill: Option<PathBuf>,
    /// Train recursive and unrolled branches jointly.
    #[arg(long)]
    mixed_depth: bool,
    /// Training images (`labels.txt` plus PPM files) instead of synthetic data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Held-out images; defaults to a synthetic split or to `--data-dir`.
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    /// Checkpoint written when training stops.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV; rows are appended when resuming.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Half-width of the slice in units of filter-normalized directions.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Points per axis; must be odd.
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Seed of the two random directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out images; defaults to the run's synthetic split.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmitArgs {
    #[arg(long)]
    preset: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure that is not the user's fault: a check did not hold or the
/// numbers went bad.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    match e.downcast_ref::<sret::Error>() {
        Some(sret::Error::Numeric(_)) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Count(a) => count(a),
        Command::Verify(a) => verify(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => match a.precision {
            PrecisionArg::F32 => train::<f32>(a),
            PrecisionArg::F64 => train::<f64>(a),
        },
        Command::Landscape(a) => landscape(a),
        Command::EmitConfig(a) => emit_config(a),
    }
}

fn count(a: CountArgs) -> anyhow::Result<()> {
    let mut model = a.source.load()?.model;
    if let Some(n) = a.recursions {
        model = model.with_recursions(n);
    }
    if a.global_attention {
        model = model.with_global_attention();
    }
    model.validate()?;
    let resolution = a.resolution.unwrap_or(model.input_resolution);
    let report = count_macs(&model, resolution)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let check = verify_cost_equivalence(a.tokens, a.dim, a.recursions, a.groups)?;
    println!(
        "L={} D={} N={} G={}: ratio {} (expected {})",
        a.tokens, a.dim, a.recursions, a.groups, check.ratio, check.expected
    );
    if !check.holds {
        bail!(CheckFailed(format!("ratio {} differs from N/G = {}", check.ratio, check.expected)));
    }
    println!("holds");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let model = a.source.load()?.model;
    let report = model_gradcheck(&model, a.seed, a.per_tensor, a.mixed_depth)?;
    println!("{:<10} {:>12}", "module", "max_rel_err");
    for (module, err) in &report.per_module {
        println!("{module:<10} {err:>12.3e}");
    }
    println!("{} coordinates ({} skipped at ReLU kinks), max {:.3e}", report.coords, report.kinks, report.max_rel_error);
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        bail!(CheckFailed(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn train<T: Scalar>(a: TrainArgs) -> anyhow::Result<()> {
    let (mut run, seed, mut model, mut state) = match &a.resume {
        Some(path) => {
            let ckpt: Checkpoint<T> = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if a.seed != ckpt.seed {
                bail!("--seed {} differs from the checkpoint's seed {}", a.seed, ckpt.seed);
            }
            let state = ckpt
                .state
                .ok_or_else(|| anyhow!("{} holds no training state to resume from", path.display()))?;
            (ckpt.run, ckpt.seed, ckpt.model, state)
        }
        None => {
            let seed = a.seed;
            let run = match (&a.preset, &a.config) {
                (Some(name), _) => RunConfig::from_preset(name)?,
                (None, Some(path)) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
                (None, None) => bail!("one of --preset, --config or --resume is required"),
            };
            let model = build_model::<T>(&run.model, seed)?;
            let state = TrainState::new(&run.train);
            (run, seed, model, state)
        }
    };
    if a.mixed_depth {
        run.train.mixed_depth = true;
    }
    if run.train.mixed_depth && model.net.unrolled_head.is_none() {
        model.build_mixed_depth()?;
    }
    let teacher = match &a.distill {
        Some(path) => {
            run.train.loss_mode = LossMode::Distill;
            let t: Checkpoint<T> = load_checkpoint(path).with_context(|| format!("loading teacher {}", path.display()))?;
            Some(t.model)
        }
        None if run.train.loss_mode == LossMode::Distill => bail!("distillation is configured but no --distill teacher was given"),
        None => None,
    };
    let cfg = run.train.clone();
    let classes = run.model.num_classes;
    let resolution = run.model.input_resolution;
    let (train_set, eval_set): (Dataset<T>, Dataset<T>) = match &a.data_dir {
        Some(dir) => {
            let train_set = load_image_dir(dir, resolution, classes)?;
            let eval_set = load_image_dir(a.eval_dir.as_deref().unwrap_or(dir), resolution, classes)?;
            (train_set, eval_set)
        }
        None => {
            let synth = SynthDataset::new(seed, classes, resolution)?;
            let eval_set = match &a.eval_dir {
                Some(dir) => load_image_dir(dir, resolution, classes)?,
                None => synth.generate(cfg.eval_samples, 1),
            };
            (synth.generate(cfg.train_samples, 0), eval_set)
        }
    };
    if state.epoch == 0 {
        let start = initial_loss(&model, &train_set, &cfg, seed, teacher.as_ref())?;
        println!("initial loss {start:.6}");
    }
    let until = a.stop_after.unwrap_or(cfg.epochs);
    let history = train_loop(&mut model, &train_set, &eval_set, &cfg, seed, teacher.as_ref(), &mut state, until)?;
    for m in &history {
        println!(
            "epoch {:>3}  loss {:.6}  train_acc {:.3}  eval_acc {:.3}  lr {:.3e}",
            m.epoch, m.loss, m.train_acc, m.eval_acc, m.lr
        );
    }
    if let Some(path) = &a.metrics {
        write_metrics(path, &history, a.resume.is_some())?;
    }
    let ckpt = Checkpoint {
        run,
        seed,
        model,
        state: Some(state),
    };
    save_checkpoint(&a.out, &ckpt).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

/// Writes the metrics CSV, or appends its rows to an existing file when
/// continuing a run.
fn write_metrics(path: &Path, history: &[EpochMetrics], append: bool) -> anyhow::Result<()> {
    let csv = metrics_to_csv(history);
    let text = match fs::read_to_string(path) {
        Ok(mut existing) if append => {
            let rows = csv.split_once('\n').map_or("", |(_, rows)| rows);
            if !existing.is_empty() && !existing.ends_with('\n') {
                existing.push('\n');
            }
            existing.push_str(rows);
            existing
        }
        _ => csv,
    };
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn landscape(a: LandscapeArgs) -> anyhow::Result<()> {
    let ckpt: Checkpoint<f64> =
        load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model_cfg = &ckpt.run.model;
    let data: Dataset<f64> = match &a.data_dir {
        Some(dir) => load_image_dir(dir, model_cfg.input_resolution, model_cfg.num_classes)?,
        None => SynthDataset::new(ckpt.seed, model_cfg.num_classes, model_cfg.input_resolution)?
            .generate(ckpt.run.train.eval_samples, 1),
    };
    let surface = landscape_slice(&ckpt.model, &data, a.radius, a.grid, a.seed)?;
    if surface.loss.iter().flatten().any(|v| !v.is_finite()) {
        bail!(CheckFailed("landscape contains non-finite losses".into()));
    }
    fs::write(&a.out, landscape_to_csv(&surface)).with_context(|| format!("writing {}", a.out.display()))?;
    let centre = surface.loss[a.grid / 2][a.grid / 2];
    let mut summary = format!("{0}x{0} grid, radius {1}, centre loss {centre:.6}", a.grid, a.radius);
    let (lo, hi) = surface
        .loss
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let _ = write!(summary, ", range [{lo:.6}, {hi:.6}]");
    println!("{summary}");
    Ok(())
}

fn emit_config(a: EmitArgs) -> anyhow::Result<()> {
    let text = RunConfig::from_preset(&a.preset)?.to_toml()?;
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
