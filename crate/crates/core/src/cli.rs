//! Command line front end.
//!
//! Every run reads a TOML manifest (see [`crate::io::Manifest`]); flags
//! override individual settings. Errors map to one exit code per family,
//! see [`Error::exit_code`]. Usage errors exit with 2.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{search_alpha, AlphaSearchResult, AlphaSearchSpace};
use crate::io::{Dataset, Manifest};
use crate::memory::StaticMemory;
use crate::pipeline::{
    run_stream, samples_from_feature_set, text_only_accuracy, Engine, FusionWeights, Mode, PipelineConfig,
};
use crate::readout::{ProjectionSet, ReadoutConfig};
use crate::report::{AlphaSource, RunReport};
use crate::synth::{calibrate_image_noise, make_synthetic, synthetic_text_accuracy, write_synthetic, SyntheticSpec};
use crate::train::{LossContext, Trainer};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "DUALMEM_OUT_DIR";

const PROJECTIONS_FILE: &str = "projections.dmnp";
const DIVERGED_FILE: &str = "projections.diverged.dmnp";
const TRAIN_LOG_FILE: &str = "train_log.tsv";

#[derive(Debug, Parser)]
#[command(name = "dualmem", version, about = "Dual memory test-time adaptation over precomputed embeddings")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Zero-shot run: text classifier plus dynamic memory.
    Zs(RunArgs),
    /// Training-free few-shot run: adds the static memory of shots.
    Tf(RunArgs),
    /// Trains the projection maps on the shots and saves them.
    FsTrain(TrainArgs),
    /// Few-shot run with trained projections.
    FsEval(FsEvalArgs),
    /// Grid search over the fusion weights for one mode.
    SearchAlpha(SearchArgs),
    /// Writes a synthetic benchmark and its manifest.
    Synth(SynthArgs),
    /// Loads every file a manifest references and checks consistency.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    memory_length: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for reports and artifacts.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
}

/// `search`, `fixed`, `manifest`, or three comma-separated weights.
#[derive(Debug, Clone, Copy, PartialEq)]
enum AlphaArg {
    Manifest,
    Fixed,
    Search,
    Explicit(FusionWeights),
}

fn parse_alpha(s: &str) -> std::result::Result<AlphaArg, String> {
    match s {
        "manifest" => Ok(AlphaArg::Manifest),
        "fixed" => Ok(AlphaArg::Fixed),
        "search" => Ok(AlphaArg::Search),
        _ => {
            let parts = s
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight {p:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let [a1, a2, a3] = parts[..] else {
                return Err(format!("expected search, fixed, manifest or a1,a2,a3; got {s:?}"));
            };
            FusionWeights::new(a1, a2, a3)
                .map(AlphaArg::Explicit)
                .map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SearchOn {
    Test,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Zs,
    Tf,
    Fs,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Zs => Mode::ZeroShot,
            ModeArg::Tf => Mode::TrainingFree,
            ModeArg::Fs => Mode::FewShot,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "manifest", value_parser = parse_alpha)]
    alpha: AlphaArg,
    /// Stream the fusion weights are searched on.
    #[arg(long, value_enum, default_value_t = SearchOn::Test)]
    search_on: SearchOn,
}

#[derive(Debug, Clone, Args)]
struct FsEvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Trained projections; defaults to the manifest entry.
    #[arg(long)]
    projections: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SearchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SearchOn::Test)]
    search_on: SearchOn,
    #[arg(long)]
    projections: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct SynthArgs {
    /// TOML synthetic spec; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Bisect the image noise until text-only accuracy lies in [0.65, 0.75].
    #[arg(long)]
    calibrate: bool,
}

#[derive(Debug, Clone, Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Entry point of the binary: parses the process arguments and returns the exit code.
pub fn main_with_env() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the tool with explicit argument list and output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
                _ => {
                    let _ = write!(err, "{}\n{}", e.render(), Cli::command().render_help());
                    2
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", e.kind());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Zs(a) => evaluate(Mode::ZeroShot, &a.common, a.alpha, a.search_on, None, out, err),
        Command::Tf(a) => evaluate(Mode::TrainingFree, &a.common, a.alpha, a.search_on, None, out, err),
        Command::FsEval(a) => {
            let r = &a.run;
            evaluate(
                Mode::FewShot,
                &r.common,
                r.alpha,
                r.search_on,
                a.projections.as_deref(),
                out,
                err,
            )
        }
        Command::SearchAlpha(a) => evaluate(
            a.mode.into(),
            &a.common,
            AlphaArg::Search,
            a.search_on,
            a.projections.as_deref(),
            out,
            err,
        ),
        Command::FsTrain(a) => fs_train(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Validate(a) => validate(&a.manifest, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn pipeline_config(manifest: &Manifest, common: &CommonArgs) -> Result<PipelineConfig> {
    let mut cfg = manifest.pipeline_config()?;
    if let Some(beta) = common.beta {
        cfg.readout.beta = beta;
    }
    if let Some(l) = common.memory_length {
        cfg.memory_length = l;
    }
    if let Some(rho) = common.rho {
        cfg.rho = rho;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn static_memory(data: &Dataset, num_classes: usize) -> Result<StaticMemory<f32>> {
    let shots = data
        .shots
        .as_ref()
        .ok_or_else(|| Error::MissingInput("manifest lists no shots file".into()))?;
    StaticMemory::from_feature_set(shots, num_classes)
}

fn projections_path(manifest: &Manifest, flag: Option<&Path>) -> Result<PathBuf> {
    match (flag, &manifest.files.projections) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(manifest.resolve(p)),
        (None, None) => Err(Error::MissingInput(
            "few-shot mode needs --projections or a manifest projections entry".into(),
        )),
    }
}

fn build_engine(
    mode: Mode,
    manifest: &Manifest,
    data: &Dataset,
    cfg: PipelineConfig,
    projections: Option<&Path>,
) -> Result<Engine<f32>> {
    let c = manifest.num_classes();
    let static_mem = mode.uses_static().then(|| static_memory(data, c)).transpose()?;
    let proj = match mode {
        Mode::FewShot => Some(ProjectionSet::<f32>::load(projections_path(manifest, projections)?)?),
        _ => None,
    };
    Engine::new(mode, data.text.clone(), static_mem, proj, cfg)
}

fn evaluate(
    mode: Mode,
    common: &CommonArgs,
    alpha: AlphaArg,
    search_on: SearchOn,
    projections: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let manifest = Manifest::load(&common.manifest)?;
    let cfg = pipeline_config(&manifest, common)?;
    let data = manifest.load_dataset()?;
    let seed = common.seed.unwrap_or(manifest.seed);
    let mut engine = build_engine(mode, &manifest, &data, cfg, projections)?;
    let samples = samples_from_feature_set::<f32>(&data.test);

    let mut search: Option<AlphaSearchResult> = None;
    let source = match alpha {
        AlphaArg::Manifest => AlphaSource::Manifest,
        AlphaArg::Fixed => {
            engine.set_weights(FusionWeights::default())?;
            AlphaSource::Fixed
        }
        AlphaArg::Explicit(w) => {
            engine.set_weights(w)?;
            AlphaSource::Explicit
        }
        AlphaArg::Search => {
            let space = AlphaSearchSpace::default();
            let (result, source) = match search_on {
                SearchOn::Test => {
                    let _ = writeln!(
                        err,
                        "warning: fusion weights are searched on the test stream (use --search-on val for a held-out split)"
                    );
                    (search_alpha(&mut engine, &samples, &space)?.0, AlphaSource::SearchTest)
                }
                SearchOn::Val => {
                    let val = data
                        .val
                        .as_ref()
                        .ok_or_else(|| Error::MissingInput("--search-on val needs a val file".into()))?;
                    let val_samples = samples_from_feature_set::<f32>(val);
                    (search_alpha(&mut engine, &val_samples, &space)?.0, AlphaSource::SearchVal)
                }
            };
            engine.set_weights(result.best)?;
            search = Some(result);
            source
        }
    };

    engine.reset()?;
    let run = run_stream(&mut engine, &samples)?;
    let truth: Vec<Option<usize>> = samples.iter().map(|s| s.label).collect();
    let text_acc = if truth.iter().all(Option::is_some) && !samples.is_empty() {
        Some(text_only_accuracy(&samples, engine.text(), &engine.config().readout)?)
    } else {
        None
    };
    let report = RunReport::new(
        &engine,
        &run.predictions,
        truth,
        run.accuracy,
        text_acc,
        source,
        search.as_ref(),
        seed,
    );
    if let Some(dir) = &common.out {
        report.save(dir)?;
    }
    emit(out, &report.to_text())
}

fn train_log_text(log: &[crate::train::LogEntry]) -> String {
    let mut s = String::from("epoch\tstep\tlr\tloss\n");
    for e in log {
        s.push_str(&format!("{}\t{}\t{:e}\t{}\n", e.epoch, e.step, e.lr, e.loss));
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fs_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let common = &args.common;
    let manifest = Manifest::load(&common.manifest)?;
    let cfg = pipeline_config(&manifest, common)?;
    let data = manifest.load_dataset()?;
    let memory = static_memory(&data, manifest.num_classes())?;
    let mut train_cfg = manifest.train_config();
    if let Some(seed) = common.seed {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(lr) = args.learning_rate {
        train_cfg.learning_rate = lr;
    }
    let out_dir = common.out.clone().unwrap_or_else(|| manifest.base_dir().to_path_buf());
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let ctx = LossContext {
        memory: &memory,
        text: &data.text,
        readout: &cfg.readout,
        weights: &cfg.weights,
        leave_one_out: train_cfg.leave_one_out,
    };
    let mut trainer = Trainer::new(ctx, train_cfg)?;
    let initial = trainer.full_loss()?;
    let result = trainer.run();
    write_file(&out_dir.join(TRAIN_LOG_FILE), &train_log_text(trainer.log()))?;
    if let Err(e) = result {
        trainer.projections().save(out_dir.join(DIVERGED_FILE))?;
        return Err(e);
    }
    let final_loss = trainer.full_loss()?;
    let path = out_dir.join(PROJECTIONS_FILE);
    trainer.projections().save(&path)?;
    emit(
        out,
        &format!(
            "mode: {}\nsteps: {}\nbatch_size: {}\ninitial_loss: {initial}\nfinal_loss: {final_loss}\nprojections: {}\n",
            Mode::FewShot.name(),
            trainer.total_steps(),
            trainer.batch_size(),
            path.display()
        ),
    )
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let readout = ReadoutConfig::default();
    if args.calibrate {
        spec = calibrate_image_noise(&spec, &readout, 0.65, 0.75)?.0;
    }
    let data = make_synthetic(&spec)?;
    let acc = synthetic_text_accuracy(&data, &readout)?;
    write_synthetic(&data, &spec, &args.out)?;
    let frozen = toml::to_string_pretty(&spec).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&args.out.join("spec.toml"), &frozen)?;
    emit(
        out,
        &format!(
            "manifest: {}\nclasses: {}\ndim: {}\ntest_rows: {}\nimage_noise: {}\ntext_only_accuracy: {acc:.4}\n",
            args.out.join("manifest.toml").display(),
            spec.num_classes,
            spec.dim,
            data.test.len(),
            spec.image_noise
        ),
    )
}

fn validate(manifest_path: &Path, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    manifest.pipeline_config()?;
    manifest.train_config().validate()?;
    let data = manifest.load_dataset()?;
    let mut lines = vec![
        format!("classes: {}", manifest.num_classes()),
        format!("dim: {}", data.text.dim()),
        format!("test_rows: {}", data.test.len()),
        format!("test_samples: {}", data.test.groups().len()),
    ];
    if data.shots.is_some() {
        let s = static_memory(&data, manifest.num_classes())?;
        lines.push(format!("shots_per_class: {}", s.shots()));
    }
    if let Some(val) = &data.val {
        lines.push(format!("val_rows: {}", val.len()));
    }
    if let Some(p) = &manifest.files.projections {
        let proj = ProjectionSet::<f32>::load(manifest.resolve(p))?;
        if proj.dim() != data.text.dim() {
            return Err(Error::DimMismatch {
                expected: data.text.dim(),
                found: proj.dim(),
            });
        }
        lines.push(format!("projections: ok ({} dims)", proj.dim()));
    }
    lines.push("status: ok".into());
    emit(out, &(lines.join("\n") + "\n"))
}
