use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvmcad::checkpoint::Checkpoint;
use mvmcad::config::RunConfig;
use mvmcad::error::{Error, IoContext, Result};
use mvmcad::{dataset, dump, eval, infer, synth, train};
use mvmcad_core::gradcheck::{self, CheckOptions, Outcome};
use mvmcad_core::{Real, Tensor};

#[derive(Parser, Debug)]
#[command(name = "mvmcad", version, about = "Multi-view anomaly detection by cross-feature reconstruction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Overrides the training and initialization seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset root.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads for synthesis and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run in 64-bit floating point.
    #[arg(long = "f64", global = true)]
    f64: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-view dataset into --data.
    Synth,
    /// Train on the normal views under --data.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory of backbone tensors written by export-weights.
        #[arg(long, value_name = "DIR")]
        backbone_weights: Option<PathBuf>,
    },
    /// Score the test split under --data and write metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score single images: heatmap PGM, scale sidecar and score JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit mode.
    Gradcheck,
    /// Dump the amplification module's intermediate tensors for images.
    AamTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write the frozen backbone tensors as MVTN files into --out.
    ExportWeights {
        /// Take the weights from a checkpoint instead of the config's seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Global {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut config);
        config.validate()?;
        Ok(config)
    }

    fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.model.init_seed = seed;
        }
        if let Some(data) = &self.data {
            config.data.root = Some(data.clone());
        }
    }

    fn data_root(&self, config: &RunConfig) -> Result<PathBuf> {
        config
            .data
            .root
            .clone()
            .ok_or_else(|| Error::Validation("no dataset root: pass --data or set data.root".into()))
    }
}

/// Writes to stdout, ignoring a closed pipe (`mvmcad eval | head`).
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json<S: serde::Serialize>(value: &S) {
    emit(&serde_json::to_string_pretty(value).expect("serializable"));
}

fn write_config(out: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).at(out)?;
    let path = out.join("config.json");
    std::fs::write(&path, config.to_json() + "\n").at(&path)
}

fn load_images<T: Real>(paths: &[PathBuf], size: usize) -> Result<Tensor<T>> {
    let tensors = paths
        .iter()
        .map(|p| {
            let img = dataset::read_rgb(p)?;
            if img.width != size || img.height != size {
                return Err(Error::Validation(format!(
                    "{}: image is {}x{}, model expects {size}x{size}",
                    p.display(),
                    img.width,
                    img.height
                )));
            }
            let data = img.planar_unit().into_iter().map(T::from_f64).collect();
            Ok(Tensor::new([3, size, size], data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&tensors)?)
}

fn synth_cmd(g: &Global) -> Result<()> {
    let config = g.run_config()?;
    let root = g.data_root(&config)?;
    let run = || synth::write_dataset(&root, &config.data, config.model.backbone.image_size, config.train.seed);
    let summary = if g.jobs == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.jobs)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(run)?
    };
    print_json(&summary);
    Ok(())
}

fn train_cmd<T: Real>(g: &Global, resume: Option<&Path>, backbone: Option<&Path>) -> Result<()> {
    let (config, mut model, optim, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (mut config, model, optim) = ckpt.restore::<T>()?;
            // a resumed run may extend the schedule or move the data
            if let Some(p) = &g.config {
                let fresh = RunConfig::load(p)?;
                config.train.iterations = fresh.train.iterations;
                config.train.checkpoint_every = fresh.train.checkpoint_every;
            }
            if let Some(data) = &g.data {
                config.data.root = Some(data.clone());
            }
            (config, model, optim, ckpt.iteration)
        }
        None => {
            let config = g.run_config()?;
            let (model, optim) = train::initialize::<T>(&config)?;
            (config, model, optim, 0)
        }
    };
    if let Some(dir) = backbone {
        dump::import_backbone(&mut model, dir)?;
    }
    let root = g.data_root(&config)?;
    let samples = dataset::load_train(&root)?;
    dataset::check_size(&samples, config.model.backbone.image_size)?;
    let data = train::TrainSet::<T>::new(&samples)?;
    write_config(&g.out, &config)?;
    let summary = train::train(&config, model, optim, start, &data, &g.out)?;
    let last = summary.log.last();
    print_json(&serde_json::json!({
        "checkpoint": summary.checkpoint_path,
        "iterations": summary.checkpoint.iteration,
        "final_loss": last.map(|l| l.loss),
    }));
    Ok(())
}

fn eval_cmd<T: Real>(g: &Global, checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (mut config, model, _) = ckpt.restore::<T>()?;
    g.apply(&mut config);
    let root = g.data_root(&config)?;
    let samples = dataset::load_test(&root)?;
    let evaluation = eval::evaluate(&model, &config.scoring, &samples, g.jobs)?;
    std::fs::create_dir_all(&g.out).at(&g.out)?;
    eval::write_report(&g.out.join("metrics.json"), &evaluation.report)?;
    let scores_path = g.out.join("view_scores.json");
    let scores = serde_json::to_string_pretty(&evaluation.views).expect("scores serialize");
    std::fs::write(&scores_path, scores + "\n").at(&scores_path)?;
    print_json(&evaluation.report);
    Ok(())
}

fn infer_cmd<T: Real>(g: &Global, checkpoint: &Path, images: &[PathBuf]) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (config, model, _) = ckpt.restore::<T>()?;
    let records = images
        .iter()
        .map(|p| Ok(infer::infer_file(&config, &model, p, &g.out)?.record))
        .collect::<Result<Vec<_>>>()?;
    print_json(&records);
    Ok(())
}

fn aam_trace_cmd<T: Real>(g: &Global, checkpoint: &Path, images: &[PathBuf]) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (config, model, _) = ckpt.restore::<T>()?;
    let batch = load_images::<T>(images, config.model.backbone.image_size)?;
    let trace = dump::aam_trace(&model, batch)?;
    let paths = dump::write_trace(&trace, &g.out)?;
    print_json(&paths);
    Ok(())
}

fn export_cmd<T: Real>(g: &Global, checkpoint: Option<&Path>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.restore::<T>()?.1,
        None => train::initialize::<T>(&g.run_config()?)?.0,
    };
    let paths = dump::export_backbone(&model, &g.out)?;
    print_json(&paths);
    Ok(())
}

fn gradcheck_cmd(g: &Global) -> Result<()> {
    let config = g.run_config()?;
    let opts = CheckOptions {
        seed: config.train.seed,
        ..CheckOptions::default()
    };
    let started = std::time::Instant::now();
    let checks = gradcheck::check_modules(&config.model, &opts)?;
    emit(&format!("{:<12} {:<8} {:>14} {:>8}  worst input", "module", "result", "max rel err", "coords"));
    for c in &checks {
        let result = match c.outcome {
            Outcome::Pass => "pass",
            Outcome::Fail => "FAIL",
            Outcome::Skipped => "skipped",
        };
        let err = c.max_rel_error.map_or("-".to_string(), |e| format!("{e:.3e}"));
        let worst = c.worst_input.as_deref().unwrap_or("-");
        emit(&format!("{:<12} {:<8} {:>14} {:>8}  {worst}", c.module.name(), result, err, c.coordinates));
    }
    emit(&format!("tolerance {:.0e}, {:.1?}", opts.tolerance, started.elapsed()));
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| c.outcome == Outcome::Fail)
        .map(|c| c.module.name())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run_typed<T: Real>(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => synth_cmd(g),
        Command::Train { resume, backbone_weights } => train_cmd::<T>(g, resume.as_deref(), backbone_weights.as_deref()),
        Command::Eval { checkpoint } => eval_cmd::<T>(g, checkpoint),
        Command::Infer { checkpoint, images } => infer_cmd::<T>(g, checkpoint, images),
        Command::Gradcheck => gradcheck_cmd(g),
        Command::AamTrace { checkpoint, images } => aam_trace_cmd::<T>(g, checkpoint, images),
        Command::ExportWeights { checkpoint } => export_cmd::<T>(g, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.global.f64 { run_typed::<f64>(&cli) } else { run_typed::<f32>(&cli) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
