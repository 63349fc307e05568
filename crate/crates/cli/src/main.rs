use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use panmorph::config::{parse_config, validate_config, Profile, RawConfig, TrainConfig};
use panmorph::datamodel::load_dataset;
use panmorph::eval::{evaluate_model, load_target_eval, markdown_table, write_report};
use panmorph::imageio::{read_rgb, write_rgb};
use panmorph::synthdata::{generate_benchmark, DomainCounts, SceneSpec};
use panmorph::trainer::{
    load_deformation, load_student, run_adaptation_until, save_student, source_pretrain, RunState,
};
use panmorph::checkpoint::Checkpoint;
use panmorph::viz::{render_deformation, render_gating};
use panmorph::Error;

/// Multi-source domain adaptation for panoramic segmentation on a
/// synthetic benchmark.
#[derive(Parser, Debug)]
#[command(name = "panmorph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Configuration file (flat key = value); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Hyperparameter profile.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VizKind {
    Deform,
    Gating,
}

#[derive(Args, Debug)]
struct VizArgs {
    /// Checkpoint holding the networks to visualize.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input images; one PNG is written per input.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Fixed (panoramic) image every input is deformed toward.
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Images per domain as pinhole,panoramic,target.
        #[arg(long, value_delimiter = ',', value_name = "PIN,PAN,TARGET")]
        counts: Option<Vec<usize>>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the segmentation model on the labelled sources.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pre-trained model to the target domain.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained student checkpoint.
        #[arg(long, required_unless_present = "resume")]
        pretrained: Option<PathBuf>,
        /// Output directory for checkpoints and the ledger.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured number of adaptation iterations.
        #[arg(long)]
        max_its: Option<usize>,
        /// Stop after this many iterations, leaving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
        /// Continue from a run checkpoint; its configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the target evaluation labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Student or run checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for metrics.csv and metrics.md.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render deformation triptychs or gating heat maps.
    Viz {
        /// What to render.
        #[arg(long, value_enum)]
        what: VizKind,
        #[command(flatten)]
        args: VizArgs,
    },
    /// Same as `viz --what deform`.
    VizDeform(VizArgs),
    /// Same as `viz --what gating`.
    VizGating(VizArgs),
}

/// A failure with its process exit code: 2 for bad input, 1 otherwise.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e {
            Error::Config(_)
            | Error::Validation(_)
            | Error::MissingLabel(_)
            | Error::Checkpoint(_)
            | Error::Image { .. }
            | Error::Shape(_)
            | Error::Contract(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::input(format!("{what} {} is not a directory", path.display())))
    }
}

fn resolve_config(args: &ConfigArgs, max_its: Option<usize>) -> CliResult<TrainConfig> {
    let mut raw = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => RawConfig::default(),
    };
    if let Some(seed) = args.seed {
        raw.seed = Some(seed);
    }
    if let Some(p) = args.profile {
        raw.profile = Some(match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        });
    }
    if max_its.is_some() {
        raw.max_its = max_its;
    }
    Ok(validate_config(raw)?)
}

fn gen_data(cfg: &TrainConfig, out: &Path, counts: Option<Vec<usize>>, force: bool) -> CliResult<()> {
    let non_empty = out.is_dir()
        && fs::read_dir(out)
            .map_err(|e| Failure::input(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
    if non_empty && !force {
        return Err(Failure::input(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    if out.exists() && !out.is_dir() {
        return Err(Failure::input(format!("{} is not a directory", out.display())));
    }
    let counts = match counts.as_deref() {
        Some([pin, pan, target]) => DomainCounts {
            pin: *pin,
            pan: *pan,
            target: *target,
        },
        Some(_) => return Err(Failure::input("--counts takes three values")),
        None => DomainCounts::uniform(cfg.images_per_domain),
    };
    let spec = SceneSpec::new(cfg.seed, cfg.num_classes, cfg.height, cfg.width, cfg.distortion_strength);
    let bench = generate_benchmark(&spec, counts)?;
    if force {
        for dir in ["pin_src_0", "pan_src_0", "target", panmorph::synthdata::TARGET_EVAL_DIR] {
            let p = out.join(dir);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    bench.save(out)?;
    info!(
        "wrote {} images to {}",
        counts.pin + counts.pan + counts.target,
        out.display()
    );
    Ok(())
}

fn pretrain(cfg: &TrainConfig, data: &Path, out: &Path) -> CliResult<()> {
    require_dir(data, "dataset")?;
    let set = load_dataset(data, cfg.num_classes)?;
    let outcome = source_pretrain(cfg, &set)?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    let path = out.join("pretrained.pmck");
    save_student(&path, &outcome.student, cfg)?;
    let losses: String = outcome.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
    let loss_path = out.join("pretrain_losses.csv");
    fs::write(&loss_path, format!("iteration,loss\n{losses}")).map_err(|e| Error::io(&loss_path, e))?;
    println!("{}", path.display());
    Ok(())
}

struct AdaptArgs<'a> {
    cfg: TrainConfig,
    data: &'a Path,
    pretrained: Option<&'a Path>,
    out: &'a Path,
    stop_at: Option<usize>,
    resume: Option<&'a Path>,
}

fn adapt(a: AdaptArgs<'_>) -> CliResult<()> {
    require_dir(a.data, "dataset")?;
    let mut state = match a.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let state = RunState::from_checkpoint(&Checkpoint::read(path)?)?;
            info!("resuming at iteration {}", state.iteration);
            state
        }
        None => {
            let path = a.pretrained.ok_or_else(|| Failure::input("--pretrained is required"))?;
            require_file(path, "pre-trained checkpoint")?;
            let student = load_student(path)?;
            if student.config.num_classes != a.cfg.num_classes {
                return Err(Failure::input(format!(
                    "checkpoint has {} classes, config has {}",
                    student.config.num_classes, a.cfg.num_classes
                )));
            }
            RunState::new(a.cfg, student)
        }
    };
    let set = load_dataset(a.data, state.cfg.num_classes)?;
    fs::create_dir_all(a.out).map_err(|e| Error::io(a.out, e))?;
    let until = a.stop_at.unwrap_or(state.cfg.max_its);
    run_adaptation_until(&mut state, &set, Some(a.out), until)?;
    println!("iteration {} of {}", state.iteration, state.cfg.max_its);
    Ok(())
}

fn eval(cfg: &TrainConfig, data: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    require_dir(data, "dataset")?;
    require_file(checkpoint, "checkpoint")?;
    let model = load_student(checkpoint)?;
    if model.config.num_classes != cfg.num_classes {
        return Err(Failure::input(format!(
            "checkpoint has {} classes, config has {}",
            model.config.num_classes, cfg.num_classes
        )));
    }
    let set = load_dataset(data, cfg.num_classes)?;
    let gts = load_target_eval(data, &set.target)?;
    let report = evaluate_model(&model, &set.target, &gts)?;
    write_report(out, "model", &report)?;
    print!("{}", markdown_table(&[("model", &report)]));
    Ok(())
}

fn viz(what: VizKind, args: &VizArgs) -> CliResult<()> {
    let cfg = resolve_config(&args.cfg, None)?;
    require_file(&args.checkpoint, "checkpoint")?;
    for input in &args.inputs {
        require_file(input, "input image")?;
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    match what {
        VizKind::Deform => {
            let fixed_path = args
                .fixed
                .as_deref()
                .ok_or_else(|| Failure::input("deformation figures need --fixed"))?;
            require_file(fixed_path, "fixed image")?;
            let fixed = read_rgb(fixed_path)?;
            let net = load_deformation(&args.checkpoint)?;
            for input in &args.inputs {
                let moving = read_rgb(input)?;
                let fig = render_deformation(&net, &moving, &fixed, cfg.integration_steps)?;
                write_rgb(&output_name(&args.out, input, "deform"), &fig)?;
            }
        }
        VizKind::Gating => {
            let model = load_student(&args.checkpoint)?;
            for input in &args.inputs {
                let fig = render_gating(&model, &read_rgb(input)?)?;
                write_rgb(&output_name(&args.out, input, "gating"), &fig)?;
            }
        }
    }
    Ok(())
}

fn output_name(out: &Path, input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    out.join(format!("{stem}_{suffix}.png"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { cfg, out, counts, force } => gen_data(&resolve_config(&cfg, None)?, &out, counts, force),
        Command::Pretrain { cfg, data, out } => pretrain(&resolve_config(&cfg, None)?, &data, &out),
        Command::Adapt {
            cfg,
            data,
            pretrained,
            out,
            max_its,
            stop_at,
            resume,
        } => adapt(AdaptArgs {
            cfg: resolve_config(&cfg, max_its)?,
            data: &data,
            pretrained: pretrained.as_deref(),
            out: &out,
            stop_at,
            resume: resume.as_deref(),
        }),
        Command::Eval { cfg, data, checkpoint, out } => eval(&resolve_config(&cfg, None)?, &data, &checkpoint, &out),
        Command::Viz { what, args } => viz(what, &args),
        Command::VizDeform(args) => viz(VizKind::Deform, &args),
        Command::VizGating(args) => viz(VizKind::Gating, &args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
