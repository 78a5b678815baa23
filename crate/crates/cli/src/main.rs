use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sisifus::global_prior::{select_median_prior_with, telemetry_csv, GlobalPriorConfig};
use sisifus::io::{read_datacube, read_plane, write_datacube, write_plane, PlaneFormat};
use sisifus::lifetime::{fit_lifetime, FitConfig, FitMethod};
use sisifus::local_prior::{
    generate_local_prior, sweep_local_configs, sweep_to_csv, LocalFunction, LocalPriorConfig,
};
use sisifus::metrics::evaluate;
use sisifus::phantom::{generate_datacube, generate_scene, preset_scene, Preset};
use sisifus::pipeline::{
    baseline, run_pipeline, sweep_table_csv, sweep_undersampling, PipelineConfig, RunOptions,
};
use sisifus::render::{composite, write_png, ClaheConfig, Colormap};
use sisifus::sampling::decimate;
use sisifus::solver::{history_to_csv, reconstruct, ReconstructionConfig};
use sisifus::{integrate_time, Plane, Role, SamplingMap};

/// Single-sample image-fusion upsampling of FLIM lifetime images.
#[derive(Parser)]
#[command(name = "sisifus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-pixel lifetimes from a datacube.
    Fit(FitArgs),
    /// Point-sample an HR plane onto the LR grid.
    Decimate(DecimateArgs),
    /// Bilinear upsampling of an LR lifetime plane.
    Baseline(BaselineArgs),
    /// Build a local or global prior.
    #[command(subcommand)]
    Prior(PriorCommand),
    /// Compare local-prior windows and functions against ground truth.
    SweepLocal(SweepLocalArgs),
    /// TV-regularized reconstruction from the LR plane and priors.
    Reconstruct(ReconstructArgs),
    /// PSNR, SSIM and MAE against ground truth.
    Evaluate(EvaluateArgs),
    /// Lifetime/intensity composite PNG.
    Render(RenderArgs),
    /// Generate a synthetic scene and its datacube.
    Phantom(PhantomArgs),
    /// Run every stage from a TOML config.
    Pipeline(PipelineArgs),
    /// Run the pipeline at several factors and tabulate the metrics.
    SweepUndersampling(SweepArgs),
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Decimate(_) => "decimate",
            Command::Baseline(_) => "baseline",
            Command::Prior(PriorCommand::Local(_)) => "prior local",
            Command::Prior(PriorCommand::Global(_)) => "prior global",
            Command::SweepLocal(_) => "sweep-local",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate(_) => "evaluate",
            Command::Render(_) => "render",
            Command::Phantom(_) => "phantom",
            Command::Pipeline(_) => "pipeline",
            Command::SweepUndersampling(_) => "sweep-undersampling",
        }
    }
}

#[derive(Subcommand)]
enum PriorCommand {
    /// Windowed intensity-to-lifetime regression.
    Local(LocalArgs),
    /// CNN trained on the sample's own patches.
    Global(GlobalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    #[value(alias = "log-linear")]
    LogLinearTail,
    CenterOfMass,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, value_enum, default_value = "log-linear-tail")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    tail_start: usize,
    #[arg(long, default_value_t = 50.0)]
    min_counts: f64,
    /// Dark counts per bin; defaults to the pre-rise baseline.
    #[arg(long)]
    background: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the time-integrated intensity.
    #[arg(long)]
    intensity_out: Option<PathBuf>,
}

#[derive(Args)]
struct Grid {
    #[arg(long)]
    factor: usize,
    /// HR pixel of LR sample (0, 0), as `row,col`.
    #[arg(long, value_parser = pair::<usize>, default_value = "0,0")]
    offset: (usize, usize),
}

impl Grid {
    fn map_for(&self, lr: &Plane, like: Option<&Path>) -> Result<SamplingMap> {
        let shape = match like {
            Some(p) => read(p, Role::Intensity)?.shape(),
            None => {
                let (m, n) = lr.shape();
                (
                    self.offset.0 + m * self.factor,
                    self.offset.1 + n * self.factor,
                )
            }
        };
        self.map(shape)
    }

    fn map(&self, hr_shape: (usize, usize)) -> Result<SamplingMap> {
        Ok(SamplingMap::with_offset(
            hr_shape,
            (self.factor, self.factor),
            self.offset,
        )?)
    }
}

#[derive(Args)]
struct DecimateArgs {
    #[arg(long, visible_alias = "in")]
    input: PathBuf,
    #[command(flatten)]
    grid: Grid,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, visible_alias = "in")]
    lr: PathBuf,
    /// Plane whose shape defines the HR grid (usually the intensity).
    /// Defaults to `offset + factor * LR shape`.
    #[arg(long)]
    like: Option<PathBuf>,
    #[command(flatten)]
    grid: Grid,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalArgs {
    #[arg(long, visible_alias = "tau")]
    lr: PathBuf,
    #[arg(long)]
    intensity: PathBuf,
    #[command(flatten)]
    grid: Grid,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value = "linear")]
    function: LocalFunction,
    /// Clamp the prior to `lo,hi` ns.
    #[arg(long, value_parser = pair::<f64>)]
    clamp: Option<(f64, f64)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlobalArgs {
    #[arg(long, visible_alias = "tau")]
    lr: PathBuf,
    #[arg(long)]
    intensity: PathBuf,
    #[command(flatten)]
    grid: Grid,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    inits: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force neighbour augmentation on or off (default: on from 8x).
    #[arg(long)]
    neighbor_augment: Option<bool>,
    #[arg(long, default_value_t = 0.0)]
    validation_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, visible_alias = "weights-out")]
    weight_out: PathBuf,
    /// Save the selected network.
    #[arg(long)]
    predictor_out: Option<PathBuf>,
    /// Per-epoch loss of the selected network as CSV.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Args)]
struct SweepLocalArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long)]
    intensity: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    grid: Grid,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    windows: Vec<usize>,
    /// Defaults to every function.
    #[arg(long, value_delimiter = ',')]
    functions: Vec<LocalFunction>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long, visible_alias = "tau")]
    lr: PathBuf,
    #[arg(long)]
    lp: Option<PathBuf>,
    #[arg(long, requires = "gp_weight")]
    gp: Option<PathBuf>,
    #[arg(long)]
    gp_weight: Option<PathBuf>,
    /// Plane whose shape defines the HR grid. Defaults to
    /// `offset + factor * LR shape`.
    #[arg(long)]
    like: Option<PathBuf>,
    #[command(flatten)]
    grid: Grid,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    admm_iters: Option<usize>,
    #[arg(long)]
    fista_iters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// MAE only counts pixels where the mask exceeds 0.5.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// PSNR peak; defaults to the ground-truth maximum.
    #[arg(long)]
    peak: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    tau: PathBuf,
    #[arg(long)]
    intensity: PathBuf,
    /// Lifetime range `lo,hi` in ns.
    #[arg(long, value_parser = pair::<f64>)]
    range: (f64, f64),
    #[arg(long, default_value = "viridis")]
    colormap: Colormap,
    #[arg(long, value_parser = pair::<usize>, default_value = "8,8")]
    tiles: (usize, usize),
    #[arg(long, default_value_t = 2.0)]
    clip: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value = "two-class")]
    preset: Preset,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// ns per time bin.
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    /// Writes gt_tau.fbin, gt_I.fbin, cube.fbin, intensity.fbin and scene.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    config: PathBuf,
    /// Recompute every stage.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,64")]
    factors: Vec<usize>,
    #[arg(long)]
    force: bool,
    /// Table path; defaults to `sweep.csv` in the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<T>()
            .map_err(|_| format!("cannot parse `{v}`"))
    };
    Ok((parse(a)?, parse(b)?))
}

fn read(path: &Path, role: Role) -> Result<Plane> {
    read_plane(path, PlaneFormat::from_path(path, role))
        .with_context(|| format!("reading {}", path.display()))
}

fn write(plane: &Plane, path: &Path) -> Result<()> {
    write_plane(plane, path, PlaneFormat::from_path(path, plane.role()))
        .with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn progress(stage: &str, message: &str) {
    eprintln!("[{stage}] {message}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => {
            let cube =
                read_datacube(&a.cube).with_context(|| format!("reading {}", a.cube.display()))?;
            let cfg = FitConfig {
                method: match a.method {
                    Method::LogLinearTail => FitMethod::LogLinearTail,
                    Method::CenterOfMass => FitMethod::CenterOfMass,
                },
                tail_start: a.tail_start,
                min_counts: a.min_counts,
                background: a.background,
            };
            write(&fit_lifetime(&cube, &cfg)?, &a.out)?;
            if let Some(p) = a.intensity_out {
                write(&integrate_time(&cube), &p)?;
            }
        }
        Command::Decimate(a) => {
            let hr = read(&a.input, Role::Lifetime)?;
            let map = a.grid.map(hr.shape())?;
            write(&decimate(&hr, &map)?, &a.out)?;
        }
        Command::Baseline(a) => {
            let lr = read(&a.lr, Role::Lifetime)?;
            let map = a.grid.map_for(&lr, a.like.as_deref())?;
            write(&baseline(&lr, &map)?, &a.out)?;
        }
        Command::Prior(PriorCommand::Local(a)) => {
            let lr = read(&a.lr, Role::Lifetime)?;
            let intensity = read(&a.intensity, Role::Intensity)?;
            let map = a.grid.map(intensity.shape())?;
            let cfg = LocalPriorConfig {
                window: a.window,
                function: a.function,
                clamp_range: a.clamp,
            };
            write(&generate_local_prior(&lr, &intensity, &map, &cfg)?, &a.out)?;
        }
        Command::Prior(PriorCommand::Global(a)) => {
            let lr = read(&a.lr, Role::Lifetime)?;
            let intensity = read(&a.intensity, Role::Intensity)?;
            let map = a.grid.map(intensity.shape())?;
            let cfg = GlobalPriorConfig {
                epochs: a.epochs,
                n_inits: a.inits,
                batch: a.batch,
                learning_rate: a.learning_rate,
                neighbor_augment: a.neighbor_augment,
                validation_fraction: a.validation_fraction,
                ..Default::default()
            };
            let sel = select_median_prior_with(&lr, &intensity, &map, &cfg, a.seed, |k, e| {
                if e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == a.epochs {
                    let val = e
                        .validation_mae
                        .map(|v| format!(", validation {v:.4}"))
                        .unwrap_or_default();
                    progress(
                        "prior global",
                        &format!(
                            "init {}/{} epoch {} train MAE {:.4} ns{val}",
                            k + 1,
                            a.inits,
                            e.epoch,
                            e.train_mae
                        ),
                    );
                }
            })?;
            progress(
                "prior global",
                &format!(
                    "self-consistency {:?}, chose init {}",
                    sel.scores,
                    sel.chosen + 1
                ),
            );
            write(&sel.prior, &a.out)?;
            write(&sel.weight, &a.weight_out)?;
            if let Some(p) = a.predictor_out {
                sel.chosen_predictor().save(&p)?;
            }
            if let Some(p) = a.telemetry {
                write_text(&p, &telemetry_csv(&sel.chosen_predictor().loss_curve))?;
            }
        }
        Command::SweepLocal(a) => {
            let lr = read(&a.lr, Role::Lifetime)?;
            let intensity = read(&a.intensity, Role::Intensity)?;
            let gt = read(&a.gt, Role::Lifetime)?;
            let map = a.grid.map(intensity.shape())?;
            let functions = if a.functions.is_empty() {
                LocalFunction::ALL.to_vec()
            } else {
                a.functions
            };
            let rows = sweep_local_configs(&lr, &intensity, &gt, &map, &a.windows, &functions)?;
            write_text(&a.out, &sweep_to_csv(&rows))?;
        }
        Command::Reconstruct(a) => {
            let lr = read(&a.lr, Role::Lifetime)?;
            let map = a.grid.map_for(&lr, a.like.as_deref())?;
            let lp = a.lp.as_deref().map(|p| read(p, Role::Prior)).transpose()?;
            let gp = a.gp.as_deref().map(|p| read(p, Role::Prior)).transpose()?;
            let w = a
                .gp_weight
                .as_deref()
                .map(|p| read(p, Role::Weight))
                .transpose()?;
            let d = ReconstructionConfig::for_factor(a.grid.factor);
            let cfg = ReconstructionConfig {
                alpha: a.alpha.or(d.alpha),
                beta: a.beta.unwrap_or(d.beta),
                gamma: a.gamma.unwrap_or(d.gamma),
                rho: a.rho.unwrap_or(d.rho),
                admm_iters: a.admm_iters.unwrap_or(d.admm_iters),
                fista_iters: a.fista_iters.unwrap_or(d.fista_iters),
                fista_step: None,
            };
            let r = reconstruct(&lr, lp.as_ref(), gp.as_ref(), w.as_ref(), &map, &cfg)?;
            progress("reconstruct", &format!("alpha = {:e}", r.alpha));
            write(&r.tau, &a.out)?;
            if let Some(p) = a.history {
                write_text(&p, &history_to_csv(&r.state.history))?;
            }
        }
        Command::Evaluate(a) => {
            let gt = read(&a.gt, Role::Lifetime)?;
            let test = read(&a.test, Role::Lifetime)?;
            let mask = a
                .mask
                .as_deref()
                .map(|p| read(p, Role::Weight))
                .transpose()?;
            let e = evaluate(
                gt.values(),
                test.values(),
                mask.as_ref().map(|m| m.values()),
                a.peak,
            )?;
            let text = serde_json::to_string_pretty(&e)? + "\n";
            match a.out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Render(a) => {
            let tau = read(&a.tau, Role::Lifetime)?;
            let intensity = read(&a.intensity, Role::Intensity)?;
            let cfg = ClaheConfig {
                tiles: a.tiles,
                clip: a.clip,
            };
            let rgb = composite(&tau, &intensity, a.colormap, a.range, &cfg)?;
            write_png(&a.out, &rgb)?;
        }
        Command::Phantom(a) => {
            let scene = preset_scene(a.preset, a.size, a.seed)?;
            let (tau, ideal) = generate_scene(&scene)?;
            let cube = generate_datacube(&tau, &ideal, a.bins, a.bin_width, a.seed)?;
            std::fs::create_dir_all(&a.out_dir)
                .with_context(|| format!("creating {}", a.out_dir.display()))?;
            write(&tau, &a.out_dir.join("gt_tau.fbin"))?;
            write(&ideal, &a.out_dir.join("gt_I.fbin"))?;
            write_text(
                &a.out_dir.join("scene.json"),
                &(serde_json::to_string_pretty(&scene)? + "\n"),
            )?;
            write(&integrate_time(&cube), &a.out_dir.join("intensity.fbin"))?;
            write_datacube(&cube, a.out_dir.join("cube.fbin"))?;
        }
        Command::Pipeline(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let summary = run_pipeline(&cfg, &RunOptions { force: a.force }, &mut progress)?;
            if let Some(c) = &summary.metrics.comparison {
                let db = |v: Option<f64>| {
                    v.map(|x| format!("{x:.2} dB"))
                        .unwrap_or_else(|| "inf".into())
                };
                progress(
                    "evaluate",
                    &format!(
                        "sisifus {} vs bilinear {}",
                        db(c.sisifus.psnr_db),
                        db(c.bilinear.psnr_db)
                    ),
                );
            }
            println!("{}", summary.dir.display());
        }
        Command::SweepUndersampling(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let rows = sweep_undersampling(
                &cfg,
                &a.factors,
                &RunOptions { force: a.force },
                &mut progress,
            )?;
            let table = sweep_table_csv(&rows);
            let out = a.out.unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
            write_text(&out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{stage}]: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
