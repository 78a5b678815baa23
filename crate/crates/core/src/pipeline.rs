//! End-to-end runs driven by a TOML config: fit, decimate, baseline, priors,
//! reconstruction, evaluation and rendering, with per-stage caching and a
//! content-hashed manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::global_prior::{select_median_prior_with, GlobalPriorConfig};
use crate::io::{self, decode_plane, encode_plane, PlaneFormat};
use crate::lifetime::{fit_lifetime, FitConfig};
use crate::local_prior::{generate_local_prior, LocalPriorConfig};
use crate::metrics::{evaluate, Evaluation};
use crate::phantom::{
    class_accuracy, generate_datacube, generate_scene, preset_scene, Preset, BLOB_TAU, RIDGE_TAU,
};
use crate::render::{composite, encode_png, ClaheConfig, Colormap};
use crate::sampling::{bilinear_array, decimate_array};
use crate::solver::{history_to_csv, initial_estimate, reconstruct, ReconstructionConfig};
use crate::types::{integrate_time, Plane, Role, SamplingMap};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "sisifus-run/1";

/// How lifetime pixels that could not be fit enter the LR plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unsampled {
    /// Treated as lifetime 0 (no fluorescence).
    #[default]
    Zero,
    /// Kept as unsampled; the baseline fills them with the mean lifetime.
    Keep,
}

/// Exactly one source: `phantom`, `datacube`, `lifetime` (HR, decimated
/// here) or `lr_lifetime`. The last two need `intensity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub phantom: Option<Preset>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_phantom_seed")]
    pub phantom_seed: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Nanoseconds per time bin for generated datacubes.
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    pub datacube: Option<PathBuf>,
    pub lifetime: Option<PathBuf>,
    pub lr_lifetime: Option<PathBuf>,
    pub intensity: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub unsampled: Unsampled,
}

fn default_size() -> usize {
    256
}
fn default_phantom_seed() -> u64 {
    1
}
fn default_bins() -> usize {
    256
}
fn default_bin_width() -> f64 {
    0.05
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            phantom: None,
            size: default_size(),
            phantom_seed: default_phantom_seed(),
            bins: default_bins(),
            bin_width: default_bin_width(),
            datacube: None,
            lifetime: None,
            lr_lifetime: None,
            intensity: None,
            ground_truth: None,
            unsampled: Unsampled::Zero,
        }
    }
}

impl InputConfig {
    pub fn phantom(preset: Preset, size: usize, seed: u64) -> Self {
        InputConfig {
            phantom: Some(preset),
            size,
            phantom_seed: seed,
            ..Default::default()
        }
    }
}

/// Which priors feed the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSwitches {
    pub local: bool,
    pub global: bool,
}

impl Default for PriorSwitches {
    fn default() -> Self {
        PriorSwitches {
            local: true,
            global: true,
        }
    }
}

/// Solver settings; anything left out takes the factor-dependent default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub admm_iters: Option<usize>,
    pub fista_iters: Option<usize>,
    pub fista_step: Option<f64>,
}

impl ReconstructionOverrides {
    pub fn resolve(&self, factor: usize) -> ReconstructionConfig {
        let d = ReconstructionConfig::for_factor(factor);
        ReconstructionConfig {
            alpha: self.alpha.or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            gamma: self.gamma.unwrap_or(d.gamma),
            rho: self.rho.unwrap_or(d.rho),
            admm_iters: self.admm_iters.unwrap_or(d.admm_iters),
            fista_iters: self.fista_iters.unwrap_or(d.fista_iters),
            fista_step: self.fista_step.or(d.fista_step),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub colormap: Colormap,
    /// Lifetime range of the colour scale. Defaults to the range of the LR
    /// lifetimes.
    pub tau_range: Option<(f64, f64)>,
    pub clahe: ClaheConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub factor: usize,
    #[serde(default)]
    pub offset: (usize, usize),
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds global-prior training (initialization k uses `seed + k`).
    #[serde(default)]
    pub seed: u64,
    pub input: InputConfig,
    #[serde(default)]
    pub priors: PriorSwitches,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub local_prior: LocalPriorConfig,
    #[serde(default)]
    pub global_prior: GlobalPriorConfig,
    #[serde(default)]
    pub reconstruction: ReconstructionOverrides,
    #[serde(default)]
    pub render: RenderConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl PipelineConfig {
    pub fn new(factor: usize, input: InputConfig) -> Self {
        PipelineConfig {
            factor,
            offset: (0, 0),
            output_dir: default_output_dir(),
            seed: 0,
            input,
            priors: PriorSwitches::default(),
            fit: FitConfig::default(),
            local_prior: LocalPriorConfig::default(),
            global_prior: GlobalPriorConfig::default(),
            reconstruction: ReconstructionOverrides::default(),
            render: RenderConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Loads a config file; relative paths inside it are made absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = String::from_utf8(io::read_file(path)?)
            .map_err(|_| Error::InvalidConfig(format!("{} is not UTF-8", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let i = &mut self.input;
        for p in [
            &mut i.datacube,
            &mut i.lifetime,
            &mut i.lr_lifetime,
            &mut i.intensity,
            &mut i.ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::InvalidConfig("`factor` must be >= 1".into()));
        }
        let i = &self.input;
        let sources = [
            i.phantom.is_some(),
            i.datacube.is_some(),
            i.lifetime.is_some(),
            i.lr_lifetime.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::InvalidConfig(
                "`input` needs exactly one of `phantom`, `datacube`, `lifetime`, `lr_lifetime`"
                    .into(),
            ));
        }
        if (i.lifetime.is_some() || i.lr_lifetime.is_some()) && i.intensity.is_none() {
            return Err(Error::InvalidConfig(
                "`input.intensity` is required with a lifetime input".into(),
            ));
        }
        if i.phantom.is_some() && !(i.bins > 0 && i.bin_width > 0.0) {
            return Err(Error::InvalidConfig(
                "`input.bins` and `input.bin_width` must be positive".into(),
            ));
        }
        self.fit.validate()?;
        self.local_prior.validate()?;
        if self.priors.global {
            self.global_prior.validate()?;
        }
        self.reconstruction.resolve(self.factor).validate()?;
        self.render.clahe.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Recompute every stage even when cached outputs match.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    /// Hash of the stage's parameters and input artifacts.
    pub key: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub sisifus_version: String,
    pub config_sha256: String,
    pub factor: usize,
    pub artifacts: Vec<ArtifactEntry>,
    pub stages: Vec<StageEntry>,
}

impl Manifest {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&io::read_file(
            &dir.as_ref().join(MANIFEST),
        )?)?)
    }
}

/// Class accuracies (nearest of background 0 ns, blob and ridge lifetimes)
/// over structure pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub bilinear: f64,
    pub local_prior: Option<f64>,
    pub global_prior: Option<f64>,
    pub sisifus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub bilinear: Evaluation,
    pub local_prior: Option<Evaluation>,
    pub global_prior: Option<Evaluation>,
    pub sisifus: Evaluation,
    pub class_accuracy: Option<ClassAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub factor: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub final_primal_residual: Option<f64>,
    pub gp_self_consistency: Option<Vec<f64>>,
    pub gp_chosen_init: Option<usize>,
    /// Present when ground truth is available.
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: RunMetrics,
    /// Stages served from the cache.
    pub cached: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Inputs {
    intensity: Plane,
    lr: Plane,
    ground_truth: Option<Plane>,
    phantom: bool,
}

/// Runs every stage, writing artifacts and the manifest into the output
/// directory. `log` receives `(stage, message)` progress lines.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    log: &mut dyn FnMut(&str, &str),
) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let previous = if opts.force {
        None
    } else {
        Manifest::load(&dir).ok()
    };
    let mut run = Run {
        dir: dir.clone(),
        previous,
        stages: Vec::new(),
        artifacts: BTreeMap::new(),
        cached: Vec::new(),
    };
    let factor = cfg.factor;

    let inputs = load_inputs(cfg, &mut run, log)?;
    let map = SamplingMap::with_offset(inputs.intensity.shape(), (factor, factor), cfg.offset)
        .map_err(|e| e.in_stage("decimate"))?;
    let intensity_hash = sha256_hex(&encode_plane(&inputs.intensity)?);
    let lr_bytes = run.stage(
        "decimate",
        &(&cfg.input, &cfg.fit, factor, cfg.offset),
        &["lr.fbin"],
        || Ok(vec![encode_plane(&inputs.lr)?]),
    )?;
    let lr = decode_plane(&lr_bytes[0]).map_err(|e| e.in_stage("decimate"))?;

    let bl_bytes = run.stage(
        "baseline",
        &(run.hash("lr.fbin"), factor),
        &["bilinear.fbin"],
        || Ok(vec![encode_plane(&baseline(&lr, &map)?)?]),
    )?;
    let bilinear = decode_plane(&bl_bytes[0])?;

    let lp = if cfg.priors.local {
        let key = (run.hash("lr.fbin"), &intensity_hash, &cfg.local_prior);
        let b = run.stage("local_prior", &key, &["lp.fbin"], || {
            log("local_prior", "fitting windows");
            Ok(vec![encode_plane(&generate_local_prior(
                &lr,
                &inputs.intensity,
                &map,
                &cfg.local_prior,
            )?)?])
        })?;
        Some(decode_plane(&b[0])?)
    } else {
        None
    };

    let mut gp_scores = None;
    let gp = if cfg.priors.global {
        let key = (
            run.hash("lr.fbin"),
            &intensity_hash,
            &cfg.global_prior,
            cfg.seed,
        );
        let b = run.stage("global_prior", &key, &["gp.fbin", "gp_weight.fbin"], || {
            let n = cfg.global_prior.n_inits;
            let sel = select_median_prior_with(
                &lr,
                &inputs.intensity,
                &map,
                &cfg.global_prior,
                cfg.seed,
                |k, e| {
                    if e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == cfg.global_prior.epochs {
                        log(
                            "global_prior",
                            &format!(
                                "init {}/{n} epoch {} train MAE {:.4} ns",
                                k + 1,
                                e.epoch,
                                e.train_mae
                            ),
                        );
                    }
                },
            )?;
            let meta = serde_json::json!({ "scores": sel.scores, "chosen": sel.chosen });
            Ok(vec![
                encode_plane_with_meta(&sel.prior, Some(meta))?,
                encode_plane(&sel.weight)?,
            ])
        })?;
        let (prior, meta) = decode_plane_with_meta(&b[0])?;
        if let Some(m) = meta {
            gp_scores = Some((
                serde_json::from_value::<Vec<f64>>(m["scores"].clone())?,
                serde_json::from_value::<usize>(m["chosen"].clone())?,
            ));
        }
        Some((prior, decode_plane(&b[1])?))
    } else {
        None
    };

    let rcfg = cfg.reconstruction.resolve(factor);
    let key = (
        run.hash("lr.fbin"),
        run.hash("lp.fbin"),
        run.hash("gp.fbin"),
        run.hash("gp_weight.fbin"),
        rcfg,
    );
    let sr_bytes = run.stage("reconstruct", &key, &["sr.fbin", "history.csv"], || {
        log(
            "reconstruct",
            &format!("{} ADMM iterations", rcfg.admm_iters),
        );
        let r = reconstruct(
            &lr,
            lp.as_ref(),
            gp.as_ref().map(|g| &g.0),
            gp.as_ref().map(|g| &g.1),
            &map,
            &rcfg,
        )?;
        let mut csv = format!("# alpha={:e}\n", r.alpha);
        csv.push_str(&history_to_csv(&r.state.history));
        Ok(vec![encode_plane(&r.tau)?, csv.into_bytes()])
    })?;
    let sr = decode_plane(&sr_bytes[0])?;
    let history = String::from_utf8_lossy(&sr_bytes[1]).into_owned();
    let alpha = history
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# alpha="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);
    let final_primal_residual = history
        .lines()
        .last()
        .and_then(|l| l.split(',').nth(2))
        .and_then(|v| v.parse().ok());

    let gt_hash = inputs
        .ground_truth
        .as_ref()
        .map(|g| sha256_hex(&encode_plane(g).unwrap_or_default()));
    let key = (
        run.hash("sr.fbin"),
        run.hash("bilinear.fbin"),
        run.hash("lp.fbin"),
        run.hash("gp.fbin"),
        gt_hash,
    );
    let m_bytes = run.stage("evaluate", &key, &["metrics.json"], || {
        let comparison = match &inputs.ground_truth {
            Some(gt) => Some(compare(
                gt,
                &bilinear,
                lp.as_ref(),
                gp.as_ref().map(|g| &g.0),
                &sr,
                inputs.phantom,
            )?),
            None => None,
        };
        let metrics = RunMetrics {
            factor,
            alpha,
            beta: rcfg.beta,
            gamma: rcfg.gamma,
            final_primal_residual,
            gp_self_consistency: gp_scores.as_ref().map(|s| s.0.clone()),
            gp_chosen_init: gp_scores.as_ref().map(|s| s.1),
            comparison,
        };
        let mut text = serde_json::to_vec_pretty(&metrics)?;
        text.push(b'\n');
        Ok(vec![text])
    })?;
    let metrics: RunMetrics = serde_json::from_slice(&m_bytes[0])?;

    let range = cfg.render.tau_range.unwrap_or_else(|| default_range(&lr));
    run.stage(
        "render",
        &(run.hash("sr.fbin"), &intensity_hash, &cfg.render, range),
        &["composite_sr.png"],
        || {
            let rgb = composite(
                &sr,
                &inputs.intensity,
                cfg.render.colormap,
                range,
                &cfg.render.clahe,
            )?;
            Ok(vec![encode_png(&rgb)?])
        },
    )?;

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        sisifus_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash()?,
        factor,
        artifacts: run
            .artifacts
            .iter()
            .map(|(name, (sha256, bytes))| ArtifactEntry {
                name: name.clone(),
                sha256: sha256.clone(),
                bytes: *bytes,
            })
            .collect(),
        stages: run.stages,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    io::write_file(&dir.join(MANIFEST), &text)?;
    Ok(RunSummary {
        dir,
        manifest,
        metrics,
        cached: run.cached,
    })
}

fn encode_plane_with_meta(plane: &Plane, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let bytes = encode_plane(plane)?;
    let (mut header, payload) = io::decode_fbin(&bytes)?;
    header.meta = meta;
    io::encode_fbin(&header, payload)
}

fn decode_plane_with_meta(bytes: &[u8]) -> Result<(Plane, Option<serde_json::Value>)> {
    let (header, _) = io::decode_fbin(bytes)?;
    Ok((decode_plane(bytes)?, header.meta))
}

fn default_range(lr: &Plane) -> (f64, f64) {
    let finite = lr.values().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo, lo + 1.0)
    } else {
        (0.0, 1.0)
    }
}

/// Metrics of every estimate against ground truth. Class accuracy is only
/// reported for phantoms, whose labels are known.
fn compare(
    gt: &Plane,
    bilinear: &Plane,
    lp: Option<&Plane>,
    gp: Option<&Plane>,
    sr: &Plane,
    phantom: bool,
) -> Result<Comparison> {
    let g = gt.values();
    let eval = |p: &Plane| evaluate(g, &finite_or_zero(p.values()), None, None);
    let class_accuracy = if phantom {
        let mask = g.mapv(|v| v > 0.0);
        let labels = [0.0, BLOB_TAU, RIDGE_TAU];
        let acc = |p: &Plane| class_accuracy(&finite_or_zero(p.values()), g, &mask, &labels);
        Some(ClassAccuracy {
            bilinear: acc(bilinear)?,
            local_prior: lp.map(acc).transpose()?,
            global_prior: gp.map(acc).transpose()?,
            sisifus: acc(sr)?,
        })
    } else {
        None
    };
    Ok(Comparison {
        bilinear: eval(bilinear)?,
        local_prior: lp.map(eval).transpose()?,
        global_prior: gp.map(eval).transpose()?,
        sisifus: eval(sr)?,
        class_accuracy,
    })
}

fn finite_or_zero(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| if v.is_finite() { v } else { 0.0 })
}

fn load_inputs(
    cfg: &PipelineConfig,
    run: &mut Run,
    log: &mut dyn FnMut(&str, &str),
) -> Result<Inputs> {
    let i = &cfg.input;
    let fit = |cube: &crate::types::Datacube, log: &mut dyn FnMut(&str, &str)| -> Result<Plane> {
        log("fit", "fitting lifetimes");
        fit_lifetime(cube, &cfg.fit).map_err(|e| e.in_stage("fit"))
    };
    let lr_for = |hr_tau: Plane, shape: (usize, usize)| -> Result<Plane> {
        let map = SamplingMap::with_offset(shape, (cfg.factor, cfg.factor), cfg.offset)?;
        let lr = decimate_array(hr_tau.values(), &map)?;
        apply_unsampled(Plane::new(lr, Role::Lifetime, hr_tau.units())?, i.unsampled)
    };
    let read = |p: &PathBuf, role: Role| -> Result<Plane> {
        io::read_plane(p, PlaneFormat::from_path(p, role)).map_err(|e| e.in_stage("input"))
    };
    let ground_truth = match &i.ground_truth {
        Some(p) => Some(read(p, Role::Lifetime)?),
        None => None,
    };
    // the LR plane is cached, so fitting is skipped when nothing upstream changed
    let lr_cached = run.cached_bytes(
        "decimate",
        &(&cfg.input, &cfg.fit, cfg.factor, cfg.offset),
        "lr.fbin",
    );
    let cached_lr = || -> Option<Plane> { lr_cached.as_ref().and_then(|b| decode_plane(b).ok()) };
    if let Some(preset) = i.phantom {
        log("input", &format!("generating {preset} phantom"));
        let scene =
            preset_scene(preset, i.size, i.phantom_seed).map_err(|e| e.in_stage("input"))?;
        let (gt, ideal) = generate_scene(&scene).map_err(|e| e.in_stage("input"))?;
        let cube = generate_datacube(&gt, &ideal, i.bins, i.bin_width, i.phantom_seed)
            .map_err(|e| e.in_stage("input"))?;
        let intensity = integrate_time(&cube);
        let lr = match cached_lr() {
            Some(lr) => lr,
            None => {
                lr_for(fit(&cube, log)?, intensity.shape()).map_err(|e| e.in_stage("decimate"))?
            }
        };
        return Ok(Inputs {
            intensity,
            lr,
            ground_truth: Some(ground_truth.unwrap_or(gt)),
            phantom: true,
        });
    }
    if let Some(p) = &i.datacube {
        let cube = io::read_datacube(p).map_err(|e| e.in_stage("input"))?;
        let intensity = integrate_time(&cube);
        let lr = match cached_lr() {
            Some(lr) => lr,
            None => {
                lr_for(fit(&cube, log)?, intensity.shape()).map_err(|e| e.in_stage("decimate"))?
            }
        };
        return Ok(Inputs {
            intensity,
            lr,
            ground_truth,
            phantom: false,
        });
    }
    let intensity = read(i.intensity.as_ref().expect("validated"), Role::Intensity)?;
    let lr = if let Some(p) = &i.lifetime {
        lr_for(read(p, Role::Lifetime)?, intensity.shape()).map_err(|e| e.in_stage("decimate"))?
    } else {
        let lr = read(i.lr_lifetime.as_ref().expect("validated"), Role::Lifetime)?;
        let map = SamplingMap::with_offset(intensity.shape(), (cfg.factor, cfg.factor), cfg.offset)
            .map_err(|e| e.in_stage("decimate"))?;
        if lr.shape() != map.lr_shape() {
            let (a, b) = (map.lr_shape(), lr.shape());
            return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]).in_stage("decimate"));
        }
        apply_unsampled(lr, i.unsampled)?
    };
    Ok(Inputs {
        intensity,
        lr,
        ground_truth,
        phantom: false,
    })
}

fn apply_unsampled(lr: Plane, policy: Unsampled) -> Result<Plane> {
    match policy {
        Unsampled::Keep => Ok(lr),
        Unsampled::Zero => {
            let units = lr.units().to_string();
            Plane::new(
                lr.into_values().mapv(|v| if v.is_nan() { 0.0 } else { v }),
                Role::Lifetime,
                units,
            )
        }
    }
}

struct Run {
    dir: PathBuf,
    previous: Option<Manifest>,
    stages: Vec<StageEntry>,
    /// name -> (sha256, size)
    artifacts: BTreeMap<String, (String, usize)>,
    cached: Vec<String>,
}

impl Run {
    fn hash(&self, artifact: &str) -> Option<String> {
        self.artifacts.get(artifact).map(|a| a.0.clone())
    }

    fn key(name: &str, params: &impl Serialize) -> Result<String> {
        let text = serde_json::to_string(&(name, env!("CARGO_PKG_VERSION"), params))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Output bytes of `stage` if the previous run recorded the same key and
    /// every output on disk still matches its recorded hash.
    fn lookup(&self, stage: &str, key: &str, outputs: &[&str]) -> Option<Vec<Vec<u8>>> {
        let prev = self.previous.as_ref()?;
        let entry = prev.stages.iter().find(|s| s.name == stage)?;
        if entry.key != key || entry.outputs.len() != outputs.len() {
            return None;
        }
        outputs
            .iter()
            .map(|name| {
                let recorded = prev.artifact(name)?;
                let bytes = std::fs::read(self.dir.join(name)).ok()?;
                (sha256_hex(&bytes) == recorded.sha256).then_some(bytes)
            })
            .collect()
    }

    fn cached_bytes(&self, stage: &str, params: &impl Serialize, output: &str) -> Option<Vec<u8>> {
        let key = Self::key(stage, params).ok()?;
        self.lookup(stage, &key, &[output]).map(|mut v| v.remove(0))
    }

    fn stage(
        &mut self,
        name: &str,
        params: &impl Serialize,
        outputs: &[&str],
        compute: impl FnOnce() -> Result<Vec<Vec<u8>>>,
    ) -> Result<Vec<Vec<u8>>> {
        let key = Self::key(name, params).map_err(|e| e.in_stage(name))?;
        let bytes = match self.lookup(name, &key, outputs) {
            Some(b) => {
                self.cached.push(name.to_string());
                b
            }
            None => {
                let b = compute().map_err(|e| match e {
                    e @ Error::Stage { .. } => e,
                    e => e.in_stage(name),
                })?;
                for (out, data) in outputs.iter().zip(&b) {
                    io::write_file(&self.dir.join(out), data).map_err(|e| e.in_stage(name))?;
                }
                b
            }
        };
        for (out, data) in outputs.iter().zip(&bytes) {
            self.artifacts
                .insert(out.to_string(), (sha256_hex(data), data.len()));
        }
        self.stages.push(StageEntry {
            name: name.to_string(),
            key,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        });
        Ok(bytes)
    }
}

/// One row of the undersampling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: usize,
    pub comparison: Comparison,
}

/// Runs the pipeline once per factor in `<output_dir>/factor-<f>`.
pub fn sweep_undersampling(
    cfg: &PipelineConfig,
    factors: &[usize],
    opts: &RunOptions,
    log: &mut dyn FnMut(&str, &str),
) -> Result<Vec<SweepPoint>> {
    let mut rows = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut run_cfg = cfg.clone();
        run_cfg.factor = factor;
        run_cfg.output_dir = cfg.output_dir.join(format!("factor-{factor}"));
        log("sweep", &format!("factor {factor}"));
        let summary = run_pipeline(&run_cfg, opts, log)?;
        let comparison = summary.metrics.comparison.ok_or_else(|| {
            Error::InvalidConfig("the undersampling sweep needs ground truth".into())
                .in_stage("sweep")
        })?;
        rows.push(SweepPoint { factor, comparison });
    }
    Ok(rows)
}

/// `factor,psnr_db,ssim,mae,...` with one row per sweep point.
pub fn sweep_table_csv(rows: &[SweepPoint]) -> String {
    let mut out = String::from(
        "factor,psnr_db,ssim,mae,bilinear_psnr_db,bilinear_ssim,bilinear_mae,class_accuracy,lpips\n",
    );
    let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "inf".into());
    for r in rows {
        let c = &r.comparison;
        let acc = c
            .class_accuracy
            .map(|a| format!("{:.6}", a.sisifus))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.6},{:.6},{},not computed\n",
            r.factor,
            num(c.sisifus.psnr_db),
            c.sisifus.ssim,
            c.sisifus.mae,
            num(c.bilinear.psnr_db),
            c.bilinear.ssim,
            c.bilinear.mae,
            acc
        ));
    }
    out
}

/// Bilinear baseline of an LR plane, filling unsampled entries with the mean.
pub fn baseline(lr: &Plane, map: &SamplingMap) -> Result<Plane> {
    let values = if lr.has_unsampled() {
        initial_estimate(lr, map)?
    } else {
        bilinear_array(lr.values(), map)?
    };
    Plane::new(values, Role::Lifetime, lr.units())
}
