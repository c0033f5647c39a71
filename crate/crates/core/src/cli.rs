//! Experiment driver: TOML configuration, the binary checkpoint container,
//! `metrics.csv`, the output-directory lock, and the `bism` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tensor, Var};
use crate::bilevel::{
    self, BismProblem, InnerOptimizer, LowerDivergence, Method, MetricsRow, ProbeConfig, TrainConfig, TrainObserver,
    TrainState,
};
use crate::data::{self, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, GridSpec, PARTITION_LATENT_LIMIT};
use crate::models::{params_to_vars, DeepEblvm, EnergyModel, Grbm, GrbmParams, ModelKind};
use crate::objectives::{BiLevelSetup, IterationNoise, LatentMode, NoisePrior, ScoreObjective};
use crate::posteriors::{BernoulliPosterior, GaussianPosterior, Posterior, PosteriorKind};
use crate::rng::{self, Rng};
use crate::samplers::{self, LangevinSchedule};

pub const METRICS_HEADER: &str = "iter,wall_seconds,upper_loss,lower_loss,test_ll,test_fisher,posterior_fisher";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BISMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOCK_FILE: &str = ".bism.lock";

// Evaluation randomness lives far away from the training streams.
const EVAL_STREAM_BASE: u64 = 1 << 56;

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Grbm,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorChoice {
    Bernoulli,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveChoice {
    Sm,
    Ssm,
    Dsm,
    Mdsm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Bilevel,
    Marginal,
    Cd,
    Pcd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerChoice {
    Kl,
    Fisher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentChoice {
    Sample,
    Enumerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub posterior: PosteriorSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelChoice,
    pub d_v: usize,
    pub d_h: usize,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSection {
    /// Defaults to Bernoulli for the GRBM and Gaussian for the deep model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PosteriorChoice>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for PosteriorSection {
    fn default() -> Self {
        PosteriorSection {
            kind: None,
            temperature: default_temperature(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default = "default_objective")]
    pub kind: ObjectiveChoice,
    /// DSM noise level.
    #[serde(default = "default_dsm_sigma")]
    pub sigma: f64,
    /// SSM slicing directions per point.
    #[serde(default = "one")]
    pub directions: usize,
    /// MDSM noise range, geometric levels, and anchor.
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            kind: default_objective(),
            sigma: default_dsm_sigma(),
            directions: 1,
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
            levels: default_levels(),
            sigma0: default_sigma0(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default = "default_method")]
    pub method: MethodChoice,
    /// Defaults to KL for discrete posteriors and Fisher for Gaussian ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<LowerChoice>,
    #[serde(default = "default_latent")]
    pub latent_mode: LatentChoice,
    #[serde(rename = "K", default = "five")]
    pub k: usize,
    #[serde(rename = "N", default = "five")]
    pub n: usize,
    #[serde(default = "default_lr")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll_alpha: Option<f64>,
    #[serde(default = "default_lr")]
    pub beta: f64,
    #[serde(default)]
    pub lr_decay: bool,
    #[serde(default = "default_optimizer")]
    pub inner_optimizer: OptimizerChoice,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default)]
    pub seed: u64,
    /// Gibbs sweeps for CD and PCD.
    #[serde(default = "one")]
    pub cd_k: usize,
    #[serde(default = "default_node_cap")]
    pub node_cap: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            method: default_method(),
            lower: None,
            latent_mode: default_latent(),
            k: 5,
            n: 5,
            alpha: default_lr(),
            unroll_alpha: None,
            beta: default_lr(),
            lr_decay: false,
            inner_optimizer: default_optimizer(),
            batch_size: default_batch(),
            max_iters: default_max_iters(),
            seed: 0,
            cd_k: 1,
            node_cap: default_node_cap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Evaluation uses at most this many leading rows of the test set.
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    #[serde(default = "default_draws")]
    pub posterior_draws: usize,
    #[serde(default)]
    pub grid: GridSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            eval_every: default_eval_every(),
            test_points: default_test_points(),
            posterior_draws: default_draws(),
            grid: GridSection::default(),
        }
    }
}

/// Defaults cover the centered checkerboard with cells aligned to the board.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            xmin: -2.0,
            xmax: 2.0,
            ymin: -2.0,
            ymax: 2.0,
            nx: 100,
            ny: 100,
        }
    }
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            xmin: self.xmin,
            xmax: self.xmax,
            ymin: self.ymin,
            ymax: self.ymax,
            nx: self.nx,
            ny: self.ny,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    /// Held-out data for evaluation; the training data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_temperature() -> f64 {
    crate::posteriors::DEFAULT_TEMPERATURE
}
fn default_objective() -> ObjectiveChoice {
    ObjectiveChoice::Dsm
}
fn default_dsm_sigma() -> f64 {
    0.05
}
fn default_sigma_min() -> f64 {
    0.1
}
fn default_sigma_max() -> f64 {
    3.0
}
fn default_levels() -> usize {
    10
}
fn default_sigma0() -> f64 {
    0.1
}
fn default_method() -> MethodChoice {
    MethodChoice::Bilevel
}
fn default_latent() -> LatentChoice {
    LatentChoice::Sample
}
fn default_optimizer() -> OptimizerChoice {
    OptimizerChoice::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    100
}
fn default_max_iters() -> u64 {
    1000
}
fn default_node_cap() -> usize {
    bilevel::DEFAULT_NODE_CAP
}
fn default_eval_every() -> u64 {
    100
}
fn default_test_points() -> usize {
    1000
}
fn default_draws() -> usize {
    eval::POSTERIOR_FISHER_DRAWS
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn one() -> usize {
    1
}
fn five() -> usize {
    5
}

/// 1-based `(line, column)` of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths stay relative.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            Error::Parse {
                line,
                msg: format!("column {col}: {}", e.message()),
            }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads, resolves paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.paths.data = join(&self.paths.data);
        self.paths.test = self.paths.test.as_deref().map(join);
        self.paths.out_dir = join(&self.paths.out_dir);
    }

    pub fn posterior_kind(&self) -> PosteriorChoice {
        self.posterior.kind.unwrap_or(match self.model.kind {
            ModelChoice::Grbm => PosteriorChoice::Bernoulli,
            ModelChoice::Deep => PosteriorChoice::Gaussian,
        })
    }

    pub fn lower(&self) -> LowerChoice {
        self.trainer.lower.unwrap_or(match self.posterior_kind() {
            PosteriorChoice::Bernoulli => LowerChoice::Kl,
            PosteriorChoice::Gaussian => LowerChoice::Fisher,
        })
    }

    /// Cross-field checks plus existence of the input files.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.model.d_v == 0 || self.model.d_h == 0 {
            return bad("model.d_v", "dimensions must be positive".into());
        }
        let post = self.posterior_kind();
        if self.model.kind == ModelChoice::Grbm && post != PosteriorChoice::Bernoulli {
            return bad("posterior.kind", "the GRBM has binary latents and needs a bernoulli posterior".into());
        }
        if self.model.kind == ModelChoice::Deep && post != PosteriorChoice::Gaussian {
            return bad("posterior.kind", "the deep model has continuous latents and needs a gaussian posterior".into());
        }
        if self.lower() == LowerChoice::Fisher && post != PosteriorChoice::Gaussian {
            return bad("trainer.lower", "the Fisher lower loss needs a continuous (gaussian) posterior".into());
        }
        if self.trainer.latent_mode == LatentChoice::Enumerate && post != PosteriorChoice::Bernoulli {
            return bad("trainer.latent_mode", "enumeration needs binary latents".into());
        }
        if self.model.kind == ModelChoice::Deep && self.trainer.method != MethodChoice::Bilevel {
            return bad("trainer.method", "the deep model trains with the bilevel method only".into());
        }
        if !(self.posterior.temperature > 0.0 && self.posterior.temperature.is_finite()) {
            return bad("posterior.temperature", format!("must be positive, got {}", self.posterior.temperature));
        }
        if self.eval.eval_every == 0 {
            return bad("eval.eval_every", "must be at least 1".into());
        }
        if self.eval.test_points == 0 || self.eval.posterior_draws == 0 {
            return bad("eval.test_points", "evaluation needs at least one point and one draw".into());
        }
        self.eval
            .grid
            .spec()
            .validate()
            .or_else(|e| bad("eval.grid", e.to_string()))?;
        self.objective().map(drop).or_else(|e| bad("objective", e.to_string()))?;
        self.train_config()?.validate().or_else(|e| bad("trainer", e.to_string()))?;
        for (field, p) in [("paths.data", Some(&self.paths.data)), ("paths.test", self.paths.test.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(field, format!("file not found: {}", p.display()));
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<ScoreObjective> {
        let o = &self.objective;
        let obj = match o.kind {
            ObjectiveChoice::Sm => ScoreObjective::Sm,
            ObjectiveChoice::Ssm => ScoreObjective::Ssm {
                directions: o.directions,
            },
            ObjectiveChoice::Dsm => ScoreObjective::Dsm { sigma: o.sigma },
            ObjectiveChoice::Mdsm => ScoreObjective::Mdsm {
                prior: NoisePrior::geometric(o.sigma_min, o.sigma_max, o.levels)?,
                sigma0: o.sigma0,
            },
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.trainer;
        Ok(TrainConfig {
            method: match t.method {
                MethodChoice::Bilevel => Method::BiLevel,
                MethodChoice::Marginal => Method::Marginal,
                MethodChoice::Cd => Method::Cd {
                    k: t.cd_k,
                    persistent: false,
                },
                MethodChoice::Pcd => Method::Cd {
                    k: t.cd_k,
                    persistent: true,
                },
            },
            objective: self.objective()?,
            lower: match self.lower() {
                LowerChoice::Kl => LowerDivergence::Kl,
                LowerChoice::Fisher => LowerDivergence::Fisher,
            },
            latent_mode: match t.latent_mode {
                LatentChoice::Sample => LatentMode::Sample,
                LatentChoice::Enumerate => LatentMode::Enumerate,
            },
            k: t.k,
            n: t.n,
            alpha: t.alpha,
            unroll_alpha: t.unroll_alpha,
            beta: t.beta,
            lr_decay: t.lr_decay,
            inner_optimizer: match t.inner_optimizer {
                OptimizerChoice::Adam => InnerOptimizer::Adam,
                OptimizerChoice::Sgd => InnerOptimizer::Sgd,
            },
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            seed: t.seed,
            eval_every: self.eval.eval_every,
            node_cap: t.node_cap,
        })
    }

    /// `--seed` replaces both the initialization and the training seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.init_seed = seed;
        self.trainer.seed = seed;
    }
}

// ---------------------------------------------------------------- models

/// Model and posterior rebuilt from their kind tags and dimensions.
pub struct Architecture {
    pub model: Box<dyn EnergyModel>,
    pub posterior: Option<Box<dyn Posterior>>,
}

impl Architecture {
    pub fn new(
        model: ModelKind,
        d_v: usize,
        d_h: usize,
        posterior: Option<PosteriorKind>,
        temperature: f64,
    ) -> Result<Self> {
        let model: Box<dyn EnergyModel> = match model {
            ModelKind::Grbm => Box::new(Grbm::new(d_v, d_h)),
            ModelKind::Deep => Box::new(DeepEblvm::new(d_v, d_h)),
        };
        let posterior: Option<Box<dyn Posterior>> = match posterior {
            None => None,
            Some(PosteriorKind::Bernoulli) => Some(Box::new(BernoulliPosterior::new(d_v, d_h, temperature)?)),
            Some(PosteriorKind::Gaussian) => Some(Box::new(GaussianPosterior::new(d_v, d_h))),
        };
        Ok(Architecture { model, posterior })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let model = match cfg.model.kind {
            ModelChoice::Grbm => ModelKind::Grbm,
            ModelChoice::Deep => ModelKind::Deep,
        };
        let posterior = match (cfg.trainer.method, cfg.posterior_kind()) {
            (MethodChoice::Bilevel, PosteriorChoice::Bernoulli) => Some(PosteriorKind::Bernoulli),
            (MethodChoice::Bilevel, PosteriorChoice::Gaussian) => Some(PosteriorKind::Gaussian),
            _ => None,
        };
        Self::new(model, cfg.model.d_v, cfg.model.d_h, posterior, cfg.posterior.temperature)
    }

    pub fn posterior(&self) -> Option<&dyn Posterior> {
        self.posterior.as_deref()
    }
}

// ---------------------------------------------------------------- checkpoints

/// Parameters of a model and its posterior at one iteration.
///
/// Layout (little-endian): magic, `u32` version, model tag, posterior tag
/// (`none` without a posterior), `u64 d_v`, `u64 d_h`, `f64` temperature,
/// `u64` iteration, `u32` entry count, then per entry its name, `u32` rank,
/// `u64` dims and `f64` values. Strings are `u32` length plus UTF-8.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub posterior: Option<PosteriorKind>,
    pub d_v: usize,
    pub d_h: usize,
    pub temperature: f64,
    pub iter: u64,
    /// `theta.<name>` entries first, then `phi.<name>`.
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(arch: &Architecture, temperature: f64, state: &TrainState) -> Self {
        let mut entries: Vec<(String, Tensor)> = arch
            .model
            .param_names()
            .into_iter()
            .zip(&state.theta)
            .map(|(n, t)| (format!("theta.{n}"), t.clone()))
            .collect();
        if let Some(p) = arch.posterior() {
            entries.extend(p.param_names().into_iter().zip(&state.phi).map(|(n, t)| (format!("phi.{n}"), t.clone())));
        }
        Checkpoint {
            model: arch.model.kind(),
            posterior: arch.posterior().map(|p| p.kind()),
            d_v: arch.model.visible_dim(),
            d_h: arch.model.latent_dim(),
            temperature,
            iter: state.iter,
            entries,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.model, self.d_v, self.d_h, self.posterior, self.temperature)
    }

    fn group(&self, prefix: &str) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn theta(&self) -> Vec<Tensor> {
        self.group("theta.")
    }

    pub fn phi(&self) -> Vec<Tensor> {
        self.group("phi.")
    }

    /// Rebuilds the architecture and checks every entry's name and shape.
    pub fn restore(&self) -> Result<(Architecture, Vec<Tensor>, Vec<Tensor>)> {
        let arch = self.architecture()?;
        let mut expected: Vec<String> = arch.model.param_names().iter().map(|n| format!("theta.{n}")).collect();
        if let Some(p) = arch.posterior() {
            expected.extend(p.param_names().iter().map(|n| format!("phi.{n}")));
        }
        let names: Vec<&String> = self.entries.iter().map(|(n, _)| n).collect();
        if names != expected.iter().collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "checkpoint entries {names:?} do not match the {} layout",
                self.model.tag()
            )));
        }
        let (theta, phi) = (self.theta(), self.phi());
        arch.model.check_params(&theta)?;
        if let Some(p) = arch.posterior() {
            p.check_params(&phi)?;
        }
        Ok((arch, theta, phi))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, self.model.tag());
        put_str(&mut out, self.posterior.map_or("none", |p| p.tag()));
        out.extend((self.d_v as u64).to_le_bytes());
        out.extend((self.d_h as u64).to_le_bytes());
        out.extend(self.temperature.to_le_bytes());
        out.extend(self.iter.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Contract("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let model = match r.string()?.as_str() {
            "grbm" => ModelKind::Grbm,
            "deep" => ModelKind::Deep,
            other => return Err(Error::Contract(format!("unknown model tag `{other}`"))),
        };
        let posterior = match r.string()?.as_str() {
            "none" => None,
            "bernoulli" => Some(PosteriorKind::Bernoulli),
            "gaussian" => Some(PosteriorKind::Gaussian),
            other => return Err(Error::Contract(format!("unknown posterior tag `{other}`"))),
        };
        let d_v = r.u64()? as usize;
        let d_h = r.u64()? as usize;
        let temperature = r.f64()?;
        let iter = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Contract(format!("checkpoint entry `{name}` is truncated")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Contract(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Checkpoint {
            model,
            posterior,
            d_v,
            d_h,
            temperature,
            iter,
            entries,
        })
    }

    /// Writes through a temporary file and a rename, so a crash never leaves
    /// a half-written checkpoint in place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::Contract(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Contract("checkpoint string is not UTF-8".into()))
    }
}

// ---------------------------------------------------------------- output files

/// Exclusive claim on an output directory; released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Resource(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Full-precision decimal: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_line(row: &MetricsRow) -> String {
    [
        row.iter.to_string(),
        fmt_f64(row.wall_seconds),
        fmt_f64(row.upper_loss),
        fmt_opt(row.lower_loss),
        fmt_opt(row.test_ll),
        fmt_opt(row.test_fisher),
        fmt_opt(row.posterior_fisher),
    ]
    .join(",")
}

// ---------------------------------------------------------------- evaluation

/// Metrics of one parameter setting on a test set.
pub struct Evaluator<'a> {
    pub arch: &'a Architecture,
    pub test: Tensor,
    pub draws: usize,
    pub seed: u64,
}

impl Evaluator<'_> {
    pub fn evaluate(&self, theta: &[Tensor], phi: &[Tensor], iter: u64) -> Result<bilevel::EvalMetrics> {
        let mut rng = rng::stream(self.seed, EVAL_STREAM_BASE + iter);
        let mut m = bilevel::EvalMetrics::default();
        if self.arch.model.as_grbm().is_some() {
            let params = GrbmParams::from_tensors(theta)?;
            if params.model().d_h <= PARTITION_LATENT_LIMIT {
                m.test_ll = Some(eval::test_log_likelihood(&self.test, &params)?);
            }
            m.test_fisher = Some(eval::grbm_test_fisher(&params, &self.test, &mut rng)?);
        } else if let Some(p) = self.arch.posterior().filter(|p| !p.is_discrete()) {
            m.posterior_fisher = Some(eval::posterior_fisher_eval(
                self.arch.model.as_ref(),
                theta,
                p,
                phi,
                &self.test,
                self.draws,
                &mut rng,
            )?);
        }
        Ok(m)
    }
}

struct CliObserver<'a> {
    evaluator: Evaluator<'a>,
    temperature: f64,
    metrics: fs::File,
    checkpoint: PathBuf,
}

impl TrainObserver for CliObserver<'_> {
    fn evaluate(&mut self, state: &TrainState) -> Result<bilevel::EvalMetrics> {
        self.evaluator.evaluate(&state.theta, &state.phi, state.iter)
    }

    fn record(&mut self, row: &MetricsRow, state: &TrainState) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_line(row))?;
        self.metrics.flush()?;
        Checkpoint::from_state(self.evaluator.arch, self.temperature, state).save(&self.checkpoint)
    }
}

fn load_points(path: &Path, d_v: usize, what: &str) -> Result<Tensor> {
    let ds = Dataset::load(path)?;
    if ds.dim() != d_v {
        return Err(Error::Config(format!(
            "{what} {} has {} columns but the model has d_v = {d_v}",
            path.display(),
            ds.dim()
        )));
    }
    Ok(ds.points)
}

fn leading_rows(x: Tensor, n: usize) -> Tensor {
    if x.rows() > n {
        x.slice(0, 0, n)
    } else {
        x
    }
}

// ---------------------------------------------------------------- commands

/// Trains as configured into `out_dir`; returns the number of metrics rows.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out_dir)?;
    let train_cfg = cfg.train_config()?;
    let arch = Architecture::from_config(cfg)?;
    let data = load_points(&cfg.paths.data, cfg.model.d_v, "training data")?;
    let test = match &cfg.paths.test {
        Some(p) => load_points(p, cfg.model.d_v, "test data")?,
        None => data.clone(),
    };
    cfg.save(&out_dir.join("config.toml"))?;

    let mut init_rng = rng::seeded(cfg.model.init_seed);
    let theta = arch.model.init(&mut init_rng);
    let phi = arch.posterior().map(|p| p.init(&mut init_rng)).unwrap_or_default();
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let mut metrics = fs::File::create(out_dir.join(METRICS_FILE))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut observer = CliObserver {
        evaluator: Evaluator {
            arch: &arch,
            test: leading_rows(test, cfg.eval.test_points),
            draws: cfg.eval.posterior_draws,
            seed: cfg.trainer.seed,
        },
        temperature: cfg.posterior.temperature,
        metrics,
        checkpoint: checkpoint.clone(),
    };
    let outcome = bilevel::train(
        arch.model.as_ref(),
        arch.posterior(),
        &data,
        TrainState::new(theta, phi),
        &train_cfg,
        &mut observer,
    );
    match outcome {
        Ok(out) => {
            Checkpoint::from_state(&arch, cfg.posterior.temperature, &out.state).save(&checkpoint)?;
            Ok(out.rows.len())
        }
        Err(failure) => {
            // The failing step never reached the state, so this is the last good one.
            Checkpoint::from_state(&arch, cfg.posterior.temperature, &failure.last_valid).save(&checkpoint)?;
            Err(failure.error)
        }
    }
}

/// Metrics of a checkpoint on `data` as `name value` lines; writes
/// `grid.txt` into `out_dir` for a 2-D GRBM.
pub fn cmd_eval(
    ckpt: &Checkpoint,
    data: &Path,
    want_test_ll: bool,
    grid: &GridSection,
    draws: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<String> {
    let (arch, theta, phi) = ckpt.restore()?;
    if want_test_ll && arch.model.as_grbm().is_none() {
        return Err(Error::Usage(format!(
            "--test-ll needs a tractable partition function; a {} checkpoint has none",
            ckpt.model.tag()
        )));
    }
    let test = load_points(data, ckpt.d_v, "evaluation data")?;
    let evaluator = Evaluator {
        arch: &arch,
        test,
        draws,
        seed,
    };
    let m = evaluator.evaluate(&theta, &phi, ckpt.iter)?;
    let mut report = format!("iter {}\n", ckpt.iter);
    for (name, v) in [("test_ll", m.test_ll), ("test_fisher", m.test_fisher), ("posterior_fisher", m.posterior_fisher)] {
        if let Some(v) = v {
            let _ = writeln!(report, "{name} {}", fmt_f64(v));
        }
    }
    fs::create_dir_all(out_dir)?;
    if ckpt.d_v == 2 && arch.model.as_grbm().is_some() {
        let params = GrbmParams::from_tensors(&theta)?;
        eval::density_grid(&params, grid.spec())?.save(&out_dir.join("grid.txt"))?;
    }
    fs::write(out_dir.join("eval.txt"), &report)?;
    Ok(report)
}

/// Gibbs sampling for a GRBM checkpoint; for the deep model, annealed
/// Langevin on `v ↦ -E(v, h)` with `h` the posterior mean of a random
/// training point.
pub struct SampleOptions<'a> {
    pub count: usize,
    pub sweeps: usize,
    pub steps_per_level: usize,
    pub data: Option<&'a Path>,
    pub seed: u64,
}

/// Temperatures `[1, 100]` with step length 0.02.
pub fn default_langevin_schedule(steps_per_level: usize) -> LangevinSchedule {
    LangevinSchedule {
        step: 0.02,
        n_steps: steps_per_level,
        t_lo: 1.0,
        t_hi: 100.0,
        levels: 10,
    }
}

pub fn cmd_sample(ckpt: &Checkpoint, opts: &SampleOptions<'_>) -> Result<Dataset> {
    if opts.count == 0 {
        return Err(Error::Usage("--count must be positive".into()));
    }
    let (arch, theta, phi) = ckpt.restore()?;
    let mut rng = rng::seeded(opts.seed);
    let v0 = rng::normal_tensor(&[opts.count, ckpt.d_v], &mut rng);
    let points = if arch.model.as_grbm().is_some() {
        let params = GrbmParams::from_tensors(&theta)?;
        samplers::gibbs_grbm(&params, &v0, opts.sweeps, &mut rng)?.0
    } else {
        let posterior = arch
            .posterior()
            .ok_or_else(|| Error::Usage("deep sampling needs a checkpoint with a posterior".into()))?;
        let path = opts
            .data
            .ok_or_else(|| Error::Usage("deep sampling needs --data to infer latents".into()))?;
        let data = load_points(path, ckpt.d_v, "data")?;
        let picks: Vec<usize> = (0..opts.count).map(|_| rng::below(data.rows(), &mut rng)).collect();
        let h = posterior_mean(posterior, &phi, &data.select_rows(&picks))?;
        let theta_v = params_to_vars(&theta, false);
        let h_var = Var::constant(h);
        let model = arch.model.as_ref();
        let score = |x: &Tensor| -> Result<Tensor> {
            let v = Var::leaf(x.clone(), true);
            let e = model.energy(&theta_v, &v, &h_var).sum();
            Ok(grad(&e, &[v], false)?[0].value().scale(-1.0))
        };
        samplers::annealed_langevin(&score, &v0, &default_langevin_schedule(opts.steps_per_level), &mut rng)?
    };
    Dataset::new(points, "samples", &format!("sample-{}", ckpt.model.tag()), opts.seed)
}

/// `E_q[h | v]`: the reparameterized draw at zero base noise.
fn posterior_mean(posterior: &dyn Posterior, phi: &[Tensor], v: &Tensor) -> Result<Tensor> {
    if posterior.is_discrete() {
        return Err(Error::Unsupported("posterior mean of a discrete posterior".into()));
    }
    let phi = params_to_vars(phi, false);
    let zero = Tensor::zeros(&[v.rows(), posterior.latent_dim()]);
    Ok(posterior.sample(&phi, &Var::constant(v.clone()), &zero).value().clone())
}

/// Gradient-bias rows `(N, bias)` sorted by `N` on the first minibatch.
pub fn cmd_probe_bias(ckpt: &Checkpoint, cfg: &ExperimentConfig, n_list: &[usize], data: &Path) -> Result<String> {
    if ckpt.model != ModelKind::Grbm {
        return Err(Error::Usage("probe-bias needs a GRBM checkpoint".into()));
    }
    let (arch, theta, phi) = ckpt.restore()?;
    let posterior = arch
        .posterior()
        .ok_or_else(|| Error::Usage("probe-bias needs a checkpoint trained with a posterior".into()))?;
    let points = load_points(data, ckpt.d_v, "data")?;
    let tc = cfg.train_config()?;
    let batch = BatchIterator::new(&points, tc.batch_size.min(points.rows()), tc.seed)?.next_batch();
    let mut rng = rng::stream(tc.seed, 1);
    let noise = IterationNoise::draw(&tc.objective, posterior, &batch, &mut rng);
    let problem = BismProblem {
        setup: BiLevelSetup {
            model: arch.model.as_ref(),
            posterior,
            objective: &tc.objective,
            mode: tc.latent_mode,
        },
        divergence: tc.lower,
        batch: &batch,
        noise: &noise,
    };
    let mut n_values = n_list.to_vec();
    n_values.sort_unstable();
    n_values.dedup();
    let probe = ProbeConfig {
        n_values,
        k: tc.k,
        alpha: tc.alpha,
        optimizer: tc.inner_optimizer,
        unroll_alpha: tc.unroll_step(),
        star_alpha: tc.unroll_step(),
        node_cap: tc.node_cap,
        ..ProbeConfig::default()
    };
    let report = bilevel::gradient_bias_probe(&problem, &theta, &phi, &probe)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    let mut csv = String::from("N,bias\n");
    for (n, b) in &report.rows {
        let _ = writeln!(csv, "{n},{}", fmt_f64(*b));
    }
    Ok(csv)
}

/// Random GRBM used as a data generator: `σ = 0.5`, `W ~ N(0, 1)`, `b, c ~ N(0, 0.25)`.
pub fn generator_grbm(d_v: usize, d_h: usize, rng: &mut Rng) -> Result<GrbmParams> {
    let w = rng::normal_tensor(&[d_v, d_h], rng);
    let b = rng::normal_tensor(&[d_v], rng).scale(0.5);
    let c = rng::normal_tensor(&[d_h], rng).scale(0.5);
    GrbmParams::new(0.5, w, b, c)
}

/// `checkerboard` (2-D), `grbm` (exact samples of [`generator_grbm`]) or
/// `mixture` (four equal components, means `N(0, 4 I)`, std 0.5).
pub fn cmd_gen_data(kind: &str, n: usize, dim: usize, latent: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("--n must be positive".into()));
    }
    let mut rng = rng::seeded(seed);
    match kind {
        "checkerboard" => data::checkerboard_dataset(n, seed),
        "grbm" => {
            let params = generator_grbm(dim, latent, &mut rng)?;
            let points = data::grbm_synthetic(&params, n, &mut rng::stream(seed, 1))?;
            Dataset::new(points, "grbm", "grbm", seed)
        }
        "mixture" => {
            let means = rng::normal_tensor(&[4, dim], &mut rng).scale(2.0);
            let points = data::gaussian_mixture(&means, &[0.25; 4], 0.5, n, &mut rng)?;
            Dataset::new(points, "mixture", "mixture", seed)
        }
        other => Err(Error::Usage(format!(
            "unknown generator kind `{other}` (expected checkerboard, grbm or mixture)"
        ))),
    }
}

// ---------------------------------------------------------------- argv

#[derive(Debug, Parser)]
#[command(name = "bism", about = "Bi-level score matching for energy-based latent variable models")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train as configured; writes metrics.csv and checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to score.
        #[arg(long)]
        data: PathBuf,
        /// Require the exact test log-likelihood.
        #[arg(long)]
        test_ll: bool,
    },
    /// Draw samples from a checkpoint into a dataset file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Gibbs sweeps (GRBM).
        #[arg(long, default_value_t = 1000)]
        sweeps: usize,
        /// Langevin steps per temperature (deep model).
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Training data for latent inference (deep model).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Surrogate gradient bias against the implicit reference for each N.
    ProbeBias {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated unroll lengths.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 1, 5, 10, 20])]
        n_list: Vec<usize>,
        /// Defaults to the configured training data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    GenData {
        /// checkerboard, grbm or mixture.
        #[arg(long)]
        kind: String,
        /// Number of points.
        #[arg(long)]
        n: usize,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Visible dimension (grbm, mixture).
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Latent dimension (grbm).
        #[arg(long, default_value_t = 4)]
        latent: usize,
    },
}

impl Cli {
    fn load_config(&self) -> Result<Option<ExperimentConfig>> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.override_seed(s);
        }
        if let Some(d) = &self.out_dir {
            cfg.paths.out_dir = d.clone();
        }
        Ok(Some(cfg))
    }

    fn seed(&self, cfg: Option<&ExperimentConfig>) -> u64 {
        self.seed.or(cfg.map(|c| c.trainer.seed)).unwrap_or(0)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>, fallback: &Path) -> PathBuf {
        self.out_dir
            .clone()
            .or(cfg.map(|c| c.paths.out_dir.clone()))
            .unwrap_or_else(|| fallback.to_path_buf())
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save(out)
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.load_config()?;
    match &cli.command {
        Command::Train => {
            let cfg = cfg.ok_or_else(|| Error::Usage("train needs --config".into()))?;
            let rows = cmd_train(&cfg, &cfg.paths.out_dir)?;
            println!("wrote {rows} metrics rows to {}", cfg.paths.out_dir.join(METRICS_FILE).display());
        }
        Command::Eval {
            checkpoint,
            data,
            test_ll,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let out = cli.out_dir(cfg.as_ref(), &parent_dir(checkpoint));
            let _lock = OutputLock::acquire(&out)?;
            let (grid, draws) = cfg
                .as_ref()
                .map_or((GridSection::default(), default_draws()), |c| (c.eval.grid.clone(), c.eval.posterior_draws));
            print!("{}", cmd_eval(&ckpt, data, *test_ll, &grid, draws, cli.seed(cfg.as_ref()), &out)?);
        }
        Command::Sample {
            checkpoint,
            count,
            out,
            sweeps,
            steps,
            data,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let data = data.clone().or(cfg.as_ref().map(|c| c.paths.data.clone()));
            let ds = cmd_sample(
                &ckpt,
                &SampleOptions {
                    count: *count,
                    sweeps: *sweeps,
                    steps_per_level: *steps,
                    data: data.as_deref(),
                    seed: cli.seed(cfg.as_ref()),
                },
            )?;
            write_dataset(&ds, out)?;
        }
        Command::ProbeBias {
            checkpoint,
            n_list,
            data,
        } => {
            let cfg = cfg.ok_or_else(|| Error::Usage("probe-bias needs --config".into()))?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let data = data.clone().unwrap_or_else(|| cfg.paths.data.clone());
            let out = cli.out_dir(Some(&cfg), &cfg.paths.out_dir);
            let _lock = OutputLock::acquire(&out)?;
            let csv = cmd_probe_bias(&ckpt, &cfg, n_list, &data)?;
            fs::write(out.join("bias.csv"), &csv)?;
            print!("{csv}");
        }
        Command::GenData {
            kind,
            n,
            out,
            dim,
            latent,
        } => {
            let ds = cmd_gen_data(kind, *n, *dim, *latent, cli.seed(cfg.as_ref()))?;
            write_dataset(&ds, out)?;
        }
    }
    Ok(())
}

/// Usage errors exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}
