//! Run configurations. Every key of a config struct has a flag of the same
//! name (kebab-cased on the command line). Defaults come first, then the
//! `--config` file, then flags; `--config-priority` swaps the last two.

use std::path::{Path, PathBuf};

use clap::Args;
use gcrf_core::edits::{PropagateConfig, TEST_BETA};
use gcrf_core::eval::RevealProtocol;
use gcrf_core::gradcheck::GradcheckConfig;
use gcrf_core::pipeline::{MaskSchedule, ModelConfig, Stage2Config, TrainConfig};
use gcrf_core::edits::PatchMode;
use gcrf_core::pipeline::{SampleMode, SampleOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigSource {
    /// JSON file with any subset of this command's keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Let the config file override flags instead of the reverse.
    #[arg(long)]
    pub config_priority: bool,
}

/// Layers defaults, file and flags, then deserializes strictly so unknown
/// keys and ill-typed values are rejected.
pub fn resolve<C, F>(source: &ConfigSource, flags: &F) -> CliResult<C>
where
    C: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = to_object(&C::default())?;
    let flags = to_object(flags)?;
    let file = match &source.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
                Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    let (first, second) = if source.config_priority { (flags, file) } else { (file, flags) };
    merged.extend(first);
    merged.extend(second);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

fn to_object(v: &impl Serialize) -> CliResult<Map<String, Value>> {
    match serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Object(map) => Ok(map),
        _ => unreachable!("configs and flag sets are structs"),
    }
}

/// Pretty JSON with a trailing newline; the form written next to outputs.
pub fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("configs always serialize");
    s.push('\n');
    s
}

/// `out.png` → `out.<suffix>`, for files written next to an output.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn positive(v: f64, name: &str) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing required key `{name}`")))
}

// colorize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizeConfig {
    pub input: Option<PathBuf>,
    pub edits: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Defaults to `<output>.report.json`.
    pub report: Option<PathBuf>,
    /// Overrides the edits file's `beta` when set.
    pub beta: Option<f64>,
    pub grid_width: usize,
    pub grid_height: usize,
    pub temperature: f64,
    pub normalize_columns: bool,
}

impl Default for ColorizeConfig {
    fn default() -> Self {
        let p = PropagateConfig::default();
        Self {
            input: None,
            edits: None,
            output: None,
            report: None,
            beta: None,
            grid_width: p.grid_width,
            grid_height: p.grid_height,
            temperature: p.temperature,
            normalize_columns: p.normalize_columns,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Args)]
pub struct ColorizeFlags {
    /// Gray (or color) input image, PNG or PPM.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Edits file: {"beta": 5.0, "edits": [{"row", "col", "a", "b"}]}.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edits: Option<PathBuf>,
    #[arg(long, short)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Constraint strength; the edits file's value (default 5) when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_columns: Option<bool>,
}

impl ColorizeConfig {
    pub fn validate(&self) -> CliResult<(&PathBuf, &PathBuf, &PathBuf)> {
        let input = required(&self.input, "input")?;
        let edits = required(&self.edits, "edits")?;
        let output = required(&self.output, "output")?;
        if let Some(b) = self.beta {
            positive(b, "beta")?;
        }
        positive(self.temperature, "temperature")?;
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(CliError::Config("grid dimensions must be positive".into()));
        }
        Ok((input, edits, output))
    }

    pub fn propagate(&self) -> PropagateConfig {
        PropagateConfig {
            grid_width: self.grid_width,
            grid_height: self.grid_height,
            temperature: self.temperature,
            normalize_columns: self.normalize_columns,
            ..PropagateConfig::default()
        }
    }
}

// gradcheck

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRunConfig {
    pub seed: u64,
    pub instances: usize,
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Also write the table here, with the resolved config beside it.
    pub report: Option<PathBuf>,
}

impl Default for GradcheckRunConfig {
    fn default() -> Self {
        let g = GradcheckConfig::default();
        Self {
            seed: g.seed,
            instances: g.instances,
            min_pixels: g.min_pixels,
            max_pixels: g.max_pixels,
            max_dim: g.max_dim,
            step: g.step,
            tolerance: g.tolerance,
            report: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Args)]
pub struct GradcheckFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_pixels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pixels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl GradcheckRunConfig {
    pub fn core(&self) -> GradcheckConfig {
        GradcheckConfig {
            seed: self.seed,
            instances: self.instances,
            min_pixels: self.min_pixels,
            max_pixels: self.max_pixels,
            max_dim: self.max_dim,
            step: self.step,
            tolerance: self.tolerance,
        }
    }
}

// train

/// Schedules serialize as `[[epoch, fraction], ...]`; on the command line
/// they are written `0:1.0,2:0.75,...`.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>, String> {
    text.split(',')
        .map(|pair| {
            let (e, f) = pair
                .split_once(':')
                .ok_or_else(|| format!("schedule entry {pair:?} is not epoch:fraction"))?;
            let e = e.trim().parse().map_err(|_| format!("bad epoch in {pair:?}"))?;
            let f = f.trim().parse().map_err(|_| format!("bad fraction in {pair:?}"))?;
            Ok((e, f))
        })
        .collect()
}

fn serialize_schedule<S: Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
    let text = v.as_deref().expect("skipped when absent");
    let stages = parse_schedule(text).map_err(serde::ser::Error::custom)?;
    stages.serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub out: PathBuf,
    /// Directory of color training images; the synthetic two-mode set when absent.
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub images: usize,
    pub seed: u64,
    /// Sets the unary, HOC and stage-2 epoch counts at once.
    pub epochs: Option<usize>,
    pub unary_epochs: usize,
    pub hoc_epochs: usize,
    pub stage2_epochs: usize,
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub lr: f64,
    pub hoc_lr: f64,
    pub structure_lr: f64,
    pub momentum: f64,
    pub kl_weight: f64,
    pub latents_per_image: usize,
    pub stage2_lr: f64,
    pub stage2_logit_lr: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub latent_dim: usize,
    pub components: usize,
    pub sigma: f64,
    pub temperature: f64,
    pub beta: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        Self {
            out: PathBuf::from("model.ckpt"),
            data_dir: None,
            data_seed: 1,
            images: 40,
            seed: 1,
            epochs: None,
            unary_epochs: t.unary_epochs,
            hoc_epochs: t.hoc_epochs,
            stage2_epochs: t.stage2.epochs,
            schedule: t.schedule.stages.clone(),
            batch_size: t.batch_size,
            lr: t.lr,
            hoc_lr: t.hoc_lr,
            structure_lr: t.structure_lr,
            momentum: t.momentum,
            kl_weight: t.kl_weight,
            latents_per_image: t.latents_per_image,
            stage2_lr: t.stage2.lr,
            stage2_logit_lr: t.stage2.logit_lr,
            grid_width: m.grid_width,
            grid_height: m.grid_height,
            latent_dim: m.latent_dim,
            components: m.components,
            sigma: m.sigma,
            temperature: m.temperature,
            beta: m.beta,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Args)]
pub struct TrainFlags {
    /// Checkpoint path; the report and resolved config are written beside it.
    #[arg(long, short)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unary_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hoc_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_epochs: Option<usize>,
    /// Mask curriculum as `epoch:fraction` pairs, e.g. `0:1,2:0.5,4:0.1`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "serialize_schedule")]
    pub schedule: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hoc_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latents_per_image: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_logit_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_height: Option<usize>,
    /// Latent size `d`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Mixture components `M`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// Fixed mixture standard deviation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Training-time constraint strength.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl TrainRunConfig {
    /// Folds the `epochs` shortcut into the per-phase counts.
    pub fn normalized(mut self) -> Self {
        if let Some(n) = self.epochs.take() {
            self.unary_epochs = n;
            self.hoc_epochs = n;
            self.stage2_epochs = n;
        }
        self
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            grid_width: self.grid_width,
            grid_height: self.grid_height,
            latent_dim: self.latent_dim,
            components: self.components,
            sigma: self.sigma,
            temperature: self.temperature,
            beta: self.beta,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        Ok(TrainConfig {
            seed: self.seed,
            unary_epochs: self.unary_epochs,
            hoc_epochs: self.hoc_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            hoc_lr: self.hoc_lr,
            structure_lr: self.structure_lr,
            momentum: self.momentum,
            kl_weight: self.kl_weight,
            schedule: MaskSchedule::new(self.schedule.clone())?,
            latents_per_image: self.latents_per_image,
            stage2: Stage2Config {
                epochs: self.stage2_epochs,
                lr: self.stage2_lr,
                logit_lr: self.stage2_logit_lr,
                momentum: self.momentum,
            },
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model().validate()?;
        self.train()?.validate()?;
        if self.data_dir.is_none() && self.images == 0 {
            return Err(CliError::Config("images must be positive".into()));
        }
        Ok(())
    }
}

// sample

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRunConfig {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub deterministic: bool,
    pub beta: f64,
    pub out_dir: PathBuf,
}

impl Default for SampleRunConfig {
    fn default() -> Self {
        let o = SampleOptions::default();
        Self {
            model: None,
            input: None,
            n: 8,
            seed: o.seed,
            mode: o.mode,
            deterministic: o.deterministic,
            beta: o.beta,
            out_dir: PathBuf::from("samples"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Args)]
pub struct SampleFlags {
    /// Checkpoint written by `gcrf train`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Number of colorizations.
    #[arg(long, short)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `per-component` or `weighted`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl SampleRunConfig {
    pub fn validate(&self) -> CliResult<(&PathBuf, &PathBuf)> {
        let model = required(&self.model, "model")?;
        let input = required(&self.input, "input")?;
        if self.n == 0 {
            return Err(CliError::Config("n must be positive".into()));
        }
        positive(self.beta, "beta")?;
        Ok((model, input))
    }

    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            mode: self.mode,
            seed: self.seed,
            deterministic: self.deterministic,
            beta: self.beta,
        }
    }
}

// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    /// Directory of color images; synthetic region images when absent.
    pub input_dir: Option<PathBuf>,
    pub images: usize,
    pub data_seed: u64,
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
    pub patch: usize,
    pub patch_mode: PatchMode,
    pub beta: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub temperature: f64,
    /// Adds error-of-best and diversity metrics from this checkpoint.
    pub model: Option<PathBuf>,
    pub samples: usize,
    pub sample_seed: u64,
    /// JSON lines, one metrics report per image; a summary is written beside it.
    pub out: PathBuf,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        let (p, r) = (PropagateConfig::default(), RevealProtocol::default());
        Self {
            input_dir: None,
            images: 20,
            data_seed: 2024,
            width: 32,
            height: 32,
            counts: r.counts,
            patch: r.patch,
            patch_mode: r.mode,
            beta: TEST_BETA,
            grid_width: p.grid_width,
            grid_height: p.grid_height,
            temperature: p.temperature,
            model: None,
            samples: 8,
            sample_seed: 0,
            out: PathBuf::from("eval.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Args)]
pub struct EvalFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Revealed patch counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    /// `center-mean` or `all-pixels`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    #[arg(long, short)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl EvalRunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.input_dir.is_none() && (self.images == 0 || self.width == 0 || self.height == 0) {
            return Err(CliError::Config("images, width and height must be positive".into()));
        }
        if self.counts.is_empty() || self.patch == 0 {
            return Err(CliError::Config("counts must be nonempty and patch positive".into()));
        }
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(CliError::Config("grid dimensions must be positive".into()));
        }
        let grid = self.grid_width * self.grid_height;
        if let Some(&n) = self.counts.iter().find(|&&n| n == 0 || n > grid) {
            return Err(CliError::Config(format!("count {n} is outside 1..={grid}")));
        }
        positive(self.beta, "beta")?;
        positive(self.temperature, "temperature")?;
        if self.model.is_some() && self.samples == 0 {
            return Err(CliError::Config("samples must be positive".into()));
        }
        Ok(())
    }

    pub fn propagate(&self) -> PropagateConfig {
        PropagateConfig {
            grid_width: self.grid_width,
            grid_height: self.grid_height,
            temperature: self.temperature,
            ..PropagateConfig::default()
        }
    }

    pub fn protocol(&self) -> RevealProtocol {
        RevealProtocol {
            counts: self.counts.clone(),
            patch: self.patch,
            beta: self.beta,
            mode: self.patch_mode,
        }
    }
}
