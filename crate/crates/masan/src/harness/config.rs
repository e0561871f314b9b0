//! Declarative experiment configuration: defaults, the `key=value` config
//! file format, override application and config fingerprints.

use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::autoencoder::{EncoderConfig, LossConfig};
use crate::model::classifier::MlpConfig;
use crate::model::fusion::{FusionMode, PipelineOrder};
use crate::model::ModelConfig;
use crate::patch::GridSpec;
use crate::scalar::{lit, Scalar};

/// Full description of one run. Desk-scale defaults train in seconds on a
/// CPU; every field can be overridden from a config file or `--set` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Cohort generator seed; `None` derives it from `seed`.
    pub synth_seed: Option<u64>,
    pub n_per_class: usize,
    pub extents: [usize; 3],
    pub frames: usize,
    pub signal_patches: Vec<usize>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub grid: [usize; 3],
    pub channel_schedule: Vec<usize>,
    pub bottleneck_channels: usize,
    pub target_extent: [usize; 3],
    pub mlp_hidden: Vec<usize>,
    pub classes: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pretrain_steps: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub fusion_mode: FusionMode,
    pub pipeline_order: PipelineOrder,
    pub share_patch_params: bool,
    pub reduction_ratio: usize,
    pub scaled_dot: bool,
    pub ablation_seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            synth_seed: None,
            n_per_class: 60,
            extents: [16, 16, 16],
            frames: 4,
            signal_patches: vec![21, 42],
            signal_strength: 0.4,
            noise_sigma: 0.25,
            grid: [4, 4, 4],
            channel_schedule: vec![4, 8],
            bottleneck_channels: 8,
            target_extent: [2, 2, 2],
            mlp_hidden: vec![256, 64],
            classes: 2,
            lr: 0.001,
            lambda: 0.001,
            alpha: 0.5,
            beta: 0.5,
            pretrain_steps: 200,
            train_steps: 300,
            batch_size: 4,
            // 2/3 of the default 120-subject cohort = 80 train / 40 test
            train_fraction: 2.0 / 3.0,
            fusion_mode: FusionMode::Attention,
            pipeline_order: PipelineOrder::AttentionThenFuse,
            share_patch_params: false,
            reduction_ratio: 4,
            scaled_dot: false,
            ablation_seeds: vec![1, 2, 3, 4, 5],
            out_dir: "out".into(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad element '{s}' in {key}={value}")))
        })
        .collect()
}

fn parse_triple(value: &str, key: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = parse_list(value, key)?;
    if v.len() != 3 {
        return Err(Error::Config(format!("{key} needs 3 components, got {value}")));
    }
    Ok([v[0], v[1], v[2]])
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for {key}"))),
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ExperimentConfig {
    /// Apply one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(value, key)?,
            "synth_seed" => self.synth_seed = Some(parse_num(value, key)?),
            "n_per_class" => self.n_per_class = parse_num(value, key)?,
            "extents" => self.extents = parse_triple(value, key)?,
            "frames" => self.frames = parse_num(value, key)?,
            "signal_patches" => self.signal_patches = parse_list(value, key)?,
            "signal_strength" => self.signal_strength = parse_num(value, key)?,
            "noise_sigma" => self.noise_sigma = parse_num(value, key)?,
            "grid" => self.grid = parse_triple(value, key)?,
            "channel_schedule" => self.channel_schedule = parse_list(value, key)?,
            "bottleneck_channels" => self.bottleneck_channels = parse_num(value, key)?,
            "target_extent" => self.target_extent = parse_triple(value, key)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(value, key)?,
            "classes" => self.classes = parse_num(value, key)?,
            "lr" => self.lr = parse_num(value, key)?,
            "lambda" => self.lambda = parse_num(value, key)?,
            "alpha" => self.alpha = parse_num(value, key)?,
            "beta" => self.beta = parse_num(value, key)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(value, key)?,
            "train_steps" => self.train_steps = parse_num(value, key)?,
            "batch_size" => self.batch_size = parse_num(value, key)?,
            "train_fraction" => self.train_fraction = parse_num(value, key)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "pipeline_order" => self.pipeline_order = value.parse()?,
            "share_patch_params" => self.share_patch_params = parse_bool(value, key)?,
            "reduction_ratio" => self.reduction_ratio = parse_num(value, key)?,
            "scaled_dot" => self.scaled_dot = parse_bool(value, key)?,
            "ablation_seeds" => self.ablation_seeds = parse_list(value, key)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` pair per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.synthetic_spec().validate()?;
        Ok(())
    }

    /// Effective cohort seed: explicit `synth_seed` or the run seed.
    pub fn effective_synth_seed(&self) -> u64 {
        self.synth_seed.unwrap_or(self.seed)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.grid[0], self.grid[1], self.grid[2])
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.effective_synth_seed(),
            n_per_class: self.n_per_class,
            extents: self.extents,
            frames: self.frames,
            grid: self.grid_spec(),
            signal_patches: self.signal_patches.clone(),
            signal_strength: self.signal_strength,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Patch extents after zero-padding to the grid.
    pub fn patch_extents(&self) -> [usize; 3] {
        [
            self.extents[0].div_ceil(self.grid[0]),
            self.extents[1].div_ceil(self.grid[1]),
            self.extents[2].div_ceil(self.grid[2]),
        ]
    }

    /// Encoder sized to the actual patch extents.
    pub fn encoder_config(&self) -> EncoderConfig {
        let base = EncoderConfig {
            init_channels: self.channel_schedule[0],
            channel_schedule: self.channel_schedule.clone(),
            num_downsamples: self.channel_schedule.len() - 1,
            bottleneck_channels: self.bottleneck_channels,
            target_extent: self.target_extent,
        };
        base.sized_for(self.patch_extents())
    }

    pub fn model_config<T: Scalar>(&self) -> ModelConfig<T> {
        ModelConfig {
            grid: self.grid_spec(),
            encoder: self.encoder_config(),
            frames: self.frames,
            t1_channels: 1,
            fmri_channels: 1,
            share_patch_params: self.share_patch_params,
            reduction_ratio: self.reduction_ratio,
            scaled_dot: self.scaled_dot,
            pipeline_order: self.pipeline_order,
            fusion_mode: self.fusion_mode,
            mlp: MlpConfig {
                hidden: self.mlp_hidden.clone(),
                classes: self.classes,
            },
            loss: LossConfig {
                lambda: lit(self.lambda),
                alpha: lit(self.alpha),
                beta: lit(self.beta),
            },
        }
    }

    /// Canonical `key=value` lines in fixed order (used for fingerprints and
    /// the config copy written next to run outputs).
    pub fn canonical(&self) -> Vec<String> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = self
            .ablation_seeds
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            format!("ablation_seeds={seeds}"),
            format!("alpha={}", self.alpha),
            format!("batch_size={}", self.batch_size),
            format!("beta={}", self.beta),
            format!("bottleneck_channels={}", self.bottleneck_channels),
            format!("channel_schedule={}", list(&self.channel_schedule)),
            format!("classes={}", self.classes),
            format!("extents={}", list(&self.extents)),
            format!("frames={}", self.frames),
            format!("fusion_mode={}", self.fusion_mode.as_str()),
            format!("grid={}", list(&self.grid)),
            format!("lambda={}", self.lambda),
            format!("lr={}", self.lr),
            format!("mlp_hidden={}", list(&self.mlp_hidden)),
            format!("n_per_class={}", self.n_per_class),
            format!("noise_sigma={}", self.noise_sigma),
            format!("out_dir={}", self.out_dir),
            format!("pipeline_order={}", self.pipeline_order.as_str()),
            format!("pretrain_steps={}", self.pretrain_steps),
            format!("reduction_ratio={}", self.reduction_ratio),
            format!("scaled_dot={}", self.scaled_dot),
            format!("seed={}", self.seed),
            format!("share_patch_params={}", self.share_patch_params),
            format!("signal_patches={}", list(&self.signal_patches)),
            format!("signal_strength={}", self.signal_strength),
            format!("synth_seed={}", self.effective_synth_seed()),
            format!("target_extent={}", list(&self.target_extent)),
            format!("train_fraction={}", self.train_fraction),
            format!("train_steps={}", self.train_steps),
        ]
    }

    /// Fingerprint over the canonical form minus the given keys (out_dir is
    /// always excluded: output location does not change the model).
    pub fn fingerprint_excluding(&self, exclude: &[&str]) -> u64 {
        let mut text = String::new();
        for line in self.canonical() {
            let key = line.split('=').next().unwrap();
            if key == "out_dir" || exclude.contains(&key) {
                continue;
            }
            text.push_str(&line);
            text.push('\n');
        }
        fnv1a64(text.as_bytes())
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_excluding(&[])
    }
}
