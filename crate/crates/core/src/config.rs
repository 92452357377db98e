//! Flat run configuration: dataset layout, training hyperparameters and
//! output cadences in one TOML table with no nesting.
//!
//! Every key has a default; unknown keys are rejected by name. Overrides of
//! the form `key=value` are applied after the file and win over it.

use crate::discriminators::DiscOutput;
use crate::error::{Error, Result};
use crate::synthdata::{BenchmarkSpec, DomainShift, Texture};
use crate::trainer::{FlowSource, GenAdversarial, Mode, RunOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root holding `source/`, `target/` and `eval/` datasets.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Pixel stride for the feature-variance statistics (0 disables them).
    pub feature_stride: usize,

    // Benchmark generation.
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub num_objects: usize,
    pub max_speed: f64,
    pub num_source: usize,
    pub num_target: usize,
    pub num_eval: usize,
    pub data_gen_seed: u64,
    pub source_texture: Texture,
    pub target_texture: Texture,
    pub target_hue_shift: f64,
    pub target_gain: f64,
    pub target_noise: f64,

    // Training.
    pub mode: Mode,
    pub lambda_sa: f64,
    pub lambda_wd: f64,
    pub lambda_u: f64,
    pub lr0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_lr0: Option<f64>,
    pub total_steps: usize,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub flow_source: FlowSource,
    pub itcr_gap: usize,
    pub gen_adversarial: GenAdversarial,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_down_levels: usize,
    pub shared_branches: bool,
    pub disc_base_channels: usize,
    pub disc_output: DiscOutput,
    pub patch_radius: usize,
    pub search_radius: usize,
    pub occlusion_tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &BenchmarkSpec::default())
    }
}

fn texture_of(shift: &DomainShift) -> Texture {
    shift.texture.unwrap_or(Texture::Plain)
}

impl RunConfig {
    fn from_parts(t: &TrainConfig, b: &BenchmarkSpec) -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            eval_every: 500,
            checkpoint_every: 1000,
            feature_stride: 4,
            height: b.height,
            width: b.width,
            num_frames: b.num_frames,
            num_objects: b.num_objects,
            max_speed: b.max_speed,
            num_source: b.num_source,
            num_target: b.num_target,
            num_eval: b.num_eval,
            data_gen_seed: b.seed,
            source_texture: texture_of(&b.source_shift),
            target_texture: texture_of(&b.target_shift),
            target_hue_shift: b.target_shift.hue_shift,
            target_gain: b.target_shift.brightness_gain,
            target_noise: b.target_shift.noise_std,
            mode: t.mode,
            lambda_sa: t.lambda_sa,
            lambda_wd: t.lambda_wd,
            lambda_u: t.lambda_u,
            lr0: t.lr0,
            disc_lr0: t.disc_lr0,
            total_steps: t.total_steps,
            poly_power: t.poly_power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: t.seed,
            data_seed: t.data_seed,
            flow_source: t.flow_source,
            itcr_gap: t.itcr_gap,
            gen_adversarial: t.gen_adversarial,
            num_classes: t.num_classes,
            base_channels: t.base_channels,
            num_down_levels: t.num_down_levels,
            shared_branches: t.shared_branches,
            disc_base_channels: t.disc_base_channels,
            disc_output: t.disc_output,
            patch_radius: t.patch_radius,
            search_radius: t.search_radius,
            occlusion_tau: t.occlusion_tau,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            lambda_sa: self.lambda_sa,
            lambda_wd: self.lambda_wd,
            lambda_u: self.lambda_u,
            lr0: self.lr0,
            disc_lr0: self.disc_lr0,
            total_steps: self.total_steps,
            poly_power: self.poly_power,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            data_seed: self.data_seed,
            flow_source: self.flow_source,
            itcr_gap: self.itcr_gap,
            gen_adversarial: self.gen_adversarial,
            num_classes: self.num_classes,
            base_channels: self.base_channels,
            num_down_levels: self.num_down_levels,
            shared_branches: self.shared_branches,
            disc_base_channels: self.disc_base_channels,
            disc_output: self.disc_output,
            patch_radius: self.patch_radius,
            search_radius: self.search_radius,
            occlusion_tau: self.occlusion_tau,
        }
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            height: self.height,
            width: self.width,
            num_frames: self.num_frames,
            num_classes: self.num_classes,
            num_objects: self.num_objects,
            max_speed: self.max_speed,
            num_source: self.num_source,
            num_target: self.num_target,
            num_eval: self.num_eval,
            seed: self.data_gen_seed,
            source_shift: DomainShift {
                texture: Some(self.source_texture),
                ..DomainShift::identity()
            },
            target_shift: DomainShift {
                hue_shift: self.target_hue_shift,
                brightness_gain: self.target_gain,
                noise_std: self.target_noise,
                texture: Some(self.target_texture),
                noise_seed: 0,
            },
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out_dir.clone(),
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            resume_from: None,
            feature_stride: (self.feature_stride > 0).then_some(self.feature_stride),
        }
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data_dir.join("source")
    }

    pub fn target_dir(&self) -> PathBuf {
        self.data_dir.join("target")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data_dir.join("eval")
    }

    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let k = k.trim();
            let v = v.trim();
            // Bare words such as `davsn` are taken as strings.
            let value = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.mode = Mode::Ctcr;
        c.disc_lr0 = Some(0.5);
        c.target_texture = Texture::Checker;
        let back = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_toml(), &[]).unwrap(), d);
        assert_eq!(d.train_config(), TrainConfig::default());
        assert_eq!(d.benchmark_spec(), BenchmarkSpec::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::parse("lamda_u = 0.1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("lamda_u"), "{e}");
        let e = RunConfig::parse("", &["bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::parse("mode = \"sa\"\nlr0 = 0.5\n", &["mode=davsn".into(), "total_steps=7".into()]).unwrap();
        assert_eq!(c.mode, Mode::Davsn);
        assert_eq!(c.total_steps, 7);
        assert_eq!(c.lr0, 0.5);
        assert!(RunConfig::parse("", &["lr0".into()]).is_err());
        assert!(RunConfig::parse("", &["lr0=-1".into()]).is_err());
    }
}
