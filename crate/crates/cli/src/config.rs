//! Run settings: defaults, config-file parsing, and flag overrides.
//!
//! Config files are plain `key = value` lines; `#` starts a comment. Every
//! key has a default, command-line flags override file values, and unknown
//! keys are errors so typos cannot silently fall back to defaults. Each run
//! echoes the fully resolved settings via [`Settings::echo`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use hmseg_core::network::NetworkConfig;
use hmseg_core::optim::AdamConfig;
use hmseg_core::phantom::PhantomConfig;
use hmseg_core::risk::ObjectiveConfig;
use hmseg_core::sampling::PatchSpec;

use crate::checkpoint::parse_blocks;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    TissueOnly,
    LesionOnly,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TissueOnly => "tissue-only",
            TrainMode::LesionOnly => "lesion-only",
        }
    }
}

impl FromStr for TrainMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "tissue-only" => Ok(TrainMode::TissueOnly),
            "lesion-only" => Ok(TrainMode::LesionOnly),
            other => bail!("mode must be joint, tissue-only, or lesion-only, got {other:?}"),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every tunable a run can depend on, resolved from defaults, then an
/// optional config file, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub mode: TrainMode,
    pub iterations: usize,
    pub warmup: usize,
    pub stop_target_grad: bool,

    pub patch: (usize, usize),
    pub samples_per_image: usize,
    pub dilation_radius: usize,

    pub height: usize,
    pub width: usize,
    pub n_control: usize,
    pub n_lesion: usize,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub val_every: usize,
    pub patience: usize,
    pub plateau_tol: f64,

    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub fuzz_trials: usize,
    pub ks_alpha: f64,
    pub gradcheck_samples: usize,

    pub base_channels: usize,
    pub blocks: Vec<(usize, usize)>,
    pub kernel_size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 17,
            mode: TrainMode::Joint,
            iterations: 2000,
            warmup: 500,
            stop_target_grad: false,
            patch: (48, 48),
            samples_per_image: 2,
            dilation_radius: 3,
            height: 96,
            width: 96,
            n_control: 60,
            n_lesion: 60,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 100,
            patience: 10,
            plateau_tol: 1e-4,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            fuzz_trials: 100_000,
            ks_alpha: 0.01,
            gradcheck_samples: 4,
            base_channels: 16,
            blocks: vec![(3, 1), (3, 2), (3, 4)],
            kernel_size: 3,
        }
    }
}

fn parse_patch(value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .with_context(|| format!("patch {value:?} must look like 48x48"))?;
    Ok((
        h.parse()
            .with_context(|| format!("patch height in {value:?}"))?,
        w.parse()
            .with_context(|| format!("patch width in {value:?}"))?,
    ))
}

fn blocks_string(blocks: &[(usize, usize)]) -> String {
    blocks
        .iter()
        .map(|&(n, d)| format!("{n}x{d}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl Settings {
    /// Apply `key = value` lines from a config file on top of the current
    /// values. Errors carry the offending line number.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Set one key from its string form. This is the single point of truth
    /// for key names, shared by config files and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            value.parse().with_context(|| format!("{key} = {value:?}"))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "iterations" => self.iterations = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "stop_target_grad" => self.stop_target_grad = num(key, value)?,
            "patch" => self.patch = parse_patch(value)?,
            "samples_per_image" => self.samples_per_image = num(key, value)?,
            "dilation_radius" => self.dilation_radius = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "n_control" => self.n_control = num(key, value)?,
            "n_lesion" => self.n_lesion = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "plateau_tol" => self.plateau_tol = num(key, value)?,
            "train_ratio" => self.train_ratio = num(key, value)?,
            "val_ratio" => self.val_ratio = num(key, value)?,
            "test_ratio" => self.test_ratio = num(key, value)?,
            "fuzz_trials" => self.fuzz_trials = num(key, value)?,
            "ks_alpha" => self.ks_alpha = num(key, value)?,
            "gradcheck_samples" => self.gradcheck_samples = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "blocks" => self.blocks = parse_blocks(value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    /// Dump every setting as `key = value` lines in a fixed order, suitable
    /// both for run logs and as a loadable config file.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("seed", self.seed.to_string());
        line("mode", self.mode.to_string());
        line("iterations", self.iterations.to_string());
        line("warmup", self.warmup.to_string());
        line("stop_target_grad", self.stop_target_grad.to_string());
        line("patch", format!("{}x{}", self.patch.0, self.patch.1));
        line("samples_per_image", self.samples_per_image.to_string());
        line("dilation_radius", self.dilation_radius.to_string());
        line("height", self.height.to_string());
        line("width", self.width.to_string());
        line("n_control", self.n_control.to_string());
        line("n_lesion", self.n_lesion.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("adam_eps", self.adam_eps.to_string());
        line("val_every", self.val_every.to_string());
        line("patience", self.patience.to_string());
        line("plateau_tol", self.plateau_tol.to_string());
        line("train_ratio", self.train_ratio.to_string());
        line("val_ratio", self.val_ratio.to_string());
        line("test_ratio", self.test_ratio.to_string());
        line("fuzz_trials", self.fuzz_trials.to_string());
        line("ks_alpha", self.ks_alpha.to_string());
        line("gradcheck_samples", self.gradcheck_samples.to_string());
        line("base_channels", self.base_channels.to_string());
        line("blocks", blocks_string(&self.blocks));
        line("kernel_size", self.kernel_size.to_string());
        out
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            n_modalities: 2,
            n_classes: 8,
            base_channels: self.base_channels,
            residual_blocks: self.blocks.clone(),
            kernel_size: self.kernel_size,
        }
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            height: self.patch.0,
            width: self.patch.1,
            samples_per_image: self.samples_per_image,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let mut cfg = ObjectiveConfig::default_brain();
        cfg.warmup = self.warmup;
        cfg.stop_target_grad = self.stop_target_grad;
        cfg
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            height: self.height,
            width: self.width,
            n_control: self.n_control,
            n_lesion: self.n_lesion,
            seed: self.seed,
            ..PhantomConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn defaults_echo_and_reload_to_the_same_settings() {
        let defaults = Settings::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, defaults.echo()).unwrap();
        let mut reloaded = Settings::default();
        reloaded.seed = 999; // perturb, then confirm the file restores it
        reloaded.apply_file(&path).unwrap();
        assert_eq!(reloaded, defaults);
    }

    #[test]
    fn file_values_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# experiment").unwrap();
        writeln!(f, "seed = 42   # inline comment").unwrap();
        writeln!(f, "patch = 16x24").unwrap();
        writeln!(f, "blocks = 2x1,1x2").unwrap();
        writeln!(f, "mode = lesion-only").unwrap();
        drop(f);

        let mut s = Settings::default();
        s.apply_file(&path).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.patch, (16, 24));
        assert_eq!(s.blocks, vec![(2, 1), (1, 2)]);
        assert_eq!(s.mode, TrainMode::LesionOnly);

        // a later flag wins over the file
        s.set("seed", "7").unwrap();
        assert_eq!(s.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut s = Settings::default();
        let err = s.set("sed", "1").unwrap_err();
        assert!(
            err.to_string().contains("unknown configuration key"),
            "{err}"
        );
        assert!(s.set("iterations", "many").is_err());
        assert!(s.set("patch", "48").is_err());
        assert!(s.set("mode", "both").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "seed = 1\nbogus = 2\n").unwrap();
        let err = format!("{:#}", s.apply_file(&path).unwrap_err());
        assert!(
            err.contains(":2"),
            "error should carry the line number: {err}"
        );
    }

    #[test]
    fn derived_configs_mirror_the_settings() {
        let mut s = Settings::default();
        s.set("base_channels", "4").unwrap();
        s.set("blocks", "1x1").unwrap();
        s.set("warmup", "9").unwrap();
        s.set("patch", "32x40").unwrap();
        let net = s.network_config();
        assert_eq!(net.base_channels, 4);
        assert_eq!(net.residual_blocks, vec![(1, 1)]);
        assert_eq!((net.n_modalities, net.n_classes), (2, 8));
        assert_eq!(s.objective_config().warmup, 9);
        let spec = s.patch_spec();
        assert_eq!((spec.height, spec.width), (32, 40));
        assert_eq!(s.phantom_config().n_control, 60);
        assert_eq!(s.adam_config().learning_rate, 0.005);
    }
}
