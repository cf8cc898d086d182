//! Flat `key=value` run configuration.
//!
//! Every key is declared in [`KEYS`] with a type and a default. Values are
//! layered defaults < config file < command line, validated against their
//! type, and the fully resolved set is written next to every run's outputs
//! so the run can be replayed from that file alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    UInt,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
}

#[derive(Debug)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        help,
    }
}

pub const KEYS: &[Key] = &[
    key("seed", Kind::UInt, "0", "root seed of every random stream"),
    key("threads", Kind::UInt, "0", "worker threads (0 = all cores); never changes results"),
    key("input", Kind::Text, "", "clean-image directory (synth) or image file/directory (estimate, restore)"),
    key("output", Kind::Text, "", "output directory"),
    key("manifest", Kind::Text, "", "dataset manifest"),
    key("atnet1_ckpt", Kind::Text, "", "prior-network checkpoint"),
    key("atnet_ckpt", Kind::Text, "", "restoration-network checkpoint"),
    key("resume", Kind::Text, "", "checkpoint to continue training from"),
    key("n_warp_centers", Kind::UInt, "32", "localized displacements per deformation field"),
    key("warp_strength_min", Kind::Float, "0.5", "minimum displacement magnitude (px)"),
    key("warp_strength_max", Kind::Float, "4", "maximum displacement magnitude (px)"),
    key("warp_falloff_min", Kind::Float, "8", "minimum displacement falloff sigma (px)"),
    key("warp_falloff_max", Kind::Float, "24", "maximum displacement falloff sigma (px)"),
    key("psf_sigma_min", Kind::Float, "0.5", "minimum blur sigma (px)"),
    key("psf_sigma_max", Kind::Float, "3", "maximum blur sigma (px)"),
    key("noise_sigma", Kind::Float, "0.01", "additive noise std"),
    key("degradation_order", Kind::Choice(&["blur_then_warp", "warp_then_blur"]), "blur_then_warp", "operator order"),
    key("pairs_per_image", Kind::UInt, "1", "degraded copies per clean image"),
    key("dropout_rate", Kind::Float, "0.1", "prior-network dropout rate"),
    key("prior_channels", Kind::Choice(&["3", "1"]), "3", "prior channels: 3 per-channel variance, 1 channel mean"),
    key("upsample", Kind::Choice(&["bilinear", "nearest"]), "bilinear", "decoder upsampling"),
    key("S", Kind::UInt, "10", "Monte-Carlo dropout passes"),
    key("lambda_p", Kind::Float, "0.002", "perceptual-loss weight"),
    key("lr", Kind::Float, "0.0002", "Adam learning rate"),
    key("batch", Kind::UInt, "10", "batch size"),
    key("prior_iters", Kind::UInt, "200000", "prior-network training iterations"),
    key("restore_iters", Kind::UInt, "1500000", "restoration-network training iterations"),
    key("checkpoint_every", Kind::UInt, "10000", "iterations between checkpoints (0 = final only)"),
    key("progress_every", Kind::UInt, "100", "iterations between progress lines (0 = silent)"),
    key("record_wall_time", Kind::Bool, "true", "log wall-clock ms (false gives byte-reproducible logs)"),
    key("prior_cache", Kind::Bool, "true", "compute each training example's prior once"),
    key("perceptual_weights", Kind::Text, "", "descriptor weights for the perceptual loss (empty = seeded random)"),
    key("perceptual_seed", Kind::UInt, "0", "seed of the random perceptual descriptor"),
    key("dvgg_weights", Kind::Text, "", "descriptor weights for the deep-feature distance (empty = seeded random)"),
    key("dvgg_seed", Kind::UInt, "0", "seed of the random deep-feature descriptor"),
    key("gallery", Kind::Text, "", "identification gallery directory (<identity>/<image>)"),
    key("probes", Kind::Text, "", "degraded probe directory (<identity>/<image>)"),
    key("embedding_weights", Kind::Text, "", "descriptor weights for identity embeddings (empty = seeded random)"),
    key("embedding_seed", Kind::UInt, "0", "seed of the random embedding descriptor"),
    key("save_prior", Kind::Bool, "false", "restore: also write the prior and its preview"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn lookup(name: &str) -> Result<&'static Key, ConfigError> {
    KEYS.iter()
        .find(|k| k.name == name)
        .ok_or_else(|| ConfigError(format!("unknown config key \"{name}\"")))
}

fn check(key: &Key, value: &str) -> Result<(), ConfigError> {
    let ok = match key.kind {
        Kind::UInt => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Text => true,
        Kind::Choice(options) => options.contains(&value),
    };
    if ok {
        return Ok(());
    }
    let expected = match key.kind {
        Kind::UInt => "a non-negative integer".to_string(),
        Kind::Float => "a finite number".to_string(),
        Kind::Bool => "true or false".to_string(),
        Kind::Text => unreachable!(),
        Kind::Choice(options) => format!("one of {}", options.join(", ")),
    };
    Err(ConfigError(format!(
        "config key \"{}\" expects {expected}, got \"{value}\"",
        key.name
    )))
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value, got \"{}\"", i + 1, l.trim())))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Parses one `KEY=VALUE` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("expected KEY=VALUE, got \"{s}\"")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let key = lookup(name)?;
        check(key, value)?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("undeclared config key {name}"))
    }

    pub fn uint(&self, name: &str) -> u64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.uint(name) as usize
    }

    pub fn float(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.raw(name) == "true"
    }

    /// `None` for an empty path value.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.raw(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, name: &str) -> Result<PathBuf, ConfigError> {
        self.path(name)
            .ok_or_else(|| ConfigError(format!("missing required setting \"{name}\" (use --{} or --set {name}=...)", name.replace('_', "-"))))
    }

    /// Every key in declaration order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{}={}\n", k.name, self.values[k.name]))
            .collect()
    }
}

/// Defaults, then `file`, then `overrides` (in order; later wins).
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_config_text(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))? {
            cfg.set(&k, &v).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deturb_core::synth::{DegradationConfig, DegradationOrder};

    #[test]
    fn defaults_validate_and_mirror_core() {
        let cfg = RunConfig::default();
        for k in KEYS {
            check(k, k.default).unwrap();
        }
        let d = DegradationConfig::default();
        assert_eq!(cfg.usize("n_warp_centers"), d.n_warp_centers);
        assert_eq!([cfg.float("warp_strength_min"), cfg.float("warp_strength_max")], d.warp_strength_range);
        assert_eq!([cfg.float("warp_falloff_min"), cfg.float("warp_falloff_max")], d.warp_falloff_sigma_range);
        assert_eq!([cfg.float("psf_sigma_min"), cfg.float("psf_sigma_max")], d.psf_sigma_range);
        assert_eq!(cfg.float("noise_sigma"), d.noise_sigma);
        assert_eq!(d.order, DegradationOrder::BlurThenWarp);
        assert_eq!(cfg.float("lr"), deturb_core::optim::DEFAULT_LR);
        assert_eq!(cfg.float("lambda_p"), deturb_core::loss::DEFAULT_LAMBDA_P);
        assert_eq!(cfg.usize("S"), deturb_core::uncertainty::DEFAULT_SAMPLES);
        assert_eq!(cfg.usize("batch"), deturb_core::training::DEFAULT_BATCH);
        assert_eq!(cfg.uint("prior_iters"), deturb_core::training::PRIOR_DEFAULT_ITERS);
        assert_eq!(cfg.uint("restore_iters"), deturb_core::training::RESTORATION_DEFAULT_ITERS);
    }

    #[test]
    fn keys_are_unique() {
        let mut names: Vec<_> = KEYS.iter().map(|k| k.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("S", "4").unwrap();
        cfg.set("output", "some dir/x").unwrap();
        let back = parse_config_text(&cfg.to_text()).unwrap();
        let mut again = RunConfig::default();
        for (k, v) in back {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, cfg);
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("S", "ten").unwrap_err().0;
        assert!(e.contains("\"S\""), "{e}");
        assert!(cfg.set("lr", "nan").is_err());
        assert!(cfg.set("record_wall_time", "yes").is_err());
        assert!(cfg.set("upsample", "cubic").is_err());
        assert!(cfg.set("foo", "1").unwrap_err().0.contains("\"foo\""));
        assert!(parse_config_text("no equals sign").is_err());
        assert_eq!(parse_config_text("# c\n\n a = b \n").unwrap(), vec![("a".into(), "b".into())]);
    }
}
