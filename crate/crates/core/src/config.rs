//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comment
//! seed = 7
//! lr_early = 0.001
//! dims.l = 16
//! ```
//!
//! Unknown keys, duplicate keys and unparsable values are errors that name
//! the line (or the `--set` override) they came from. [`TrainConfig::to_text`]
//! writes every key, so its output fed back through [`TrainConfig::parse`]
//! reproduces the configuration exactly (floats use shortest round-trip
//! formatting).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::synthbench::Arm;

pub const CONFIG_VERSION_LINE: &str = "# atm-lab config v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Query rows per condition.
    pub l: usize,
    /// Slots per memory item.
    pub m: usize,
    /// Channel width.
    pub c: usize,
    /// Number of tasks / memory items.
    pub n: usize,
    /// Raw condition dimension.
    pub d: usize,
    /// Detail tokens per condition.
    pub v: usize,
    /// Gate hidden width.
    pub h: usize,
    /// Decoder hidden width.
    pub h_dec: usize,
    /// Output dimension.
    pub d_out: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            l: 16,
            m: 32,
            c: 32,
            n: 3,
            d: 24,
            v: 4,
            h: 128,
            h_dec: 64,
            d_out: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperScale,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-scale" => Ok(Preset::PaperScale),
            other => Err(format!("unknown preset `{other}` (expected desk or paper-scale)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub lr_early: f64,
    pub lr_late: f64,
    pub batch_size: usize,
    pub alpha: f64,
    /// Target noise standard deviation.
    pub noise_sigma: f64,
    /// Standard deviation of each task cluster in condition space.
    pub cluster_std: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub arm: Arm,
    pub dims: Dims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{origin}: malformed line `{text}` (expected `key = value`)")]
    Syntax { origin: Origin, text: String },

    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: Origin, key: String },

    #[error("{origin}: key `{key}` given more than once")]
    Duplicate { origin: Origin, key: String },

    #[error("{origin}: key `{key}`: {message}")]
    Value {
        origin: Origin,
        key: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("line 1: {0}")]
    Version(String),
}

/// Where a config entry came from, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => write!(f, "--set"),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "stage1_steps",
    "stage2_steps",
    "stage3_steps",
    "lr_early",
    "lr_late",
    "batch_size",
    "alpha",
    "noise_sigma",
    "cluster_std",
    "train_samples",
    "eval_samples",
    "arm",
    "dims.l",
    "dims.m",
    "dims.c",
    "dims.n",
    "dims.d",
    "dims.v",
    "dims.h",
    "dims.h_dec",
    "dims.d_out",
];

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                seed: 1,
                stage1_steps: 300,
                stage2_steps: 500,
                stage3_steps: 500,
                lr_early: 1e-3,
                lr_late: 3e-4,
                batch_size: 32,
                alpha: crate::atm::DEFAULT_ALPHA,
                noise_sigma: 0.05,
                cluster_std: 1.0,
                train_samples: 600,
                eval_samples: 300,
                arm: Arm::Full,
                dims: Dims::default(),
            },
            Preset::PaperScale => {
                let c = 64;
                Self {
                    stage1_steps: 3000,
                    stage2_steps: 3000,
                    stage3_steps: 5000,
                    lr_early: 1e-4,
                    lr_late: 3e-5,
                    batch_size: 256,
                    train_samples: 6000,
                    eval_samples: 600,
                    dims: Dims {
                        l: 256,
                        m: 1024,
                        c,
                        h: 4 * c,
                        ..Dims::default()
                    },
                    ..Self::preset(Preset::Desk)
                }
            }
        }
    }

    /// Parses config text on top of `base`.
    pub fn parse_onto(base: TrainConfig, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = base;
        if let Some(first) = text.lines().next().filter(|l| l.starts_with("# atm-lab ")) {
            crate::report::check_version_line(std::path::Path::new("config"), first, "config").map_err(
                |e| match e {
                    crate::AtmError::Format { detail, .. } => ConfigError::Version(detail),
                    other => ConfigError::Version(other.to_string()),
                },
            )?;
        }
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let origin = Origin::Line(idx + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_entry(line).ok_or_else(|| ConfigError::Syntax {
                origin,
                text: raw.to_string(),
            })?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    origin,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value, origin)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_onto(Self::default(), text)
    }

    /// Applies `key=value` overrides (from the command line), then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = split_entry(o).ok_or_else(|| ConfigError::Syntax {
                origin: Origin::Override,
                text: o.to_string(),
            })?;
            self.set(key, value, Origin::Override)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str, origin: Origin) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::Value {
                origin,
                key: key.to_string(),
                message: format!("cannot parse `{value}`: {e}"),
            })
        }
        let d = &mut self.dims;
        match key {
            "seed" => self.seed = num(key, value, origin)?,
            "stage1_steps" => self.stage1_steps = num(key, value, origin)?,
            "stage2_steps" => self.stage2_steps = num(key, value, origin)?,
            "stage3_steps" => self.stage3_steps = num(key, value, origin)?,
            "lr_early" => self.lr_early = num(key, value, origin)?,
            "lr_late" => self.lr_late = num(key, value, origin)?,
            "batch_size" => self.batch_size = num(key, value, origin)?,
            "alpha" => self.alpha = num(key, value, origin)?,
            "noise_sigma" => self.noise_sigma = num(key, value, origin)?,
            "cluster_std" => self.cluster_std = num(key, value, origin)?,
            "train_samples" => self.train_samples = num(key, value, origin)?,
            "eval_samples" => self.eval_samples = num(key, value, origin)?,
            "arm" => {
                self.arm = value.parse().map_err(|message| ConfigError::Value {
                    origin,
                    key: key.to_string(),
                    message,
                })?
            }
            "dims.l" => d.l = num(key, value, origin)?,
            "dims.m" => d.m = num(key, value, origin)?,
            "dims.c" => d.c = num(key, value, origin)?,
            "dims.n" => d.n = num(key, value, origin)?,
            "dims.d" => d.d = num(key, value, origin)?,
            "dims.v" => d.v = num(key, value, origin)?,
            "dims.h" => d.h = num(key, value, origin)?,
            "dims.h_dec" => d.h_dec = num(key, value, origin)?,
            "dims.d_out" => d.d_out = num(key, value, origin)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let d = &self.dims;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("eval_samples", self.eval_samples),
            ("dims.l", d.l),
            ("dims.m", d.m),
            ("dims.c", d.c),
            ("dims.n", d.n),
            ("dims.d", d.d),
            ("dims.v", d.v),
            ("dims.h", d.h),
            ("dims.h_dec", d.h_dec),
            ("dims.d_out", d.d_out),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lr_early", self.lr_early),
            ("lr_late", self.lr_late),
            ("noise_sigma", self.noise_sigma),
            ("cluster_std", self.cluster_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.lr_late > self.lr_early {
            return bad(format!(
                "lr_late ({}) must not exceed lr_early ({})",
                self.lr_late, self.lr_early
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if d.n < 2 {
            return bad("dims.n must be at least 2".into());
        }
        if d.d % d.n != 0 {
            return bad(format!("dims.d ({}) must be divisible by dims.n ({})", d.d, d.n));
        }
        if d.d_out % d.n != 0 {
            return bad(format!(
                "dims.d_out ({}) must be divisible by dims.n ({})",
                d.d_out, d.n
            ));
        }
        if d.v > d.d {
            return bad(format!("dims.v ({}) must not exceed dims.d ({})", d.v, d.d));
        }
        if self.eval_samples < 2 * d.n {
            return bad(format!("eval_samples must be at least {} (two per task)", 2 * d.n));
        }
        Ok(())
    }

    /// Every key in a fixed order, preceded by the version line.
    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.stage1_steps.to_string(),
            self.stage2_steps.to_string(),
            self.stage3_steps.to_string(),
            self.lr_early.to_string(),
            self.lr_late.to_string(),
            self.batch_size.to_string(),
            self.alpha.to_string(),
            self.noise_sigma.to_string(),
            self.cluster_std.to_string(),
            self.train_samples.to_string(),
            self.eval_samples.to_string(),
            self.arm.name().to_string(),
            d.l.to_string(),
            d.m.to_string(),
            d.c.to_string(),
            d.n.to_string(),
            d.d.to_string(),
            d.v.to_string(),
            d.h.to_string(),
            d.h_dec.to_string(),
            d.d_out.to_string(),
        ];
        let mut out = String::from(CONFIG_VERSION_LINE);
        out.push('\n');
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn split_entry(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return None;
    }
    Some((k, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_line_is_checked() {
        let echo = TrainConfig::default().to_text();
        assert_eq!(TrainConfig::parse(&echo).unwrap(), TrainConfig::default());
        let future = echo.replacen("v1", "v2", 1);
        assert!(matches!(TrainConfig::parse(&future), Err(ConfigError::Version(_))));
    }

    #[test]
    fn desk_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.stage1_steps, c.stage2_steps, c.stage3_steps), (300, 500, 500));
        assert_eq!(c.batch_size, 32);
        assert_eq!((c.lr_early, c.lr_late), (1e-3, 3e-4));
        assert_eq!(c.dims.h, 4 * c.dims.c);
        c.validate().unwrap();
    }

    #[test]
    fn paper_scale_values() {
        let c = TrainConfig::preset(Preset::PaperScale);
        assert_eq!((c.stage1_steps, c.stage2_steps, c.stage3_steps), (3000, 3000, 5000));
        assert_eq!((c.lr_early, c.lr_late), (1e-4, 3e-5));
        assert_eq!(c.batch_size, 256);
        assert_eq!((c.dims.l, c.dims.m), (256, 1024));
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let c = TrainConfig {
            seed: 987_654_321,
            alpha: 0.1 + 0.2,
            lr_late: 1.0 / 3.0 * 1e-3,
            arm: Arm::NoGate,
            ..TrainConfig::default()
        };
        let text = c.to_text();
        assert!(text.starts_with(CONFIG_VERSION_LINE));
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn parse_reports_lines_and_keys() {
        let err = TrainConfig::parse("seed = 3\n\nbogus = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                origin: Origin::Line(3),
                key: "bogus".into()
            }
        );
        let err = TrainConfig::parse("# hi\nlr_early = fast\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2: key `lr_early`"));
        let err = TrainConfig::parse("seed 3\n").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Syntax {
                origin: Origin::Line(1),
                ..
            }
        ));
        let err = TrainConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { .. }));
        let err = TrainConfig::parse("arm = sideways\n").unwrap_err();
        assert!(err.to_string().contains("sideways"));
    }

    #[test]
    fn comments_and_dotted_keys() {
        let c = TrainConfig::parse("dims.l = 8   # shorter\n# full line\nseed=5").unwrap();
        assert_eq!(c.dims.l, 8);
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["seed=7", "stage2_steps=0"]).unwrap();
        assert_eq!((c.seed, c.stage2_steps), (7, 0));
        let err = c.clone().apply_overrides(&["lr_late=1"]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = c.clone().apply_overrides(&["dims.d=25"]).unwrap_err();
        assert!(err.to_string().contains("divisible"));
        let err = c.apply_overrides(&["nope"]).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Syntax {
                origin: Origin::Override,
                ..
            }
        ));
    }
}
