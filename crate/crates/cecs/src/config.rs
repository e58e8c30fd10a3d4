//! Run configuration: hyperparameters, seeds, and the `key = value` config
//! file format with CLI-flag precedence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Original images and plain cross-entropy only.
    Baseline,
    /// Triplet augmentation with the summed cross-entropy loss.
    Ce,
    /// Triplet augmentation plus the cosine-similarity loss.
    Cecs,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Mode, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ce" => Ok(Mode::Ce),
            "cecs" => Ok(Mode::Cecs),
            other => Err(format!("unknown mode {:?}, expected baseline, ce, or cecs", other)),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Ce => "ce",
            Mode::Cecs => "cecs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Grid side count: the image is split into n x n cells.
    pub n: usize,
    /// Substitution square side, in grid cells.
    pub q: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// The learning rate is divided by 10 every this many epochs.
    pub lr_decay_every: usize,
    pub flip_prob: f64,
    pub image_side: usize,
    pub seed: u64,
    /// Floor for cosine-similarity denominators.
    pub eps: f64,
    /// Weight on the cosine loss term; 1 reproduces the plain sum.
    pub cos_weight: f64,
    /// Adds the (original, masked) cosine pair to the similarity loss.
    pub extra_pair: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            mode: Mode::Cecs,
            n: 7,
            q: 2,
            epochs: 60,
            batch_size: 4,
            lr0: 0.0008,
            momentum: 0.9,
            lr_decay_every: 60,
            flip_prob: 0.5,
            image_side: 56,
            seed: 0,
            eps: 1e-8,
            cos_weight: 1.0,
            extra_pair: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvariant(msg));
        if self.q < 1 || self.q > self.n {
            return fail(format!("q must satisfy 1 <= q <= n, got q={} n={}", self.q, self.n));
        }
        if self.n < 1 {
            return fail("n must be at least 1".to_string());
        }
        if self.image_side == 0 || self.image_side % self.n != 0 {
            return fail(format!(
                "image_side {} must be divisible by n {}",
                self.image_side, self.n
            ));
        }
        if self.image_side % 4 != 0 {
            return fail(format!(
                "image_side {} must be divisible by 4 (two pooling stages)",
                self.image_side
            ));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".to_string());
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !self.cos_weight.is_finite() || self.cos_weight < 0.0 {
            return fail(format!("cos_weight must be non-negative, got {}", self.cos_weight));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment; the reason string feeds error
    /// reporting at the caller, which knows the source line.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "n" => self.n = num(value)?,
            "q" => self.q = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr0" => self.lr0 = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "lr_decay_every" => self.lr_decay_every = num(value)?,
            "flip_prob" => self.flip_prob = num(value)?,
            "image_side" => self.image_side = num(value)?,
            "seed" => self.seed = num(value)?,
            "eps" => self.eps = num(value)?,
            "cos_weight" => self.cos_weight = num(value)?,
            "extra_pair" => self.extra_pair = num(value)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Serializes in the config file format; parsing this back reproduces
    /// the config exactly (f64 Display round-trips).
    pub fn to_file_string(&self) -> String {
        format!(
            "mode = {}\nn = {}\nq = {}\nepochs = {}\nbatch_size = {}\nlr0 = {}\n\
             momentum = {}\nlr_decay_every = {}\nflip_prob = {}\nimage_side = {}\n\
             seed = {}\neps = {}\ncos_weight = {}\nextra_pair = {}\n",
            self.mode,
            self.n,
            self.q,
            self.epochs,
            self.batch_size,
            self.lr0,
            self.momentum,
            self.lr_decay_every,
            self.flip_prob,
            self.image_side,
            self.seed,
            self.eps,
            self.cos_weight,
            self.extra_pair,
        )
    }
}

/// Defaults, then the optional file, then the overrides, then validation.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        apply_file(&mut config, path, &text)?;
    }
    for (key, value) in overrides {
        config.apply_kv(key, value).map_err(|reason| Error::ConfigUnparsable {
            path: "<flags>".to_string(),
            line: 0,
            key: key.clone(),
            value: value.clone(),
            reason,
        })?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_file(config: &mut RunConfig, path: &Path, text: &str) -> Result<()> {
    let shown = path.display().to_string();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            path: shown.clone(),
            line,
            text: raw.trim().to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        config.apply_kv(key, value).map_err(|reason| {
            if reason == "unknown key" {
                Error::ConfigUnknownKey { path: shown.clone(), line, key: key.to_string() }
            } else {
                Error::ConfigUnparsable {
                    path: shown.clone(),
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                }
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_cfg("# nothing but comments\n\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lr0, 0.0008);
        assert_eq!(cfg.n, 7);
        assert_eq!(cfg.q, 2);
        assert_eq!(cfg.image_side, 56);
    }

    #[test]
    fn flags_override_file() {
        let f = write_cfg("q = 3\n");
        let cfg = parse_config(
            Some(f.path()),
            &[("q".to_string(), "1".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.q, 1);
    }

    #[test]
    fn unknown_key_reports_line() {
        let f = write_cfg("n = 7\nbogus = 1\n");
        match parse_config(Some(f.path()), &[]) {
            Err(Error::ConfigUnknownKey { line, key, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "bogus");
            }
            other => panic!("expected unknown-key error, got {:?}", other),
        }
    }

    #[test]
    fn unparsable_value_reports_line_and_reason() {
        let f = write_cfg("lr0 = fast\n");
        match parse_config(Some(f.path()), &[]) {
            Err(Error::ConfigUnparsable { line, key, value, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(key, "lr0");
                assert_eq!(value, "fast");
            }
            other => panic!("expected unparsable error, got {:?}", other),
        }
    }

    #[test]
    fn missing_equals_is_a_syntax_error() {
        let f = write_cfg("just words\n");
        assert!(matches!(
            parse_config(Some(f.path()), &[]),
            Err(Error::ConfigSyntax { line: 1, .. })
        ));
    }

    #[test]
    fn indivisible_image_side_violates_invariant() {
        let f = write_cfg("n = 7\nimage_side = 50\n");
        assert!(matches!(
            parse_config(Some(f.path()), &[]),
            Err(Error::ConfigInvariant(_))
        ));
    }

    #[test]
    fn q_above_n_violates_invariant() {
        let f = write_cfg("n = 2\nq = 3\nimage_side = 56\n");
        assert!(matches!(
            parse_config(Some(f.path()), &[]),
            Err(Error::ConfigInvariant(_))
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::Ce;
        cfg.q = 3;
        cfg.lr0 = 0.05;
        cfg.seed = 123456789;
        cfg.extra_pair = true;
        let f = write_cfg(&cfg.to_file_string());
        let back = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_after_values_are_ignored() {
        let f = write_cfg("q = 1  # smallest patch\nseed = 9\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.q, 1);
        assert_eq!(cfg.seed, 9);
    }
}
