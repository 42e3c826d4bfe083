//! Run configuration: a flat `key = value` text format with strict parsing.

use std::fmt::Write as _;
use std::path::Path;

/// Objective form of the adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    /// Generator maximizes `log D(fake)` (default; healthier gradients early).
    NonSaturating,
    /// Generator minimizes `log(1 - D(fake))` — the exact minimax objective,
    /// used by the finite-difference suite so generator and discriminator
    /// losses share one analytic form.
    Minimax,
}

/// Which feature sources feed the retrieval head during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Alternate over real and generated sources (same-source pairs on even
    /// iterations, cross-source pairs on odd ones).
    Alternate,
    /// Only the two real source images per identity.
    Original,
}

/// Composition of the retrieval feature (ablation switch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Embedded prototype and style code, mixed by the learned weight.
    Combined,
    /// Embedded prototype only.
    Proto,
    /// Style code only.
    Attr,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
    #[error("config field `{field}` invalid: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Every tunable of a training/evaluation run. Defaults reproduce the
/// desk-scale reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Geometry and code dimensions.
    pub image_height: usize,
    pub image_width: usize,
    pub dim_style: usize,
    pub dim_illum: usize,
    pub dim_pose: usize,
    pub proto_channels: usize,
    pub dim_proto_embed: usize,
    pub dim_feature: usize,
    // Internal widths.
    pub stem_width: usize,
    pub attr_width: usize,
    pub dis_width: usize,
    pub res_mid: usize,
    pub dec_width: usize,
    pub embed_width: usize,
    pub alpha_init: f64,
    // Reconstruction weights.
    pub lambda_cross: f64,
    pub lambda_same: f64,
    pub lambda_cycle: f64,
    pub lambda_code: f64,
    // Total objective weights.
    pub lambda_kl: f64,
    pub lambda_adv: f64,
    pub lambda_ce: f64,
    pub lambda_trip: f64,
    pub triplet_margin: f64,
    // Optimizers.
    pub gen_lr: f64,
    pub dis_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub hfl_lr: f64,
    pub hfl_momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    // Schedule.
    pub iterations: u64,
    pub batch_pairs: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    // Variants.
    pub adv_mode: AdvMode,
    pub sampling: SamplingMode,
    pub feature_mode: FeatureMode,
    /// Patch discriminator head (spatial probability map) instead of a global one.
    pub patch_dis: bool,
    pub cmc_max_rank: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_height: 64,
            image_width: 32,
            dim_style: 8,
            dim_illum: 4,
            dim_pose: 4,
            proto_channels: 64,
            dim_proto_embed: 32,
            dim_feature: 32,
            stem_width: 8,
            attr_width: 8,
            dis_width: 8,
            res_mid: 16,
            dec_width: 16,
            embed_width: 24,
            alpha_init: 0.5,
            lambda_cross: 50.0,
            lambda_same: 50.0,
            lambda_cycle: 50.0,
            lambda_code: 10.0,
            lambda_kl: 1.0,
            lambda_adv: 20.0,
            lambda_ce: 1.0,
            lambda_trip: 1.0,
            triplet_margin: 0.3,
            gen_lr: 1e-4,
            dis_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            hfl_lr: 1e-3,
            hfl_momentum: 0.9,
            grad_clip: 10.0,
            iterations: 2000,
            batch_pairs: 4,
            seed: 17,
            checkpoint_every: 1000,
            adv_mode: AdvMode::NonSaturating,
            sampling: SamplingMode::Alternate,
            feature_mode: FeatureMode::Combined,
            patch_dis: false,
            cmc_max_rank: 20,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident: $parse:ident / $fmt:ident),* $(,)?) => {
        const KEY_NAMES: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            fn set_key(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = $parse(value)?;
                        Ok(())
                    })*
                    _ => Err(String::new()), // caller maps to UnknownKey
                }
            }

            /// Canonical text form: one `key = value` line per field, in
            /// declaration order. Parsing it back yields an equal config.
            pub fn snapshot(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($key), $fmt(&self.$key));)*
                out
            }
        }
    };
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse().map_err(|e| format!("{e}"))
}
fn parse_u64(v: &str) -> Result<u64, String> {
    v.parse().map_err(|e| format!("{e}"))
}
fn parse_f64(v: &str) -> Result<f64, String> {
    v.parse().map_err(|e| format!("{e}"))
}
fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}
fn parse_adv(v: &str) -> Result<AdvMode, String> {
    match v {
        "nonsaturating" => Ok(AdvMode::NonSaturating),
        "minimax" => Ok(AdvMode::Minimax),
        _ => Err("expected nonsaturating or minimax".into()),
    }
}
fn parse_sampling(v: &str) -> Result<SamplingMode, String> {
    match v {
        "alternate" => Ok(SamplingMode::Alternate),
        "original" => Ok(SamplingMode::Original),
        _ => Err("expected alternate or original".into()),
    }
}
fn parse_feature(v: &str) -> Result<FeatureMode, String> {
    match v {
        "combined" => Ok(FeatureMode::Combined),
        "proto" => Ok(FeatureMode::Proto),
        "attr" => Ok(FeatureMode::Attr),
        _ => Err("expected combined, proto, or attr".into()),
    }
}

fn fmt_plain<T: std::fmt::Display>(v: &T) -> String {
    format!("{v}")
}
fn fmt_adv(v: &AdvMode) -> String {
    match v {
        AdvMode::NonSaturating => "nonsaturating".into(),
        AdvMode::Minimax => "minimax".into(),
    }
}
fn fmt_sampling(v: &SamplingMode) -> String {
    match v {
        SamplingMode::Alternate => "alternate".into(),
        SamplingMode::Original => "original".into(),
    }
}
fn fmt_feature(v: &FeatureMode) -> String {
    match v {
        FeatureMode::Combined => "combined".into(),
        FeatureMode::Proto => "proto".into(),
        FeatureMode::Attr => "attr".into(),
    }
}

config_keys! {
    image_height: parse_usize / fmt_plain,
    image_width: parse_usize / fmt_plain,
    dim_style: parse_usize / fmt_plain,
    dim_illum: parse_usize / fmt_plain,
    dim_pose: parse_usize / fmt_plain,
    proto_channels: parse_usize / fmt_plain,
    dim_proto_embed: parse_usize / fmt_plain,
    dim_feature: parse_usize / fmt_plain,
    stem_width: parse_usize / fmt_plain,
    attr_width: parse_usize / fmt_plain,
    dis_width: parse_usize / fmt_plain,
    res_mid: parse_usize / fmt_plain,
    dec_width: parse_usize / fmt_plain,
    embed_width: parse_usize / fmt_plain,
    alpha_init: parse_f64 / fmt_plain,
    lambda_cross: parse_f64 / fmt_plain,
    lambda_same: parse_f64 / fmt_plain,
    lambda_cycle: parse_f64 / fmt_plain,
    lambda_code: parse_f64 / fmt_plain,
    lambda_kl: parse_f64 / fmt_plain,
    lambda_adv: parse_f64 / fmt_plain,
    lambda_ce: parse_f64 / fmt_plain,
    lambda_trip: parse_f64 / fmt_plain,
    triplet_margin: parse_f64 / fmt_plain,
    gen_lr: parse_f64 / fmt_plain,
    dis_lr: parse_f64 / fmt_plain,
    adam_beta1: parse_f64 / fmt_plain,
    adam_beta2: parse_f64 / fmt_plain,
    hfl_lr: parse_f64 / fmt_plain,
    hfl_momentum: parse_f64 / fmt_plain,
    grad_clip: parse_f64 / fmt_plain,
    iterations: parse_u64 / fmt_plain,
    batch_pairs: parse_usize / fmt_plain,
    seed: parse_u64 / fmt_plain,
    checkpoint_every: parse_u64 / fmt_plain,
    adv_mode: parse_adv / fmt_adv,
    sampling: parse_sampling / fmt_sampling,
    feature_mode: parse_feature / fmt_feature,
    patch_dis: parse_bool / fmt_plain,
    cmc_max_rank: parse_usize / fmt_plain,
}

impl RunConfig {
    /// Parses the flat text format: one `key = value` per line, `#` starts a
    /// comment, blank lines are ignored. Unknown or repeated keys are errors;
    /// missing keys keep their defaults. The parsed config is validated.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: line_no, text: line.to_string() })?;
            let key = key.trim();
            let value = value.trim();
            if !KEY_NAMES.contains(&key) {
                return Err(ConfigError::UnknownKey { line: line_no, key: key.to_string() });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey { line: line_no, key: key.to_string() });
            }
            seen.push(key.to_string());
            cfg.set_key(key, value).map_err(|reason| ConfigError::BadValue {
                line: line_no,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Checks every field range; reports the first violated field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn fail(field: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid { field, reason: reason.into() })
        }
        if self.image_height < 8 || self.image_height % 4 != 0 {
            return fail("image_height", "must be >= 8 and divisible by 4 (two 2x stages)");
        }
        if self.image_width < 8 || self.image_width % 4 != 0 {
            return fail("image_width", "must be >= 8 and divisible by 4 (two 2x stages)");
        }
        let positive: [(&'static str, usize); 12] = [
            ("dim_style", self.dim_style),
            ("dim_illum", self.dim_illum),
            ("dim_pose", self.dim_pose),
            ("proto_channels", self.proto_channels),
            ("dim_proto_embed", self.dim_proto_embed),
            ("dim_feature", self.dim_feature),
            ("stem_width", self.stem_width),
            ("attr_width", self.attr_width),
            ("dis_width", self.dis_width),
            ("res_mid", self.res_mid),
            ("embed_width", self.embed_width),
            ("cmc_max_rank", self.cmc_max_rank),
        ];
        for (field, v) in positive {
            if v < 1 {
                return fail(field, "must be >= 1");
            }
        }
        if self.dec_width < 2 {
            return fail("dec_width", "must be >= 2 (the tail conv uses half of it)");
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return fail("alpha_init", "must lie in [0, 1]");
        }
        let weights: [(&'static str, f64); 9] = [
            ("lambda_cross", self.lambda_cross),
            ("lambda_same", self.lambda_same),
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_code", self.lambda_code),
            ("lambda_kl", self.lambda_kl),
            ("lambda_adv", self.lambda_adv),
            ("lambda_ce", self.lambda_ce),
            ("lambda_trip", self.lambda_trip),
            ("triplet_margin", self.triplet_margin),
        ];
        for (field, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return fail(field, "must be finite and >= 0");
            }
        }
        let rates: [(&'static str, f64); 3] =
            [("gen_lr", self.gen_lr), ("dis_lr", self.dis_lr), ("hfl_lr", self.hfl_lr)];
        for (field, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return fail(field, "must be finite and > 0");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return fail("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam_beta2", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.hfl_momentum) {
            return fail("hfl_momentum", "must lie in [0, 1)");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return fail("grad_clip", "must be finite and >= 0 (0 disables)");
        }
        if self.iterations < 1 {
            return fail("iterations", "must be >= 1");
        }
        if self.batch_pairs < 2 {
            return fail("batch_pairs", "must be >= 2 (triplet mining needs a negative identity)");
        }
        if self.checkpoint_every < 1 {
            return fail("checkpoint_every", "must be >= 1");
        }
        Ok(())
    }

    /// Spatial size of the prototype map (input halved twice).
    pub fn proto_spatial(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    /// Full attribute vector length `d_s + d_c + d_p`.
    pub fn dim_attr(&self) -> usize {
        self.dim_style + self.dim_illum + self.dim_pose
    }

    /// Identity-excluded vector length `d_c + d_p`.
    pub fn dim_excluded(&self) -> usize {
        self.dim_illum + self.dim_pose
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.iterations = 123;
        cfg.adv_mode = AdvMode::Minimax;
        cfg.feature_mode = FeatureMode::Proto;
        cfg.gen_lr = 5e-5;
        let text = cfg.snapshot();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_accepts_comments_and_blank_lines() {
        let cfg = RunConfig::parse(
            "# a comment\n\niterations = 5   # trailing comment\n  seed=99\n",
        )
        .unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.batch_pairs, RunConfig::default().batch_pairs);
    }

    #[test]
    fn parse_rejects_unknown_and_duplicate_keys() {
        let err = RunConfig::parse("not_a_key = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { .. }), "{err}");
        let err = RunConfig::parse("seed\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { .. }), "{err}");
        let err = RunConfig::parse("seed = banana\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }), "{err}");
    }

    #[test]
    fn validate_reports_first_violated_field() {
        let mut cfg = RunConfig::default();
        cfg.image_height = 62; // not divisible by 4
        cfg.batch_pairs = 1; // also invalid, but later in order
        let err = cfg.validate().unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "image_height"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn validate_rejects_single_pair_batches() {
        let mut cfg = RunConfig::default();
        cfg.batch_pairs = 1;
        let err = cfg.validate().unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "batch_pairs"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn derived_dims() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.proto_spatial(), (16, 8));
        assert_eq!(cfg.dim_attr(), 16);
        assert_eq!(cfg.dim_excluded(), 8);
    }
}
