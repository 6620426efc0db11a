//! TOML run configuration with `[ensemble]`, `[schedule]`, `[attack]` and
//! `[judge]` sections. Every key is optional except `judge.model` when a
//! `[judge]` section is present; missing keys take the attack defaults.
//!
//! ```toml
//! [ensemble]
//! image_size = 64
//!
//! [[ensemble.encoder]]
//! patch_size = 8
//! depth = 4
//! embed_dim = 64
//! num_heads = 4
//! seed = 1
//!
//! [schedule]
//! iterations = 300
//! stages = 3
//!
//! [attack]
//! epsilon = "16/255"
//! eta = "1/255"
//! ranks = [1, 3, 5]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use crate::alignment::{LossWeights, PatchSelection};
use crate::attack::{AttackConfig, UpdateRule};
use crate::error::{Error, Result};
use crate::judge::JudgeSettings;
use crate::resolution::Interpolation;
use crate::surrogate::{build_ensemble, EncoderConfig, Ensemble};

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// A real number written either as a TOML number or as a `"a/b"` string.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Fraction(pub f64);

impl Fraction {
    pub fn parse(text: &str) -> std::result::Result<f64, String> {
        let text = text.trim();
        let value = match text.split_once('/') {
            Some((a, b)) => {
                let num: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {text:?}"))?;
                let den: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {text:?}"))?;
                if den == 0.0 {
                    return Err(format!("zero denominator in {text:?}"));
                }
                num / den
            }
            None => text.parse().map_err(|_| format!("not a number: {text:?}"))?,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(format!("not finite: {text:?}"))
        }
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Fraction;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a fraction string such as \"16/255\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Fraction, E> {
                Ok(Fraction(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Fraction, E> {
                Ok(Fraction(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Fraction, E> {
                Ok(Fraction(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Fraction, E> {
                Fraction::parse(v).map(Fraction).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Encoder entry without `image_size`, which comes from `[ensemble]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn to_config(&self, image_size: usize) -> EncoderConfig {
        let mut c = EncoderConfig::new(image_size, self.patch_size, self.depth, self.embed_dim, self.num_heads, self.seed);
        if let Some(r) = self.mlp_ratio {
            c.mlp_ratio = r;
        }
        if let Some(s) = self.init_std {
            c.init_std = s;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub image_size: usize,
    /// Empty means the three-member desk ensemble.
    #[serde(rename = "encoder")]
    pub encoders: Vec<EncoderSpec>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { image_size: DEFAULT_IMAGE_SIZE, encoders: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub iterations: usize,
    pub stages: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolutions: Option<Vec<usize>>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        ScheduleSection { iterations: a.iterations, stages: a.stages, resolutions: a.resolutions }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: Fraction,
    pub eta: Fraction,
    pub ranks: Vec<usize>,
    pub gamma: Fraction,
    pub lambda_cls: f64,
    pub lambda_patch: f64,
    pub crop_enabled: bool,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub seed: u64,
    pub update: UpdateRule,
    pub patch_selection: PatchSelection,
    pub layer_selection: bool,
    pub downsample: Interpolation,
    pub upsample: Interpolation,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackSection {
            epsilon: Fraction(a.epsilon),
            eta: Fraction(a.eta),
            ranks: a.ranks,
            gamma: Fraction(a.gamma),
            lambda_cls: a.weights.lambda_cls,
            lambda_patch: a.weights.lambda_patch,
            crop_enabled: a.crop_enabled,
            crop_scale_min: a.crop_scale_range.0,
            crop_scale_max: a.crop_scale_range.1,
            seed: a.seed,
            update: a.update,
            patch_selection: a.patch_selection,
            layer_selection: a.layer_selection,
            downsample: a.downsample,
            upsample: a.upsample,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ensemble: EnsembleSection,
    pub schedule: ScheduleSection,
    pub attack: AttackSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeSettings>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn parse_error(path: &Path, text: &str, err: &toml::de::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: err.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: err.message().trim().to_string(),
    }
}

impl RunConfig {
    /// Parses TOML text; `path` only labels errors.
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_with_overrides(text, path, &[])
    }

    /// Parses TOML text, then applies `section.key = value` overrides in order.
    pub fn parse_with_overrides(text: &str, path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let parsed: RunConfig = toml::from_str(text).map_err(|e| parse_error(path, text, &e))?;
        if overrides.is_empty() {
            parsed.validate()?;
            return Ok(parsed);
        }
        let mut table: toml::Table = text.parse().map_err(|e| parse_error(path, text, &e))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg = RunConfig::deserialize(table).map_err(|e| Error::Config(format!("after overrides: {}", e.message().trim())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, path, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn encoder_configs(&self) -> Vec<EncoderConfig> {
        let h = self.ensemble.image_size;
        if self.ensemble.encoders.is_empty() {
            Ensemble::desk_default_configs(h)
        } else {
            self.ensemble.encoders.iter().map(|s| s.to_config(h)).collect()
        }
    }

    pub fn build_ensemble(&self) -> Result<Ensemble> {
        build_ensemble(&self.encoder_configs())
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            epsilon: a.epsilon.0,
            eta: a.eta.0,
            iterations: self.schedule.iterations,
            stages: self.schedule.stages,
            resolutions: self.schedule.resolutions.clone(),
            ranks: a.ranks.clone(),
            gamma: a.gamma.0,
            weights: LossWeights { lambda_cls: a.lambda_cls, lambda_patch: a.lambda_patch },
            crop_enabled: a.crop_enabled,
            crop_scale_range: (a.crop_scale_min, a.crop_scale_max),
            seed: a.seed,
            update: a.update,
            patch_selection: a.patch_selection,
            layer_selection: a.layer_selection,
            downsample: a.downsample,
            upsample: a.upsample,
        }
    }

    /// Checks everything that can be checked without loading images.
    pub fn validate(&self) -> Result<()> {
        for c in self.encoder_configs() {
            c.validate()?;
        }
        let attack = self.attack_config();
        attack.validate()?;
        attack.schedule(self.ensemble.image_size)?;
        if let Some(j) = &self.judge {
            j.validate()?;
        }
        Ok(())
    }
}

/// Sets `section.key` (or `key` at top level) in a TOML table. The value is
/// read as a TOML literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, sections) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {s:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

/// Resolves a path relative to the directory of `base_file`.
pub fn resolve_relative(base_file: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match base_file.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", "x.toml").unwrap();
        assert_eq!(c.attack_config(), AttackConfig::default());
        assert_eq!(c.encoder_configs(), Ensemble::desk_default_configs(64));
        assert!(c.judge.is_none());
    }

    #[test]
    fn fractions_and_sections() {
        let text = "[ensemble]\nimage_size = 32\n[[ensemble.encoder]]\npatch_size = 8\ndepth = 2\nembed_dim = 8\nnum_heads = 2\nseed = 9\n\
                    [schedule]\niterations = 10\nstages = 2\n[attack]\nepsilon = \"8/255\"\neta = 0.002\nupdate = \"literal_ascent\"\n";
        let c = RunConfig::parse(text, "x.toml").unwrap();
        let a = c.attack_config();
        assert_eq!(a.epsilon, 8.0 / 255.0);
        assert_eq!(a.eta, 0.002);
        assert_eq!(a.update, UpdateRule::LiteralAscent);
        assert_eq!(a.schedule(32).unwrap().resolutions(), &[16, 32]);
        assert_eq!(c.encoder_configs(), vec![EncoderConfig::new(32, 8, 2, 8, 2, 9)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[attack]\ngamma = 0.5\nbogus = 1\n";
        match RunConfig::parse(text, "run.toml") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, PathBuf::from("run.toml"));
            }
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("[schedule]\n\niterations = \"many\"\n", "r.toml") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("[attack\n", "r.toml"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("[attack]\ngamma = 0\n", "r.toml"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_replace_keys() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = RunConfig::parse_with_overrides(
            "[attack]\ngamma = 0.5\n",
            "x.toml",
            &[o("attack.gamma", "1.0"), o("attack.epsilon", "8/255"), o("schedule.iterations", "12"), o("attack.crop_enabled", "false")],
        )
        .unwrap();
        let a = c.attack_config();
        assert_eq!(a.gamma, 1.0);
        assert_eq!(a.epsilon, 8.0 / 255.0);
        assert_eq!(a.iterations, 12);
        assert!(!a.crop_enabled);
        assert!(RunConfig::parse_with_overrides("", "x", &[o("attack.nope", "1")]).is_err());
        assert!(RunConfig::parse_with_overrides("", "x", &[o("attack..x", "1")]).is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let c = RunConfig::parse("[attack]\nseed = 4\n", "x").unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml(), "y").unwrap(), c);
    }

    #[test]
    fn fraction_parse() {
        assert_eq!(Fraction::parse("16/255").unwrap(), 16.0 / 255.0);
        assert_eq!(Fraction::parse(" 0.25 ").unwrap(), 0.25);
        assert!(Fraction::parse("1/0").is_err());
        assert!(Fraction::parse("x").is_err());
    }
}
