//! Dataset manifests: one JSON record per line, each enough to regenerate
//! its pair.

use std::fmt::Write as _;
use std::path::Path;

use ncreg_core::{generate_pair, LabeledPair, NoisePreset, PairSpec, ShapeKind};
use serde::{Deserialize, Serialize};

use crate::config::{noise_from_name, toml_error};
use crate::error::{read_text, write_text, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: usize,
    pub shape: String,
    pub points: usize,
    pub rotation_deg: [f64; 2],
    pub translation: [f64; 2],
    pub crop: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn from_spec(id: usize, spec: &PairSpec) -> Self {
        Self {
            id,
            shape: spec.shape.name().into(),
            points: spec.points,
            rotation_deg: spec.rotation_deg,
            translation: spec.translation,
            crop: spec.crop,
            noise_sigma: spec.noise_sigma,
            noise_clip: spec.noise_clip,
            seed: spec.seed,
        }
    }

    pub fn spec(&self) -> Result<PairSpec, String> {
        let shape = ShapeKind::from_name(&self.shape).ok_or_else(|| format!("unknown shape `{}`", self.shape))?;
        let spec = PairSpec {
            shape,
            points: self.points,
            rotation_deg: self.rotation_deg,
            translation: self.translation,
            crop: self.crop,
            noise_sigma: self.noise_sigma,
            noise_clip: self.noise_clip,
            seed: self.seed,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn generate(&self) -> CliResult<LabeledPair> {
        let spec = self.spec().map_err(CliError::Config)?;
        Ok(generate_pair(&spec)?)
    }
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
    }
    out
}

pub fn parse_manifest(text: &str, origin: &Path) -> CliResult<Vec<ManifestRecord>> {
    let mut records: Vec<ManifestRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| CliError::parse(origin, i + 1, e.to_string()))?;
        rec.spec().map_err(|m| CliError::parse(origin, i + 1, m))?;
        if records.iter().any(|r| r.id == rec.id) {
            return Err(CliError::parse(origin, i + 1, format!("duplicate pair id {}", rec.id)));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::parse(origin, 0, "manifest lists no pairs"));
    }
    records.sort_by_key(|r| r.id);
    Ok(records)
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestRecord>> {
    parse_manifest(&read_text(path)?, path)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> CliResult<()> {
    write_text(path, &manifest_to_string(records))
}

/// Input of `ncreg gen`: one pair description repeated `count` times with
/// seeds `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub count: usize,
    pub shape: String,
    pub points: usize,
    pub rotation_deg: [f64; 2],
    pub translation: [f64; 2],
    pub crop: f64,
    /// Preset name; explicit `noise_sigma`/`noise_clip` override it.
    pub noise: Option<String>,
    pub noise_sigma: Option<f64>,
    pub noise_clip: Option<f64>,
    pub seed: u64,
    /// Id of the first record.
    pub first_id: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        let p = PairSpec::default();
        Self {
            count: 1,
            shape: p.shape.name().into(),
            points: p.points,
            rotation_deg: p.rotation_deg,
            translation: p.translation,
            crop: p.crop,
            noise: None,
            noise_sigma: None,
            noise_clip: None,
            seed: p.seed,
            first_id: 0,
        }
    }
}

impl GenSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(toml_error(text, &e)))
    }

    /// Expands into manifest records; `fallback` is the preset used when the
    /// spec names none.
    pub fn records(&self, fallback: NoisePreset) -> CliResult<Vec<ManifestRecord>> {
        if self.count == 0 {
            return Err(CliError::Config("count must be positive".into()));
        }
        let preset = match &self.noise {
            Some(name) => noise_from_name(name)
                .ok_or_else(|| CliError::Config(format!("unknown noise preset `{name}`")))?,
            None => fallback,
        };
        let (sigma, clip) = preset.sigma_clip();
        let shape = ShapeKind::from_name(&self.shape)
            .ok_or_else(|| CliError::Config(format!("unknown shape `{}`", self.shape)))?;
        let base = PairSpec {
            shape,
            points: self.points,
            rotation_deg: self.rotation_deg,
            translation: self.translation,
            crop: self.crop,
            noise_sigma: self.noise_sigma.unwrap_or(sigma),
            noise_clip: self.noise_clip.unwrap_or(clip),
            seed: self.seed,
        };
        base.validate()?;
        Ok(base
            .series(self.count)
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestRecord::from_spec(self.first_id + i, s))
            .collect())
    }
}
