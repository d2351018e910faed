//! Run configuration and context manifests.

use std::path::{Path, PathBuf};

use naicl_core::context::{ContextPair, ContextSet};
use naicl_core::pipeline::TaskKind;
use naicl_core::schedule::DEFAULT_OVERLAP;
use naicl_core::unet::UNetConfig;
use naicl_core::volume::load_mv3d;
use naicl_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{at_path, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub target: Option<PathBuf>,
    pub context_manifest: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Everything one run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub patch_edge: usize,
    pub blocks_per_axis: usize,
    pub proj_width: usize,
    /// Defaults to every stage.
    pub encoder_fusion: Option<Vec<usize>>,
    /// Defaults to every stage.
    pub decoder_fusion: Option<Vec<usize>>,
    pub overlap_fraction: f64,
    pub task_kind: TaskKind,
    pub na_icl_enabled: bool,
    pub seed: u64,
    pub stub_mode: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            stages: u.stages,
            base_channels: u.base_channels,
            patch_edge: u.patch_edge,
            blocks_per_axis: u.blocks_per_axis,
            proj_width: u.proj_width,
            encoder_fusion: None,
            decoder_fusion: None,
            overlap_fraction: DEFAULT_OVERLAP,
            task_kind: TaskKind::Segmentation,
            na_icl_enabled: true,
            seed: 0,
            stub_mode: false,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn unet(&self) -> UNetConfig {
        let all: Vec<usize> = (1..=self.stages).collect();
        UNetConfig {
            stages: self.stages,
            base_channels: self.base_channels,
            patch_edge: self.patch_edge,
            blocks_per_axis: self.blocks_per_axis,
            proj_width: self.proj_width,
            encoder_fusion: self.encoder_fusion.clone().unwrap_or_else(|| all.clone()),
            decoder_fusion: self.decoder_fusion.clone().unwrap_or(all),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!("overlap_fraction: {} outside [0, 1)", self.overlap_fraction)).into());
        }
        self.unet().validate()?;
        Ok(())
    }

    /// Overlays the keys present in the JSON file at `path` on top of `self`.
    pub fn overlay_file(&self, path: &Path) -> CliResult<Self> {
        let text = at_path(path, std::fs::read_to_string(path).map_err(Error::from))?;
        let json_err = |source| CliError::Json { path: path.display().to_string(), source };
        let file: Value = serde_json::from_str(&text).map_err(json_err)?;
        // Surface unknown keys and type errors against the file alone.
        RunConfig::deserialize(&file).map_err(json_err)?;
        let mut merged = serde_json::to_value(self).expect("plain data");
        merge(&mut merged, file);
        serde_json::from_value(merged).map_err(json_err)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// `{"pairs": [{"image": ..., "label": ...}]}`; relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextManifest {
    pub pairs: Vec<ManifestEntry>,
}

impl ContextManifest {
    pub fn load(path: &Path) -> CliResult<ContextSet> {
        let text = at_path(path, std::fs::read_to_string(path).map_err(Error::from))?;
        let manifest: ContextManifest =
            serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let pairs = manifest
            .pairs
            .iter()
            .map(|e| {
                let (ip, lp) = (dir.join(&e.image), dir.join(&e.label));
                Ok(ContextPair::new(at_path(&ip, load_mv3d(&ip))?, at_path(&lp, load_mv3d(&lp))?)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(ContextSet::new(pairs)?)
    }
}
