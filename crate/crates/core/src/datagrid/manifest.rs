use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthScene;
use super::{
    quantize_precip, read_grid, read_labels, stack_modalities, write_grid, ChannelInfo, ChannelStats,
    GridStack, LabelGrid, LpaScheme,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub modality: String,
    pub month: u32,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
}

/// JSON description of a dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub region: String,
    pub height: usize,
    pub width: usize,
    pub scheme: LpaScheme,
    /// Modality-major, month-minor.
    pub modalities: Vec<ModalityEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.scheme.validate()?;
        if m.modalities.is_empty() {
            return Err(Error::invalid(format!("{}: no modalities listed", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn channel_table(&self) -> Vec<ChannelInfo> {
        self.modalities
            .iter()
            .map(|m| ChannelInfo {
                modality: m.modality.clone(),
                month: m.month,
            })
            .collect()
    }

    /// Writes every grid of `scene` plus `manifest.json` into `dir`.
    pub fn write_synth(scene: &SynthScene, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut modalities = Vec::with_capacity(scene.modalities.len());
        for (name, month, grid) in &scene.modalities {
            let file = format!("{name}_m{month:02}.mgrid");
            write_grid(grid, dir.join(&file))?;
            modalities.push(ModalityEntry {
                modality: name.clone(),
                month: *month,
                path: file,
            });
        }
        write_grid(&scene.rain, dir.join("rain.mgrid"))?;
        let m = Manifest {
            region: scene.scheme.region.clone(),
            height: scene.rain.height,
            width: scene.rain.width,
            scheme: scene.scheme.clone(),
            modalities,
            rain: Some("rain.mgrid".into()),
            labels: None,
            normalization: None,
        };
        m.save(dir.join("manifest.json"))?;
        Ok(m)
    }
}

/// A manifest with its grids loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base: PathBuf,
    pub stack: GridStack,
    pub labels: Option<LabelGrid>,
}

impl Dataset {
    /// Loads the stack and the targets: the label file when it exists,
    /// otherwise the quantized rainfall grid.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let grids = manifest
            .modalities
            .iter()
            .map(|m| read_grid(base.join(&m.path)))
            .collect::<Result<Vec<_>>>()?;
        let list: Vec<_> = manifest
            .modalities
            .iter()
            .zip(&grids)
            .map(|(m, g)| (m.modality.clone(), m.month, g))
            .collect();
        let stack = stack_modalities(&list)?;
        if stack.height != manifest.height || stack.width != manifest.width {
            return Err(Error::invalid(format!(
                "manifest declares {}x{}, grids are {}x{}",
                manifest.height, manifest.width, stack.height, stack.width
            )));
        }

        let labels = match (&manifest.labels, &manifest.rain) {
            (Some(p), _) if base.join(p).exists() => Some(read_labels(base.join(p))?),
            (_, Some(r)) => Some(quantize_precip(&read_grid(base.join(r))?, &manifest.scheme)?),
            _ => None,
        };
        if let Some(l) = &labels {
            if l.num_classes != manifest.scheme.num_classes() {
                return Err(Error::invalid(format!(
                    "labels have {} classes, scheme {:?} has {}",
                    l.num_classes,
                    manifest.scheme.region,
                    manifest.scheme.num_classes()
                )));
            }
            if l.height != stack.height || l.width != stack.width {
                return Err(Error::invalid(format!(
                    "labels are {}x{}, grids are {}x{}",
                    l.height, l.width, stack.height, stack.width
                )));
            }
        }
        Ok(Self {
            manifest,
            base,
            stack,
            labels,
        })
    }

    pub fn require_labels(&self) -> Result<&LabelGrid> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has neither a label file nor a rainfall grid"))
    }
}
