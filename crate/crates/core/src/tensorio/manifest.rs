//! Directory format: one `manifest.json` index plus one raw little-endian
//! blob per volume.
//!
//! ```text
//! data/
//!   manifest.json
//!   s0000.image.f32
//!   s0000.label.u8
//!   ...
//! ```
//!
//! Images and probability maps are stored as `f32le`, label maps as `u8`.
//! A sample record may carry volumes beyond `image` and `label`; the
//! decomposition and mixing tools use this to emit their outputs in the same
//! format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Volume, VolumeKind};
use crate::{Error, Result};

pub const INDEX_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "wavecp-manifest";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::U8 => 1,
        }
    }

    fn for_kind(kind: VolumeKind) -> Self {
        match kind {
            VolumeKind::Label => Dtype::U8,
            _ => Dtype::F32Le,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Dtype::F32Le => "f32",
            Dtype::U8 => "u8",
        }
    }
}

/// Intensity handling applied to image volumes at load time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    /// Per-volume min-max scaling into `[0, 1]`.
    #[default]
    MinMax,
    /// Values are used exactly as stored.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRecord {
    pub path: String,
    pub dtype: Dtype,
    pub kind: VolumeKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub labeled: bool,
    /// Shape of the sample's image volume, `(C, H, W)` or `(C, D, H, W)`.
    pub shape: Vec<usize>,
    pub volumes: BTreeMap<String, BlobRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestIndex {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub spatial_rank: usize,
    #[serde(default)]
    pub intensity: Intensity,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn index_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    }
}

fn base_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Reads and parses the index file. `path` may name the directory or the
/// index file itself.
pub fn read_index(path: &Path) -> Result<ManifestIndex> {
    let file = index_path(path);
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let index: ManifestIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    if index.format != FORMAT_TAG {
        return Err(Error::Format(format!(
            "unexpected format tag `{}`",
            index.format
        )));
    }
    if index.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            index.version
        )));
    }
    if index.spatial_rank != 2 && index.spatial_rank != 3 {
        return Err(Error::Format(format!(
            "spatial rank must be 2 or 3, got {}",
            index.spatial_rank
        )));
    }
    Ok(index)
}

impl ManifestIndex {
    /// Loads one named volume of a sample record.
    pub fn load_volume(&self, dir: &Path, record: &SampleRecord, name: &str) -> Result<Volume> {
        let blob = record.volumes.get(name).ok_or_else(|| Error::Load {
            id: record.id.clone(),
            reason: format!("no `{name}` volume in record"),
        })?;
        let path = dir.join(&blob.path);
        let bytes = fs::read(&path).map_err(|e| Error::Load {
            id: record.id.clone(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let count: usize = blob.shape.iter().product();
        if bytes.len() != count * blob.dtype.size() {
            return Err(Error::Format(format!(
                "sample `{}` volume `{name}`: {} bytes, expected {} for shape {:?} {:?}",
                record.id,
                bytes.len(),
                count * blob.dtype.size(),
                blob.shape,
                blob.dtype
            )));
        }
        let data: Vec<f32> = match blob.dtype {
            Dtype::F32Le => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
        };
        let volume = Volume::new(blob.shape.clone(), blob.kind, data).map_err(|e| match e {
            Error::Shape(m) => Error::Format(format!("sample `{}`: {m}", record.id)),
            other => other,
        })?;
        if blob.kind == VolumeKind::Image && self.intensity == Intensity::MinMax {
            Ok(volume.min_max_normalized())
        } else {
            Ok(volume)
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Loads a dataset from a manifest directory.
///
/// Samples come back sorted by id. Image intensities are min-max scaled into
/// `[0, 1]` per volume unless the manifest declares `"intensity": "raw"`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let index = read_index(path)?;
    let dir = base_dir(path);
    let mut records: Vec<&SampleRecord> = index.samples.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let image = index.load_volume(&dir, record, "image")?;
        if image.shape() != record.shape.as_slice() {
            return Err(Error::Format(format!(
                "sample `{}`: image shape {:?} differs from record shape {:?}",
                record.id,
                image.shape(),
                record.shape
            )));
        }
        if image.spatial_rank() != index.spatial_rank {
            return Err(Error::Format(format!(
                "sample `{}`: spatial rank {} differs from manifest rank {}",
                record.id,
                image.spatial_rank(),
                index.spatial_rank
            )));
        }
        let label = if record.labeled {
            let label = index.load_volume(&dir, record, "label")?;
            label.check_labels_below(index.num_classes).map_err(|e| {
                Error::Validation(format!("sample `{}`: {e}", record.id))
            })?;
            Some(label)
        } else {
            None
        };
        samples.push(Sample {
            id: record.id.clone(),
            image,
            label,
        });
    }
    Dataset::new(samples, index.num_classes)
}

/// Incremental writer for manifest directories.
pub struct ManifestWriter {
    dir: PathBuf,
    index: ManifestIndex,
}

impl ManifestWriter {
    /// Creates `dir` if needed. Existing blobs with the same names are
    /// overwritten.
    pub fn create(
        dir: &Path,
        num_classes: usize,
        spatial_rank: usize,
        intensity: Intensity,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ManifestWriter {
            dir: dir.to_path_buf(),
            index: ManifestIndex {
                format: FORMAT_TAG.to_string(),
                version: FORMAT_VERSION,
                num_classes,
                spatial_rank,
                intensity,
                samples: Vec::new(),
                metadata: BTreeMap::new(),
            },
        })
    }

    pub fn set_metadata(&mut self, key: &str, value: serde_json::Value) {
        self.index.metadata.insert(key.to_string(), value);
    }

    /// Adds a sample whose volumes are written under `<id>.<name>.<ext>`.
    /// The first volume's shape becomes the record shape; `labeled` is true
    /// when a volume named `label` is present.
    pub fn add_sample(&mut self, id: &str, volumes: &[(&str, &Volume)]) -> Result<()> {
        let mut record = SampleRecord {
            id: id.to_string(),
            labeled: volumes.iter().any(|(n, _)| *n == "label"),
            shape: volumes
                .iter()
                .find(|(n, _)| *n == "image")
                .or(volumes.first())
                .map(|(_, v)| v.shape().to_vec())
                .unwrap_or_default(),
            volumes: BTreeMap::new(),
        };
        for (name, volume) in volumes {
            let dtype = Dtype::for_kind(volume.kind());
            let rel = format!("{id}.{name}.{}", dtype.extension());
            let bytes: Vec<u8> = match dtype {
                Dtype::F32Le => volume.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
                Dtype::U8 => volume.labels()?,
            };
            let path = self.dir.join(&rel);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            record.volumes.insert(
                name.to_string(),
                BlobRecord {
                    path: rel,
                    dtype,
                    kind: volume.kind(),
                    shape: volume.shape().to_vec(),
                },
            );
        }
        self.index.samples.push(record);
        Ok(())
    }

    pub fn finish(self) -> Result<ManifestIndex> {
        self.index.write(&self.dir)?;
        Ok(self.index)
    }
}

/// Writes every sample of `dataset` (image plus label where present).
pub fn save_dataset(dataset: &Dataset, dir: &Path, intensity: Intensity) -> Result<()> {
    let rank = dataset.spatial_rank().unwrap_or(2);
    let mut writer = ManifestWriter::create(dir, dataset.num_classes(), rank, intensity)?;
    for s in dataset.samples() {
        let mut vols: Vec<(&str, &Volume)> = vec![("image", &s.image)];
        if let Some(l) = &s.label {
            vols.push(("label", l));
        }
        writer.add_sample(&s.id, &vols)?;
    }
    writer.finish()?;
    Ok(())
}
