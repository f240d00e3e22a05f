//! On-disk dataset layout: one volume per channel, a region mask and a
//! `dataset.json` index. Raw datasets are pushed through the preprocessing
//! pipeline on load; normalized ones are taken as stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    default_bindings, normalize_all, sanitize, soft_tissue_mask, NormalizationBinding,
    CANONICAL_FEATURES, TARGET_CHANNEL,
};
use crate::volumes::{
    bounding_box_crop, intersect_valid_mask, load_mask, load_volume, save_mask, save_volume,
    MultiChannelVolume, RegionMask,
};

pub const DATASET_INDEX: &str = "dataset.json";
pub const MASK_NAME: &str = "mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    /// Channel names; each is stored as `<name>.json` + `<name>.raw`.
    pub features: Vec<String>,
    pub target: String,
    pub mask: String,
    /// Optional CT channel in HU used only for the soft-tissue mask.
    #[serde(default)]
    pub ct: Option<String>,
    /// Channels already sanitized, cropped and normalized.
    pub normalized: bool,
    /// Raw-unit size of one normalized target unit, kept so a normalized
    /// dataset can still report raw-scale errors.
    #[serde(default = "unit_scale")]
    pub target_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Feature channels and the target.
    pub volumes: MultiChannelVolume,
    pub mask: RegionMask,
    pub target: String,
    /// Multiplies a normalized target residual into raw units; 1 when the
    /// target was not normalized.
    pub target_scale: f64,
}

impl Dataset {
    pub fn feature_names(&self) -> Vec<&str> {
        self.volumes
            .names()
            .into_iter()
            .filter(|n| *n != self.target)
            .collect()
    }
}

fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.clone(),
        msg: e.to_string(),
    })
}

/// Loads a dataset directory. Raw data is sanitized, restricted to voxels
/// that are labelled valid, non-zero in every channel and (with a CT
/// channel) soft tissue, cropped to that region and normalized with
/// `bindings`.
pub fn load_dataset(dir: &Path, bindings: &[NormalizationBinding]) -> Result<Dataset> {
    let index = read_index(dir)?;
    let mut channels = Vec::with_capacity(index.features.len() + 1);
    for name in index.features.iter().chain(std::iter::once(&index.target)) {
        channels.push(load_volume(dir.join(name))?.renamed(name.clone()));
    }
    let volumes = MultiChannelVolume::new(channels)?;
    let mut mask = load_mask(dir.join(&index.mask))?;
    if mask.grid != volumes.grid {
        return Err(Error::DimensionMismatch("mask grid differs from channel grid".into()));
    }
    if index.normalized {
        if let Some(i) = volumes.channels().iter().find_map(|c| c.first_non_finite()) {
            return Err(Error::Unsanitized(i));
        }
        return Ok(Dataset {
            volumes,
            mask,
            target: index.target,
            target_scale: index.target_scale,
        });
    }

    let clean = MultiChannelVolume::new(volumes.channels().iter().map(sanitize).collect())?;
    let nonzero = intersect_valid_mask(&clean)?;
    let soft = match &index.ct {
        Some(ct) => Some(soft_tissue_mask(&sanitize(&load_volume(dir.join(ct))?))),
        None => None,
    };
    for i in 0..mask.valid.len() {
        mask.valid[i] &= nonzero[i] && soft.as_ref().map_or(true, |s| s[i]);
    }
    let (cropped, mask) = bounding_box_crop(&clean, &mask)?;
    let volumes = normalize_all(&cropped, bindings, &mask.valid)?;
    let target_scale = match bindings.iter().find(|b| b.channel == index.target) {
        Some(b) => b.rule.residual_scale(cropped.require(&index.target)?, &mask.valid)?,
        None => 1.0,
    };
    Ok(Dataset {
        volumes,
        mask,
        target: index.target,
        target_scale,
    })
}

pub fn load_dataset_default(dir: &Path) -> Result<Dataset> {
    load_dataset(dir, &default_bindings())
}

/// Writes every channel, the mask and a `normalized: true` index.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ch in data.volumes.channels() {
        save_volume(ch, dir.join(&ch.name))?;
    }
    save_mask(&data.mask, dir.join(MASK_NAME))?;
    let index = DatasetIndex {
        features: data.feature_names().iter().map(|s| s.to_string()).collect(),
        target: data.target.clone(),
        mask: MASK_NAME.into(),
        ct: None,
        normalized: true,
        target_scale: data.target_scale,
    };
    let path = dir.join(DATASET_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Index for a raw dataset holding the canonical channels plus the target.
pub fn raw_index(ct: Option<&str>) -> DatasetIndex {
    DatasetIndex {
        features: CANONICAL_FEATURES.iter().map(|s| s.to_string()).collect(),
        target: TARGET_CHANNEL.into(),
        mask: MASK_NAME.into(),
        ct: ct.map(str::to_string),
        normalized: false,
        target_scale: 1.0,
    }
}

pub fn write_index(dir: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DATASET_INDEX);
    fs::write(&path, serde_json::to_string_pretty(index)? + "\n").map_err(|e| Error::io(&path, e))
}
