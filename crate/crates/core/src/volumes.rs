//! Grid-aligned volumes, region masks and masked flattening.
//!
//! All volumes share one linear voxel order, x fastest:
//! `index = z * ny * nx + y * nx + x`.
//!
//! On disk a volume is a pair of files: `<name>.json` holding the header and
//! `<name>.raw` holding little-endian samples. Scalar channels are stored as
//! 32-bit floats, label and validity masks as one byte per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        let grid = GridSpec {
            dims,
            spacing_mm,
            origin_mm,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        z * self.dims[1] * self.dims[0] + y * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    pub name: String,
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl ChannelVolume {
    pub fn new(name: impl Into<String>, grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidParameter("channel name is empty".into()));
        }
        grid.validate()?;
        if data.len() != grid.voxel_count() {
            return Err(Error::LengthMismatch {
                expected: grid.voxel_count(),
                found: data.len(),
            });
        }
        Ok(ChannelVolume { name, grid, data })
    }

    pub fn filled(name: impl Into<String>, grid: GridSpec, value: f64) -> Result<Self> {
        Self::new(name, grid, vec![value; grid.voxel_count()])
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    pub grid: GridSpec,
    channels: Vec<ChannelVolume>,
}

impl MultiChannelVolume {
    pub fn new(channels: Vec<ChannelVolume>) -> Result<Self> {
        let grid = channels
            .first()
            .map(|c| c.grid)
            .ok_or_else(|| Error::EmptySelection("no channels".into()))?;
        let mut mcv = MultiChannelVolume {
            grid,
            channels: Vec::with_capacity(channels.len()),
        };
        for ch in channels {
            mcv.push(ch)?;
        }
        Ok(mcv)
    }

    pub fn push(&mut self, channel: ChannelVolume) -> Result<()> {
        if channel.grid != self.grid {
            return Err(Error::DimensionMismatch(format!(
                "channel {:?} grid differs from volume grid",
                channel.name
            )));
        }
        if self.channel(&channel.name).is_some() {
            return Err(Error::InvalidParameter(format!(
                "duplicate channel name {:?}",
                channel.name
            )));
        }
        self.channels.push(channel);
        Ok(())
    }

    /// Replaces the channel of the same name, or appends it.
    pub fn replace(&mut self, channel: ChannelVolume) -> Result<()> {
        if channel.grid != self.grid {
            return Err(Error::DimensionMismatch(format!(
                "channel {:?} grid differs from volume grid",
                channel.name
            )));
        }
        match self.channels.iter_mut().find(|c| c.name == channel.name) {
            Some(slot) => *slot = channel,
            None => self.channels.push(channel),
        }
        Ok(())
    }

    pub fn channels(&self) -> &[ChannelVolume] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelVolume> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ChannelVolume> {
        self.channel(name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn into_channels(self) -> Vec<ChannelVolume> {
        self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Background = 0,
    Surrounding = 1,
    Prostate = 2,
    Tumour = 3,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Surrounding),
            2 => Some(Label::Prostate),
            3 => Some(Label::Tumour),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub grid: GridSpec,
    pub labels: Vec<Label>,
    pub valid: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: GridSpec, labels: Vec<Label>, valid: Vec<bool>) -> Result<Self> {
        let n = grid.voxel_count();
        for len in [labels.len(), valid.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        Ok(RegionMask {
            grid,
            labels,
            valid,
        })
    }

    /// Every voxel valid, labelled `label`.
    pub fn uniform(grid: GridSpec, label: Label) -> Self {
        let n = grid.voxel_count();
        RegionMask {
            grid,
            labels: vec![label; n],
            valid: vec![true; n],
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels
            .iter()
            .zip(&self.valid)
            .filter(|(&l, &v)| v && l == label)
            .count()
    }
}

/// Masked voxel feature vectors, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    index_map: Vec<usize>,
    feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        index_map: Vec<usize>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if index_map.len() != rows {
            return Err(Error::LengthMismatch {
                expected: rows,
                found: index_map.len(),
            });
        }
        if feature_names.len() != cols {
            return Err(Error::LengthMismatch {
                expected: cols,
                found: feature_names.len(),
            });
        }
        if index_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "index map must be strictly increasing".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Unsanitized(index_map[pos / cols.max(1)]));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            values,
            index_map,
            feature_names,
        })
    }

    /// Matrix without a voxel map; rows are indexed 0..rows.
    pub fn from_rows(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let names = (0..cols).map(|j| format!("f{j}")).collect();
        Self::new(rows, cols, values, (0..rows).collect(), names)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows picked by position, in the order given. The index map follows
    /// the picked rows, so callers that need it increasing must pass
    /// increasing positions.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
            index_map: rows.iter().map(|&r| self.index_map[r]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Columns picked by position, in the order given.
    pub fn select_cols(&self, cols: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        FeatureMatrix {
            rows: self.rows,
            cols: cols.len(),
            values,
            index_map: self.index_map.clone(),
            feature_names: cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    order: String,
}

const ORDER: &str = "x-fastest";

/// `foo`, `foo.json` and `foo.raw` all name the pair (`foo.json`, `foo.raw`).
pub fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = base.clone().into_os_string();
    header.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

fn read_header(path: &Path, expected_dtype: &str) -> Result<GridSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if header.dtype != "f32" && header.dtype != "u8" {
        return Err(Error::UnknownDtype(header.dtype));
    }
    if header.dtype != expected_dtype {
        return Err(Error::Header {
            path: path.to_path_buf(),
            msg: format!("expected dtype {expected_dtype}, found {}", header.dtype),
        });
    }
    if header.order != ORDER {
        return Err(Error::Header {
            path: path.to_path_buf(),
            msg: format!("unsupported order {:?}", header.order),
        });
    }
    GridSpec::new(header.dims, header.spacing_mm, header.origin_mm)
}

fn write_header(path: &Path, grid: &GridSpec, dtype: &str) -> Result<()> {
    let header = VolumeHeader {
        dims: grid.dims,
        spacing_mm: grid.spacing_mm,
        origin_mm: grid.origin_mm,
        dtype: dtype.to_string(),
        order: ORDER.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))
        }
        _ => Ok(()),
    }
}

fn channel_name(path: &Path) -> String {
    let (header, _) = pair_paths(path);
    header
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("channel")
        .to_string()
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<ChannelVolume> {
    let path = path.as_ref();
    let (header_path, raw_path) = pair_paths(path);
    let grid = read_header(&header_path, "f32")?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = grid.voxel_count();
    if bytes.len() != 4 * n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ChannelVolume::new(channel_name(path), grid, data)
}

/// Writes the header/raw pair. Values are narrowed to 32-bit floats.
pub fn save_volume(vol: &ChannelVolume, path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = vol.first_non_finite() {
        return Err(Error::Unsanitized(i));
    }
    let (header_path, raw_path) = pair_paths(path.as_ref());
    ensure_parent(&header_path)?;
    write_header(&header_path, &vol.grid, "f32")?;
    let mut bytes = Vec::with_capacity(4 * vol.data.len());
    for &v in &vol.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

fn validity_path(path: &Path) -> PathBuf {
    let (header, _) = pair_paths(path);
    let stem = header.with_extension("");
    let mut name = stem.into_os_string();
    name.push("_valid");
    name.into()
}

fn write_bytes_volume(path: &Path, grid: &GridSpec, bytes: &[u8]) -> Result<()> {
    let (header_path, raw_path) = pair_paths(path);
    ensure_parent(&header_path)?;
    write_header(&header_path, grid, "u8")?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

fn read_bytes_volume(path: &Path) -> Result<(GridSpec, Vec<u8>)> {
    let (header_path, raw_path) = pair_paths(path);
    let grid = read_header(&header_path, "u8")?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != grid.voxel_count() {
        return Err(Error::LengthMismatch {
            expected: grid.voxel_count(),
            found: bytes.len(),
        });
    }
    Ok((grid, bytes))
}

/// Writes labels to `<name>` and validity to `<name>_valid`.
pub fn save_mask(mask: &RegionMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let labels: Vec<u8> = mask.labels.iter().map(|l| l.code()).collect();
    write_bytes_volume(path, &mask.grid, &labels)?;
    let valid: Vec<u8> = mask.valid.iter().map(|&v| v as u8).collect();
    write_bytes_volume(&validity_path(path), &mask.grid, &valid)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let (grid, label_bytes) = read_bytes_volume(path)?;
    let labels = label_bytes
        .iter()
        .map(|&b| {
            Label::from_code(b)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown label code {b}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (vgrid, valid_bytes) = read_bytes_volume(&validity_path(path))?;
    if vgrid != grid {
        return Err(Error::DimensionMismatch(
            "label and validity volumes differ in grid".into(),
        ));
    }
    let valid = valid_bytes.iter().map(|&b| b != 0).collect();
    RegionMask::new(grid, labels, valid)
}

/// Voxels where every channel is non-zero.
pub fn intersect_valid_mask(mcv: &MultiChannelVolume) -> Result<Vec<bool>> {
    let first = mcv
        .channels()
        .first()
        .ok_or_else(|| Error::EmptySelection("no channels".into()))?;
    let mut valid: Vec<bool> = first.data.iter().map(|&v| v != 0.0).collect();
    for ch in &mcv.channels()[1..] {
        for (ok, &v) in valid.iter_mut().zip(&ch.data) {
            *ok &= v != 0.0;
        }
    }
    Ok(valid)
}

/// Inclusive voxel bounds `(lo, hi)` of the valid region.
pub fn valid_bounds(mask: &RegionMask) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in mask.valid.iter().enumerate().filter(|(_, &v)| v) {
        any = true;
        let c = mask.grid.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    any.then_some((lo, hi))
}

fn crop_indices(grid: &GridSpec, lo: [usize; 3], hi: [usize; 3]) -> Vec<usize> {
    let mut idx = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                idx.push(grid.linear_index(x, y, z));
            }
        }
    }
    idx
}

/// Crops every channel and the mask to the tight box around valid voxels.
pub fn bounding_box_crop(
    mcv: &MultiChannelVolume,
    mask: &RegionMask,
) -> Result<(MultiChannelVolume, RegionMask)> {
    if mask.grid != mcv.grid {
        return Err(Error::DimensionMismatch("mask grid differs from volume grid".into()));
    }
    let (lo, hi) =
        valid_bounds(mask).ok_or_else(|| Error::EmptySelection("mask has no valid voxels".into()))?;
    let grid = &mcv.grid;
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut origin = grid.origin_mm;
    for a in 0..3 {
        origin[a] += lo[a] as f64 * grid.spacing_mm[a];
    }
    let out_grid = GridSpec::new(dims, grid.spacing_mm, origin)?;
    let idx = crop_indices(grid, lo, hi);
    let channels = mcv
        .channels()
        .iter()
        .map(|c| {
            ChannelVolume::new(
                c.name.clone(),
                out_grid,
                idx.iter().map(|&i| c.data[i]).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let out_mask = RegionMask::new(
        out_grid,
        idx.iter().map(|&i| mask.labels[i]).collect(),
        idx.iter().map(|&i| mask.valid[i]).collect(),
    )?;
    Ok((MultiChannelVolume::new(channels)?, out_mask))
}

/// Gathers selected voxels into a feature matrix in ascending voxel order.
///
/// `include` sees each voxel's label and validity bit. When `target` names a
/// channel it is split out as the returned vector and left out of the
/// features.
pub fn flatten_masked(
    mcv: &MultiChannelVolume,
    mask: &RegionMask,
    include: impl Fn(Label, bool) -> bool,
    target: Option<&str>,
) -> Result<(FeatureMatrix, Option<Vec<f64>>)> {
    if mask.grid != mcv.grid {
        return Err(Error::DimensionMismatch("mask grid differs from volume grid".into()));
    }
    let target_ch = target.map(|t| mcv.require(t)).transpose()?;
    let features: Vec<&ChannelVolume> = mcv
        .channels()
        .iter()
        .filter(|c| Some(c.name.as_str()) != target)
        .collect();
    let index_map: Vec<usize> = (0..mcv.grid.voxel_count())
        .filter(|&i| include(mask.labels[i], mask.valid[i]))
        .collect();
    if index_map.is_empty() {
        return Err(Error::EmptySelection("predicate selected no voxels".into()));
    }
    let cols = features.len();
    let mut values = Vec::with_capacity(index_map.len() * cols);
    for &i in &index_map {
        values.extend(features.iter().map(|c| c.data[i]));
    }
    let names = features.iter().map(|c| c.name.clone()).collect();
    let y = target_ch.map(|t| index_map.iter().map(|&i| t.data[i]).collect());
    let fm = FeatureMatrix::new(index_map.len(), cols, values, index_map, names)?;
    Ok((fm, y))
}

/// Places `values[k]` at voxel `index_map[k]`; every other voxel gets `fill`.
pub fn scatter_to_volume(
    name: &str,
    values: &[f64],
    index_map: &[usize],
    grid: GridSpec,
    fill: f64,
) -> Result<ChannelVolume> {
    if values.len() != index_map.len() {
        return Err(Error::LengthMismatch {
            expected: index_map.len(),
            found: values.len(),
        });
    }
    let n = grid.voxel_count();
    let mut data = vec![fill; n];
    for (&v, &i) in values.iter().zip(index_map) {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        data[i] = v;
    }
    ChannelVolume::new(name, grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(d: [usize; 3]) -> GridSpec {
        GridSpec::with_dims(d).unwrap()
    }

    fn write_pair(dir: &Path, name: &str, header: &str, raw: &[u8]) -> PathBuf {
        let base = dir.join(name);
        fs::write(base.with_extension("json"), header).unwrap();
        fs::write(base.with_extension("raw"), raw).unwrap();
        base
    }

    fn header(dims: &str) -> String {
        format!(
            r#"{{"dims":{dims},"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32","order":"x-fastest"}}"#
        )
    }

    #[test]
    fn linear_index_is_x_fastest() {
        let g = grid([3, 4, 5]);
        assert_eq!(g.linear_index(1, 2, 3), 3 * 12 + 2 * 3 + 1);
        assert_eq!(g.coords(g.linear_index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn load_decodes_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let mut raw = Vec::new();
        raw.extend_from_slice(&1.0f32.to_le_bytes());
        raw.extend_from_slice(&2.0f32.to_le_bytes());
        let base = write_pair(dir.path(), "v", &header("[2,1,1]"), &raw);
        let v = load_volume(&base).unwrap();
        assert_eq!(v.data, vec![1.0, 2.0]);
        assert_eq!(v.name, "v");
    }

    #[test]
    fn load_rejects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let raw = vec![0u8; 12];
        let base = write_pair(dir.path(), "v", &header("[2,2,1]"), &raw);
        let err = load_volume(&base).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn load_rejects_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let base = write_pair(dir.path(), "a", &header("[0,1,1]"), &[]);
        assert!(matches!(load_volume(&base), Err(Error::InvalidGrid(_))));
        let h = header("[1,1,1]").replace("f32", "f16");
        let base = write_pair(dir.path(), "b", &h, &[0; 2]);
        assert!(matches!(load_volume(&base), Err(Error::UnknownDtype(_))));
        assert!(matches!(
            load_volume(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_zero_volume_writes_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = ChannelVolume::filled("z", grid([4, 4, 4]), 0.0).unwrap();
        save_volume(&v, dir.path().join("z")).unwrap();
        let raw = fs::read(dir.path().join("z.raw")).unwrap();
        assert_eq!(raw.len(), 256);
        assert!(raw.iter().all(|&b| b == 0));
    }

    #[test]
    fn save_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let v = ChannelVolume::new("n", grid([2, 1, 1]), vec![1.0, f64::NAN]).unwrap();
        let err = save_volume(&v, dir.path().join("n")).unwrap_err();
        assert!(err.to_string().contains("unsanitized data"));
    }

    #[test]
    fn round_trip_is_bitwise_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::new([8, 8, 8], [0.5, 0.7, 2.0], [-3.0, 1.0, 4.5]).unwrap();
        let data = (0..512).map(|_| rng.random_range(-1e3..1e3) as f32 as f64).collect();
        let v = ChannelVolume::new("r", g, data).unwrap();
        save_volume(&v, dir.path().join("r.json")).unwrap();
        let back = load_volume(dir.path().join("r.raw")).unwrap();
        assert_eq!(back.grid, v.grid);
        for (a, b) in back.data.iter().zip(&v.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid([2, 2, 1]);
        let m = RegionMask::new(
            g,
            vec![Label::Background, Label::Surrounding, Label::Prostate, Label::Tumour],
            vec![false, true, true, true],
        )
        .unwrap();
        save_mask(&m, dir.path().join("mask")).unwrap();
        assert!(dir.path().join("mask_valid.raw").exists());
        assert_eq!(load_mask(dir.path().join("mask")).unwrap(), m);
    }

    #[test]
    fn valid_mask_examples() {
        let g = grid([2, 1, 1]);
        let mcv = MultiChannelVolume::new(vec![
            ChannelVolume::new("a", g, vec![1.0, 0.0]).unwrap(),
            ChannelVolume::new("b", g, vec![1.0, 1.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(intersect_valid_mask(&mcv).unwrap(), vec![true, false]);
        let single = MultiChannelVolume::new(vec![
            ChannelVolume::new("a", g, vec![3.0, -1.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(intersect_valid_mask(&single).unwrap(), vec![true, true]);
        assert!(MultiChannelVolume::new(vec![]).is_err());
    }

    #[test]
    fn valid_mask_matches_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid([4, 4, 4]);
        let chans: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..64).map(|_| rng.random_range(0..2) as f64).collect())
            .collect();
        let mcv = MultiChannelVolume::new(
            chans
                .iter()
                .enumerate()
                .map(|(k, d)| ChannelVolume::new(format!("c{k}"), g, d.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let got = intersect_valid_mask(&mcv).unwrap();
        for i in 0..64 {
            let expect = chans[0][i] != 0.0 && chans[1][i] != 0.0 && chans[2][i] != 0.0;
            assert_eq!(got[i], expect);
        }
    }

    fn one_channel(g: GridSpec) -> MultiChannelVolume {
        let data = (0..g.voxel_count()).map(|i| i as f64).collect();
        MultiChannelVolume::new(vec![ChannelVolume::new("c", g, data).unwrap()]).unwrap()
    }

    #[test]
    fn crop_single_voxel_and_identity() {
        let g = GridSpec::new([4, 4, 4], [2.0, 2.0, 2.0], [10.0, 0.0, 0.0]).unwrap();
        let mcv = one_channel(g);
        let mut valid = vec![false; 64];
        valid[g.linear_index(1, 1, 1)] = true;
        let mask = RegionMask::new(g, vec![Label::Surrounding; 64], valid).unwrap();
        let (c, m) = bounding_box_crop(&mcv, &mask).unwrap();
        assert_eq!(c.grid.dims, [1, 1, 1]);
        assert_eq!(c.grid.origin_mm, [12.0, 2.0, 2.0]);
        assert_eq!(c.channels()[0].data, vec![g.linear_index(1, 1, 1) as f64]);
        assert_eq!(m.valid, vec![true]);

        let all = RegionMask::uniform(g, Label::Surrounding);
        let (c, m) = bounding_box_crop(&mcv, &all).unwrap();
        assert_eq!(c, mcv);
        assert_eq!(m, all);

        let none = RegionMask::new(g, vec![Label::Background; 64], vec![false; 64]).unwrap();
        assert!(matches!(
            bounding_box_crop(&mcv, &none),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn flatten_examples() {
        let g = grid([4, 1, 1]);
        let mcv = MultiChannelVolume::new(vec![
            ChannelVolume::new("a", g, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ChannelVolume::new("b", g, vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            ChannelVolume::new("SUV", g, vec![9.0, 10.0, 11.0, 12.0]).unwrap(),
        ])
        .unwrap();
        let mask = RegionMask::new(
            g,
            vec![Label::Surrounding, Label::Tumour, Label::Surrounding, Label::Tumour],
            vec![true, true, false, true],
        )
        .unwrap();
        let (fm, y) = flatten_masked(&mcv, &mask, |_, v| v, Some("SUV")).unwrap();
        assert_eq!(fm.rows(), 3);
        assert_eq!(fm.cols(), 2);
        assert_eq!(fm.values(), &[1.0, 5.0, 2.0, 6.0, 4.0, 8.0]);
        assert_eq!(fm.index_map(), &[0, 1, 3]);
        assert_eq!(fm.feature_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(y.unwrap(), vec![9.0, 10.0, 12.0]);

        let (t, _) =
            flatten_masked(&mcv, &mask, |l, v| v && l == Label::Tumour, None).unwrap();
        assert_eq!(t.rows(), 2);
        assert!(matches!(
            flatten_masked(&mcv, &mask, |_, _| false, None),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn scatter_examples() {
        let g = grid([2, 1, 1]);
        assert_eq!(scatter_to_volume("s", &[5.0], &[0], g, 0.0).unwrap().data, vec![5.0, 0.0]);
        assert_eq!(scatter_to_volume("s", &[], &[], g, -1.0).unwrap().data, vec![-1.0, -1.0]);
        assert!(matches!(
            scatter_to_volume("s", &[1.0], &[2], g, 0.0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    fn arb_case() -> impl Strategy<Value = (GridSpec, Vec<f64>, Vec<bool>)> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
            let n = nx * ny * nz;
            (
                Just(GridSpec::with_dims([nx, ny, nz]).unwrap()),
                proptest::collection::vec(-100.0f64..100.0, n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn flatten_scatter_restores_selected((g, data, valid) in arb_case()) {
            prop_assume!(valid.iter().any(|&v| v));
            let mcv = MultiChannelVolume::new(vec![
                ChannelVolume::new("c", g, data.clone()).unwrap()
            ]).unwrap();
            let mask = RegionMask::new(g, vec![Label::Prostate; data.len()], valid.clone()).unwrap();
            let (fm, _) = flatten_masked(&mcv, &mask, |_, v| v, None).unwrap();
            let back = scatter_to_volume("c", fm.values(), fm.index_map(), g, f64::NAN).unwrap();
            for i in 0..data.len() {
                if valid[i] {
                    prop_assert_eq!(back.data[i].to_bits(), data[i].to_bits());
                } else {
                    prop_assert!(back.data[i].is_nan());
                }
            }
        }

        #[test]
        fn crop_is_idempotent_and_tight((g, data, valid) in arb_case()) {
            prop_assume!(valid.iter().any(|&v| v));
            let mcv = MultiChannelVolume::new(vec![
                ChannelVolume::new("c", g, data).unwrap()
            ]).unwrap();
            let mask = RegionMask::new(g, vec![Label::Surrounding; valid.len()], valid.clone()).unwrap();
            let (c1, m1) = bounding_box_crop(&mcv, &mask).unwrap();
            let (c2, m2) = bounding_box_crop(&c1, &m1).unwrap();
            prop_assert_eq!(&c1, &c2);
            prop_assert_eq!(&m1, &m2);

            // brute-force box scan
            let mut lo = [usize::MAX; 3];
            let mut hi = [0; 3];
            for z in 0..g.dims[2] { for y in 0..g.dims[1] { for x in 0..g.dims[0] {
                if valid[g.linear_index(x, y, z)] {
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }}}
            let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
            prop_assert_eq!(c1.grid.dims, dims);
        }
    }
}
