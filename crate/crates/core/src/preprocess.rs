//! Per-channel normalization, time-to-peak maps, soft-tissue masking and
//! feature assembly for a chosen subset of channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::volumes::{ChannelVolume, FeatureMatrix, MultiChannelVolume, RegionMask};

/// Feature channels in their fixed column order.
pub const CANONICAL_FEATURES: [&str; 7] = ["T1", "T2", "ADC", "Ktrans", "ve", "vp", "TTP"];

/// Default name of the regression target channel.
pub const TARGET_CHANNEL: &str = "SUV";

/// Acquisition length used to scale TTP, seconds.
pub const TTP_NORM_SECONDS: f64 = 240.0;

pub const TOFTS_ZSCORE_SCALE: f64 = 1.0 / 20.0;

pub const SOFT_TISSUE_HU: (f64, f64) = (-300.0, 300.0);

pub const TTP_PEAK_PERCENTILE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormalizationRule {
    Minmax01,
    DivideBy { constant: f64 },
    ZscoreScaled { scale: f64 },
}

impl NormalizationRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormalizationRule::DivideBy { constant } if !(constant > 0.0) => Err(
                Error::InvalidParameter(format!("divide_by constant must be > 0, got {constant}")),
            ),
            NormalizationRule::ZscoreScaled { scale } if !(scale > 0.0) => Err(
                Error::InvalidParameter(format!("zscore scale must be > 0, got {scale}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, ch: &ChannelVolume, mask: &[bool]) -> Result<ChannelVolume> {
        self.validate()?;
        match *self {
            NormalizationRule::Minmax01 => minmax_normalize(ch, mask),
            NormalizationRule::DivideBy { constant } => Ok(divide_by(ch, constant)),
            NormalizationRule::ZscoreScaled { scale } => zscore_scaled(ch, mask, scale),
        }
    }

    /// Factor taking a difference of normalized values back to raw units:
    /// the masked range, the divisor, or `std / scale`.
    pub fn residual_scale(&self, ch: &ChannelVolume, mask: &[bool]) -> Result<f64> {
        self.validate()?;
        check_mask(ch, mask)?;
        let vals = masked_values(ch, mask);
        match *self {
            NormalizationRule::Minmax01 => {
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(hi > lo) {
                    return Err(Error::DegenerateChannel(ch.name.clone(), "max equals min".into()));
                }
                Ok(hi - lo)
            }
            NormalizationRule::DivideBy { constant } => Ok(constant),
            NormalizationRule::ZscoreScaled { scale } => {
                let (_, std) = numeric::mean_std(&vals);
                if !(std > 0.0) {
                    return Err(Error::DegenerateChannel(ch.name.clone(), "zero variance".into()));
                }
                Ok(std / scale)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationBinding {
    pub channel: String,
    pub rule: NormalizationRule,
}

/// T1/T2/ADC/SUV min-max, TTP over 240 s, Tofts maps z-scored and scaled by 1/20.
pub fn default_bindings() -> Vec<NormalizationBinding> {
    let bind = |c: &str, rule| NormalizationBinding {
        channel: c.to_string(),
        rule,
    };
    vec![
        bind("T1", NormalizationRule::Minmax01),
        bind("T2", NormalizationRule::Minmax01),
        bind("ADC", NormalizationRule::Minmax01),
        bind(TARGET_CHANNEL, NormalizationRule::Minmax01),
        bind("TTP", NormalizationRule::DivideBy { constant: TTP_NORM_SECONDS }),
        bind("Ktrans", NormalizationRule::ZscoreScaled { scale: TOFTS_ZSCORE_SCALE }),
        bind("ve", NormalizationRule::ZscoreScaled { scale: TOFTS_ZSCORE_SCALE }),
        bind("vp", NormalizationRule::ZscoreScaled { scale: TOFTS_ZSCORE_SCALE }),
    ]
}

/// Sanitizes then normalizes every bound channel present in `mcv`.
/// Channels without a binding are sanitized only.
pub fn normalize_all(
    mcv: &MultiChannelVolume,
    bindings: &[NormalizationBinding],
    mask: &[bool],
) -> Result<MultiChannelVolume> {
    let mut out = Vec::with_capacity(mcv.channels().len());
    for ch in mcv.channels() {
        let clean = sanitize(ch);
        let rule = bindings.iter().find(|b| b.channel == ch.name);
        out.push(match rule {
            Some(b) => b.rule.apply(&clean, mask)?,
            None => clean,
        });
    }
    MultiChannelVolume::new(out)
}

/// NaN and ±Inf become 0.
pub fn sanitize(ch: &ChannelVolume) -> ChannelVolume {
    let data = ch
        .data
        .iter()
        .map(|&v| if v.is_finite() { v } else { 0.0 })
        .collect();
    ChannelVolume {
        name: ch.name.clone(),
        grid: ch.grid,
        data,
    }
}

fn check_mask(ch: &ChannelVolume, mask: &[bool]) -> Result<()> {
    if mask.len() != ch.data.len() {
        return Err(Error::LengthMismatch {
            expected: ch.data.len(),
            found: mask.len(),
        });
    }
    Ok(())
}

fn masked_values(ch: &ChannelVolume, mask: &[bool]) -> Vec<f64> {
    ch.data
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

fn map_masked(ch: &ChannelVolume, mask: &[bool], f: impl Fn(f64) -> f64) -> ChannelVolume {
    let data = ch
        .data
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { f(v) } else { 0.0 })
        .collect();
    ChannelVolume {
        name: ch.name.clone(),
        grid: ch.grid,
        data,
    }
}

/// `(x - min) / (max - min)` with statistics over masked voxels; unmasked
/// voxels become 0.
pub fn minmax_normalize(ch: &ChannelVolume, mask: &[bool]) -> Result<ChannelVolume> {
    check_mask(ch, mask)?;
    let vals = masked_values(ch, mask);
    if vals.len() < 2 {
        return Err(Error::DegenerateChannel(
            ch.name.clone(),
            "fewer than two masked voxels".into(),
        ));
    }
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateChannel(ch.name.clone(), "max equals min".into()));
    }
    let range = hi - lo;
    Ok(map_masked(ch, mask, |v| (v - lo) / range))
}

/// `scale * (x - mean) / std`, population moments over masked voxels.
pub fn zscore_scaled(ch: &ChannelVolume, mask: &[bool], scale: f64) -> Result<ChannelVolume> {
    check_mask(ch, mask)?;
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!("scale must be > 0, got {scale}")));
    }
    let vals = masked_values(ch, mask);
    let (mean, std) = numeric::mean_std(&vals);
    if !(std > 0.0) {
        return Err(Error::DegenerateChannel(ch.name.clone(), "zero variance".into()));
    }
    Ok(map_masked(ch, mask, |v| scale * (v - mean) / std))
}

pub fn divide_by(ch: &ChannelVolume, constant: f64) -> ChannelVolume {
    ChannelVolume {
        name: ch.name.clone(),
        grid: ch.grid,
        data: ch.data.iter().map(|v| v / constant).collect(),
    }
}

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Time-to-peak divided by `norm_const`.
///
/// Voxels whose peak signal is below the 20th percentile of peaks over valid
/// voxels are zeroed, as are invalid voxels. Ties in the argmax resolve to
/// the earliest sample.
pub fn ttp_map(
    series: &[ChannelVolume],
    times: &[f64],
    norm_const: f64,
    valid: Option<&[bool]>,
) -> Result<ChannelVolume> {
    if series.len() < 2 || series.len() != times.len() {
        return Err(Error::InvalidParameter(format!(
            "need >= 2 frames with matching times, got {} frames and {} times",
            series.len(),
            times.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("time vector must be strictly increasing".into()));
    }
    if !(norm_const > 0.0) {
        return Err(Error::InvalidParameter("norm_const must be > 0".into()));
    }
    let grid = series[0].grid;
    if series.iter().any(|s| s.grid != grid) {
        return Err(Error::DimensionMismatch("frames differ in grid".into()));
    }
    let n = grid.voxel_count();
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: v.len(),
            });
        }
    }
    let is_valid = |i: usize| valid.map_or(true, |v| v[i]);

    let mut peak = vec![f64::NEG_INFINITY; n];
    let mut peak_k = vec![0usize; n];
    for (k, frame) in series.iter().enumerate() {
        for (i, &s) in frame.data.iter().enumerate() {
            // strict comparison keeps the earliest maximum
            if s > peak[i] {
                peak[i] = s;
                peak_k[i] = k;
            }
        }
    }

    let mut valid_peaks: Vec<f64> = (0..n).filter(|&i| is_valid(i)).map(|i| peak[i]).collect();
    let mut data = vec![0.0; n];
    if valid_peaks.is_empty() {
        return ChannelVolume::new("TTP", grid, data);
    }
    valid_peaks.sort_by(f64::total_cmp);
    let cut = nearest_rank(&valid_peaks, TTP_PEAK_PERCENTILE);
    for i in 0..n {
        if is_valid(i) && peak[i] >= cut {
            data[i] = times[peak_k[i]] / norm_const;
        }
    }
    ChannelVolume::new("TTP", grid, data)
}

/// Valid where `-300 <= HU <= 300`.
pub fn soft_tissue_mask(ct: &ChannelVolume) -> Vec<bool> {
    let (lo, hi) = SOFT_TISSUE_HU;
    ct.data.iter().map(|&h| h >= lo && h <= hi).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub name: String,
    pub included: Vec<String>,
}

impl FeatureSelection {
    /// Included names are reordered canonically.
    pub fn new(name: impl Into<String>, included: &[&str]) -> Result<Self> {
        if included.is_empty() {
            return Err(Error::EmptySelection("feature selection is empty".into()));
        }
        for f in included {
            if !CANONICAL_FEATURES.contains(f) {
                return Err(Error::UnknownChannel(f.to_string()));
            }
        }
        let included = CANONICAL_FEATURES
            .iter()
            .filter(|c| included.contains(c))
            .map(|c| c.to_string())
            .collect();
        Ok(FeatureSelection {
            name: name.into(),
            included,
        })
    }

    pub fn full() -> Self {
        Self::new("full", &CANONICAL_FEATURES).expect("canonical set")
    }

    /// Every canonical feature except `removed`.
    pub fn without(name: impl Into<String>, removed: &[&str]) -> Result<Self> {
        for r in removed {
            if !CANONICAL_FEATURES.contains(r) {
                return Err(Error::UnknownChannel(r.to_string()));
            }
        }
        let kept: Vec<&str> = CANONICAL_FEATURES
            .iter()
            .copied()
            .filter(|c| !removed.contains(c))
            .collect();
        Self::new(name, &kept)
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }
}

/// Builds the regression dataset over valid voxels: one column per selected
/// feature in canonical order, and the target over the same rows.
pub fn assemble_features(
    mcv: &MultiChannelVolume,
    mask: &RegionMask,
    sel: &FeatureSelection,
    target_name: &str,
) -> Result<(FeatureMatrix, Vec<f64>)> {
    if sel.included.is_empty() {
        return Err(Error::EmptySelection("feature selection is empty".into()));
    }
    if mask.grid != mcv.grid {
        return Err(Error::DimensionMismatch("mask grid differs from volume grid".into()));
    }
    let ordered: Vec<&str> = CANONICAL_FEATURES
        .iter()
        .copied()
        .filter(|c| sel.included.iter().any(|s| s == c))
        .collect();
    if ordered.len() != sel.included.len() {
        let unknown = sel
            .included
            .iter()
            .find(|s| !CANONICAL_FEATURES.contains(&s.as_str()))
            .cloned()
            .unwrap_or_default();
        return Err(Error::UnknownChannel(unknown));
    }
    let cols: Vec<&ChannelVolume> = ordered
        .iter()
        .map(|name| mcv.require(name))
        .collect::<Result<_>>()?;
    let target = mcv.require(target_name)?;

    let index_map: Vec<usize> = (0..mcv.grid.voxel_count()).filter(|&i| mask.valid[i]).collect();
    if index_map.is_empty() {
        return Err(Error::EmptySelection("mask has no valid voxels".into()));
    }
    let mut values = Vec::with_capacity(index_map.len() * cols.len());
    for &i in &index_map {
        values.extend(cols.iter().map(|c| c.data[i]));
    }
    let y = index_map.iter().map(|&i| target.data[i]).collect();
    let names = ordered.iter().map(|s| s.to_string()).collect();
    let fm = FeatureMatrix::new(index_map.len(), cols.len(), values, index_map, names)?;
    Ok((fm, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{GridSpec, Label};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ch(data: Vec<f64>) -> ChannelVolume {
        let g = GridSpec::with_dims([data.len(), 1, 1]).unwrap();
        ChannelVolume::new("c", g, data).unwrap()
    }

    #[test]
    fn sanitize_examples() {
        let out = sanitize(&ch(vec![1.0, f64::NAN, f64::INFINITY, f64::NEG_INFINITY]));
        assert_eq!(out.data, vec![1.0, 0.0, 0.0, 0.0]);
        let c = ch(vec![1.5, -2.0]);
        assert_eq!(sanitize(&c), c);
    }

    #[test]
    fn sanitize_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specials = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY];
        let data: Vec<f64> = (0..500)
            .map(|_| {
                if rng.random_bool(0.2) {
                    specials[rng.random_range(0..3)]
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let out = sanitize(&ch(data.clone()));
        for (o, d) in out.data.iter().zip(&data) {
            let expect = if d.is_finite() { *d } else { 0.0 };
            assert_eq!(o.to_bits(), expect.to_bits());
        }
        assert_eq!(sanitize(&out), out);
    }

    #[test]
    fn minmax_examples() {
        let all = [true; 3];
        assert_eq!(minmax_normalize(&ch(vec![2.0, 4.0, 6.0]), &all).unwrap().data, vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&ch(vec![0.0, 1.0]), &all[..2]).unwrap().data, vec![0.0, 1.0]);
        let err = minmax_normalize(&ch(vec![3.0, 3.0]), &all[..2]).unwrap_err();
        assert!(err.to_string().contains("degenerate channel"));
        // unmasked voxel excluded from statistics and zeroed
        let out = minmax_normalize(&ch(vec![2.0, 100.0, 4.0]), &[true, false, true]).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn zscore_examples() {
        let out = zscore_scaled(&ch(vec![1.0, 3.0]), &[true, true], 1.0 / 20.0).unwrap();
        assert!((out.data[0] + 0.05).abs() < 1e-15);
        assert!((out.data[1] - 0.05).abs() < 1e-15);
        let shifted = zscore_scaled(&ch(vec![101.0, 103.0]), &[true, true], 1.0 / 20.0).unwrap();
        assert_eq!(shifted.data, out.data);
        assert!(zscore_scaled(&ch(vec![2.0, 2.0]), &[true, true], 0.05).is_err());
    }

    proptest! {
        #[test]
        fn minmax_hits_bounds(data in proptest::collection::vec(-1e3f64..1e3, 3..200)) {
            let c = ch(data.clone());
            let mask = vec![true; data.len()];
            prop_assume!(data.iter().any(|&v| v != data[0]));
            let out = minmax_normalize(&c, &mask).unwrap();
            let lo = out.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = out.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo.abs() <= 1e-12 && (hi - 1.0).abs() <= 1e-12);
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            // extremes attained exactly at the input argmin/argmax
            let imin = data.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let imax = data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(out.data[imin], 0.0);
            prop_assert_eq!(out.data[imax], 1.0);
        }

        #[test]
        fn zscore_moments(data in proptest::collection::vec(-1e2f64..1e2, 3..200), scale in 0.01f64..2.0) {
            prop_assume!(data.iter().any(|&v| (v - data[0]).abs() > 1e-3));
            let out = zscore_scaled(&ch(data.clone()), &vec![true; data.len()], scale).unwrap();
            let (m, s) = numeric::mean_std(&out.data);
            prop_assert!(m.abs() <= 1e-12 * scale.max(1.0));
            prop_assert!((s - scale).abs() <= 1e-12 * scale);
        }
    }

    fn frames(curves: &[Vec<f64>]) -> Vec<ChannelVolume> {
        let nt = curves[0].len();
        let g = GridSpec::with_dims([curves.len(), 1, 1]).unwrap();
        (0..nt)
            .map(|k| ChannelVolume::new(format!("t{k}"), g, curves.iter().map(|c| c[k]).collect()).unwrap())
            .collect()
    }

    #[test]
    fn ttp_examples() {
        let t = [0.0, 60.0, 120.0, 180.0];
        let out = ttp_map(&frames(&[vec![0.0, 1.0, 3.0, 2.0]]), &t, 240.0, None).unwrap();
        assert_eq!(out.data, vec![0.5]);
        let out = ttp_map(&frames(&[vec![0.0, 1.0, 2.0, 3.0]]), &t, 240.0, None).unwrap();
        assert_eq!(out.data, vec![180.0 / 240.0]);
        // tie resolves to the earliest sample
        let out = ttp_map(&frames(&[vec![0.0, 3.0, 3.0, 1.0]]), &t, 240.0, None).unwrap();
        assert_eq!(out.data, vec![60.0 / 240.0]);
        assert!(ttp_map(&frames(&[vec![0.0, 1.0, 2.0, 3.0]]), &[0.0, 60.0, 60.0, 180.0], 240.0, None).is_err());
    }

    #[test]
    fn ttp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times: Vec<f64> = (0..12).map(|k| 20.0 * k as f64).collect();
        let curves: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..12).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let out = ttp_map(&frames(&curves), &times, 240.0, None).unwrap();

        let peaks: Vec<f64> = curves.iter().map(|c| c.iter().copied().fold(f64::MIN, f64::max)).collect();
        let mut sorted = peaks.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = sorted[(0.2f64 * 100.0).ceil() as usize - 1];
        let mut masked = 0;
        for (i, c) in curves.iter().enumerate() {
            let mut best = 0;
            for k in 1..c.len() {
                if c[k] > c[best] {
                    best = k;
                }
            }
            let expect = if peaks[i] < cut { masked += 1; 0.0 } else { times[best] / 240.0 };
            assert_eq!(out.data[i], expect);
        }
        // 20% of 100 voxels, minus the voxel sitting at the cut itself
        assert!((19..=20).contains(&masked), "masked {masked}");
    }

    #[test]
    fn soft_tissue_examples() {
        let ct = ch(vec![-301.0, -300.0, 0.0, 300.0, 301.0]);
        assert_eq!(soft_tissue_mask(&ct), vec![false, true, true, true, false]);
        assert!(soft_tissue_mask(&ch(vec![0.0; 4])).iter().all(|&v| v));
    }

    fn seven_channel() -> (MultiChannelVolume, RegionMask) {
        let g = GridSpec::with_dims([3, 1, 1]).unwrap();
        // stored in reverse canonical order on purpose
        let mut chans: Vec<ChannelVolume> = CANONICAL_FEATURES
            .iter()
            .rev()
            .enumerate()
            .map(|(k, n)| ChannelVolume::new(*n, g, vec![k as f64; 3]).unwrap())
            .collect();
        chans.push(ChannelVolume::new("SUV", g, vec![0.1, 0.2, 0.3]).unwrap());
        let mask = RegionMask::new(g, vec![Label::Prostate; 3], vec![true, false, true]).unwrap();
        (MultiChannelVolume::new(chans).unwrap(), mask)
    }

    #[test]
    fn assemble_examples() {
        let (mcv, mask) = seven_channel();
        let (fm, y) = assemble_features(&mcv, &mask, &FeatureSelection::full(), "SUV").unwrap();
        assert_eq!(fm.cols(), 7);
        assert_eq!(fm.feature_names(), CANONICAL_FEATURES.map(String::from).as_slice());
        assert_eq!(fm.row(0), &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(y, vec![0.1, 0.3]);

        let ns = FeatureSelection::without("no_structural", &["T1", "T2"]).unwrap();
        let (fm, _) = assemble_features(&mcv, &mask, &ns, "SUV").unwrap();
        assert_eq!(fm.cols(), 5);
        assert!(!fm.feature_names().iter().any(|n| n == "T1" || n == "T2"));

        let mvp = FeatureSelection::without("minus_vp", &["vp"]).unwrap();
        assert_eq!(assemble_features(&mcv, &mask, &mvp, "SUV").unwrap().0.cols(), 6);

        assert!(FeatureSelection::new("bad", &["PD"]).is_err());
        assert!(FeatureSelection::new("empty", &[]).is_err());
        assert!(matches!(
            assemble_features(&mcv, &mask, &FeatureSelection::full(), "PET"),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn selection_order_is_canonical() {
        let a = FeatureSelection::new("s", &["TTP", "T1", "ve"]).unwrap();
        let b = FeatureSelection::new("s", &["ve", "TTP", "T1"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.included, vec!["T1", "ve", "TTP"]);
    }
}
