//! Regional error tables, the feature ablation harness, a two-sided
//! Mann-Whitney rank-sum test and report export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::inr::{predict_and_decompose, train, EpochRecord, TrainConfig};
use crate::numeric;
use crate::phantom::region_name;
use crate::preprocess::{assemble_features, FeatureSelection};
use crate::projection::ResidualDecomposition;
use crate::volumes::{save_volume, scatter_to_volume, GridSpec, Label, RegionMask};

/// Region order used in every table.
pub const REGIONS: [Label; 3] = [Label::Tumour, Label::Prostate, Label::Surrounding];
pub const OVERALL: &str = "all";

/// Squared-error summary over one set of voxels. SDs are population SDs of
/// the per-voxel squared values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: String,
    pub n_voxels: usize,
    pub total_mse: f64,
    pub total_sd: f64,
    pub mse_par: f64,
    pub par_sd: f64,
    pub mse_perp: f64,
    pub perp_sd: f64,
}

fn stats(region: &str, e2: &[f64], par2: &[f64], perp2: &[f64]) -> RegionStats {
    let (total_mse, total_sd) = numeric::mean_std(e2);
    let (mse_par, par_sd) = numeric::mean_std(par2);
    let (mse_perp, perp_sd) = numeric::mean_std(perp2);
    RegionStats {
        region: region.to_string(),
        n_voxels: e2.len(),
        total_mse,
        total_sd,
        mse_par,
        par_sd,
        mse_perp,
        perp_sd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalErrorTable {
    /// Non-empty regions in tumour, prostate, surrounding order. The
    /// prostate row excludes tumour voxels.
    pub regions: Vec<RegionStats>,
    pub overall: RegionStats,
    /// `|Σe² - Σr_par² - Σr_perp²| / Σe²` over all rows. Zero up to
    /// round-off for a pseudo-inverse projector; per-region sums carry
    /// cross terms and need not split.
    pub pythagorean_gap: f64,
}

impl RegionalErrorTable {
    pub fn region(&self, label: Label) -> Option<&RegionStats> {
        self.regions.iter().find(|r| r.region == region_name(label))
    }

    /// Region rows followed by the overall row.
    pub fn rows(&self) -> impl Iterator<Item = &RegionStats> {
        self.regions.iter().chain(std::iter::once(&self.overall))
    }
}

/// Row labels of a decomposition, checked against the mask.
fn row_labels(decomp: &ResidualDecomposition, mask: &RegionMask) -> Result<Vec<Label>> {
    let n = mask.labels.len();
    decomp
        .index_map
        .iter()
        .map(|&i| {
            if i >= n {
                Err(Error::IndexOutOfRange { index: i, len: n })
            } else if !mask.valid[i] {
                Err(Error::InvalidParameter(format!("row maps to invalid voxel {i}")))
            } else {
                Ok(mask.labels[i])
            }
        })
        .collect()
}

/// Squared components of rows whose label satisfies `keep`, pooled over
/// any number of decompositions on the same mask.
pub fn squared_components(
    decomps: &[&ResidualDecomposition],
    mask: &RegionMask,
    keep: impl Fn(Label) -> bool,
) -> Result<[Vec<f64>; 3]> {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for d in decomps {
        let labels = row_labels(d, mask)?;
        for (k, l) in labels.iter().enumerate() {
            if keep(*l) {
                out[0].push(d.e[k] * d.e[k]);
                out[1].push(d.r_par[k] * d.r_par[k]);
                out[2].push(d.r_perp[k] * d.r_perp[k]);
            }
        }
    }
    Ok(out)
}

fn table_from(decomps: &[&ResidualDecomposition], mask: &RegionMask) -> Result<RegionalErrorTable> {
    if decomps.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptySelection("decomposition has no rows".into()));
    }
    let mut regions = Vec::new();
    for label in REGIONS {
        let [e2, p2, q2] = squared_components(decomps, mask, |l| l == label)?;
        if !e2.is_empty() {
            regions.push(stats(region_name(label), &e2, &p2, &q2));
        }
    }
    let [e2, p2, q2] = squared_components(decomps, mask, |_| true)?;
    let se = numeric::sum(e2.iter().copied());
    let sp = numeric::sum(p2.iter().copied());
    let sq = numeric::sum(q2.iter().copied());
    let pythagorean_gap = if se > 0.0 { (se - sp - sq).abs() / se } else { 0.0 };
    Ok(RegionalErrorTable {
        regions,
        overall: stats(OVERALL, &e2, &p2, &q2),
        pythagorean_gap,
    })
}

pub fn regional_mse(decomp: &ResidualDecomposition, mask: &RegionMask) -> Result<RegionalErrorTable> {
    table_from(&[decomp], mask)
}

/// Tumour against all other valid voxels on the squared orthogonal
/// residual. `None` when either side is empty.
pub fn tumour_vs_rest_p(decomp: &ResidualDecomposition, mask: &RegionMask) -> Result<Option<f64>> {
    let [_, _, t] = squared_components(&[decomp], mask, |l| l == Label::Tumour)?;
    let [_, _, r] = squared_components(&[decomp], mask, |l| l != Label::Tumour)?;
    if t.is_empty() || r.is_empty() {
        return Ok(None);
    }
    rank_sum_test(&t, &r).map(Some)
}

// ---------------------------------------------------------------- statistics

/// Samples whose smaller side has at most this many values use the exact
/// null distribution.
pub const EXACT_MAX_SMALL: usize = 8;
/// The exact path is also capped on the combined size; beyond it the
/// normal approximation is accurate and enumeration is costly.
pub const EXACT_MAX_TOTAL: usize = 400;

/// Midranks (1-based) of the pooled sample and the tie term `Σ(t³ - t)`.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySelection("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank-sum sample".into()));
    }
    let first = a[0];
    if a.iter().chain(b).all(|&v| v == first) {
        return Err(Error::InvalidParameter("all values tied; rank-sum test undefined".into()));
    }
    Ok(())
}

/// Two-sided exact p-value from the permutation distribution of the rank
/// sum of the smaller sample, with midranks for ties.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let pooled: Vec<f64> = small.iter().chain(large).copied().collect();
    let (ranks, _) = midranks(&pooled);
    // doubled midranks are integers
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let k = small.len();
    let n = pooled.len();
    let observed: usize = r2[..k].iter().sum();
    let max_sum: usize = {
        let mut s = r2.clone();
        s.sort_unstable();
        s[n - k..].iter().sum()
    };
    // counts[j][s]: subsets of size j with doubled rank sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; k + 1];
    counts[0][0] = 1.0;
    for &r in &r2 {
        for j in (1..=k).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    // null mean of the doubled sum
    let centre = k * (n + 1);
    let dev = |s: usize| s.abs_diff(centre);
    let obs_dev = dev(observed);
    let total: f64 = counts[k].iter().sum();
    let extreme: f64 = counts[k]
        .iter()
        .enumerate()
        .filter(|(s, _)| dev(*s) >= obs_dev)
        .map(|(_, c)| c)
        .sum();
    Ok((extreme / total).min(1.0))
}

/// Two-sided normal approximation with tie-corrected variance and a 0.5
/// continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let r1 = numeric::sum(ranks[..a.len()].iter().copied());
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Err(Error::InvalidParameter("zero rank variance".into()));
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((2.0 * normal.sf(z)).min(1.0))
}

/// Two-sided Mann-Whitney U test. Exact when the smaller sample has at most
/// eight values (and the pooled size is at most 400), normal approximation
/// otherwise.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len().min(b.len()) <= EXACT_MAX_SMALL && a.len() + b.len() <= EXACT_MAX_TOTAL {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

// ------------------------------------------------------------------ ablation

/// The eleven feature sets: full, seven leave-one-out and three groups.
pub fn ablation_configs() -> Vec<FeatureSelection> {
    let without = |name: &str, removed: &[&str]| {
        FeatureSelection::without(name, removed).expect("canonical feature names")
    };
    vec![
        FeatureSelection::full(),
        without("minus_T1", &["T1"]),
        without("minus_T2", &["T2"]),
        without("minus_ADC", &["ADC"]),
        without("minus_TTP", &["TTP"]),
        without("minus_Ktrans", &["Ktrans"]),
        without("minus_ve", &["ve"]),
        without("minus_vp", &["vp"]),
        without("no_structural", &["T1", "T2"]),
        without("no_tofts", &["Ktrans", "ve", "vp"]),
        without("no_dynamic", &["TTP", "Ktrans", "ve", "vp"]),
    ]
}

/// One trained model evaluated on every valid voxel.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub seed: u64,
    pub table: RegionalErrorTable,
    pub history: Vec<EpochRecord>,
    pub decomp: ResidualDecomposition,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub selection: FeatureSelection,
    pub runs: Vec<AblationRun>,
    /// Voxels pooled across seeds.
    pub pooled: RegionalErrorTable,
    /// Per row of `pooled`: rank-sum p-value of squared total error against
    /// the full model, `None` for the full model itself.
    pub p_vs_full: Vec<Option<f64>>,
}

impl AblationResult {
    pub fn name(&self) -> &str {
        &self.selection.name
    }

    /// Overall total MSE of each seed's run.
    pub fn seed_totals(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.table.overall.total_mse).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one model for a feature selection and seed and decomposes its
/// residual over all valid voxels with a global factorization.
pub fn run_selection(
    data: &Dataset,
    selection: &FeatureSelection,
    config: &TrainConfig,
    seed: u64,
) -> Result<AblationRun> {
    let (x, y) = assemble_features(&data.volumes, &data.mask, selection, &data.target)?;
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let (model, history) = train(&x, &y, &cfg)?;
    let decomp = predict_and_decompose(&model, &x, &y, cfg.projector)?;
    let table = regional_mse(&decomp, &data.mask)?;
    Ok(AblationRun {
        seed,
        table,
        history,
        decomp,
    })
}

/// Runs every selection for every seed; `on_run` sees each finished run.
pub fn ablation_suite(
    data: &Dataset,
    selections: &[FeatureSelection],
    config: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&FeatureSelection, &AblationRun),
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("ablation needs at least one seed".into()));
    }
    let mut out: Vec<AblationResult> = Vec::with_capacity(selections.len());
    for sel in selections {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = run_selection(data, sel, config, seed)?;
            on_run(sel, &run);
            runs.push(run);
        }
        let refs: Vec<&ResidualDecomposition> = runs.iter().map(|r| &r.decomp).collect();
        let pooled = table_from(&refs, &data.mask)?;
        out.push(AblationResult {
            selection: sel.clone(),
            runs,
            pooled,
            p_vs_full: Vec::new(),
        });
    }
    fill_p_values(&mut out, &data.mask)?;
    Ok(out)
}

fn fill_p_values(results: &mut [AblationResult], mask: &RegionMask) -> Result<()> {
    let Some(full_idx) = results.iter().position(|r| r.name() == "full") else {
        for r in results.iter_mut() {
            r.p_vs_full = vec![None; r.pooled.rows().count()];
        }
        return Ok(());
    };
    let keeps: Vec<Box<dyn Fn(Label) -> bool>> = REGIONS
        .iter()
        .map(|&l| Box::new(move |x: Label| x == l) as Box<dyn Fn(Label) -> bool>)
        .chain(std::iter::once(Box::new(|_| true) as Box<dyn Fn(Label) -> bool>))
        .collect();
    let full_refs: Vec<&ResidualDecomposition> = results[full_idx].runs.iter().map(|r| &r.decomp).collect();
    let full_sq: Vec<Vec<f64>> = keeps
        .iter()
        .map(|k| squared_components(&full_refs, mask, k).map(|[e, _, _]| e))
        .collect::<Result<_>>()?;
    for (ri, r) in results.iter_mut().enumerate() {
        let refs: Vec<&ResidualDecomposition> = r.runs.iter().map(|x| &x.decomp).collect();
        let mut ps = Vec::new();
        for (k, keep) in keeps.iter().enumerate() {
            if k < REGIONS.len() && r.pooled.region(REGIONS[k]).is_none() {
                continue;
            }
            if ri == full_idx {
                ps.push(None);
                continue;
            }
            let [e, _, _] = squared_components(&refs, mask, keep)?;
            ps.push(rank_sum_test(&e, &full_sq[k]).ok());
        }
        r.p_vs_full = ps;
    }
    Ok(())
}

// -------------------------------------------------------------------- export

pub const CSV_HEADER: &str =
    "config,region,n_voxels,total_mse,total_sd,mse_par,par_sd,mse_perp,perp_sd,p_vs_full";

fn fmt_f(v: f64) -> String {
    format!("{v:.9e}")
}

fn csv_row(out: &mut String, config: &str, r: &RegionStats, scale2: f64, p: Option<f64>) {
    let _ = writeln!(
        out,
        "{config},{},{},{},{},{},{},{},{},{}",
        r.region,
        r.n_voxels,
        fmt_f(r.total_mse * scale2),
        fmt_f(r.total_sd * scale2),
        fmt_f(r.mse_par * scale2),
        fmt_f(r.par_sd * scale2),
        fmt_f(r.mse_perp * scale2),
        fmt_f(r.perp_sd * scale2),
        p.map(fmt_f).unwrap_or_default()
    );
}

/// One CSV with a row per region (and the overall row) for each table.
/// `target_scale` multiplies residuals, so MSEs scale by its square.
pub fn regional_csv(tables: &[(&str, &RegionalErrorTable, &[Option<f64>])], target_scale: f64) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let s2 = target_scale * target_scale;
    for (name, table, ps) in tables {
        for (k, row) in table.rows().enumerate() {
            csv_row(&mut out, name, row, s2, ps.get(k).copied().flatten());
        }
    }
    out
}

/// Across-seed mean and SD of each seed's regional MSE, the per-dataset
/// pooling that treats seeds like patients.
pub fn seed_summary_csv(results: &[AblationResult], target_scale: f64) -> String {
    let mut out = String::from(
        "config,region,n_seeds,total_mse_mean,total_mse_sd,mse_par_mean,mse_par_sd,mse_perp_mean,mse_perp_sd\n",
    );
    let s2 = target_scale * target_scale;
    for r in results {
        for (k, row) in r.pooled.rows().enumerate() {
            let pick = |f: fn(&RegionStats) -> f64| -> (f64, f64) {
                let vals: Vec<f64> = r
                    .runs
                    .iter()
                    .filter_map(|run| run.table.rows().find(|x| x.region == row.region).map(f))
                    .map(|v| v * s2)
                    .collect();
                numeric::mean_std(&vals)
            };
            let _ = k;
            let (tm, ts) = pick(|x| x.total_mse);
            let (pm, ps) = pick(|x| x.mse_par);
            let (qm, qs) = pick(|x| x.mse_perp);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.name(),
                row.region,
                r.runs.len(),
                fmt_f(tm),
                fmt_f(ts),
                fmt_f(pm),
                fmt_f(ps),
                fmt_f(qm),
                fmt_f(qs)
            );
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `r_par²` and `r_perp²` volumes (zero off the rows) named `r_par2` and
/// `r_perp2`.
pub fn write_residual_maps(dir: &Path, decomp: &ResidualDecomposition, grid: GridSpec) -> Result<()> {
    let par2: Vec<f64> = decomp.r_par.iter().map(|v| v * v).collect();
    let perp2: Vec<f64> = decomp.r_perp.iter().map(|v| v * v).collect();
    save_volume(&scatter_to_volume("r_par2", &par2, &decomp.index_map, grid, 0.0)?, dir.join("r_par2"))?;
    save_volume(&scatter_to_volume("r_perp2", &perp2, &decomp.index_map, grid, 0.0)?, dir.join("r_perp2"))
}

/// Writes `regional.csv` for the first (full) result, `ablation.csv` with
/// every configuration, `ablation_seeds.csv`, raw-scale copies when
/// `target_scale != 1`, the residual maps of the first result's first run
/// and `manifest.json`.
pub fn export_report(
    dir: &Path,
    results: &[AblationResult],
    grid: GridSpec,
    target_scale: f64,
    manifest: &serde_json::Value,
) -> Result<()> {
    let first = results
        .first()
        .ok_or_else(|| Error::EmptySelection("no ablation results to export".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all: Vec<(&str, &RegionalErrorTable, &[Option<f64>])> = results
        .iter()
        .map(|r| (r.name(), &r.pooled, r.p_vs_full.as_slice()))
        .collect();
    let head = &all[..1];
    write_text(&dir.join("regional.csv"), &regional_csv(head, 1.0))?;
    write_text(&dir.join("ablation.csv"), &regional_csv(&all, 1.0))?;
    write_text(&dir.join("ablation_seeds.csv"), &seed_summary_csv(results, 1.0))?;
    if target_scale != 1.0 {
        write_text(&dir.join("regional_raw.csv"), &regional_csv(head, target_scale))?;
        write_text(&dir.join("ablation_raw.csv"), &regional_csv(&all, target_scale))?;
    }
    if let Some(run) = first.runs.first() {
        write_residual_maps(dir, &run.decomp, grid)?;
    }
    let path = dir.join("manifest.json");
    write_text(&path, &(serde_json::to_string_pretty(manifest)? + "\n"))
}
