use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use orthosep::dataset::{load_dataset, Dataset};
use orthosep::eval::{
    ablation_configs, ablation_suite, export_report, median, regional_csv, regional_mse, tumour_vs_rest_p,
    write_residual_maps, AblationResult,
};
use orthosep::inr::train::decompose_prediction;
use orthosep::inr::{load_checkpoint, load_model, save_checkpoint, Trainer};
use orthosep::kinetics::{fit_tofts, load_series, population_aif, save_series, Aif, TimeGrid};
use orthosep::phantom::{self, generate, make_dce, save_phantom};
use orthosep::preprocess::{assemble_features, ttp_map, FeatureSelection};
use orthosep::selftest;
use orthosep::volumes::{load_mask, save_mask, save_volume, scatter_to_volume, ChannelVolume};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{selection_by_name, AifConfig, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Written by every command. `config` is the fully resolved configuration,
/// so `-c manifest.json` repeats the run.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    conventions: Value,
    results: Value,
}

/// Choices the method leaves open, echoed so a manifest is self-describing.
fn conventions() -> Value {
    json!({
        "normalization_scope": "statistics over the valid soft-tissue mask",
        "tofts_baseline": "additive fitted offset",
        "ttp_peak_cut": "nearest-rank 20th percentile of valid-voxel peaks",
        "ablation_pooling": "ablation.csv pools voxels across seeds; ablation_seeds.csv averages per-seed means",
        "raw_scale": "*_raw.csv multiply residuals by the target normalization scale",
    })
}

fn write_manifest(cfg: &RunConfig, command: &str, results: Value) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output)?;
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        conventions: conventions(),
        results,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::numerical(e.to_string()))? + "\n";
    fs::write(cfg.output.join(MANIFEST), text)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.dataset {
        Some(dir) => Ok(load_dataset(dir, &cfg.bindings)?),
        None => Ok(generate(&cfg.phantom)?.dataset),
    }
}

fn aif_on(grid: &TimeGrid, a: &AifConfig) -> Result<Aif, CliError> {
    Ok(population_aif(grid, a.delay_s, a.amplitude, a.decay1, a.decay2)?)
}

pub fn phantom(cfg: &RunConfig) -> Result<(), CliError> {
    let p = generate(&cfg.phantom)?;
    save_phantom(&cfg.output, &p)?;
    let mut results = json!({
        "valid_voxels": p.truth.valid_voxels,
        "envelope": p.truth.envelope_id,
        "truth": phantom::TRUTH_FILE,
    });
    if cfg.dce.synthesize {
        let d = &cfg.dce;
        let times = TimeGrid::uniform(d.dt_s, d.duration_s)?;
        let aif = aif_on(&times, &d.aif)?;
        let (frames, mask) = make_dce(&cfg.phantom, &times, &aif, d.noise_sd)?;
        let dir = cfg.output.join("dce");
        save_series(&dir, &frames, &times)?;
        save_mask(&mask, dir.join("mask"))?;
        results["dce_frames"] = json!(frames.len());
    }
    eprintln!("phantom: {} valid voxels written to {}", p.truth.valid_voxels, cfg.output.display());
    write_manifest(cfg, "phantom", results)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = dataset(cfg)?;
    let resume = cfg.checkpoint.as_ref().filter(|c| c.join("model.json").exists());
    let (mut trainer, sel) = match resume {
        Some(dir) => {
            let (mut t, names) = load_checkpoint(dir)?;
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let sel = FeatureSelection::new(cfg.selection.clone(), &refs)?;
            // only the epoch budget may change on resume; everything else
            // comes from the checkpoint so the continuation is exact
            t.config.epochs = cfg.train.epochs;
            (t, sel)
        }
        None => {
            let sel = selection_by_name(&cfg.selection)?;
            (Trainer::new(sel.len(), cfg.train.clone())?, sel)
        }
    };
    let (x, y) = assemble_features(&data.volumes, &data.mask, &sel, &data.target)?;
    let start = trainer.epoch;
    trainer.run(&x, &y, |r| {
        eprintln!("epoch {:>3} total {:.6e} mse_e {:.6e} mse_par {:.6e} lr {:.1e}", r.epoch, r.total, r.mse_e, r.mse_par, r.lr);
    })?;
    save_checkpoint(&cfg.output, &trainer, &sel.included)?;
    let last = trainer.history.last().copied();
    write_manifest(
        cfg,
        "train",
        json!({
            "features": sel.included,
            "rows": x.rows(),
            "resumed_from_epoch": resume.map(|_| start),
            "epochs": trainer.epoch,
            "final": last,
        }),
    )
}

pub fn decompose(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("checkpoint: decompose needs a checkpoint directory"))?;
    let (model, manifest) = load_model(dir)?;
    let data = dataset(cfg)?;
    let refs: Vec<&str> = manifest.feature_names.iter().map(String::as_str).collect();
    let sel = FeatureSelection::new(cfg.selection.clone(), &refs)?;
    let (x, y) = assemble_features(&data.volumes, &data.mask, &sel, &data.target)?;
    let pred = model.predict(x.values(), x.rows())?;
    let decomp = decompose_prediction(&x, &pred, &y, cfg.eval_projector)?;
    let table = regional_mse(&decomp, &data.mask)?;
    let p = tumour_vs_rest_p(&decomp, &data.mask)?;

    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let grid = data.mask.grid;
    write_residual_maps(out, &decomp, grid)?;
    save_volume(&scatter_to_volume("reconstruction", &pred, x.index_map(), grid, 0.0)?, out.join("reconstruction"))?;
    save_volume(&scatter_to_volume("target", &y, x.index_map(), grid, 0.0)?, out.join("target"))?;
    save_mask(&data.mask, out.join("mask"))?;
    let rows = [(sel.name.as_str(), &table, &[][..])];
    write_text(&out.join("regional.csv"), &regional_csv(&rows, 1.0))?;
    if data.target_scale != 1.0 {
        write_text(&out.join("regional_raw.csv"), &regional_csv(&rows, data.target_scale))?;
    }
    for row in table.rows() {
        eprintln!(
            "{:<12} n={:<6} total {:.4e} par {:.4e} perp {:.4e}",
            row.region, row.n_voxels, row.total_mse, row.mse_par, row.mse_perp
        );
    }
    write_manifest(
        cfg,
        "decompose",
        json!({
            "features": sel.included,
            "rows": x.rows(),
            "tumour_vs_rest_p": p,
            "pythagorean_gap": table.pythagorean_gap,
            "overall": table.overall,
            "target_scale": data.target_scale,
        }),
    )
}

fn runs_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("config,seed,region,n_voxels,total_mse,mse_par,mse_perp\n");
    for r in results {
        for run in &r.runs {
            for row in run.table.rows() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.9e},{:.9e},{:.9e}",
                    r.name(),
                    run.seed,
                    row.region,
                    row.n_voxels,
                    row.total_mse,
                    row.mse_par,
                    row.mse_perp
                );
            }
        }
    }
    out
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = dataset(cfg)?;
    let selections: Vec<FeatureSelection> = if cfg.ablations.is_empty() {
        ablation_configs()
    } else {
        cfg.ablations.iter().map(|n| selection_by_name(n)).collect::<Result<_, _>>()?
    };
    let results = ablation_suite(&data, &selections, &cfg.train, &cfg.seeds, |sel, run| {
        eprintln!("{:<14} seed {:<4} total {:.6e}", sel.name, run.seed, run.table.overall.total_mse);
    })?;
    let medians: Vec<Value> = results
        .iter()
        .map(|r| json!({"config": r.name(), "median_total_mse": median(&r.seed_totals())}))
        .collect();
    let manifest = json!({
        "command": "ablate",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "conventions": conventions(),
        "results": {"medians": medians, "target_scale": data.target_scale},
    });
    export_report(&cfg.output, &results, data.mask.grid, data.target_scale, &manifest)?;
    write_text(&cfg.output.join("ablation_runs.csv"), &runs_csv(&results))
}

fn series_mask(cfg: &RunConfig, frames: &[ChannelVolume]) -> Result<Option<Vec<bool>>, CliError> {
    let Some(path) = &cfg.dce.mask else {
        return Ok(None);
    };
    let mask = load_mask(path)?;
    if mask.grid != frames[0].grid {
        return Err(CliError::config("dce.mask: grid differs from the series"));
    }
    Ok(Some(mask.valid))
}

fn load_dce(cfg: &RunConfig) -> Result<(Vec<ChannelVolume>, TimeGrid, Option<Vec<bool>>), CliError> {
    let dir = cfg
        .dce
        .series
        .as_ref()
        .ok_or_else(|| CliError::config("dce.series: a DCE series directory is required"))?;
    let (frames, times) = load_series(dir)?;
    if frames.is_empty() {
        return Err(CliError::config("dce.series: series has no frames"));
    }
    let valid = series_mask(cfg, &frames)?;
    Ok((frames, times, valid))
}

/// Flag bits in the `fit_flags` map.
pub const FLAG_CONVERGED: u8 = 1;
pub const FLAG_DEGENERATE: u8 = 2;
pub const FLAG_DIVERGED: u8 = 4;

pub fn tofts_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let (frames, times, valid) = load_dce(cfg)?;
    let aif = aif_on(&times, &cfg.dce.aif)?;
    let grid = frames[0].grid;
    let n = grid.voxel_count();
    let mut maps = vec![vec![0.0; n]; 6];
    let mut curve = vec![0.0; frames.len()];
    let (mut fitted, mut converged) = (0usize, 0usize);
    for i in 0..n {
        if !valid.as_ref().map_or(true, |v| v[i]) {
            continue;
        }
        for (k, f) in frames.iter().enumerate() {
            curve[k] = f.data[i];
        }
        let r = fit_tofts(&curve, &aif, &times, &cfg.dce.init)?;
        let flags = FLAG_CONVERGED * r.converged as u8
            | FLAG_DEGENERATE * r.degenerate as u8
            | FLAG_DIVERGED * r.diverged as u8;
        for (map, v) in maps.iter_mut().zip([
            r.params.ktrans,
            r.params.ve,
            r.params.vp,
            r.offset,
            r.residual_norm,
            flags as f64,
        ]) {
            map[i] = v;
        }
        fitted += 1;
        converged += r.converged as usize;
    }
    fs::create_dir_all(&cfg.output)?;
    for (name, data) in ["Ktrans", "ve", "vp", "offset", "residual_norm", "fit_flags"].iter().zip(maps) {
        save_volume(&ChannelVolume::new(*name, grid, data)?, cfg.output.join(name))?;
    }
    eprintln!("tofts-fit: {fitted} voxels fitted, {converged} converged");
    write_manifest(
        cfg,
        "tofts-fit",
        json!({"fitted_voxels": fitted, "converged_voxels": converged, "ktrans_unit": "1/s"}),
    )
}

pub fn ttp(cfg: &RunConfig) -> Result<(), CliError> {
    let (frames, times, valid) = load_dce(cfg)?;
    let map = ttp_map(&frames, times.times(), cfg.dce.ttp_norm_s, valid.as_deref())?;
    fs::create_dir_all(&cfg.output)?;
    save_volume(&map, cfg.output.join("TTP"))?;
    let nonzero = map.data.iter().filter(|v| **v != 0.0).count();
    write_manifest(cfg, "ttp", json!({"nonzero_voxels": nonzero, "frames": frames.len()}))
}

pub fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let outcomes = selftest::run_all()?;
    let mut report = String::new();
    for o in &outcomes {
        println!("{}", o.line());
        report.push_str(&o.line());
        report.push('\n');
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    fs::create_dir_all(&cfg.output)?;
    write_text(&cfg.output.join("check.txt"), &report)?;
    write_manifest(cfg, "check", json!({"checks": outcomes, "failed": failed}))?;
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
