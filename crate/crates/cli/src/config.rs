use std::fs;
use std::path::{Path, PathBuf};

use orthosep::eval::ablation_configs;
use orthosep::inr::TrainConfig;
use orthosep::kinetics::ToftsParams;
use orthosep::phantom::PhantomSpec;
use orthosep::preprocess::{default_bindings, FeatureSelection, NormalizationBinding, TTP_NORM_SECONDS};
use orthosep::projection::ProjectorSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Biexponential population input function, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AifConfig {
    pub delay_s: f64,
    pub amplitude: f64,
    pub decay1: f64,
    pub decay2: f64,
}

impl Default for AifConfig {
    fn default() -> Self {
        AifConfig {
            delay_s: 10.0,
            amplitude: 6.0,
            decay1: 0.5,
            decay2: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DceConfig {
    /// Directory holding `dce.json` and its frames. Input to `tofts-fit`
    /// and `ttp`; `phantom` writes a synthetic series there when
    /// `synthesize` is set.
    pub series: Option<PathBuf>,
    /// Optional region mask restricting fits and the TTP peak percentile.
    pub mask: Option<PathBuf>,
    pub synthesize: bool,
    pub dt_s: f64,
    pub duration_s: f64,
    pub noise_sd: f64,
    pub aif: AifConfig,
    pub init: ToftsParams,
    pub ttp_norm_s: f64,
}

impl Default for DceConfig {
    fn default() -> Self {
        DceConfig {
            series: None,
            mask: None,
            synthesize: false,
            dt_s: 5.0,
            duration_s: 240.0,
            noise_sd: 0.0,
            aif: AifConfig::default(),
            init: ToftsParams {
                ktrans: 0.005,
                ve: 0.3,
                vp: 0.05,
            },
            ttp_norm_s: TTP_NORM_SECONDS,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory with `dataset.json`. When absent the phantom spec
    /// is generated in memory.
    pub dataset: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub bindings: Vec<NormalizationBinding>,
    /// One of the eleven ablation set names.
    pub selection: String,
    pub train: TrainConfig,
    /// Projector used for decomposition and reporting.
    pub eval_projector: ProjectorSpec,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Checkpoint directory to decompose with or resume from.
    pub checkpoint: Option<PathBuf>,
    /// Ablation sets to run; empty means all eleven.
    pub ablations: Vec<String>,
    pub dce: DceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            phantom: PhantomSpec::default(),
            bindings: default_bindings(),
            selection: "full".into(),
            train: TrainConfig::default(),
            eval_projector: ProjectorSpec::default(),
            output: PathBuf::from("out"),
            seeds: vec![0],
            checkpoint: None,
            ablations: Vec::new(),
            dce: DceConfig::default(),
        }
    }
}

pub fn selection_by_name(name: &str) -> Result<FeatureSelection, CliError> {
    ablation_configs()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let known: Vec<String> = ablation_configs().into_iter().map(|s| s.name).collect();
            CliError::config(format!("selection: unknown set {name:?}; expected one of {}", known.join(", ")))
        })
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        fn field(name: &'static str) -> impl Fn(orthosep::Error) -> CliError {
            move |e| CliError::config(format!("{name}: {e}"))
        }
        self.phantom.validate().map_err(field("phantom"))?;
        self.train.validate(1).map_err(field("train"))?;
        self.eval_projector.validate().map_err(field("eval_projector"))?;
        for b in &self.bindings {
            b.rule.validate().map_err(field("bindings"))?;
        }
        selection_by_name(&self.selection)?;
        for a in &self.ablations {
            selection_by_name(a)?;
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds: at least one seed is required"));
        }
        let d = &self.dce;
        if !(d.dt_s > 0.0 && d.duration_s > d.dt_s && d.noise_sd >= 0.0 && d.ttp_norm_s > 0.0) {
            return Err(CliError::config(
                "dce: need dt_s > 0, duration_s > dt_s, noise_sd >= 0 and ttp_norm_s > 0",
            ));
        }
        Ok(())
    }
}

/// Sets `path` (dot separated) in a JSON object, creating objects on the
/// way. The value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("--set: empty key segment in {key:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("--set: {key:?} descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields one part")
}

/// Which seed the `--seed` flag replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTarget {
    Phantom,
    Network,
}

/// Reads the optional config file (or manifest), applies overrides and the
/// seed flag, and validates the result.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<(u64, SeedTarget)>,
    output: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    // a manifest from an earlier run carries its resolved config
    if let Some(inner) = root.get("command").and(root.get("config")) {
        root = inner.clone();
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let at = e.path().to_string();
        CliError::config(format!("{at}: {}", e.into_inner()))
    })?;
    match seed {
        Some((s, SeedTarget::Phantom)) => cfg.phantom.seed = s,
        Some((s, SeedTarget::Network)) => {
            cfg.seeds = vec![s];
            cfg.train.seed = s;
        }
        None => {}
    }
    if let Some(o) = output {
        cfg.output = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}
