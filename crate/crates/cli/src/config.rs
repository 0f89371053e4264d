//! Run configuration. One JSON document drives every subcommand; any field
//! can be overridden on the command line with dotted keys (`--set a.b=v`).
//! Unknown keys are rejected so typos fail loudly instead of silently
//! running defaults.

use std::path::{Path, PathBuf};

use dnfuse::backbone::Activation;
use dnfuse::denoiser::TrainConfig;
use dnfuse::evalkit::metrics::Metric;
use dnfuse::fusion::FusionMode;
use dnfuse::schedule::{ScheduleKind, ScheduleParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Where artifacts live. `dataset` is a directory, the rest are files
/// except `output`, which holds reports and the fused checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub backbone: String,
    pub denoisers: String,
    pub dataset: String,
    pub output: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            backbone: "out/backbone.dnck".into(),
            denoisers: "out/denoisers.dnck".into(),
            dataset: "out/dataset".into(),
            output: "out".into(),
        }
    }
}

impl Paths {
    pub fn fused(&self) -> PathBuf {
        Path::new(&self.output).join("fused.dnck")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        Path::new(&self.output).join(name)
    }
}

/// Shape and seed of the frozen backbone that gen-data materializes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            seed: 7,
            dims: vec![32, 32, 32, 32, 32],
            activation: Activation::Relu,
        }
    }
}

/// Synthetic retrieval benchmark shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub dim: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { num_ids: 64, per_id: 16, dim: 32, noise_level: 1.0, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    /// CMC curve length; clamped to the gallery size at run time.
    pub max_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { metric: Metric::Cosine, max_k: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub samples: usize,
    pub tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { samples: 1000, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Median-of-repeats sample count, odd so the median is a real run.
    pub repeats: usize,
    /// How many query rows feed each timed pass.
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repeats: 101, batch: 256 }
    }
}

/// The whole run in one document. `seed` drives fusion noise and
/// verification inputs; dataset and training carry their own seeds so the
/// three sources can be varied independently.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub schedule: ScheduleParams,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub fusion: FusionMode,
    pub benchmark: BenchmarkConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            schedule: ScheduleParams {
                timesteps: 4,
                beta_start: 0.85,
                beta_end: 0.95,
                kind: ScheduleKind::Linear,
            },
            backbone: BackboneConfig::default(),
            train: TrainConfig { epochs: 60, lr: 0.05, batch: 64, seed: 42, lambda: 0.0 },
            fusion: FusionMode::default(),
            benchmark: BenchmarkConfig::default(),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Builds the effective config: defaults, then the optional file, then
/// dotted-key overrides, each layer strict about unknown keys.
pub fn resolve(file: Option<&str>, sets: &[(String, String)]) -> Result<RunConfig, String> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {path}: {e}"))?;
        let overlay: Value =
            serde_json::from_str(&text).map_err(|e| format!("config {path} is not JSON: {e}"))?;
        merge(&mut value, &overlay, "")?;
    }
    for (key, raw) in sets {
        set_path(&mut value, key, raw)?;
    }
    serde_json::from_value(value).map_err(|e| format!("invalid config: {e}"))
}

/// Recursive overlay: objects merge key by key, everything else replaces.
/// Keys absent from the defaults are reported with their full path.
fn merge(base: &mut Value, overlay: &Value, at: &str) -> Result<(), String> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(format!("unknown config key: {path}")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Applies one `--set key.path=value` pair. The value is parsed as JSON
/// when possible so numbers and booleans type correctly; anything else is
/// taken as a bare string, which covers enum variants and paths.
fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let mut slot = root;
    for seg in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(seg))
            .ok_or_else(|| format!("unknown config key: {key}"))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnfuse::fusion::Algebra;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.schedule, cfg.schedule);
        assert_eq!(back.backbone.dims, cfg.backbone.dims);
        assert_eq!(back.train.epochs, cfg.train.epochs);
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let sets = vec![
            ("train.epochs".to_string(), "3".to_string()),
            ("fusion.algebra".to_string(), "no_rescale".to_string()),
            ("paths.output".to_string(), "elsewhere".to_string()),
            ("benchmark.noise_level".to_string(), "0.5".to_string()),
        ];
        let cfg = resolve(None, &sets).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.fusion.algebra, Algebra::NoRescale);
        assert_eq!(cfg.paths.output, "elsewhere");
        assert_eq!(cfg.benchmark.noise_level, 0.5);
    }

    #[test]
    fn unknown_keys_name_the_offender() {
        let err = resolve(None, &[("train.epoch".into(), "3".into())]).unwrap_err();
        assert!(err.contains("train.epoch"), "{err}");
        let err = resolve(None, &[("nope".into(), "1".into())]).unwrap_err();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn type_errors_are_rejected() {
        let err = resolve(None, &[("train.epochs".into(), "\"many\"".into())]).unwrap_err();
        assert!(err.contains("invalid config"), "{err}");
    }

    #[test]
    fn config_file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 9, "verify": {"tol": 0.5}}"#).unwrap();
        let cfg = resolve(Some(path.to_str().unwrap()), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.verify.tol, 0.5);
        assert_eq!(cfg.verify.samples, 1000);
    }

    #[test]
    fn config_file_with_unknown_section_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"schedule": {"steps": 4}}"#).unwrap();
        let err = resolve(Some(path.to_str().unwrap()), &[]).unwrap_err();
        assert!(err.contains("schedule.steps"), "{err}");
    }
}
