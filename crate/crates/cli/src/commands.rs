//! The six workflow commands. Each one reads what it needs from disk,
//! calls into the engine, and writes deterministic JSON reports; wall-clock
//! numbers live only in a `timing` sub-object so report files diff cleanly
//! across runs.

use std::path::Path;
use std::time::Instant;

use dnfuse::backbone::{make_toy_backbone, ToyBackbone};
use dnfuse::denoiser::{
    load_denoisers, save_denoisers, train_denoisers, train_denoisers_labeled, DenoiseLayer,
    LayerReport,
};
use dnfuse::evalkit::bench::bench_latency;
use dnfuse::evalkit::gen_synthetic;
use dnfuse::evalkit::metrics::{compute_cmc, compute_map, Metric};
use dnfuse::evalkit::{DatasetMeta, RetrievalDataset};
use dnfuse::fusion::{explicit_forward, fuse_model, verify_equivalence, FusedModel};
use dnfuse::schedule::{build_schedule, NoiseSchedule, ScheduleParams};
use dnfuse::{Error, Matrix, Rng, Vector};
use serde::Serialize;

use crate::artifacts::{load_dataset, save_dataset, StoredDataset};
use crate::config::RunConfig;

/// A command's terminal state: its exit code plus the message for stderr
/// when the code is nonzero.
pub struct Outcome {
    pub code: i32,
    pub message: Option<String>,
}

impl Outcome {
    fn ok() -> Self {
        Outcome { code: 0, message: None }
    }

    fn fail(code: i32, message: String) -> Self {
        Outcome { code, message: Some(message) }
    }
}

/// Engine errors split into "the computation itself failed" (exit 1) and
/// "the request or its files are wrong" (exit 2).
fn engine_exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => 1,
        _ => 2,
    }
}

fn fail_engine(e: Error) -> Outcome {
    Outcome::fail(engine_exit_code(&e), e.to_string())
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Serializes a report with a stable field order and trailing newline,
/// creating parent directories on the way.
fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::Io)?;
        }
    }
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::CorruptFile(format!("report encode: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::Io)
}

fn rebuild_schedule(params: &ScheduleParams) -> Result<NoiseSchedule, Error> {
    build_schedule(params.timesteps, params.beta_start, params.beta_end, params.kind)
}

fn require_file(path: &str, role: &str) -> Result<(), Outcome> {
    if Path::new(path).is_file() {
        Ok(())
    } else {
        Err(Outcome::fail(2, format!("{role} not found at {path}")))
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vector> {
    (0..m.rows()).map(|i| m.row_vector(i)).collect()
}

/// Generates the synthetic benchmark and the frozen backbone it will be
/// measured against. Deterministic in the config, so re-runs are
/// byte-identical.
pub fn cmd_gen_data(cfg: &RunConfig) -> Outcome {
    let b = &cfg.benchmark;
    let data = match gen_synthetic(b.num_ids, b.per_id, b.dim, b.noise_level, b.seed) {
        Ok(d) => d,
        Err(e) => return fail_engine(e),
    };
    let bb = match make_toy_backbone(cfg.backbone.seed, &cfg.backbone.dims, cfg.backbone.activation)
    {
        Ok(bb) => bb,
        Err(e) => return fail_engine(e),
    };
    if bb.stage_dims()[0] != data.dataset.dim() {
        return Outcome::fail(
            2,
            format!(
                "backbone.dims[0] is {} but benchmark.dim is {}",
                bb.stage_dims()[0],
                data.dataset.dim()
            ),
        );
    }
    if let Err(e) = save_dataset(Path::new(&cfg.paths.dataset), &data) {
        return fail_engine(e);
    }
    if let Some(parent) = Path::new(&cfg.paths.backbone).parent() {
        if !parent.as_os_str().is_empty() {
            if let Err(e) = std::fs::create_dir_all(parent) {
                return fail_engine(Error::Io(e));
            }
        }
    }
    if let Err(e) = bb.save(&cfg.paths.backbone) {
        return fail_engine(e);
    }
    println!(
        "wrote dataset ({} queries, {} gallery, dim {}) to {} and backbone to {}",
        data.dataset.query().rows(),
        data.dataset.gallery().rows(),
        data.dataset.dim(),
        cfg.paths.dataset,
        cfg.paths.backbone
    );
    Outcome::ok()
}

#[derive(Debug, Serialize)]
struct TrainReportFile {
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    layers: Vec<LayerReport>,
    timing: Timing,
}

#[derive(Debug, Serialize)]
struct Timing {
    #[serde(skip_serializing_if = "Option::is_none")]
    train_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verify_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bench_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_ns_per_sample: Option<LatencyBlock>,
}

impl Timing {
    fn empty() -> Self {
        Timing {
            train_ms: None,
            verify_ms: None,
            eval_ms: None,
            bench_ms: None,
            latency_ns_per_sample: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct LatencyBlock {
    baseline: f64,
    explicit_denoise: f64,
    fused: f64,
}

/// Trains the per-layer denoisers against the frozen backbone's features.
/// On divergence the report is still written and the exit code is 1.
pub fn cmd_train(cfg: &RunConfig) -> Outcome {
    if let Err(o) = require_file(&cfg.paths.backbone, "backbone checkpoint") {
        return o;
    }
    let start = Instant::now();
    let bb = match ToyBackbone::load(&cfg.paths.backbone) {
        Ok(bb) => bb,
        Err(e) => return fail_engine(e),
    };
    let stored = match load_dataset(Path::new(&cfg.paths.dataset)) {
        Ok(s) => s,
        Err(e) => return fail_engine(e),
    };
    let schedule = match rebuild_schedule(&cfg.schedule) {
        Ok(s) => s,
        Err(e) => return fail_engine(e),
    };
    let data = matrix_rows(&stored.raw);

    let trained = if cfg.train.lambda > 0.0 {
        match &stored.raw_ids {
            Some(ids) => train_denoisers_labeled(&bb, &data, ids, &schedule, &cfg.train),
            None => Err(Error::MissingLabels),
        }
    } else {
        train_denoisers(&bb, &data, &schedule, &cfg.train)
    };

    let report_path = cfg.paths.report("train_report.json");
    match trained {
        Ok((layers, report)) => {
            if let Err(e) = save_denoisers(&cfg.paths.denoisers, &layers, &cfg.schedule, &cfg.train)
            {
                return fail_engine(e);
            }
            let file = TrainReportFile {
                status: "ok",
                error: None,
                layers: report.layers,
                timing: Timing { train_ms: Some(ms_since(start)), ..Timing::empty() },
            };
            if let Err(e) = write_report(&report_path, &file) {
                return fail_engine(e);
            }
            println!(
                "trained {} denoiser layers, checkpoint at {}",
                bb.layer_count(),
                cfg.paths.denoisers
            );
            Outcome::ok()
        }
        Err(e @ Error::Divergence { .. }) => {
            let file = TrainReportFile {
                status: "diverged",
                error: Some(e.to_string()),
                layers: Vec::new(),
                timing: Timing { train_ms: Some(ms_since(start)), ..Timing::empty() },
            };
            if let Err(we) = write_report(&report_path, &file) {
                return fail_engine(we);
            }
            fail_engine(e)
        }
        Err(e) => fail_engine(e),
    }
}

/// Folds the trained denoisers into the backbone weights. The schedule and
/// training provenance come from the denoiser checkpoint, not the live
/// config, so a fuse always matches the training run that produced it.
pub fn cmd_fuse(cfg: &RunConfig) -> Outcome {
    if let Err(o) = require_file(&cfg.paths.backbone, "backbone checkpoint") {
        return o;
    }
    if let Err(o) = require_file(&cfg.paths.denoisers, "denoiser checkpoint") {
        return o;
    }
    let bb = match ToyBackbone::load(&cfg.paths.backbone) {
        Ok(bb) => bb,
        Err(e) => return fail_engine(e),
    };
    let (layers, sched_params, _train) = match load_denoisers(&cfg.paths.denoisers) {
        Ok(t) => t,
        Err(e) => return fail_engine(e),
    };
    let schedule = match rebuild_schedule(&sched_params) {
        Ok(s) => s,
        Err(e) => return fail_engine(e),
    };
    let fused = match fuse_model(&bb, &layers, &schedule, cfg.fusion, &Rng::new(cfg.seed)) {
        Ok(f) => f,
        Err(e) => return fail_engine(e),
    };
    let path = cfg.paths.fused();
    if let Some(parent) = path.parent() {
        if let Err(e) = std::fs::create_dir_all(parent) {
            return fail_engine(Error::Io(e));
        }
    }
    if let Err(e) = fused.save(&path) {
        return fail_engine(e);
    }
    println!("fused {} layers into {}", layers.len(), path.display());
    Outcome::ok()
}

#[derive(Debug, Serialize)]
struct VerifyReportFile {
    #[serde(flatten)]
    report: dnfuse::fusion::EquivalenceReport,
    timing: Timing,
}

/// Replays the explicit denoise pipeline against the fused weights on
/// fresh random inputs. Exit 0 only when the report says pass; a finite
/// gap above tolerance is a verification failure, not an error.
pub fn cmd_verify(cfg: &RunConfig) -> Outcome {
    for (path, role) in [
        (&cfg.paths.backbone, "backbone checkpoint"),
        (&cfg.paths.denoisers, "denoiser checkpoint"),
    ] {
        if let Err(o) = require_file(path, role) {
            return o;
        }
    }
    let fused_path = cfg.paths.fused();
    if !fused_path.is_file() {
        return Outcome::fail(2, format!("fused checkpoint not found at {}", fused_path.display()));
    }
    let start = Instant::now();
    let bb = match ToyBackbone::load(&cfg.paths.backbone) {
        Ok(bb) => bb,
        Err(e) => return fail_engine(e),
    };
    let (layers, sched_params, _train) = match load_denoisers(&cfg.paths.denoisers) {
        Ok(t) => t,
        Err(e) => return fail_engine(e),
    };
    let schedule = match rebuild_schedule(&sched_params) {
        Ok(s) => s,
        Err(e) => return fail_engine(e),
    };
    let fused = match FusedModel::load(&fused_path) {
        Ok(f) => f,
        Err(e) => return fail_engine(e),
    };
    let mode = fused.provenance().mode;
    let report = match verify_equivalence(
        &bb,
        &layers,
        &fused,
        &schedule,
        mode,
        cfg.verify.samples,
        cfg.verify.tol,
    ) {
        Ok(r) => r,
        Err(e) => return fail_engine(e),
    };
    let pass = report.pass;
    let file = VerifyReportFile {
        report,
        timing: Timing { verify_ms: Some(ms_since(start)), ..Timing::empty() },
    };
    if let Err(e) = write_report(&cfg.paths.report("verify_report.json"), &file) {
        return fail_engine(e);
    }
    if pass {
        println!("equivalence verified over {} samples", cfg.verify.samples);
        Outcome::ok()
    } else {
        Outcome::fail(
            1,
            format!(
                "equivalence check failed: max_rel_err {} over tol {}",
                file.report.max_rel_err, cfg.verify.tol
            ),
        )
    }
}

#[derive(Debug, Serialize)]
struct VariantMetrics {
    map: f64,
    rank1: f64,
    cmc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    param_count: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Variants {
    baseline: VariantMetrics,
    explicit_denoise: VariantMetrics,
    fused: VariantMetrics,
}

#[derive(Debug, Serialize)]
struct EvalReportFile {
    metric: Metric,
    dataset: DatasetMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    variants: Variants,
    timing: Timing,
}

struct LoadedModels {
    bb: ToyBackbone,
    layers: Vec<DenoiseLayer>,
    schedule: NoiseSchedule,
    fused: FusedModel,
    stored: StoredDataset,
}

fn load_models(cfg: &RunConfig) -> Result<LoadedModels, Outcome> {
    for (path, role) in [
        (&cfg.paths.backbone, "backbone checkpoint"),
        (&cfg.paths.denoisers, "denoiser checkpoint"),
    ] {
        require_file(path, role)?;
    }
    let fused_path = cfg.paths.fused();
    if !fused_path.is_file() {
        return Err(Outcome::fail(
            2,
            format!("fused checkpoint not found at {}", fused_path.display()),
        ));
    }
    let bb = ToyBackbone::load(&cfg.paths.backbone).map_err(fail_engine)?;
    let (layers, sched_params, _train) =
        load_denoisers(&cfg.paths.denoisers).map_err(fail_engine)?;
    let schedule = rebuild_schedule(&sched_params).map_err(fail_engine)?;
    let fused = FusedModel::load(&fused_path).map_err(fail_engine)?;
    let stored = load_dataset(Path::new(&cfg.paths.dataset)).map_err(fail_engine)?;
    Ok(LoadedModels { bb, layers, schedule, fused, stored })
}

fn variant_metrics(
    dataset: &RetrievalDataset,
    metric: Metric,
    max_k: usize,
    forward: &dyn Fn(&Vector) -> Result<Vector, Error>,
) -> Result<VariantMetrics, Error> {
    let embed = |m: &Matrix| -> Result<Matrix, Error> {
        let rows: Result<Vec<Vector>, Error> =
            (0..m.rows()).map(|i| forward(&m.row_vector(i))).collect();
        Matrix::from_rows(&rows?)
    };
    let q = embed(dataset.query())?;
    let g = embed(dataset.gallery())?;
    let k = max_k.clamp(1, dataset.gallery().rows());
    let map = compute_map(&q, dataset.query_ids(), &g, dataset.gallery_ids(), metric)?;
    let cmc = compute_cmc(&q, dataset.query_ids(), &g, dataset.gallery_ids(), metric, k)?;
    Ok(VariantMetrics { map, rank1: cmc[0], cmc, param_count: None })
}

fn run_eval(cfg: &RunConfig, with_latency: bool) -> Outcome {
    let start = Instant::now();
    let models = match load_models(cfg) {
        Ok(m) => m,
        Err(o) => return o,
    };
    let LoadedModels { bb, layers, schedule, fused, stored } = &models;
    let mode = fused.provenance().mode;
    let seed = fused.provenance().seed;
    let ds = &stored.dataset;

    let baseline_fwd = |x: &Vector| bb.forward_final(x);
    let explicit_fwd = |x: &Vector| explicit_forward(bb, layers, schedule, mode, seed, x);
    let fused_fwd = |x: &Vector| fused.forward(x);

    let mut baseline = match variant_metrics(ds, cfg.eval.metric, cfg.eval.max_k, &baseline_fwd) {
        Ok(v) => v,
        Err(e) => return fail_engine(e),
    };
    let mut explicit = match variant_metrics(ds, cfg.eval.metric, cfg.eval.max_k, &explicit_fwd) {
        Ok(v) => v,
        Err(e) => return fail_engine(e),
    };
    let mut fused_m = match variant_metrics(ds, cfg.eval.metric, cfg.eval.max_k, &fused_fwd) {
        Ok(v) => v,
        Err(e) => return fail_engine(e),
    };

    let mut timing = Timing::empty();
    let (report_name, repeats, batch) = if with_latency {
        let denoiser_params: usize = layers.iter().map(|l| l.dim() * l.dim()).sum();
        baseline.param_count = Some(bb.param_count());
        explicit.param_count = Some(bb.param_count() + denoiser_params);
        fused_m.param_count = Some(fused.param_count());

        let n = cfg.bench.batch.clamp(1, ds.query().rows());
        let batch: Vec<Vector> = (0..n).map(|i| ds.query().row_vector(i)).collect();
        // The eval pass above already ran every forward over the full
        // query set, so failures inside the timing loop are unreachable.
        let lat = |f: &dyn Fn(&Vector) -> Result<Vector, Error>| {
            bench_latency(|x| f(x).expect("forward validated by eval pass"), &batch, cfg.bench.repeats)
        };
        let (lb, le, lf) = match (lat(&baseline_fwd), lat(&explicit_fwd), lat(&fused_fwd)) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return fail_engine(e),
        };
        timing.latency_ns_per_sample =
            Some(LatencyBlock { baseline: lb, explicit_denoise: le, fused: lf });
        timing.bench_ms = Some(ms_since(start));
        ("bench_report.json", Some(cfg.bench.repeats), Some(n))
    } else {
        timing.eval_ms = Some(ms_since(start));
        ("eval_report.json", None, None)
    };

    let file = EvalReportFile {
        metric: cfg.eval.metric,
        dataset: ds.meta().clone(),
        repeats,
        batch,
        variants: Variants { baseline, explicit_denoise: explicit, fused: fused_m },
        timing,
    };
    if let Err(e) = write_report(&cfg.paths.report(report_name), &file) {
        return fail_engine(e);
    }
    println!(
        "{}: baseline mAP {:.4}, fused mAP {:.4}",
        report_name.trim_end_matches(".json"),
        file.variants.baseline.map,
        file.variants.fused.map
    );
    Outcome::ok()
}

/// Retrieval quality for the baseline, explicit-denoise, and fused
/// variants on the stored benchmark.
pub fn cmd_eval(cfg: &RunConfig) -> Outcome {
    run_eval(cfg, false)
}

/// Eval plus parameter counts and median forward latency per variant.
pub fn cmd_bench(cfg: &RunConfig) -> Outcome {
    run_eval(cfg, true)
}
