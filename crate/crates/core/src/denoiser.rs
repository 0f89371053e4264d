//! Per-layer linear noise predictors and their training loop.
//!
//! One `DenoiseLayer` per backbone block. Layer `i` owns a square matrix
//! `W_D` bound to timestep `t = i`: deeper layers were assigned larger
//! noise amplitudes, so their denoisers learn stronger corrections. The
//! predictor is purely linear (no bias, no time embedding) because that is
//! the only form the downstream parameter fusion supports in closed form.
//!
//! Training is plain mini-batch gradient descent on the noise-prediction
//! loss, with an optional cross-entropy term supplied by a frozen linear
//! probe when identity labels are available. Layers train independently
//! and may run on worker threads; every random draw comes from a stream
//! keyed by `(seed, purpose, layer)`, so results do not depend on the
//! worker count. `DNF_THREADS` caps the workers.

use crate::backbone::ToyBackbone;
use crate::ckpt;
use crate::error::{Error, Result};
use crate::evalkit::probe::{cross_entropy, linear_probe, softmax, LinearProbe};
use crate::numerics::{outer, Matrix, Rng, Vector};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use serde::{Deserialize, Serialize};

// Stream-tag families. Purposes never share a stream, layers never share
// a stream, and replaying any one stream needs only (seed, tag).
const TAG_TRAIN: u64 = 0x01 << 56;
const TAG_EVAL: u64 = 0x02 << 56;
const TAG_PROBE: u64 = 0x03 << 56;

// Frozen-probe hyperparameters for the label-driven mode.
const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.5;

fn stream(seed: u64, tag: u64, layer: usize) -> Rng {
    Rng::new(seed).split(tag | layer as u64)
}

/// How the stochastic term of a denoise step is scaled. `C2` multiplies
/// the posterior variance directly; `Sigma` uses its square root, the
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    C2,
    Sigma,
}

/// Whether a denoise chain (or fusion) injects noise. `SampledOnce` draws
/// a single `z` and reuses it for every step of the chain, matching the
/// closed two-step form which shares one draw across both steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPolicy {
    Zero,
    SampledOnce,
}

/// Linear noise predictor for one backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseLayer {
    w_d: Matrix,
    layer_index: usize,
    timestep: usize,
}

impl DenoiseLayer {
    pub fn new(layer_index: usize, timestep: usize, w_d: Matrix) -> Result<Self> {
        if w_d.rows() != w_d.cols() {
            return Err(Error::ShapeMismatch {
                op: "denoise layer weight",
                lhs: w_d.shape(),
                rhs: (w_d.cols(), w_d.cols()),
            });
        }
        if layer_index == 0 || timestep == 0 {
            return Err(Error::InvalidArgument(
                "layer_index and timestep are 1-based, got 0".into(),
            ));
        }
        Ok(DenoiseLayer { w_d, layer_index, timestep })
    }

    /// Zero predictor: the untrained state, and a no-op under fusion.
    pub fn zeros(layer_index: usize, timestep: usize, dim: usize) -> Result<Self> {
        DenoiseLayer::new(layer_index, timestep, Matrix::zeros(dim, dim))
    }

    pub fn w_d(&self) -> &Matrix {
        &self.w_d
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn dim(&self) -> usize {
        self.w_d.rows()
    }

    /// `W_D · x_t`.
    pub fn predict_noise(&self, x_t: &Vector) -> Result<Vector> {
        self.w_d.mul_vec(x_t)
    }

    /// Noise-prediction loss at a given clean feature: noises `x0` at `t`
    /// with the supplied `eps`, then scores `‖eps − W_D·x_t‖²`.
    pub fn loss_p(&self, x0: &Vector, t: usize, eps: &Vector, s: &NoiseSchedule) -> Result<f64> {
        let x_t = s.forward_noise(x0, t, eps)?;
        let pred = self.predict_noise(&x_t)?;
        Ok(eps.sub(&pred)?.norm_sq())
    }

    /// Analytic gradient of [`loss_p`] in `W_D`: `2·(W_D·x_t − eps)·x_tᵀ`.
    ///
    /// [`loss_p`]: DenoiseLayer::loss_p
    pub fn grad_loss_p(
        &self,
        x0: &Vector,
        t: usize,
        eps: &Vector,
        s: &NoiseSchedule,
    ) -> Result<Matrix> {
        let x_t = s.forward_noise(x0, t, eps)?;
        let resid = self.predict_noise(&x_t)?.sub(eps)?;
        Ok(outer(&resid, &x_t).scale(2.0))
    }

    /// Deterministic part of a denoise step:
    /// `(1/√α_t)·x_t − c1(t)·W_D·x_t`.
    pub fn denoise_mean(&self, x_t: &Vector, t: usize, s: &NoiseSchedule) -> Result<Vector> {
        let c1 = s.c1(t)?;
        let pred = self.predict_noise(x_t)?;
        x_t.scale(1.0 / s.alpha(t).sqrt()).add_scaled(-c1, &pred)
    }

    /// One reverse step: the deterministic mean plus `scale(t)·z`, where
    /// `scale` is `c2(t)` or `sigma(t)` depending on `noise_scale`.
    pub fn denoise_step(
        &self,
        x_t: &Vector,
        t: usize,
        s: &NoiseSchedule,
        z: &Vector,
        noise_scale: NoiseScale,
    ) -> Result<Vector> {
        let scale = match noise_scale {
            NoiseScale::C2 => s.c2(t)?,
            NoiseScale::Sigma => s.sigma(t)?,
        };
        self.denoise_mean(x_t, t, s)?.add_scaled(scale, z)
    }
}

/// Applies [`DenoiseLayer::denoise_step`] for `t = steps` down to `1` with
/// a single shared `W_D`. With `ZPolicy::Zero` the noise term is skipped
/// outright and the chain is a pure function of its inputs; `SampledOnce`
/// draws one `z` from `rng` and reuses it at every step.
pub fn denoise_chain(
    x_top: &Vector,
    steps: usize,
    layer: &DenoiseLayer,
    s: &NoiseSchedule,
    z_policy: ZPolicy,
    noise_scale: NoiseScale,
    rng: &mut Rng,
) -> Result<Vector> {
    if steps > s.timesteps() {
        return Err(Error::InvalidArgument(format!(
            "chain of {steps} steps exceeds the schedule's {} timesteps",
            s.timesteps()
        )));
    }
    let z = match z_policy {
        ZPolicy::Zero => None,
        ZPolicy::SampledOnce => Some(rng.gaussian(x_top.dim())),
    };
    let mut cur = x_top.clone();
    for t in (1..=steps).rev() {
        cur = match &z {
            None => layer.denoise_mean(&cur, t, s)?,
            Some(z) => layer.denoise_step(&cur, t, s, z, noise_scale)?,
        };
    }
    Ok(cur)
}

/// Convex mix of a task loss and the noise-prediction loss:
/// `(1 − lambda)·task + lambda·p`. At `lambda = 1` the task term drops
/// out entirely, the fully label-free setting.
pub fn label_argumented_loss(task_loss: f64, p_loss: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * task_loss + lambda * p_loss
}

/// Gradient-descent settings. `lambda` is the weight on the label-driven
/// task term; 0 trains on noise prediction alone and needs no labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 120, lr: 4e-4, batch: 64, seed: 42, lambda: 0.0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be >= 1, got 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-layer training trace. `initial_loss` and `final_loss` are the mean
/// noise-prediction loss over the data under a fixed evaluation noise
/// stream, so the two numbers differ only through the trained weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    pub timestep: usize,
    pub dim: usize,
    pub epoch_loss: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub layers: Vec<LayerReport>,
}

/// Trains one denoiser per backbone layer on the noise-prediction loss.
/// Backbone and data are read-only; layer `i` trains at `t = i` on the
/// pre-activation features of block `i`. Requires `cfg.lambda == 0`; use
/// [`train_denoisers_labeled`] when a task term is wanted.
pub fn train_denoisers(
    bb: &ToyBackbone,
    data: &[Vector],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<DenoiseLayer>, TrainReport)> {
    if cfg.lambda != 0.0 {
        return Err(Error::MissingLabels);
    }
    train_impl(bb, data, None, s, cfg, worker_cap(bb.layer_count()))
}

/// Label-driven variant: mixes cross-entropy through a frozen per-layer
/// linear probe into the gradient with weight `cfg.lambda`. At
/// `lambda == 0` this is exactly [`train_denoisers`].
pub fn train_denoisers_labeled(
    bb: &ToyBackbone,
    data: &[Vector],
    labels: &[u32],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<DenoiseLayer>, TrainReport)> {
    if cfg.lambda == 0.0 {
        return train_denoisers(bb, data, s, cfg);
    }
    if labels.len() != data.len() {
        return Err(Error::DimMismatch {
            what: "training labels",
            expected: data.len(),
            got: labels.len(),
        });
    }
    train_impl(bb, data, Some(labels), s, cfg, worker_cap(bb.layer_count()))
}

fn worker_cap(layers: usize) -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("DNF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(avail);
    cap.min(layers).max(1)
}

fn train_impl(
    bb: &ToyBackbone,
    data: &[Vector],
    labels: Option<&[u32]>,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(Vec<DenoiseLayer>, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData { what: "training data" });
    }
    let n_layers = bb.layer_count();
    if s.timesteps() < n_layers {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} timesteps but the backbone needs t = 1..={n_layers}",
            s.timesteps()
        )));
    }

    // layer-major clean features, extracted once; the backbone stays frozen
    let mut features: Vec<Vec<Vector>> = (0..n_layers).map(|_| Vec::with_capacity(data.len())).collect();
    for x in data {
        let f = bb.forward(x)?;
        for (store, feat) in features.iter_mut().zip(f.per_layer) {
            store.push(feat);
        }
    }

    let mut slots: Vec<Option<Result<(DenoiseLayer, LayerReport)>>> =
        (0..n_layers).map(|_| None).collect();

    if workers <= 1 {
        for (idx, slot) in slots.iter_mut().enumerate() {
            *slot = Some(train_layer(idx + 1, &features[idx], labels, s, cfg));
        }
    } else {
        let chunk = n_layers.div_ceil(workers);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for ids in (0..n_layers).collect::<Vec<_>>().chunks(chunk) {
                let ids = ids.to_vec();
                let features = &features;
                handles.push(scope.spawn(move || {
                    ids.into_iter()
                        .map(|idx| (idx, train_layer(idx + 1, &features[idx], labels, s, cfg)))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (idx, res) in h.join().expect("layer training worker panicked") {
                    slots[idx] = Some(res);
                }
            }
        });
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut reports = Vec::with_capacity(n_layers);
    for slot in slots {
        let (layer, report) = slot.expect("every layer slot is filled")?;
        layers.push(layer);
        reports.push(report);
    }
    Ok((layers, TrainReport { layers: reports }))
}

/// Trains the layer-`i` denoiser at `t = i`. Fresh noise per example per
/// epoch from the layer's train stream, fixed data order, mean gradient
/// per mini-batch.
fn train_layer(
    layer_index: usize,
    feats: &[Vector],
    labels: Option<&[u32]>,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiseLayer, LayerReport)> {
    let t = layer_index;
    let dim = feats[0].dim();
    let n = feats.len();
    let c1 = s.c1(t)?;
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let w_task = cfg.lambda;
    let w_p = 1.0 - cfg.lambda;

    // frozen probe for the task gradient, trained on the clean features
    let probe: Option<(LinearProbe, Matrix)> = match labels {
        Some(labels) if w_task > 0.0 => {
            let probe_seed = stream(cfg.seed, TAG_PROBE, layer_index).seed();
            let p = linear_probe(&Matrix::from_rows(feats)?, labels, PROBE_EPOCHS, PROBE_LR, probe_seed)?;
            let vt = p.weights().transpose();
            Some((p, vt))
        }
        _ => None,
    };

    let mut w_d = Matrix::zeros(dim, dim);
    let mut train_rng = stream(cfg.seed, TAG_TRAIN, layer_index);
    let eval_rng = stream(cfg.seed, TAG_EVAL, layer_index);

    let initial_loss = eval_loss(&w_d, feats, t, s, eval_rng.clone())?;

    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut cursor = 0;
        while cursor < n {
            let batch = &feats[cursor..(cursor + cfg.batch).min(n)];
            let mut grad = Matrix::zeros(dim, dim);
            for (k, x0) in batch.iter().enumerate() {
                let eps = train_rng.gaussian(dim);
                let x_t = s.forward_noise(x0, t, &eps)?;
                let pred = w_d.mul_vec(&x_t)?;
                let resid = pred.sub(&eps)?;
                let p_loss = resid.norm_sq();
                grad.add_scaled_outer(2.0 * w_p, &resid, &x_t);

                let mut sample_loss = p_loss;
                if let Some((probe, vt)) = &probe {
                    let labels = labels.expect("probe implies labels");
                    let y = labels[cursor + k];
                    let x_hat = x_t.scale(inv_sqrt_alpha).add_scaled(-c1, &pred)?;
                    let mut delta = softmax(&probe.logits(&x_hat)?);
                    let ce = cross_entropy(&delta, y as usize);
                    {
                        let d = delta.as_mut_slice();
                        d[y as usize] -= 1.0;
                    }
                    let pull = vt.mul_vec(&delta)?;
                    grad.add_scaled_outer(-c1 * w_task, &pull, &x_t);
                    sample_loss = label_argumented_loss(ce, p_loss, w_p);
                }
                loss_sum += sample_loss;
            }
            w_d.add_scaled(-cfg.lr / batch.len() as f64, &grad);
            cursor += batch.len();
        }
        let mean = loss_sum / n as f64;
        if !mean.is_finite() || !w_d.is_finite() {
            return Err(Error::Divergence { layer: layer_index, epoch });
        }
        epoch_loss.push(mean);
    }

    let final_loss = eval_loss(&w_d, feats, t, s, eval_rng)?;
    let layer = DenoiseLayer::new(layer_index, t, w_d)?;
    let report = LayerReport {
        layer_index,
        timestep: t,
        dim,
        epoch_loss,
        initial_loss,
        final_loss,
    };
    Ok((layer, report))
}

/// Mean noise-prediction loss over the data with noise drawn from `rng`.
/// Callers pass a clone of the layer's eval stream so the draw sequence
/// is identical across calls.
fn eval_loss(
    w_d: &Matrix,
    feats: &[Vector],
    t: usize,
    s: &NoiseSchedule,
    mut rng: Rng,
) -> Result<f64> {
    let dim = feats[0].dim();
    let mut sum = 0.0;
    for x0 in feats {
        let eps = rng.gaussian(dim);
        let x_t = s.forward_noise(x0, t, &eps)?;
        let pred = w_d.mul_vec(&x_t)?;
        sum += eps.sub(&pred)?.norm_sq();
    }
    Ok(sum / feats.len() as f64)
}

const DENOISER_KIND: &str = "denoiser";

#[derive(Debug, Serialize, Deserialize)]
struct DenoiserHeader {
    kind: String,
    layer_count: usize,
    dims: Vec<usize>,
    timesteps: Vec<usize>,
    schedule: ScheduleParams,
    train: TrainConfig,
}

/// Serializes denoisers with the schedule and training settings that made
/// them, so downstream fusion can rebuild the exact same schedule.
pub fn denoisers_to_bytes(
    layers: &[DenoiseLayer],
    schedule: &ScheduleParams,
    train: &TrainConfig,
) -> Result<Vec<u8>> {
    if layers.is_empty() {
        return Err(Error::EmptyData { what: "denoiser layers" });
    }
    let header = DenoiserHeader {
        kind: DENOISER_KIND.into(),
        layer_count: layers.len(),
        dims: layers.iter().map(DenoiseLayer::dim).collect(),
        timesteps: layers.iter().map(DenoiseLayer::timestep).collect(),
        schedule: *schedule,
        train: train.clone(),
    };
    let blobs: Vec<&Matrix> = layers.iter().map(|l| &l.w_d).collect();
    ckpt::container_to_bytes(&header, &blobs)
}

pub fn save_denoisers(
    path: impl AsRef<std::path::Path>,
    layers: &[DenoiseLayer],
    schedule: &ScheduleParams,
    train: &TrainConfig,
) -> Result<()> {
    let bytes = denoisers_to_bytes(layers, schedule, train)?;
    std::fs::write(path, bytes).map_err(Error::Io)
}

pub fn denoisers_from_bytes(bytes: &[u8]) -> Result<(Vec<DenoiseLayer>, ScheduleParams, TrainConfig)> {
    let (header, blobs): (DenoiserHeader, Vec<Matrix>) = ckpt::read_container(&mut &bytes[..])?;
    if header.kind != DENOISER_KIND {
        return Err(Error::VersionMismatch {
            expected: DENOISER_KIND.into(),
            found: header.kind,
        });
    }
    if blobs.len() != header.layer_count
        || header.dims.len() != header.layer_count
        || header.timesteps.len() != header.layer_count
    {
        return Err(Error::CorruptFile(format!(
            "denoiser header declares {} layers but carries {} blobs",
            header.layer_count,
            blobs.len()
        )));
    }
    let mut layers = Vec::with_capacity(blobs.len());
    for (idx, (w_d, (&dim, &t))) in blobs
        .into_iter()
        .zip(header.dims.iter().zip(&header.timesteps))
        .enumerate()
    {
        if w_d.shape() != (dim, dim) {
            return Err(Error::CorruptFile(format!(
                "denoiser blob {idx} is {}x{}, header says {dim}x{dim}",
                w_d.shape().0,
                w_d.shape().1
            )));
        }
        layers.push(DenoiseLayer::new(idx + 1, t, w_d)?);
    }
    Ok((layers, header.schedule, header.train))
}

pub fn load_denoisers(
    path: impl AsRef<std::path::Path>,
) -> Result<(Vec<DenoiseLayer>, ScheduleParams, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    denoisers_from_bytes(&bytes)
}
