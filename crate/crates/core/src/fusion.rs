//! Closed-form folding of denoise steps into affine weights.
//!
//! A denoise step is affine in its input, so an affine layer preceded by a
//! denoise step is still one affine layer. `fuse_one_step` computes that
//! collapsed `(W', b')`; `fuse_model` applies it across a backbone, layer
//! `i` absorbing its denoiser at the layer's own timestep. The fused model
//! has exactly the same shapes and parameter count as the source, so
//! inference cost is unchanged.
//!
//! Two algebras are supported. `Exact` folds the full reverse step
//! including the `1/sqrt(alpha_t)` input rescale, and matches the explicit
//! step to rounding error. `NoRescale` folds the widely used shorthand
//! that drops the rescale, `x - c1 * W_D x + c2 * z`; it is reproduced
//! verbatim, including its quirks: the stochastic term is always scaled by
//! `c2` whatever the requested noise scale, and its two-step form rescales
//! by `1/sqrt(alpha_{t-1})` even for a zero denoiser. With a zero denoiser
//! and no noise, one-step `NoRescale` is a bitwise fixed point, which makes
//! untrained fusions byte-comparable against the source backbone.
//!
//! `verify_equivalence` replays the explicit pipeline next to the fused one
//! on a deterministic input stream derived from the fusion seed and reports
//! the worst absolute and relative gaps.

use crate::backbone::{assemble_from_blobs, Activation, Block, ToyBackbone};
use crate::ckpt;
use crate::denoiser::{DenoiseLayer, NoiseScale, ZPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

// Stream tags, disjoint from the training tags by construction.
const TAG_FUSE_Z: u64 = 0x04 << 56;
const TAG_VERIFY_INPUT: u64 = 0x05 << 56;

fn z_tag(layer: usize) -> u64 {
    TAG_FUSE_Z | layer as u64
}

/// Which closed form the fold uses. `Exact` reproduces the true reverse
/// step; `NoRescale` reproduces the shorthand without the
/// `1/sqrt(alpha_t)` input rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algebra {
    Exact,
    NoRescale,
}

/// Full fusion behavior: the algebra, whether noise is injected, and how
/// the injected noise is scaled. `NoRescale` ignores `noise_scale` and
/// always uses `c2`, faithful to the shorthand it reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionMode {
    pub algebra: Algebra,
    pub z_policy: ZPolicy,
    pub noise_scale: NoiseScale,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode {
            algebra: Algebra::Exact,
            z_policy: ZPolicy::Zero,
            noise_scale: NoiseScale::Sigma,
        }
    }
}

/// Where a fused model came from: content hashes of both inputs, the mode,
/// and the seed whose derived streams drew every `z`. The seed is enough
/// to replay fusion noise and the verification inputs exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backbone_sha256: String,
    pub denoiser_sha256: String,
    pub mode: FusionMode,
    pub seed: u64,
}

fn check_fold_shapes(w: &Matrix, b: &Vector, w_d: &Matrix, z: &Vector) -> Result<()> {
    if w_d.rows() != w_d.cols() {
        return Err(Error::ShapeMismatch {
            op: "fuse denoiser weight",
            lhs: w_d.shape(),
            rhs: (w_d.cols(), w_d.cols()),
        });
    }
    if w.cols() != w_d.rows() {
        return Err(Error::ShapeMismatch {
            op: "fuse weight product",
            lhs: w.shape(),
            rhs: w_d.shape(),
        });
    }
    if b.dim() != w.rows() {
        return Err(Error::DimMismatch { what: "fuse bias", expected: w.rows(), got: b.dim() });
    }
    if z.dim() != w.cols() {
        return Err(Error::DimMismatch { what: "fuse noise", expected: w.cols(), got: z.dim() });
    }
    Ok(())
}

fn check_timestep(t: usize, s: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > s.timesteps() {
        return Err(Error::InvalidArgument(format!(
            "fusion timestep {t} outside the schedule's 1..={}",
            s.timesteps()
        )));
    }
    Ok(())
}

/// Folds one denoise step at `t` into the affine layer `(w, b)` that
/// consumes its output, returning the collapsed `(W', b')`.
///
/// `Exact`: `W' = W/sqrt(alpha_t) - c1 W W_D`, `b' = b + s_t (W z)`.
/// `NoRescale`: `W' = W - c1 W W_D`, `b' = W (c2 z) + b`.
/// With `ZPolicy::Zero` the bias is returned untouched; the noise term is
/// skipped structurally, not multiplied by zero.
pub fn fuse_one_step(
    w: &Matrix,
    b: &Vector,
    w_d: &Matrix,
    t: usize,
    s: &NoiseSchedule,
    mode: FusionMode,
    z: &Vector,
) -> Result<(Matrix, Vector)> {
    check_fold_shapes(w, b, w_d, z)?;
    check_timestep(t, s)?;
    let c1 = s.c1(t)?;
    let ww_d = w.matmul(w_d)?;
    match mode.algebra {
        Algebra::Exact => {
            let mut fw = w.scale(1.0 / s.alpha(t).sqrt());
            fw.add_scaled(-c1, &ww_d);
            let fb = match mode.z_policy {
                ZPolicy::Zero => b.clone(),
                ZPolicy::SampledOnce => {
                    let scale = match mode.noise_scale {
                        NoiseScale::C2 => s.c2(t)?,
                        NoiseScale::Sigma => s.sigma(t)?,
                    };
                    b.add_scaled(scale, &w.mul_vec(z)?)?
                }
            };
            Ok((fw, fb))
        }
        Algebra::NoRescale => {
            let mut fw = w.clone();
            fw.add_scaled(-c1, &ww_d);
            let fb = match mode.z_policy {
                ZPolicy::Zero => b.clone(),
                ZPolicy::SampledOnce => w.mul_vec(&z.scale(s.c2(t)?))?.add(b)?,
            };
            Ok((fw, fb))
        }
    }
}

/// Folds two consecutive denoise steps, `t` then `t - 1`, sharing one `z`
/// draw, into the downstream affine layer. Needs `t >= 2`.
///
/// `Exact` composes the two step matrices `A_u = I/sqrt(alpha_u) - c1(u) W_D`:
/// `W'' = W A_{t-1} A_t`, `b'' = W (s_t A_{t-1} + s_{t-1} I) z + b`.
/// `NoRescale` is the shorthand's own published two-step expansion.
pub fn fuse_two_step(
    w: &Matrix,
    b: &Vector,
    w_d: &Matrix,
    t: usize,
    s: &NoiseSchedule,
    mode: FusionMode,
    z: &Vector,
) -> Result<(Matrix, Vector)> {
    check_fold_shapes(w, b, w_d, z)?;
    check_timestep(t, s)?;
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "two-step fusion needs t >= 2, got {t}"
        )));
    }
    match mode.algebra {
        Algebra::Exact => {
            let dim = w_d.rows();
            let step_matrix = |u: usize| -> Result<Matrix> {
                let mut m = Matrix::identity(dim).scale(1.0 / s.alpha(u).sqrt());
                m.add_scaled(-s.c1(u)?, w_d);
                Ok(m)
            };
            let a_t = step_matrix(t)?;
            let a_prev = step_matrix(t - 1)?;
            let fw = w.matmul(&a_prev)?.matmul(&a_t)?;
            let fb = match mode.z_policy {
                ZPolicy::Zero => b.clone(),
                ZPolicy::SampledOnce => {
                    let (s_t, s_prev) = match mode.noise_scale {
                        NoiseScale::C2 => (s.c2(t)?, s.c2(t - 1)?),
                        NoiseScale::Sigma => (s.sigma(t)?, s.sigma(t - 1)?),
                    };
                    let zv = a_prev.mul_vec(z)?.scale(s_t).add_scaled(s_prev, z)?;
                    w.mul_vec(&zv)?.add(b)?
                }
            };
            Ok((fw, fb))
        }
        Algebra::NoRescale => {
            let inv_prev = 1.0 / s.alpha(t - 1).sqrt();
            let sqrt_at = s.alpha(t).sqrt();
            let c1_t = s.c1(t)?;
            let c1_prev = s.c1(t - 1)?;
            let ww_d = w.matmul(w_d)?;
            let ww_d2 = ww_d.matmul(w_d)?;
            let mut inner = w.scale(1.0 / sqrt_at);
            inner.add_scaled(-(c1_t + c1_prev), &ww_d);
            inner.add_scaled(sqrt_at * c1_prev * c1_t, &ww_d2);
            let fw = inner.scale(inv_prev);
            let fb = match mode.z_policy {
                ZPolicy::Zero => b.clone(),
                ZPolicy::SampledOnce => {
                    let c2_t = s.c2(t)?;
                    let c2_prev = s.c2(t - 1)?;
                    let mut bracket = w.scale(c2_t);
                    bracket.add_scaled(sqrt_at * c2_prev, w);
                    bracket.add_scaled(-(sqrt_at * c1_prev * c2_t), &ww_d);
                    bracket.mul_vec(z)?.scale(inv_prev).add(b)?
                }
            };
            Ok((fw, fb))
        }
    }
}

/// A backbone whose blocks have absorbed their denoise steps, plus the
/// provenance needed to audit or replay the fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    backbone: ToyBackbone,
    provenance: Provenance,
}

const FUSED_KIND: &str = "fused";

#[derive(Serialize, Deserialize)]
struct FusedHeader {
    kind: String,
    dims: Vec<usize>,
    activation: Activation,
    provenance: Provenance,
}

impl FusedModel {
    pub fn backbone(&self) -> &ToyBackbone {
        &self.backbone
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Plain forward pass; fusion adds no per-sample work.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        self.backbone.forward_final(x)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
    }

    fn header(&self) -> FusedHeader {
        FusedHeader {
            kind: FUSED_KIND.into(),
            dims: self.backbone.stage_dims(),
            activation: self.backbone.activation(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs = self.backbone.serial_blobs();
        let refs: Vec<&Matrix> = blobs.iter().collect();
        ckpt::container_to_bytes(&self.header(), &refs)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let blobs = self.backbone.serial_blobs();
        let refs: Vec<&Matrix> = blobs.iter().collect();
        ckpt::save_container(path, &self.header(), &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blobs): (FusedHeader, Vec<Matrix>) = ckpt::read_container(&mut &bytes[..])?;
        if header.kind != FUSED_KIND {
            return Err(Error::CorruptFile(format!(
                "expected a {FUSED_KIND} checkpoint, found kind {:?}",
                header.kind
            )));
        }
        let backbone = assemble_from_blobs(blobs, header.activation)?;
        if backbone.stage_dims() != header.dims {
            return Err(Error::CorruptFile(
                "checkpoint header dims disagree with blob shapes".into(),
            ));
        }
        Ok(FusedModel { backbone, provenance: header.provenance })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        Self::from_bytes(&bytes)
    }
}

/// Content hash over layer indices, timesteps, and weight bytes; stable
/// across runs because every field is serialized little-endian.
fn denoiser_digest(ds: &[DenoiseLayer]) -> String {
    let mut bytes = Vec::new();
    for d in ds {
        bytes.extend_from_slice(&(d.layer_index() as u64).to_le_bytes());
        bytes.extend_from_slice(&(d.timestep() as u64).to_le_bytes());
        bytes.extend_from_slice(&(d.dim() as u64).to_le_bytes());
        for v in d.w_d().as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    ckpt::sha256_hex(&bytes)
}

/// Fuses every layer's denoise step into its block. The embed layer is
/// untouched. Noise draws come from per-layer streams split off `rng`'s
/// seed, so fusion is insensitive to the rng's position and replayable
/// from the recorded provenance seed alone.
pub fn fuse_model(
    bb: &ToyBackbone,
    ds: &[DenoiseLayer],
    s: &NoiseSchedule,
    mode: FusionMode,
    rng: &Rng,
) -> Result<FusedModel> {
    if ds.len() != bb.layer_count() {
        return Err(Error::DimMismatch {
            what: "denoiser layers",
            expected: bb.layer_count(),
            got: ds.len(),
        });
    }
    let mut fused_blocks = Vec::with_capacity(ds.len());
    for (idx, (block, d)) in bb.blocks().iter().zip(ds).enumerate() {
        let layer = idx + 1;
        if block.in_dim() != block.out_dim() {
            return Err(Error::InvalidArgument(format!(
                "fusion needs square blocks, block {layer} is {}x{}",
                block.out_dim(),
                block.in_dim()
            )));
        }
        if d.dim() != block.in_dim() {
            return Err(Error::DimMismatch {
                what: "denoiser width",
                expected: block.in_dim(),
                got: d.dim(),
            });
        }
        let z = match mode.z_policy {
            ZPolicy::Zero => Vector::zeros(block.in_dim()),
            ZPolicy::SampledOnce => rng.split(z_tag(layer)).gaussian(block.in_dim()),
        };
        let (fw, fb) =
            fuse_one_step(block.weight(), block.bias(), d.w_d(), d.timestep(), s, mode, &z)?;
        fused_blocks.push(Block::new(fw, fb, block.activation())?);
    }
    let backbone = ToyBackbone::from_parts(bb.embed().clone(), fused_blocks)?;
    let provenance = Provenance {
        backbone_sha256: ckpt::sha256_hex(&bb.to_bytes()?),
        denoiser_sha256: denoiser_digest(ds),
        mode,
        seed: rng.seed(),
    };
    Ok(FusedModel { backbone, provenance })
}

/// Runs the unfused pipeline: embed, then per block a denoise step on the
/// block input followed by the affine and activation. The step follows
/// `mode.algebra`, and sampled noise is replayed from `seed`'s per-layer
/// streams, the same ones fusion reads.
pub fn explicit_forward(
    bb: &ToyBackbone,
    ds: &[DenoiseLayer],
    s: &NoiseSchedule,
    mode: FusionMode,
    seed: u64,
    x: &Vector,
) -> Result<Vector> {
    if ds.len() != bb.layer_count() {
        return Err(Error::DimMismatch {
            what: "denoiser layers",
            expected: bb.layer_count(),
            got: ds.len(),
        });
    }
    let root = Rng::new(seed);
    let mut cur = bb.embed().affine(x)?;
    for (idx, (block, d)) in bb.blocks().iter().zip(ds).enumerate() {
        let layer = idx + 1;
        let t = d.timestep();
        check_timestep(t, s)?;
        let z = match mode.z_policy {
            ZPolicy::Zero => None,
            ZPolicy::SampledOnce => Some(root.split(z_tag(layer)).gaussian(cur.dim())),
        };
        let stepped = match mode.algebra {
            Algebra::Exact => match &z {
                None => d.denoise_mean(&cur, t, s)?,
                Some(z) => d.denoise_step(&cur, t, s, z, mode.noise_scale)?,
            },
            Algebra::NoRescale => {
                let pred = d.predict_noise(&cur)?;
                let lit = cur.add_scaled(-s.c1(t)?, &pred)?;
                match &z {
                    None => lit,
                    Some(z) => lit.add_scaled(s.c2(t)?, z)?,
                }
            }
        };
        cur = block.activation().apply(&block.affine(&stepped)?);
    }
    Ok(cur)
}

/// Worst-case gap between the explicit and fused pipelines over a
/// deterministic input stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub mode: FusionMode,
    pub samples: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compares the explicit pipeline under `mode` against the fused model on
/// `samples` inputs drawn from a stream derived from the fused model's
/// provenance seed. Relative error is `|gap| / (1 + |explicit|)` per
/// coordinate; the report passes when the worst relative error is within
/// `tol`. `tol` must be finite and `>= 0`; zero demands bitwise agreement.
pub fn verify_equivalence(
    bb: &ToyBackbone,
    ds: &[DenoiseLayer],
    fm: &FusedModel,
    s: &NoiseSchedule,
    mode: FusionMode,
    samples: usize,
    tol: f64,
) -> Result<EquivalenceReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tol must be finite and >= 0, got {tol}"
        )));
    }
    let seed = fm.provenance().seed;
    let mut input_rng = Rng::new(seed).split(TAG_VERIFY_INPUT);
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for _ in 0..samples {
        let x = input_rng.gaussian(bb.input_dim());
        let explicit = explicit_forward(bb, ds, s, mode, seed, &x)?;
        let fused = fm.forward(&x)?;
        if explicit.dim() != fused.dim() {
            return Err(Error::DimMismatch {
                what: "pipeline output",
                expected: explicit.dim(),
                got: fused.dim(),
            });
        }
        for i in 0..explicit.dim() {
            let gap = (explicit.get(i) - fused.get(i)).abs();
            if !gap.is_finite() {
                return Err(Error::NonFinite { what: "equivalence gap" });
            }
            max_abs = max_abs.max(gap);
            max_rel = max_rel.max(gap / (1.0 + explicit.get(i).abs()));
        }
    }
    Ok(EquivalenceReport { mode, samples, max_abs_err: max_abs, max_rel_err: max_rel, pass: max_rel <= tol })
}
