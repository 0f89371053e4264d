//! Frozen toy backbone: an input-embedding affine layer followed by N
//! affine blocks with an optional pointwise activation.
//!
//! `forward` exposes each block's pre-activation output `F_i`; those are the
//! feature streams the denoisers train on. The backbone itself is never
//! trained here; it is generated once from a seed (or loaded) and treated
//! as read-only by every other stage.
//!
//! Dim-list convention: `dims[0]` is the input width, `dims[1]` the embed
//! output, and each further entry one more block boundary; the final block
//! is square at the last width. So `dims.len() - 1` blocks follow the embed:
//! `[8, 8]` is embed 8->8 plus one 8->8 block, and `[16, 32, 32, 32, 32]`
//! is embed 16->32 plus four 32->32 blocks.

use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply(self, v: &Vector) -> Vector {
        match self {
            Activation::None => v.clone(),
            _ => Vector::from_vec(v.as_slice().iter().map(|x| self.apply_scalar(*x)).collect()),
        }
    }
}

/// One affine layer `x -> W x + b`, with the activation applied after the
/// affine output has been exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    weight: Matrix,
    bias: Vector,
    activation: Activation,
}

impl Block {
    pub fn new(weight: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if bias.dim() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "block bias",
                lhs: (weight.rows(), weight.cols()),
                rhs: (bias.dim(), 1),
            });
        }
        Ok(Block { weight, bias, activation })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// The affine part only: `W x + b`.
    pub fn affine(&self, x: &Vector) -> Result<Vector> {
        self.weight.mul_vec(x)?.add(&self.bias)
    }

    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.dim()
    }
}

/// Per-layer features from one forward pass.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    /// Pre-activation affine output of each block, `F_1 ..= F_N`.
    pub per_layer: Vec<Vector>,
    /// Post-activation output of the last block.
    pub final_feature: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    embed: Block,
    blocks: Vec<Block>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    kind: String,
    /// Every stage boundary: input dim, embed output, then each block output.
    dims: Vec<usize>,
    activation: Activation,
    seed: Option<u64>,
}

pub(crate) const BACKBONE_KIND: &str = "backbone";

impl ToyBackbone {
    /// Assembles a backbone from explicit layers. The embed must carry no
    /// activation, consecutive shapes must chain, and all blocks must share
    /// one activation (the saved form records a single activation).
    pub fn from_parts(embed: Block, blocks: Vec<Block>) -> Result<Self> {
        if embed.activation != Activation::None {
            return Err(Error::InvalidArgument(
                "embed layer must have activation none".into(),
            ));
        }
        if blocks.is_empty() {
            return Err(Error::EmptyData { what: "backbone blocks" });
        }
        let mut prev_out = embed.out_dim();
        for b in &blocks {
            if b.in_dim() != prev_out {
                return Err(Error::ShapeMismatch {
                    op: "backbone chain",
                    lhs: (prev_out, 1),
                    rhs: (b.in_dim(), b.out_dim()),
                });
            }
            if b.activation != blocks[0].activation {
                return Err(Error::InvalidArgument(
                    "all blocks must share one activation".into(),
                ));
            }
            prev_out = b.out_dim();
        }
        Ok(ToyBackbone { embed, blocks, seed: None })
    }

    pub fn embed(&self) -> &Block {
        &self.embed
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Number of blocks after the embed (the `N` of the denoising chain).
    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.embed.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map(|b| b.out_dim()).unwrap_or(self.embed.out_dim())
    }

    pub fn activation(&self) -> Activation {
        self.blocks[0].activation
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Total scalar parameters across embed and blocks.
    pub fn param_count(&self) -> usize {
        self.embed.param_count() + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    /// Stage boundary widths: input, embed output, then each block output.
    pub fn stage_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.embed.in_dim(), self.embed.out_dim()];
        dims.extend(self.blocks.iter().map(Block::out_dim));
        dims
    }

    /// Full forward pass, recording each block's pre-activation output.
    pub fn forward(&self, x: &Vector) -> Result<LayerFeatures> {
        let mut cur = self.embed.affine(x)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pre = block.affine(&cur)?;
            cur = block.activation.apply(&pre);
            per_layer.push(pre);
        }
        Ok(LayerFeatures { per_layer, final_feature: cur })
    }

    /// Forward pass that keeps only the final feature (hot path for
    /// retrieval and latency runs).
    pub fn forward_final(&self, x: &Vector) -> Result<Vector> {
        let mut cur = self.embed.affine(x)?;
        for block in &self.blocks {
            let pre = block.affine(&cur)?;
            cur = block.activation.apply(&pre);
        }
        Ok(cur)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs = self.serial_blobs();
        let refs: Vec<&Matrix> = blobs.iter().collect();
        ckpt::container_to_bytes(&self.header(), &refs)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let blobs = self.serial_blobs();
        let refs: Vec<&Matrix> = blobs.iter().collect();
        ckpt::save_container(path, &self.header(), &refs)
    }

    fn header(&self) -> BackboneHeader {
        BackboneHeader {
            kind: BACKBONE_KIND.into(),
            dims: self.stage_dims(),
            activation: self.activation(),
            seed: self.seed,
        }
    }

    /// Blob order: embed weight, embed bias, then each block's weight and
    /// bias. Biases travel as column matrices.
    pub(crate) fn serial_blobs(&self) -> Vec<Matrix> {
        let mut blobs = Vec::with_capacity(2 * (1 + self.blocks.len()));
        blobs.push(self.embed.weight.clone());
        blobs.push(self.embed.bias_column());
        for b in &self.blocks {
            blobs.push(b.weight.clone());
            blobs.push(b.bias_column());
        }
        blobs
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (header, blobs): (BackboneHeader, Vec<Matrix>) = ckpt::load_container(path)?;
        Self::from_loaded(header, blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blobs): (BackboneHeader, Vec<Matrix>) =
            ckpt::read_container(&mut &bytes[..])?;
        Self::from_loaded(header, blobs)
    }

    fn from_loaded(header: BackboneHeader, blobs: Vec<Matrix>) -> Result<Self> {
        if header.kind != BACKBONE_KIND {
            return Err(Error::CorruptFile(format!(
                "expected a {BACKBONE_KIND} checkpoint, found kind {:?}",
                header.kind
            )));
        }
        let mut bb = assemble_from_blobs(blobs, header.activation)?;
        bb.seed = header.seed;
        if bb.stage_dims() != header.dims {
            return Err(Error::CorruptFile(
                "checkpoint header dims disagree with blob shapes".into(),
            ));
        }
        Ok(bb)
    }
}

impl Block {
    /// Bias vectors ride along as column matrices inside checkpoints.
    fn bias_column(&self) -> Matrix {
        Matrix::from_vec(self.bias.dim(), 1, self.bias.as_slice().to_vec())
            .expect("bias length matches by construction")
    }
}

pub(crate) fn assemble_from_blobs(blobs: Vec<Matrix>, activation: Activation) -> Result<ToyBackbone> {
    if blobs.len() < 4 || blobs.len() % 2 != 0 {
        return Err(Error::CorruptFile(format!(
            "backbone checkpoint needs an even number of blobs >= 4, found {}",
            blobs.len()
        )));
    }
    let mut iter = blobs.into_iter();
    let mut layers = Vec::new();
    while let (Some(w), Some(b)) = (iter.next(), iter.next()) {
        if b.cols() != 1 || b.rows() != w.rows() {
            return Err(Error::CorruptFile(format!(
                "bias blob {}x{} does not match weight {}x{}",
                b.rows(),
                b.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let bias = Vector::from_vec(b.as_slice().to_vec());
        layers.push((w, bias));
    }
    let (ew, eb) = layers.remove(0);
    let embed = Block::new(ew, eb, Activation::None)?;
    let blocks = layers
        .into_iter()
        .map(|(w, b)| Block::new(w, b, activation))
        .collect::<Result<Vec<_>>>()?;
    ToyBackbone::from_parts(embed, blocks)
}

/// Generates a backbone from a seed: weights are Gaussian scaled by
/// `1/sqrt(fan_in)`, biases zero. Same seed, same bytes.
pub fn make_toy_backbone(seed: u64, dims: &[usize], activation: Activation) -> Result<ToyBackbone> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dims needs at least [input, width], got {} entries",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("dims entries must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let last = dims.len() - 1;
    let mut draw_block = |rows: usize, cols: usize, act: Activation| -> Result<Block> {
        let scale = 1.0 / (cols as f64).sqrt();
        let w = rng.gaussian_matrix(rows, cols).scale(scale);
        Block::new(w, Vector::zeros(rows), act)
    };
    let embed = draw_block(dims[1], dims[0], Activation::None)?;
    let mut blocks = Vec::with_capacity(last);
    for i in 1..=last {
        let cols = dims[i];
        let rows = dims[(i + 1).min(last)];
        blocks.push(draw_block(rows, cols, activation)?);
    }
    let mut bb = ToyBackbone::from_parts(embed, blocks)?;
    bb.seed = Some(seed);
    Ok(bb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident_block(n: usize, act: Activation) -> Block {
        Block::new(Matrix::identity(n), Vector::zeros(n), act).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_toy_backbone(7, &[16, 32, 32, 32], Activation::Relu).unwrap();
        let b = make_toy_backbone(7, &[16, 32, 32, 32], Activation::Relu).unwrap();
        assert_eq!(a, b);
        let c = make_toy_backbone(8, &[16, 32, 32, 32], Activation::Relu).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimal_dims_gives_one_block_after_embed() {
        let bb = make_toy_backbone(1, &[8, 8], Activation::None).unwrap();
        assert_eq!(bb.layer_count(), 1);
        assert_eq!(bb.embed().weight().shape(), (8, 8));
        assert_eq!(bb.blocks()[0].weight().shape(), (8, 8));
    }

    #[test]
    fn default_test_dims_give_four_square_blocks() {
        let bb = make_toy_backbone(1, &[16, 32, 32, 32, 32], Activation::None).unwrap();
        assert_eq!(bb.layer_count(), 4);
        assert_eq!(bb.embed().weight().shape(), (32, 16));
        for b in bb.blocks() {
            assert_eq!(b.weight().shape(), (32, 32));
        }
        assert_eq!(bb.input_dim(), 16);
        assert_eq!(bb.output_dim(), 32);
    }

    // Shape-sum oracle: embed 16*32+32 plus two 32x32 blocks with bias.
    #[test]
    fn param_count_hand_value() {
        let bb = make_toy_backbone(3, &[16, 32, 32], Activation::None).unwrap();
        let oracle = (16 * 32 + 32) + (32 * 32 + 32) + (32 * 32 + 32);
        assert_eq!(oracle, 2656);
        assert_eq!(bb.param_count(), oracle);
    }

    #[test]
    fn weights_scaled_by_fan_in() {
        let bb = make_toy_backbone(5, &[64, 64], Activation::None).unwrap();
        // Sample std of 64*64 entries should sit near 1/sqrt(64) = 0.125.
        let w = bb.embed().weight();
        let n = (w.rows() * w.cols()) as f64;
        let var = w.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var.sqrt() - 0.125).abs() < 0.01, "std {}", var.sqrt());
        for b in bb.blocks() {
            assert!(b.bias().as_slice().iter().all(|&x| x == 0.0));
        }
    }

    /// With no activation the whole chain is one affine map; folding all
    /// layers into a single (W, b) must reproduce forward.
    #[test]
    fn activation_none_chain_folds_to_single_affine() {
        let bb = make_toy_backbone(7, &[16, 32, 32, 32], Activation::None).unwrap();
        let mut w_total = bb.embed().weight().clone();
        let mut b_total = bb.embed().bias().clone();
        for block in bb.blocks() {
            b_total = block.weight().mul_vec(&b_total).unwrap().add(block.bias()).unwrap();
            w_total = block.weight().matmul(&w_total).unwrap();
        }
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let x = rng.gaussian(16);
            let direct = bb.forward(&x).unwrap().final_feature;
            let folded = w_total.mul_vec(&x).unwrap().add(&b_total).unwrap();
            let scale = direct.max_abs().max(1.0);
            assert!(direct.max_abs_diff(&folded).unwrap() / scale <= 1e-10);
        }
    }

    /// Straight-line oracle: explicit loops, no shared helpers.
    #[test]
    fn forward_matches_naive_loop() {
        let bb = make_toy_backbone(2, &[6, 5, 5], Activation::Relu).unwrap();
        let mut rng = Rng::new(3);
        let x = rng.gaussian(6);
        let feats = bb.forward(&x).unwrap();

        let affine = |w: &Matrix, b: &Vector, v: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|i| {
                    let mut acc = b.get(i);
                    for j in 0..w.cols() {
                        acc += w.get(i, j) * v[j];
                    }
                    acc
                })
                .collect()
        };
        let mut cur = affine(bb.embed().weight(), bb.embed().bias(), x.as_slice());
        for (k, block) in bb.blocks().iter().enumerate() {
            let pre = affine(block.weight(), block.bias(), &cur);
            for (a, b) in feats.per_layer[k].as_slice().iter().zip(&pre) {
                assert!((a - b).abs() <= 1e-12);
            }
            cur = pre.into_iter().map(|v| v.max(0.0)).collect();
        }
        for (a, b) in feats.final_feature.as_slice().iter().zip(&cur) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_expose_biases() {
        let embed = Block::new(Matrix::zeros(3, 4), Vector::from_vec(vec![1.0, 2.0, 3.0]), Activation::None).unwrap();
        let b1 = Block::new(Matrix::zeros(3, 3), Vector::from_vec(vec![-1.0, 0.5, 2.0]), Activation::Relu).unwrap();
        let bb = ToyBackbone::from_parts(embed, vec![b1]).unwrap();
        let feats = bb.forward(&Vector::from_vec(vec![9.0, 9.0, 9.0, 9.0])).unwrap();
        assert_eq!(feats.per_layer[0].as_slice(), &[-1.0, 0.5, 2.0]);
        assert_eq!(feats.final_feature.as_slice(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn identity_chain_is_identity() {
        let bb = ToyBackbone::from_parts(
            ident_block(4, Activation::None),
            vec![ident_block(4, Activation::None), ident_block(4, Activation::None)],
        )
        .unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0, 3.5, 0.0]);
        let feats = bb.forward(&x).unwrap();
        assert_eq!(feats.per_layer[0], x);
        assert_eq!(feats.per_layer[1], x);
        assert_eq!(feats.final_feature, x);
    }

    #[test]
    fn tanh_and_relu_applied_after_affine_exposed() {
        let embed = ident_block(2, Activation::None);
        let block = Block::new(Matrix::identity(2), Vector::from_vec(vec![0.0, 0.0]), Activation::Tanh).unwrap();
        let bb = ToyBackbone::from_parts(embed, vec![block]).unwrap();
        let x = Vector::from_vec(vec![0.5, -3.0]);
        let feats = bb.forward(&x).unwrap();
        assert_eq!(feats.per_layer[0], x, "pre-activation must be the raw affine output");
        assert!((feats.final_feature.get(0) - 0.5f64.tanh()).abs() < 1e-15);
        assert!((feats.final_feature.get(1) - (-3.0f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn forward_final_agrees_with_forward() {
        let bb = make_toy_backbone(21, &[8, 12, 12], Activation::Tanh).unwrap();
        let mut rng = Rng::new(0);
        for _ in 0..5 {
            let x = rng.gaussian(8);
            let a = bb.forward(&x).unwrap().final_feature;
            let b = bb.forward_final(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.dnck");
        let bb = make_toy_backbone(7, &[16, 32, 32, 32], Activation::Relu).unwrap();
        bb.save(&path).unwrap();
        let back = ToyBackbone::load(&path).unwrap();
        assert_eq!(bb, back);
        assert_eq!(back.seed(), Some(7));
        assert_eq!(back.activation(), Activation::Relu);
        // Bit-exactness, not just PartialEq.
        for (a, b) in bb.embed().weight().as_slice().iter().zip(back.embed().weight().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.dnck");
        let bb = make_toy_backbone(7, &[8, 8], Activation::None).unwrap();
        bb.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ToyBackbone::load(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.dnck");
        let bb = make_toy_backbone(7, &[8, 8], Activation::None).unwrap();
        bb.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'?';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ToyBackbone::load(&path), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(make_toy_backbone(1, &[8], Activation::None).is_err());
        assert!(make_toy_backbone(1, &[8, 0], Activation::None).is_err());
        assert!(make_toy_backbone(1, &[], Activation::None).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let bb = make_toy_backbone(1, &[8, 8], Activation::None).unwrap();
        assert!(bb.forward(&Vector::zeros(9)).is_err());
    }

    #[test]
    fn chain_mismatch_rejected() {
        let embed = ident_block(4, Activation::None);
        let bad = Block::new(Matrix::zeros(3, 5), Vector::zeros(3), Activation::None).unwrap();
        assert!(ToyBackbone::from_parts(embed, vec![bad]).is_err());
    }
}
