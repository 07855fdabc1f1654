//! Toy spatio-temporal transformer that maps a 2D keypoint sequence to a
//! reference shape, per-frame deformations and per-frame rotations.
//!
//! The input grid is `(F+1) × (P+1)` tokens of width `D`: row 0 holds the
//! sequence token, column 0 of every other row the pose token. Each block
//! runs attention across the positions of a row (spatial) and then across
//! the rows at a position (temporal), both pre-norm with a feed-forward
//! sub-layer. Inputs are divided by the sequence's measurement scale and
//! shapes multiplied back, so the network works in unit-free coordinates.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionPrior;
use crate::error::{Error, Result};
use crate::geometry::{centralize, Joints2D, Joints3D, Rotation};
use crate::io::{self, Checkpoint, FORMAT_VERSION};
use crate::losses::{build_total, build_total_aligned, LossBreakdown, LossConfig};
use crate::nn;
use crate::params::{Adam, AdamConfig, Params};
use crate::rmnrd::{measurement_scale, RmnrdDecomposition};
use crate::tensor::{Graph, NodeId, Tensor};

/// Standard deviation of the initial parameters.
pub const INIT_SIGMA: f64 = 1e-3;
const FFN_MULT: usize = 2;
const FORMER_KIND: &str = "nrsfm-former";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            joints: 17,
            width: 32,
            blocks: 2,
            heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("joints", self.joints),
            ("width", self.width),
            ("blocks", self.blocks),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.joints < 3 {
            return Err(Error::validation("joints", "must be at least 3"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::validation(
                "heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }

    /// Parameter layout as `(name, shape)` pairs.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, p, d) = (self.frames, self.joints, self.width);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.w".into(), vec![2, d]),
            ("embed.b".into(), vec![d]),
            ("pos.spatial".into(), vec![p + 1, d]),
            ("pos.temporal".into(), vec![f + 1, d]),
            ("token.seq".into(), vec![d]),
            ("token.pose".into(), vec![d]),
        ];
        for l in 0..self.blocks {
            for kind in ["spatial", "temporal"] {
                let pre = format!("block{l}.{kind}");
                for (name, shape) in [
                    ("ln1.g", vec![d]),
                    ("ln1.b", vec![d]),
                    ("wq", vec![d, d]),
                    ("wk", vec![d, d]),
                    ("wv", vec![d, d]),
                    ("wo", vec![d, d]),
                    ("bo", vec![d]),
                    ("ln2.g", vec![d]),
                    ("ln2.b", vec![d]),
                    ("ffn.w1", vec![d, FFN_MULT * d]),
                    ("ffn.b1", vec![FFN_MULT * d]),
                    ("ffn.w2", vec![FFN_MULT * d, d]),
                    ("ffn.b2", vec![d]),
                ] {
                    out.push((format!("{pre}.{name}"), shape));
                }
            }
        }
        out.extend([
            ("head.reference.w".into(), vec![d, 3 * p]),
            ("head.reference.b".into(), vec![3 * p]),
            ("head.deformation.w".into(), vec![d, 3]),
            ("head.deformation.b".into(), vec![3]),
            ("head.rotation.w".into(), vec![d, 6]),
            ("head.rotation.b".into(), vec![6]),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `[1, P, 3]`, centralized, millimeters.
    pub reference: NodeId,
    /// `[F, P, 3]`, millimeters.
    pub deformations: NodeId,
    /// `[F, 3, 3]`.
    pub rotations: NodeId,
    /// `[F, P, 3]`: reference plus deformation.
    pub shapes: NodeId,
    /// Softmax weights `[B·H, N, N]` of every attention sub-block in order.
    pub attention: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct FormerModel {
    config: ModelConfig,
    params: Params,
    optimizer: Adam,
    steps: usize,
}

impl FormerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        for (name, shape) in config.layout() {
            params.gaussian(&name, &shape, INIT_SIGMA, &mut rng);
        }
        Ok(Self {
            config,
            params,
            optimizer: Adam::new(AdamConfig::default()),
            steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Number of completed [`train_step`](Self::train_step) calls.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_input(&self, w: &[Joints2D]) -> Result<()> {
        let (f, p) = (self.config.frames, self.config.joints);
        if w.len() != f {
            return Err(Error::DimensionMismatch(format!("model expects {f} frames, got {}", w.len())));
        }
        if let Some(i) = w.iter().position(|x| x.num_joints() != p) {
            return Err(Error::DimensionMismatch(format!(
                "frame {i} has {} joints, model expects {p}",
                w[i].num_joints()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite measurements".into()));
        }
        Ok(())
    }

    /// Token grid `[F+1, P+1, D]` for `w`, coordinates divided by `scale`.
    fn embed_nodes(&self, g: &mut Graph, ids: &HashMap<String, NodeId>, w: &[Joints2D], scale: f64) -> Result<NodeId> {
        let (f, p, d) = (self.config.frames, self.config.joints, self.config.width);
        let data: Vec<f64> = w.iter().flat_map(|x| centralize(x).flat()).map(|v| v / scale).collect();
        let x = g.constant(Tensor::new(vec![f * p, 2], data)?)?;
        let proj = g.linear(x, ids["embed.w"], ids["embed.b"])?;
        let proj = g.reshape(proj, &[f, p, d])?;
        let pose = g.tile(ids["token.pose"], f)?;
        let pose = g.reshape(pose, &[f, 1, d])?;
        let rows = g.concat(&[pose, proj], 1)?;
        let seq = g.tile(ids["token.seq"], p + 1)?;
        let seq = g.reshape(seq, &[1, p + 1, d])?;
        let z = g.concat(&[seq, rows], 0)?;
        let spatial = g.tile(ids["pos.spatial"], f + 1)?;
        let temporal = g.tile(ids["pos.temporal"], p + 1)?;
        let temporal = g.permute(temporal, &[1, 0, 2])?;
        let z = g.add(z, spatial)?;
        Ok(g.add(z, temporal)?)
    }

    /// Token grid before any attention. Token entries do not depend on `w`.
    pub fn embed(&self, w: &[Joints2D]) -> Result<Tensor> {
        self.check_input(w)?;
        let mut g = Graph::new();
        let ids = self.params.bind_frozen(&mut g)?;
        let scale = input_scale(w)?;
        let z = self.embed_nodes(&mut g, &ids, w, scale)?;
        Ok(g.value(z).clone())
    }

    /// Per-row affine layer norm of `x: [n, D]`.
    fn norm(g: &mut Graph, ids: &HashMap<String, NodeId>, x: NodeId, pre: &str) -> Result<NodeId> {
        let n = g.value(x).shape()[0];
        let y = g.layer_norm(x)?;
        let gain = g.tile(ids[&format!("{pre}.g")], n)?;
        let bias = g.tile(ids[&format!("{pre}.b")], n)?;
        let y = g.mul(y, gain)?;
        Ok(g.add(y, bias)?)
    }

    /// Pre-norm attention and feed-forward over the middle axis of
    /// `x: [B, N, D]`.
    /// Returns the output and the attention weights.
    fn sub_block(&self, g: &mut Graph, ids: &HashMap<String, NodeId>, x: NodeId, pre: &str) -> Result<(NodeId, NodeId)> {
        let shape = g.value(x).shape().to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let flat = g.reshape(x, &[b * n, d])?;
        let y = Self::norm(g, ids, flat, &format!("{pre}.ln1"))?;
        let split = |g: &mut Graph, w: &str| -> Result<NodeId> {
            let m = g.matmul(y, ids[&format!("{pre}.{w}")])?;
            let m = g.reshape(m, &[b, n, h, dh])?;
            let m = g.permute(m, &[0, 2, 1, 3])?;
            Ok(g.reshape(m, &[b * h, n, dh])?)
        };
        let q = split(g, "wq")?;
        let k = split(g, "wk")?;
        let v = split(g, "wv")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let heads = g.matmul(attn, v)?;
        let heads = g.reshape(heads, &[b, h, n, dh])?;
        let heads = g.permute(heads, &[0, 2, 1, 3])?;
        let heads = g.reshape(heads, &[b * n, d])?;
        let out = g.linear(heads, ids[&format!("{pre}.wo")], ids[&format!("{pre}.bo")])?;
        let flat = g.add(flat, out)?;

        let y = Self::norm(g, ids, flat, &format!("{pre}.ln2"))?;
        let hidden = g.linear(y, ids[&format!("{pre}.ffn.w1")], ids[&format!("{pre}.ffn.b1")])?;
        let hidden = g.gelu(hidden)?;
        let out = g.linear(hidden, ids[&format!("{pre}.ffn.w2")], ids[&format!("{pre}.ffn.b2")])?;
        let flat = g.add(flat, out)?;
        Ok((g.reshape(flat, &[b, n, d])?, attn))
    }

    /// Builds the forward pass on `g` with parameters bound as `ids`.
    pub fn forward_nodes(&self, g: &mut Graph, ids: &HashMap<String, NodeId>, w: &[Joints2D]) -> Result<ForwardNodes> {
        self.check_input(w)?;
        let (f, p, d) = (self.config.frames, self.config.joints, self.config.width);
        let scale = input_scale(w)?;
        let mut z = self.embed_nodes(g, ids, w, scale)?;
        let mut attention = Vec::with_capacity(2 * self.config.blocks);
        for l in 0..self.config.blocks {
            let (s, a) = self.sub_block(g, ids, z, &format!("block{l}.spatial"))?;
            attention.push(a);
            let t = g.permute(s, &[1, 0, 2])?;
            let (t, a) = self.sub_block(g, ids, t, &format!("block{l}.temporal"))?;
            attention.push(a);
            z = g.permute(t, &[1, 0, 2])?;
            if !g.value(z).is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite activations after block {l}")));
            }
        }

        // Reference from the mean of the sequence-token row.
        let row0 = g.slice(z, 0, 0, 1)?;
        let row0 = g.reshape(row0, &[p + 1, d])?;
        let pool = g.constant(Tensor::full(vec![1, p + 1], 1.0 / (p + 1) as f64))?;
        let pooled = g.matmul(pool, row0)?;
        let reference = g.linear(pooled, ids["head.reference.w"], ids["head.reference.b"])?;
        let reference = g.reshape(reference, &[1, p, 3])?;
        let reference = nn::centralize(g, reference)?;
        let reference = g.scale(reference, scale)?;

        let frames = g.slice(z, 0, 1, f + 1)?;
        let pose = g.slice(frames, 1, 0, 1)?;
        let pose = g.reshape(pose, &[f, d])?;
        let six = g.linear(pose, ids["head.rotation.w"], ids["head.rotation.b"])?;
        // The head predicts an offset from the identity's 6D code.
        let identity = g.constant(Tensor::new(vec![f, 6], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(f))?)?;
        let six = g.add(six, identity)?;
        let rotations = nn::rotations_from_six(g, six)?;

        let joints = g.slice(frames, 1, 1, p + 1)?;
        let joints = g.reshape(joints, &[f * p, d])?;
        let deformations = g.linear(joints, ids["head.deformation.w"], ids["head.deformation.b"])?;
        let deformations = g.reshape(deformations, &[f, p, 3])?;
        let deformations = g.scale(deformations, scale)?;

        let reference_flat = g.reshape(reference, &[p, 3])?;
        let shapes = nn::add_reference(g, reference_flat, deformations)?;
        Ok(ForwardNodes {
            reference,
            deformations,
            rotations,
            shapes,
            attention,
        })
    }

    /// Inference: the predicted decomposition of `w`.
    pub fn forward(&self, w: &[Joints2D]) -> Result<RmnrdDecomposition> {
        let mut g = Graph::new();
        let ids = self.params.bind_frozen(&mut g)?;
        let nodes = self.forward_nodes(&mut g, &ids, w)?;
        let reference = nn::shapes_from_tensor(g.value(nodes.reference)).remove(0);
        Ok(RmnrdDecomposition {
            reference,
            deformations: nn::shapes_from_tensor(g.value(nodes.deformations)),
            rotations: nn::rotations_from_tensor(g.value(nodes.rotations)),
        })
    }

    /// Attention weights of every sub-block for `w`, spatial and temporal
    /// alternating.
    pub fn attention_maps(&self, w: &[Joints2D]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let ids = self.params.bind_frozen(&mut g)?;
        let nodes = self.forward_nodes(&mut g, &ids, w)?;
        Ok(nodes.attention.iter().map(|a| g.value(*a).clone()).collect())
    }

    /// Mean total loss over `batch` on a fresh graph, with trainable
    /// parameters. `alignment` fixes the Procrustes rotations per sequence.
    fn batch_loss(
        &self,
        batch: &[Vec<Joints2D>],
        prior: Option<&DiffusionPrior>,
        loss: &LossConfig,
        alignment: Option<&[Vec<Rotation>]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Graph, NodeId, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g)?;
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = [0.0; 4];
        for (k, w) in batch.iter().enumerate() {
            let nodes = self.forward_nodes(&mut g, &ids, w)?;
            let w_c: Vec<Joints2D> = w.iter().map(centralize).collect();
            let terms = match alignment {
                Some(a) => build_total_aligned(
                    &mut g,
                    nodes.rotations,
                    nodes.shapes,
                    nodes.reference,
                    &a[k],
                    &w_c,
                    prior,
                    loss,
                    rng,
                )?,
                None => build_total(&mut g, nodes.rotations, nodes.shapes, nodes.reference, &w_c, prior, loss, rng)?,
            };
            let b = terms.breakdown(&g, &loss.beta);
            for (acc, v) in parts.iter_mut().zip([b.reproj, b.proc, b.prior, b.smooth]) {
                *acc += v / batch.len() as f64;
            }
            totals.push(terms.total);
        }
        let mut total = totals[0];
        for t in &totals[1..] {
            total = g.add(total, *t)?;
        }
        let total = g.scale(total, 1.0 / batch.len() as f64)?;
        let breakdown = LossBreakdown::weighted(parts[0], parts[1], parts[2], parts[3], &loss.beta);
        Ok((g, total, breakdown))
    }

    /// Loss breakdown and gradients of the mean batch loss without updating.
    pub fn loss_and_gradients(
        &self,
        batch: &[Vec<Joints2D>],
        prior: Option<&DiffusionPrior>,
        loss: &LossConfig,
        alignment: Option<&[Vec<Rotation>]>,
        seed: u64,
    ) -> Result<(LossBreakdown, f64, crate::tensor::Gradients)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, total, breakdown) = self.batch_loss(batch, prior, loss, alignment, &mut rng)?;
        let value = g.value(total).item();
        Ok((breakdown, value, g.backward(total)?))
    }

    /// Procrustes alignment rotations of the current predictions, one list
    /// per sequence.
    pub fn alignments(&self, batch: &[Vec<Joints2D>]) -> Result<Vec<Vec<Rotation>>> {
        batch
            .iter()
            .map(|w| {
                let d = self.forward(w)?;
                Ok(crate::procrustes::align_to_reference(&d.shapes(), &d.reference)?.rotations)
            })
            .collect()
    }

    /// One Adam update against the mean total loss of `batch`. Returns the
    /// breakdown before the update.
    pub fn train_step(
        &mut self,
        batch: &[Vec<Joints2D>],
        prior: Option<&DiffusionPrior>,
        loss: &LossConfig,
        lr: f64,
    ) -> Result<LossBreakdown> {
        loss.validate()?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::validation("lr", "must be finite and >= 0"));
        }
        let seed = self.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.steps as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, total, breakdown) = self.batch_loss(batch, prior, loss, None, &mut rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.steps });
        }
        if lr > 0.0 {
            let grads = g.backward(total)?;
            self.optimizer.config.lr = lr;
            self.optimizer.step(&mut self.params, &grads);
        }
        self.steps += 1;
        Ok(breakdown)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<ModelConfig> {
        Checkpoint {
            version: FORMAT_VERSION,
            kind: FORMER_KIND.into(),
            header: self.config,
            params: self.params.to_records(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_json(path, &self.to_checkpoint())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<ModelConfig> = Checkpoint::parse(text, FORMER_KIND)?;
        let mut model = Self::new(ck.header)?;
        model.params = Params::from_records(ck.params, &model.params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// RMS of the centralized measurements.
fn input_scale(w: &[Joints2D]) -> Result<f64> {
    let centered: Vec<Joints2D> = w.iter().map(centralize).collect();
    let s = measurement_scale(&centered);
    if !s.is_finite() {
        return Err(Error::InvalidArgument("non-finite measurements".into()));
    }
    // An all-zero sequence has nothing to normalize.
    Ok(if s > 0.0 { s } else { 1.0 })
}

/// Decomposition shapes as camera-frame poses `centralize(R_i S_i)`.
pub fn camera_frame(decomp: &RmnrdDecomposition) -> Vec<Joints3D> {
    decomp
        .rotations
        .iter()
        .zip(decomp.shapes())
        .map(|(r, s)| centralize(&s.rotated(r)))
        .collect()
}
