//! Teacher/student block classifiers with matched block structure.
//!
//! A model is a sequence of N blocks followed by a classifier head. Teacher
//! and student built as a pair share block count and per-block widths (and,
//! for CNNs, per-block spatial resolutions); they differ only in layers per
//! block, so per-block activations always align.

use crate::error::{AlktError, Result};
use crate::optim::Param;
use crate::tensor::{softmax_vec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub num_blocks: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// `[d]` for MLP, `[c,h,w]` for CNN.
    pub input_shape: Vec<usize>,
    /// Teacher layers per block; the paired student always uses 1.
    pub teacher_depth: usize,
}

impl ArchConfig {
    pub fn mlp(num_blocks: usize, width: usize, num_classes: usize, input_dim: usize) -> Self {
        ArchConfig {
            kind: ModelKind::Mlp,
            num_blocks,
            widths: vec![width; num_blocks],
            num_classes,
            input_shape: vec![input_dim],
            teacher_depth: 2,
        }
    }

    pub fn cnn(widths: Vec<usize>, num_classes: usize, input_shape: Vec<usize>) -> Self {
        ArchConfig {
            kind: ModelKind::Cnn,
            num_blocks: widths.len(),
            widths,
            num_classes,
            input_shape,
            teacher_depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.widths.len() != self.num_blocks {
            return Err(AlktError::invalid(format!(
                "widths {:?} must have exactly num_blocks={} entries",
                self.widths, self.num_blocks
            )));
        }
        if self.num_classes < 2 {
            return Err(AlktError::invalid("need at least 2 classes"));
        }
        if self.teacher_depth < 2 {
            return Err(AlktError::invalid("teacher depth must be >= 2"));
        }
        match self.kind {
            ModelKind::Mlp if self.input_shape.len() != 1 => {
                Err(AlktError::invalid("mlp input shape must be [d]"))
            }
            ModelKind::Cnn if self.input_shape.len() != 3 => {
                Err(AlktError::invalid("cnn input shape must be [c,h,w]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    /// weight param idx, bias param idx
    Linear(usize, usize),
    /// kernel param idx, bias param idx, stride
    Conv(usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct BlockModel {
    pub arch: ArchConfig,
    pub depth_per_block: usize,
    pub params: Vec<Param>,
    blocks: Vec<Vec<Layer>>,
    head: Layer,
}

/// Value-level forward output.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub block_activations: Vec<Tensor>,
    /// Features feeding the final linear layer (used by core-set selection).
    pub penultimate: Tensor,
}

/// Graph-level forward output: `Var`s still attached to the tape.
pub struct GraphForward {
    pub logits: Var,
    pub block_activations: Vec<Var>,
    pub penultimate: Var,
    /// `(param index, leaf var)` pairs for gradient readback.
    pub param_vars: Vec<(usize, Var)>,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl BlockModel {
    pub fn new(arch: &ArchConfig, depth_per_block: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if depth_per_block == 0 {
            return Err(AlktError::invalid("depth-per-block must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        match arch.kind {
            ModelKind::Mlp => {
                let mut in_dim = arch.input_shape[0];
                for &w in &arch.widths {
                    let mut layers = Vec::new();
                    for d in 0..depth_per_block {
                        let fi = if d == 0 { in_dim } else { w };
                        let wi = params.len();
                        params.push(Param::new(
                            vec![fi, w],
                            glorot_uniform(&mut rng, fi, w, fi * w),
                        ));
                        let bi = params.len();
                        params.push(Param::new(vec![w], vec![0.0; w]));
                        layers.push(Layer::Linear(wi, bi));
                    }
                    blocks.push(layers);
                    in_dim = w;
                }
                let wi = params.len();
                params.push(Param::new(
                    vec![in_dim, arch.num_classes],
                    glorot_uniform(&mut rng, in_dim, arch.num_classes, in_dim * arch.num_classes),
                ));
                let bi = params.len();
                params.push(Param::new(vec![arch.num_classes], vec![0.0; arch.num_classes]));
                Ok(BlockModel {
                    arch: arch.clone(),
                    depth_per_block,
                    params,
                    blocks,
                    head: Layer::Linear(wi, bi),
                })
            }
            ModelKind::Cnn => {
                let mut in_ch = arch.input_shape[0];
                for (b, &w) in arch.widths.iter().enumerate() {
                    let mut layers = Vec::new();
                    for d in 0..depth_per_block {
                        let ci = if d == 0 { in_ch } else { w };
                        // first conv of every block after the first downsamples
                        let stride = if d == 0 && b > 0 { 2 } else { 1 };
                        let fan_in = ci * 9;
                        let fan_out = w * 9;
                        let ki = params.len();
                        params.push(Param::new(
                            vec![w, ci, 3, 3],
                            glorot_uniform(&mut rng, fan_in, fan_out, w * ci * 9),
                        ));
                        let bi = params.len();
                        params.push(Param::new(vec![w], vec![0.0; w]));
                        layers.push(Layer::Conv(ki, bi, stride));
                    }
                    blocks.push(layers);
                    in_ch = w;
                }
                let wi = params.len();
                params.push(Param::new(
                    vec![in_ch, arch.num_classes],
                    glorot_uniform(&mut rng, in_ch, arch.num_classes, in_ch * arch.num_classes),
                ));
                let bi = params.len();
                params.push(Param::new(vec![arch.num_classes], vec![0.0; arch.num_classes]));
                Ok(BlockModel {
                    arch: arch.clone(),
                    depth_per_block,
                    params,
                    blocks,
                    head: Layer::Linear(wi, bi),
                })
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Graph forward. `dropout`: per-unit drop probability with inverted
    /// scaling, applied after every ReLU; masks drawn from `rng`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<GraphForward> {
        let expected: Vec<usize> = self.arch.input_shape.clone();
        if batch.shape().len() < 2 || batch.shape()[1..] != expected[..] {
            return Err(AlktError::ShapeMismatch {
                op: "model-forward",
                lhs: batch.shape().to_vec(),
                rhs: expected,
            });
        }
        let mut drop = dropout;
        let mut param_vars = Vec::with_capacity(self.params.len());
        let leaf = |tape: &mut Tape, params: &[Param], idx: usize, pv: &mut Vec<(usize, Var)>| {
            let v = tape
                .leaf_from(params[idx].shape.clone(), params[idx].data.clone())
                .expect("param shapes are consistent by construction");
            pv.push((idx, v));
            v
        };

        let mut x = tape.leaf(batch);
        let mut acts = Vec::with_capacity(self.arch.num_blocks);
        for block in &self.blocks {
            for layer in block {
                x = match *layer {
                    Layer::Linear(wi, bi) => {
                        let w = leaf(tape, &self.params, wi, &mut param_vars);
                        let b = leaf(tape, &self.params, bi, &mut param_vars);
                        let y = tape.matmul(x, w)?;
                        let y = tape.add_bias(y, b)?;
                        tape.relu(y)
                    }
                    Layer::Conv(ki, bi, stride) => {
                        let k = leaf(tape, &self.params, ki, &mut param_vars);
                        let b = leaf(tape, &self.params, bi, &mut param_vars);
                        let y = tape.conv2d(x, k, stride, 1)?;
                        let y = tape.add_chan_bias(y, b)?;
                        tape.relu(y)
                    }
                };
                if let Some((p, ref mut rng)) = drop {
                    if p > 0.0 {
                        let keep = 1.0 / (1.0 - p);
                        let mask: Vec<f64> = (0..tape.value(x).len())
                            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                            .collect();
                        let m = tape.leaf_from(tape.shape(x).to_vec(), mask)?;
                        x = tape.mul(x, m)?;
                    }
                }
            }
            acts.push(x);
        }
        let pen = match self.arch.kind {
            ModelKind::Cnn => tape.global_avg_pool(x)?,
            ModelKind::Mlp => x,
        };
        let (wi, bi) = match self.head {
            Layer::Linear(wi, bi) => (wi, bi),
            _ => unreachable!(),
        };
        let w = leaf(tape, &self.params, wi, &mut param_vars);
        let b = leaf(tape, &self.params, bi, &mut param_vars);
        let logits = tape.matmul(pen, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok(GraphForward {
            logits,
            block_activations: acts,
            penultimate: pen,
            param_vars,
        })
    }

    /// Pure value-level forward on a local tape.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let gf = self.forward_graph(&mut tape, batch, None)?;
        Ok(ForwardResult {
            logits: tape.tensor(gf.logits),
            block_activations: gf
                .block_activations
                .iter()
                .map(|&v| tape.tensor(v))
                .collect(),
            penultimate: tape.tensor(gf.penultimate),
        })
    }

    /// K stochastic forward passes with unit dropout; returns K posterior
    /// matrices (rows sum to 1).
    pub fn forward_mc_dropout(
        &self,
        batch: &Tensor,
        passes: usize,
        drop_prob: f64,
        seed: u64,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        if passes == 0 {
            return Err(AlktError::invalid("mc-dropout needs at least 1 pass"));
        }
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(AlktError::invalid("drop-prob must be in [0,1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(passes);
        for _ in 0..passes {
            let mut tape = Tape::new();
            let gf = self.forward_graph(&mut tape, batch, Some((drop_prob, &mut rng)))?;
            let logits = tape.tensor(gf.logits);
            let batch_n = logits.shape()[0];
            let posteriors: Vec<Vec<f64>> = (0..batch_n)
                .map(|r| softmax_vec(logits.row(r)))
                .collect();
            out.push(posteriors);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f64> = self.params.iter().flat_map(|p| p.data.clone()).collect();
        let doc = Checkpoint {
            version: 1,
            arch: self.arch.clone(),
            depth_per_block: self.depth_per_block,
            params: flat,
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.version != 1 {
            return Err(AlktError::parse(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let mut model = BlockModel::new(&doc.arch, doc.depth_per_block, 0)?;
        let expected: usize = model.num_params();
        if doc.params.len() != expected {
            return Err(AlktError::parse(format!(
                "checkpoint has {} params, arch requires {expected}",
                doc.params.len()
            )));
        }
        let mut off = 0;
        for p in model.params.iter_mut() {
            let n = p.data.len();
            p.data.copy_from_slice(&doc.params[off..off + n]);
            off += n;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    arch: ArchConfig,
    depth_per_block: usize,
    params: Vec<f64>,
}

/// Build a matched teacher/student pair: same blocks and widths, student has
/// one layer per block.
pub fn build_pair(arch: &ArchConfig, seed: u64) -> Result<(BlockModel, BlockModel)> {
    let teacher = BlockModel::new(arch, arch.teacher_depth, seed)?;
    let student = BlockModel::new(arch, 1, seed.wrapping_add(0x9e3779b97f4a7c15))?;
    Ok((teacher, student))
}
