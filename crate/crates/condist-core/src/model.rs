//! Small 2D convolutional encoder-decoder with optional deep-supervision
//! heads: a desk-scale stand-in for a full 3D segmentation backbone.
//!
//! Encoder: one 3x3 conv per resolution level (stride 2 between levels).
//! Decoder: nearest upsample + 3x3 conv + additive skip connection. A 1x1
//! head projects each decoder level to class logits; head `d` has spatial
//! extent `H/2^d x W/2^d`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointEntry};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, upsample2x, Padding, Real, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetConfig {
    /// Number of resolution levels.
    pub depth: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    /// Output classes at every head.
    pub num_classes: usize,
    /// Emit auxiliary heads at the lower-resolution decoder levels.
    pub deep_supervision: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { depth: 3, base_channels: 8, num_classes: 8, deep_supervision: true }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("model depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "base_channels must be positive and num_classes at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        if self.deep_supervision {
            self.depth
        } else {
            1
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

struct LayerDef {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
}

fn layer_defs(cfg: &SegNetConfig) -> Vec<LayerDef> {
    let mut defs = Vec::new();
    defs.push(LayerDef {
        name: "enc0".into(),
        cin: 1,
        cout: cfg.channels(0),
        kernel: 3,
        stride: 1,
    });
    for l in 1..cfg.depth {
        defs.push(LayerDef {
            name: format!("down{l}"),
            cin: cfg.channels(l - 1),
            cout: cfg.channels(l),
            kernel: 3,
            stride: 2,
        });
    }
    let top = cfg.depth - 1;
    defs.push(LayerDef {
        name: "mid".into(),
        cin: cfg.channels(top),
        cout: cfg.channels(top),
        kernel: 3,
        stride: 1,
    });
    for l in (1..cfg.depth).rev() {
        defs.push(LayerDef {
            name: format!("up{l}"),
            cin: cfg.channels(l),
            cout: cfg.channels(l - 1),
            kernel: 3,
            stride: 1,
        });
    }
    for d in 0..cfg.heads() {
        defs.push(LayerDef {
            name: format!("head{d}"),
            cin: cfg.channels(d),
            cout: cfg.num_classes,
            kernel: 1,
            stride: 1,
        });
    }
    defs
}

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Encoder-decoder network; parameters are plain arrays, bound onto a tape
/// per training step.
pub struct SegNet<F: Real> {
    cfg: SegNetConfig,
    params: Vec<Param<F>>,
}

/// Result of a gradient-tracked forward pass: one logit tensor per head plus
/// the tape leaves aligned with [`SegNet::params`].
pub struct ForwardPass<F: Real> {
    pub heads: Vec<Tensor<F>>,
    pub leaves: Vec<Tensor<F>>,
}

impl<F: Real> SegNet<F> {
    /// He-uniform initialization (bound `sqrt(6 / fan_in)`) from a seeded
    /// generator; biases draw from `±1/sqrt(fan_in)`. The same seed
    /// reproduces the same parameters on any platform.
    pub fn init(cfg: SegNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for def in layer_defs(&cfg) {
            let fan_in = (def.cin * def.kernel * def.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let wlen = def.cout * def.cin * def.kernel * def.kernel;
            let mut draw = |b: f64| {
                let u: f64 = rng.gen();
                F::from_f64((2.0 * u - 1.0) * b).expect("finite init value")
            };
            let wdata: Vec<F> = (0..wlen).map(|_| draw(bound)).collect();
            let bias_bound = 1.0 / fan_in.sqrt();
            let bdata: Vec<F> = (0..def.cout).map(|_| draw(bias_bound)).collect();
            params.push(Param {
                name: format!("{}.weight", def.name),
                shape: vec![def.cout, def.cin, def.kernel, def.kernel],
                data: wdata,
            });
            params.push(Param {
                name: format!("{}.bias", def.name),
                shape: vec![def.cout],
                data: bdata,
            });
        }
        Ok(SegNet { cfg, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Bind parameters as gradient leaves on `tape` and run the network.
    pub fn forward_train(&self, tape: &Tape<F>, image: &Tensor<F>) -> Result<ForwardPass<F>> {
        let leaves: Vec<Tensor<F>> = self
            .params
            .iter()
            .map(|p| tape.var(p.data.clone(), &p.shape))
            .collect::<Result<_>>()?;
        let heads = self.forward_with_params(&leaves, image)?;
        Ok(ForwardPass { heads, leaves })
    }

    /// Gradient-free forward pass (teacher branch, validation, inference).
    pub fn forward_infer(&self, image: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let consts: Vec<Tensor<F>> = self
            .params
            .iter()
            .map(|p| Tensor::constant(p.data.clone(), &p.shape))
            .collect::<Result<_>>()?;
        self.forward_with_params(&consts, image)
    }

    /// Run the architecture from externally supplied parameter tensors, two
    /// per layer (weight, bias) in [`SegNet::params`] order. This is what the
    /// finite-difference harness drives to differentiate the whole network
    /// with respect to a flattened parameter vector.
    pub fn forward_with_params(&self, bound: &[Tensor<F>], image: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        if bound.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} bound tensors for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "segnet input",
                lhs: s.to_vec(),
                rhs: vec![0, 1, 0, 0],
            });
        }
        let div = 1usize << self.cfg.depth;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::BadConvGeometry(format!(
                "input extent {}x{} not divisible by 2^depth = {div}",
                s[2], s[3]
            )));
        }
        let defs = layer_defs(&self.cfg);
        let layer = |name: &str| -> Result<usize> {
            defs.iter()
                .position(|d| d.name == name)
                .ok_or_else(|| Error::ParamMismatch(format!("no layer named {name}")))
        };
        let apply = |idx: usize, x: &Tensor<F>| -> Result<Tensor<F>> {
            let w = &bound[2 * idx];
            let b = &bound[2 * idx + 1];
            conv2d(x, w, Some(b), defs[idx].stride, Padding::Same)
        };

        let depth = self.cfg.depth;
        let mut feats = Vec::with_capacity(depth);
        let mut x = apply(layer("enc0")?, image)?.relu();
        feats.push(x.clone());
        for l in 1..depth {
            x = apply(layer(&format!("down{l}"))?, &x)?.relu();
            feats.push(x.clone());
        }
        let mut g = apply(layer("mid")?, &x)?.relu();
        let mut dec: Vec<Option<Tensor<F>>> = vec![None; depth];
        dec[depth - 1] = Some(g.clone());
        for l in (1..depth).rev() {
            let up = upsample2x(&g)?;
            let c = apply(layer(&format!("up{l}"))?, &up)?;
            g = c.add(&feats[l - 1])?.relu();
            dec[l - 1] = Some(g.clone());
        }
        let mut heads = Vec::with_capacity(self.cfg.heads());
        for d in 0..self.cfg.heads() {
            let feat = dec[d].as_ref().expect("decoder level populated");
            heads.push(apply(layer(&format!("head{d}"))?, feat)?);
        }
        Ok(heads)
    }

    /// Plain SGD update from the gradients accumulated on the bound leaves.
    pub fn apply_sgd(&mut self, leaves: &[Tensor<F>], lr: F) -> Result<()> {
        if leaves.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} leaves for {} parameters",
                leaves.len(),
                self.params.len()
            )));
        }
        for (param, leaf) in self.params.iter_mut().zip(leaves) {
            if let Some(grad) = leaf.grad() {
                for (p, g) in param.data.iter_mut().zip(&grad) {
                    *p = *p - lr * *g;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, round: u32, step: u64) -> Checkpoint {
        let entries = self
            .params
            .iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.to_f32().expect("finite parameter")).collect(),
            })
            .collect();
        Checkpoint { round, step, entries }
    }

    /// Replace all parameters from a checkpoint; entry names and shapes must
    /// match this model exactly.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.entries.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {} entries, model has {} parameters",
                ck.entries.len(),
                self.params.len()
            )));
        }
        for (param, entry) in self.params.iter().zip(&ck.entries) {
            if param.name != entry.name {
                return Err(Error::ParamMismatch(format!(
                    "unknown parameter name {} (expected {})",
                    entry.name, param.name
                )));
            }
            if param.shape != entry.shape {
                return Err(Error::ParamMismatch(format!(
                    "parameter {}: shape {:?} vs model {:?}",
                    entry.name, entry.shape, param.shape
                )));
            }
        }
        for (param, entry) in self.params.iter_mut().zip(&ck.entries) {
            param.data = entry.data.iter().map(|&v| F::from_f32(v).expect("f32 fits")).collect();
        }
        Ok(())
    }

    pub fn from_checkpoint(cfg: SegNetConfig, ck: &Checkpoint) -> Result<Self> {
        let mut net = SegNet::init(cfg, 0)?;
        net.load_checkpoint(ck)?;
        Ok(net)
    }
}

/// Per-head weights for deep supervision: proportional to `2^-d`, normalized
/// to sum to 1. Head 0 is the full-resolution head.
pub fn deep_supervision_weights(heads: usize) -> Vec<f64> {
    assert!(heads >= 1);
    let raw: Vec<f64> = (0..heads).map(|d| 0.5f64.powi(d as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}
