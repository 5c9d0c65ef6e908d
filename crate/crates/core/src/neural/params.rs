use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which input stream a sequence row came from. Each role has its own input
/// projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Mark,
    Trajectory,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Human, Role::Mark, Role::Trajectory];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RamDims {
    /// Length of a raw input feature (4 for boxes).
    pub input_dim: usize,
    /// Embedding width `D`.
    pub model_dim: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
}

impl RamDims {
    /// `model_dim` wide, 16 channels per head, 4x feed-forward expansion.
    pub fn with_model_dim(input_dim: usize, model_dim: usize) -> Self {
        RamDims {
            input_dim,
            model_dim,
            heads: (model_dim / 16).max(1),
            ffn_dim: 4 * model_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::invalid("encoder dims", format!("{self:?} has a zero size")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "encoder dims",
                format!(
                    "model_dim {} is not divisible by {} heads",
                    self.model_dim, self.heads
                ),
            ));
        }
        Ok(())
    }
}

impl Default for RamDims {
    fn default() -> Self {
        RamDims::with_model_dim(4, 128)
    }
}

/// `y = x · weight + bias`, weight stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut sample = || rng.random_range(-bound..bound);
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| sample());
        let bias = (0..fan_out).map(|_| sample()).collect();
        Affine { weight, bias }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub(crate) fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Affine) -> Matrix {
        grad.weight.add_matmul_tn(x, dy);
        dy.accumulate_col_sums(&mut grad.bias);
        dy.matmul_nt(&self.weight)
    }

    /// Same as [`Affine::backward`] without the input gradient.
    pub(crate) fn backward_params(&self, x: &Matrix, dy: &Matrix, grad: &mut Affine) {
        grad.weight.add_matmul_tn(x, dy);
        dy.accumulate_col_sums(&mut grad.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNormParams {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Weights of one alignment encoder: per-role input projections followed by
/// a single post-norm transformer encoder layer.
///
/// The same type doubles as the gradient and optimizer-moment container.
#[derive(Clone, Debug, PartialEq)]
pub struct RamParams {
    pub dims: RamDims,
    pub human_proj: Affine,
    pub mark_proj: Affine,
    pub trajectory_proj: Affine,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl RamParams {
    /// Uniform `±sqrt(1/fan_in)` affine weights, identity layer norms.
    pub fn init(dims: RamDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (i, d, f) = (dims.input_dim, dims.model_dim, dims.ffn_dim);
        Ok(RamParams {
            dims,
            human_proj: Affine::init(i, d, &mut rng),
            mark_proj: Affine::init(i, d, &mut rng),
            trajectory_proj: Affine::init(i, d, &mut rng),
            query: Affine::init(d, d, &mut rng),
            key: Affine::init(d, d, &mut rng),
            value: Affine::init(d, d, &mut rng),
            output: Affine::init(d, d, &mut rng),
            ffn_in: Affine::init(d, f, &mut rng),
            ffn_out: Affine::init(f, d, &mut rng),
            norm1: LayerNormParams::identity(d),
            norm2: LayerNormParams::identity(d),
        })
    }

    /// All-zero tensors with the shapes of `dims`.
    pub fn zeros(dims: RamDims) -> Self {
        let (i, d, f) = (dims.input_dim, dims.model_dim, dims.ffn_dim);
        RamParams {
            dims,
            human_proj: Affine::zeros(i, d),
            mark_proj: Affine::zeros(i, d),
            trajectory_proj: Affine::zeros(i, d),
            query: Affine::zeros(d, d),
            key: Affine::zeros(d, d),
            value: Affine::zeros(d, d),
            output: Affine::zeros(d, d),
            ffn_in: Affine::zeros(d, f),
            ffn_out: Affine::zeros(f, d),
            norm1: LayerNormParams::zeros(d),
            norm2: LayerNormParams::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        RamParams::zeros(self.dims)
    }

    pub fn projection(&self, role: Role) -> &Affine {
        match role {
            Role::Human => &self.human_proj,
            Role::Mark => &self.mark_proj,
            Role::Trajectory => &self.trajectory_proj,
        }
    }

    pub fn projection_mut(&mut self, role: Role) -> &mut Affine {
        match role {
            Role::Human => &mut self.human_proj,
            Role::Mark => &mut self.mark_proj,
            Role::Trajectory => &mut self.trajectory_proj,
        }
    }

    /// Every tensor under a stable name, in serialization order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("human_proj.weight", self.human_proj.weight.as_slice()),
            ("human_proj.bias", &self.human_proj.bias),
            ("mark_proj.weight", self.mark_proj.weight.as_slice()),
            ("mark_proj.bias", &self.mark_proj.bias),
            ("trajectory_proj.weight", self.trajectory_proj.weight.as_slice()),
            ("trajectory_proj.bias", &self.trajectory_proj.bias),
            ("attn.query.weight", self.query.weight.as_slice()),
            ("attn.query.bias", &self.query.bias),
            ("attn.key.weight", self.key.weight.as_slice()),
            ("attn.key.bias", &self.key.bias),
            ("attn.value.weight", self.value.weight.as_slice()),
            ("attn.value.bias", &self.value.bias),
            ("attn.output.weight", self.output.weight.as_slice()),
            ("attn.output.bias", &self.output.bias),
            ("ffn.in.weight", self.ffn_in.weight.as_slice()),
            ("ffn.in.bias", &self.ffn_in.bias),
            ("ffn.out.weight", self.ffn_out.weight.as_slice()),
            ("ffn.out.bias", &self.ffn_out.bias),
            ("norm1.gamma", &self.norm1.gamma),
            ("norm1.beta", &self.norm1.beta),
            ("norm2.gamma", &self.norm2.gamma),
            ("norm2.beta", &self.norm2.beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("human_proj.weight", self.human_proj.weight.as_mut_slice()),
            ("human_proj.bias", &mut self.human_proj.bias),
            ("mark_proj.weight", self.mark_proj.weight.as_mut_slice()),
            ("mark_proj.bias", &mut self.mark_proj.bias),
            ("trajectory_proj.weight", self.trajectory_proj.weight.as_mut_slice()),
            ("trajectory_proj.bias", &mut self.trajectory_proj.bias),
            ("attn.query.weight", self.query.weight.as_mut_slice()),
            ("attn.query.bias", &mut self.query.bias),
            ("attn.key.weight", self.key.weight.as_mut_slice()),
            ("attn.key.bias", &mut self.key.bias),
            ("attn.value.weight", self.value.weight.as_mut_slice()),
            ("attn.value.bias", &mut self.value.bias),
            ("attn.output.weight", self.output.weight.as_mut_slice()),
            ("attn.output.bias", &mut self.output.bias),
            ("ffn.in.weight", self.ffn_in.weight.as_mut_slice()),
            ("ffn.in.bias", &mut self.ffn_in.bias),
            ("ffn.out.weight", self.ffn_out.weight.as_mut_slice()),
            ("ffn.out.bias", &mut self.ffn_out.bias),
            ("norm1.gamma", &mut self.norm1.gamma),
            ("norm1.beta", &mut self.norm1.beta),
            ("norm2.gamma", &mut self.norm2.gamma),
            ("norm2.beta", &mut self.norm2.beta),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &RamParams) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}
