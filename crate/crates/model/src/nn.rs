//! Named parameters and the small set of layers the network is built from.
//!
//! Candle's CPU generator cannot be seeded, so every initial value is drawn
//! from a ChaCha stream and wrapped as a `Var`.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Activation;
use crate::error::Result;

pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        debug_assert!(!self.vars.iter().any(|(n, _)| n == name), "duplicate parameter {name}");
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.push(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// `y = x W + b` over the last dimension; `W` is `in×out`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            weight: ps.normal(&format!("{name}.weight"), &[inputs, outputs], (1.0 / inputs as f64).sqrt())?,
            bias: ps.constant(&format!("{name}.bias"), &[outputs], 0.0)?,
        })
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            weight: ps.constant(&format!("{name}.weight"), &[inputs, outputs], 0.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[outputs], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: ps.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: ps.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor> {
    Ok(match act {
        Activation::Relu => x.relu()?,
        Activation::Gelu => x.gelu_erf()?,
    })
}

/// Pre-norm self-attention block with an MLP.
#[derive(Clone)]
pub struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    act: Activation,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ratio: usize, act: Activation) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, ratio * dim)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), ratio * dim, dim)?,
            heads,
            act,
        })
    }

    /// `x`: `(B, N, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let (h, dh) = (self.heads, c / self.heads);
        let qkv = self
            .qkv
            .forward(&self.norm1.forward(x)?)?
            .reshape((b, n, 3, h, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        let x = (x + self.proj.forward(&y)?)?;
        let hidden = activate(&self.fc1.forward(&self.norm2.forward(&x)?)?, self.act)?;
        Ok((&x + self.fc2.forward(&hidden)?)?)
    }
}

pub fn run_blocks(blocks: &[Block], x: Tensor) -> Result<Tensor> {
    blocks.iter().try_fold(x, |h, b| b.forward(&h))
}

/// Splits `(B, C, H, W)` into non-overlapping `p×p` patches, `(B, N, C·p·p)`,
/// tokens in row-major patch order.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (hp, wp) = (h / p, w / p);
    Ok(x.reshape((b, c, hp, p, wp, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, hp * wp, c * p * p))?)
}

/// Linear patch embedding plus a learned per-token position embedding.
#[derive(Clone)]
pub struct PatchEmbed {
    proj: Linear,
    pos: Tensor,
    patch: usize,
}

impl PatchEmbed {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, patch: usize, tokens: usize, dim: usize) -> Result<Self> {
        Ok(PatchEmbed {
            proj: Linear::new(ps, &format!("{name}.proj"), channels * patch * patch, dim)?,
            pos: ps.normal(&format!("{name}.pos"), &[tokens, dim], 0.02)?,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tokens = self.proj.forward(&patchify(x, self.patch)?)?;
        Ok(tokens.broadcast_add(&self.pos)?)
    }
}

/// Two-layer MLP head.
#[derive(Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, inputs: usize, hidden: usize, outputs: usize, act: Activation) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), inputs, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, outputs)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&activate(&self.fc1.forward(x)?, self.act)?)
    }
}

pub fn tensor_f32(values: Vec<f32>, shape: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?)
}

pub fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
