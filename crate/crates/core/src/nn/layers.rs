//! Transformer building blocks: linear maps, RMSNorm, pre-norm blocks with
//! multi-head attention and a GEGLU feed-forward.

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.normal(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self { gain: store.ones(format!("{name}.gain"), &[width]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.rms_norm(x, T::of(RMS_EPS))?;
        g.mul(y, p.get(self.gain))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug)]
pub struct Block {
    attn_norm: RmsNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff_norm: RmsNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
    causal: bool,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: BlockDims, causal: bool, rng: &mut Rng) -> Self {
        let d = dims.width;
        let hidden = d * dims.mlp_ratio;
        Self {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), d),
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng),
            ff_norm: RmsNorm::new(store, &format!("{name}.ff_norm"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, 2 * hidden, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), hidden, d, true, rng),
            heads: dims.heads,
            causal,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(g, p, x)?;
        let q = self.wq.forward(g, p, h)?;
        let k = self.wk.forward(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        let a = g.attention(q, k, v, self.heads, self.causal)?;
        let a = self.wo.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ff_norm.forward(g, p, x)?;
        let h = self.ff_in.forward(g, p, h)?;
        let h = g.geglu(h)?;
        let h = self.ff_out.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Stack of pre-norm blocks followed by a final RMSNorm.
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    final_norm: RmsNorm,
}

impl Transformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        dims: BlockDims,
        causal: bool,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..layers).map(|i| Block::new(store, &format!("{name}.blocks.{i}"), dims, causal, rng)).collect();
        Self { blocks, final_norm: RmsNorm::new(store, &format!("{name}.final_norm"), dims.width) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
        }
        self.final_norm.forward(g, p, x)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}
