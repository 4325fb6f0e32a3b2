use serde::{Deserialize, Serialize};

use super::loss::reconstruction_loss_graph;
use super::sequence::TokenSequence;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, BlockDims, Bound, Linear, ParamId, ParamStore, Transformer};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent norm guard added before L2 normalization.
pub const NORM_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Number of latent tokens n.
    pub tokens: usize,
    /// Codebook size K.
    pub codebook: usize,
    pub code_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
    pub tau_q: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            tokens: 16,
            codebook: 64,
            code_dim: 16,
            dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            mlp_ratio: 2,
            tau_q: 0.1,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.codebook < 2 {
            return bad(format!("codebook size must be >= 2, got {}", self.codebook));
        }
        if self.tokens == 0 || self.dim == 0 || self.code_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("tokens, dim, code_dim, heads and mlp_ratio must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("patch {} must divide {}×{}", self.patch, self.height, self.width));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.tau_q > 0.0) {
            return bad(format!("tau_q must be positive, got {}", self.tau_q));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn dims(&self) -> BlockDims {
        BlockDims { width: self.dim, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }
}

/// Splits an `H×W×C` image into a `P × (p·p·C)` table, patches in row-major
/// grid order, each patch flattened as `(dy, dx, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("patchify", format!("expected H×W×C, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("patch {patch} does not tile {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                out.extend_from_slice(&image.data()[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new([gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, shape: [usize; 3], patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = shape;
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::shape("unpatchify", format!("{:?} for image {shape:?}", patches.shape())));
    }
    let mut out = vec![T::zero(); h * w * c];
    for py in 0..gh {
        for px in 0..gw {
            let src = patches.row(py * gw + px);
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                out[row * c..(row + patch) * c].copy_from_slice(&src[dy * patch * c..(dy + 1) * patch * c]);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    patch_pos: ParamId,
    queries: ParamId,
    encoder: Transformer,
    enc_out: Linear,
    codebook: ParamId,
    dec_in: Linear,
    token_pos: ParamId,
    mask: ParamId,
    dec_queries: ParamId,
    decoder: Transformer,
    dec_out: Linear,
}

/// Handles produced by one differentiable encode→quantize→decode pass.
#[derive(Clone, Debug)]
pub struct TokenizerPass {
    pub u: Var,
    pub logits: Var,
    pub h: Var,
    pub z: Var,
    /// Reconstruction in patch layout.
    pub recon: Var,
    pub loss: Var,
    pub ids: Vec<usize>,
}

/// Encoder φ, codebook, decoder and their optimizer moments.
#[derive(Clone, Debug)]
pub struct TokenizerState<T> {
    pub config: TokenizerConfig,
    pub params: ParamStore<T>,
    pub opt: AdamW<T>,
    layout: Layout,
}

impl<T: Scalar> TokenizerState<T> {
    pub fn new(config: TokenizerConfig, opt: AdamWConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let r = &mut r;
        let mut p = ParamStore::new();
        let (d, np, n) = (config.dim, config.patches(), config.tokens);
        let dims = config.dims();
        let patch_embed = Linear::new(&mut p, "enc.patch_embed", config.patch_dim(), d, true, r);
        let patch_pos = p.normal("enc.patch_pos", &[np, d], 1.0, r);
        let queries = p.normal("enc.queries", &[n, d], 1.0, r);
        let encoder = Transformer::new(&mut p, "enc", config.enc_layers, dims, false, r);
        let enc_out = Linear::new(&mut p, "enc.out", d, config.code_dim, true, r);
        let codebook = p.normal("quant.codebook", &[config.codebook, config.code_dim], 1.0, r);
        let dec_in = Linear::new(&mut p, "dec.in", config.code_dim, d, true, r);
        let token_pos = p.normal("dec.token_pos", &[n, d], 1.0, r);
        let mask = p.normal("dec.mask", &[1, d], 1.0, r);
        let dec_queries = p.normal("dec.queries", &[np, d], 1.0, r);
        let decoder = Transformer::new(&mut p, "dec", config.dec_layers, dims, false, r);
        let dec_out = Linear::new(&mut p, "dec.out", d, config.patch_dim(), true, r);
        let layout = Layout {
            patch_embed,
            patch_pos,
            queries,
            encoder,
            enc_out,
            codebook,
            dec_in,
            token_pos,
            mask,
            dec_queries,
            decoder,
            dec_out,
        };
        let mut state = Self { opt: AdamW::new(opt, &p), config, params: p, layout };
        state.renormalize_codebook();
        Ok(state)
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.params.get(self.layout.codebook)
    }

    /// Scales every codebook row back to unit L2 norm.
    pub fn renormalize_codebook(&mut self) {
        let cb = self.params.get_mut(self.layout.codebook);
        for r in 0..cb.rows() {
            let row = cb.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt() + T::of(NORM_GUARD);
            for v in row {
                *v = *v / norm;
            }
        }
    }

    /// Zeros the encoder's final projection (weights and bias).
    pub fn zero_encoder_output(&mut self) {
        let w = self.layout.enc_out.w;
        *self.params.get_mut(w) = Tensor::zeros(self.params.get(w).shape().to_vec());
        if let Some(b) = self.layout.enc_out.b {
            *self.params.get_mut(b) = Tensor::zeros(self.params.get(b).shape().to_vec());
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.config.image_shape() {
            return Err(Error::shape(
                "encode",
                format!("expected image {:?}, got {:?}", self.config.image_shape(), image.shape()),
            ));
        }
        Ok(())
    }

    /// Per-token latents `u` (n × code_dim).
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Bound, image: &Tensor<T>) -> Result<Var> {
        self.check_image(image)?;
        let l = &self.layout;
        let x = g.constant(patchify(image, self.config.patch)?)?;
        let x = l.patch_embed.forward(g, b, x)?;
        let x = g.add(x, b.get(l.patch_pos))?;
        let seq = g.concat_rows(&[x, b.get(l.queries)])?;
        let y = l.encoder.forward(g, b, seq)?;
        let np = self.config.patches();
        let q = g.slice_rows(y, np, np + self.config.tokens)?;
        l.enc_out.forward(g, b, q)
    }

    /// Codebook logits `ℓ`, simplex view `h = softmax(ℓ)` and the
    /// straight-through one-hot `z`.
    pub fn quantize_graph(&self, g: &mut Graph<T>, b: &Bound, u: Var) -> Result<(Var, Var, Var)> {
        let u_hat = g.l2_normalize(u, T::of(NORM_GUARD))?;
        let logits = g.neg_sq_dist(u_hat, b.get(self.layout.codebook), T::of(self.config.tau_q))?;
        let h = g.softmax(logits)?;
        let z = g.ste_one_hot(h)?;
        Ok((logits, h, z))
    }

    /// Decodes an n×K token table into patch layout. Positions `>= keep` are
    /// replaced by the learned mask embedding.
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Bound, z: Var, keep: usize) -> Result<Var> {
        let l = &self.layout;
        let n = self.config.tokens;
        if g.shape(z) != [n, self.config.codebook] {
            return Err(Error::shape("decode", format!("expected {n}×{}, got {:?}", self.config.codebook, g.shape(z))));
        }
        let e = g.matmul(z, b.get(l.codebook))?;
        let mut t = l.dec_in.forward(g, b, e)?;
        let keep = keep.min(n);
        if keep < n {
            let masks = g.gather_rows(b.get(l.mask), &vec![0; n - keep])?;
            t = if keep == 0 {
                masks
            } else {
                let kept = g.slice_rows(t, 0, keep)?;
                g.concat_rows(&[kept, masks])?
            };
        }
        let t = g.add(t, b.get(l.token_pos))?;
        let seq = g.concat_rows(&[t, b.get(l.dec_queries)])?;
        let y = l.decoder.forward(g, b, seq)?;
        let q = g.slice_rows(y, n, n + self.config.patches())?;
        l.dec_out.forward(g, b, q)
    }

    /// Full differentiable pass with reconstruction loss against `image`.
    pub fn pass(&self, g: &mut Graph<T>, b: &Bound, image: &Tensor<T>, keep: usize) -> Result<TokenizerPass> {
        let u = self.encode_graph(g, b, image)?;
        let (logits, h, z) = self.quantize_graph(g, b, u)?;
        let ids = g.value(z).argmax_rows();
        let recon = self.decode_graph(g, b, z, keep)?;
        let target = g.constant(patchify(image, self.config.patch)?)?;
        let loss = reconstruction_loss_graph(g, target, recon)?;
        Ok(TokenizerPass { u, logits, h, z, recon, loss, ids })
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.params.bind_frozen(&mut g)?;
        let u = self.encode_graph(&mut g, &b, image)?;
        Ok(g.value(u).clone())
    }

    pub fn tokenize(&self, image: &Tensor<T>) -> Result<TokenSequence<T>> {
        quantize(&self.encode(image)?, self.codebook(), self.config.tau_q)
    }

    pub fn decode(&self, z: &TokenSequence<T>) -> Result<Tensor<T>> {
        self.decode_prefix(z, self.config.tokens)
    }

    /// Decodes with positions `>= keep` masked.
    pub fn decode_prefix(&self, z: &TokenSequence<T>, keep: usize) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.params.bind_frozen(&mut g)?;
        let zv = g.constant(z.one_hot())?;
        let out = self.decode_graph(&mut g, &b, zv, keep)?;
        unpatchify(g.value(out), self.config.image_shape(), self.config.patch)
    }

    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.tokenize(image)?)
    }

    /// AdamW update followed by codebook re-normalization.
    pub fn apply(&mut self, grads: &[Tensor<T>]) -> f64 {
        let norm = self.opt.step(&mut self.params, grads);
        self.renormalize_codebook();
        norm
    }
}

/// Nearest-codebook quantization of latents `u` (n × d) against unit-norm
/// `codebook` rows (K × d) at temperature `tau_q`.
pub fn quantize<T: Scalar>(u: &Tensor<T>, codebook: &Tensor<T>, tau_q: f64) -> Result<TokenSequence<T>> {
    if codebook.rank() != 2 || codebook.rows() < 2 {
        return Err(Error::InvalidArgument(format!("codebook needs K >= 2 rows, got {:?}", codebook.shape())));
    }
    let mut g = Graph::inference();
    let uv = g.constant(u.clone())?;
    let cb = g.constant(codebook.clone())?;
    let u_hat = g.l2_normalize(uv, T::of(NORM_GUARD))?;
    let logits = g.neg_sq_dist(u_hat, cb, T::of(tau_q))?;
    let h = g.softmax(logits)?;
    TokenSequence::from_simplex(g.value(h).clone())
}
