//! Identity embedding extraction from masked reference faces, multi-reference
//! averaging, and projection to cross-attention tokens.
//!
//! The encoder is a trained toy stand-in for a face-recognition model; it is
//! trained contrastively with cross-age positive pairs so embeddings stay
//! stable under age changes, then frozen while the denoiser trains. The
//! projection network is trained jointly with the denoiser.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LinearLayer, ParamStore, SmallEncoder};
use crate::tensor::Tensor;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    e: Tensor,
}

impl IdentityEmbedding {
    pub fn from_unit(e: Tensor) -> Result<Self> {
        if (e.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRange(format!(
                "embedding norm {} is not 1",
                e.norm()
            )));
        }
        Ok(IdentityEmbedding { e })
    }

    pub fn vector(&self) -> &Tensor {
        &self.e
    }

    pub fn dim(&self) -> usize {
        self.e.numel()
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        self.e.dot(&other.e)
    }
}

/// The identity encoder (phi): masked image in, unit embedding out.
pub struct IdentityEncoder {
    net: SmallEncoder,
    pub embed_dim: usize,
}

impl IdentityEncoder {
    pub fn new(embed_dim: usize) -> Self {
        IdentityEncoder {
            net: SmallEncoder::new("id_encoder", 3, [16, 32, 64], 96, embed_dim),
            embed_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.net.init(store, rng);
    }

    /// Tape-level forward for training: input must already be the masked
    /// [0,1] image.
    pub fn fwd(&self, cx: &mut Ctx, masked: Var) -> Var {
        let raw = self.net.fwd(cx, masked);
        cx.tape.l2norm(raw)
    }
}

/// Zero the background and scale to [0,1]; idempotent on its own output.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    {
        let od = out.data_mut();
        for ch in 0..c {
            for i in 0..h * w {
                od[ch * h * w + i] = image.data()[ch * h * w + i] / 255.0 * mask.data()[i];
            }
        }
    }
    Ok(out)
}

/// Extract an identity embedding from a masked reference face.
pub fn embed_identity(
    image: &Tensor,
    mask: &Tensor,
    encoder: &IdentityEncoder,
    store: &ParamStore,
) -> Result<IdentityEmbedding> {
    if mask.sum() == 0.0 {
        return Err(Error::DegenerateInput("all-zero face mask".to_string()));
    }
    let masked = apply_mask(image, mask)?;
    let mut cx = Ctx::inference(store);
    let x = cx.tape.input(masked);
    let e = encoder.fwd(&mut cx, x);
    IdentityEmbedding::from_unit(cx.tape.value(e).clone())
}

/// Average embeddings and renormalize to unit length. Order-invariant.
pub fn average_embeddings(embeddings: &[IdentityEmbedding]) -> Result<IdentityEmbedding> {
    if embeddings.is_empty() {
        return Err(Error::DegenerateInput("empty embedding list".to_string()));
    }
    let dim = embeddings[0].dim();
    let mut mean = Tensor::zeros(&[dim]);
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding dims {} vs {dim}",
                e.dim()
            )));
        }
        mean.accumulate(e.vector());
    }
    let mean = mean.scale(1.0 / embeddings.len() as f64);
    let norm = mean.norm();
    if norm < 1e-8 {
        return Err(Error::DegenerateInput("antipodal collapse".to_string()));
    }
    IdentityEmbedding::from_unit(mean.scale(1.0 / norm))
}

/// Two-layer projection from the identity embedding to `(N, D)` attention
/// tokens, trained jointly with the denoiser.
pub struct TokenProjection {
    fc1: LinearLayer,
    fc2: LinearLayer,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
}

impl TokenProjection {
    pub fn new(embed_dim: usize, n_tokens: usize, token_dim: usize) -> Self {
        let hidden = 2 * embed_dim;
        TokenProjection {
            fc1: LinearLayer::new("id_proj.fc1", embed_dim, hidden),
            fc2: LinearLayer::new("id_proj.fc2", hidden, n_tokens * token_dim),
            n_tokens,
            token_dim,
            embed_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn fwd(&self, cx: &mut Ctx, e: Var) -> Var {
        let row = cx.tape.reshape(e, &[1, self.embed_dim]);
        let h = self.fc1.fwd(cx, row);
        let h = cx.tape.silu(h);
        let out = self.fc2.fwd(cx, h);
        cx.tape.reshape(out, &[self.n_tokens, self.token_dim])
    }
}

/// Inference-mode token projection.
pub fn project_tokens(
    e: &IdentityEmbedding,
    proj: &TokenProjection,
    store: &ParamStore,
) -> Result<Tensor> {
    if e.dim() != proj.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs projection input {}",
            e.dim(),
            proj.embed_dim
        )));
    }
    let mut cx = Ctx::inference(store);
    let ev = cx.tape.input(e.vector().clone());
    let out = proj.fwd(&mut cx, ev);
    Ok(cx.tape.value(out).clone())
}
