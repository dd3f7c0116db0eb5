//! The conditional epsilon-predictor: a small U-shaped encoder/decoder with
//! timestep embeddings at every block, decoupled text/identity cross
//! attention, a jointly trained structural-guidance branch for the degraded
//! input, and Gated Residual Fusion on every decoder skip connection.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Ctx, GroupNormLayer, LinearLayer, ParamStore};
use crate::tensor::{LatentGrid, Tensor};
use crate::vocab::{TokenId, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    /// Cross-attention token width D.
    pub attn_dim: usize,
    pub num_heads: usize,
    /// Identity token count N.
    pub id_token_count: usize,
    /// Identity-attention weight lambda.
    pub lambda_id: f64,
    /// Timestep embedding width (the MLP doubles it internally).
    pub temb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            image_size: 32,
            base_channels: 32,
            num_levels: 3,
            attn_dim: 64,
            num_heads: 4,
            id_token_count: 16,
            lambda_id: 0.75,
            temb_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_token_count < 1 {
            return Err(Error::Config("id_token_count must be >= 1".to_string()));
        }
        if self.lambda_id < 0.0 {
            return Err(Error::Config("lambda_id must be >= 0".to_string()));
        }
        if self.attn_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} not divisible by num_heads {}",
                self.attn_dim, self.num_heads
            )));
        }
        if self.num_levels < 2 {
            return Err(Error::Config("num_levels must be >= 2".to_string()));
        }
        if self.image_size % (1 << (self.num_levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.num_levels - 1
            )));
        }
        Ok(())
    }

    /// Channels per level: base at level 0, doubled beyond.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..self.num_levels)
            .map(|i| {
                if i == 0 {
                    self.base_channels
                } else {
                    self.base_channels * 2
                }
            })
            .collect()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// Levels with cross-attention: everything below full resolution.
    pub fn attn_levels(&self) -> Vec<usize> {
        (1..self.num_levels).collect()
    }

    fn temb_width(&self) -> usize {
        self.temb_dim * 2
    }
}

/// Everything the denoiser is conditioned on.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub prompt_tokens: Vec<TokenId>,
    /// Projected identity tokens `(N, D)`; absent on the CFG null branch.
    pub id_tokens: Option<Tensor>,
    /// Structural features from the guidance branch, one per level; absent
    /// for unconditional generation.
    pub lq_features: Option<Vec<Tensor>>,
}

impl ConditionBundle {
    /// True when everything except the prompt matches (used by the guidance
    /// residual, which must compare like with like).
    pub fn same_non_prompt_fields(&self, other: &ConditionBundle) -> bool {
        self.id_tokens == other.id_tokens && self.lq_features == other.lq_features
    }

    pub fn without_id(&self) -> ConditionBundle {
        ConditionBundle {
            prompt_tokens: self.prompt_tokens.clone(),
            id_tokens: None,
            lq_features: self.lq_features.clone(),
        }
    }

    pub fn with_prompt(&self, prompt_tokens: Vec<TokenId>) -> ConditionBundle {
        ConditionBundle {
            prompt_tokens,
            id_tokens: self.id_tokens.clone(),
            lq_features: self.lq_features.clone(),
        }
    }
}

/// Tape-level conditioning (for training and gradient-mode inference).
pub struct CondVars {
    pub text_tokens: Var,
    pub id_tokens: Option<Var>,
    pub lq_features: Option<Vec<Var>>,
}

/// Identity-branch attention logits captured during a forward pass:
/// `(spatial_side, [heads, n_query, n_id_tokens])` per recorded site.
#[derive(Debug, Clone, Default)]
pub struct AttnTrace {
    pub sites: Vec<(usize, Tensor)>,
}

/// Recording request: capture identity-attention logits at sites whose
/// spatial side matches.
#[derive(Debug, Clone, Copy)]
pub struct RecordAttn {
    pub spatial_side: usize,
}

struct ResBlock {
    gn1: GroupNormLayer,
    conv1: Conv2dLayer,
    temb_proj: LinearLayer,
    gn2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, temb: usize) -> Self {
        ResBlock {
            gn1: GroupNormLayer::new(format!("{name}.gn1"), cin),
            conv1: Conv2dLayer::new(format!("{name}.conv1"), cin, cout, 3, 1),
            temb_proj: LinearLayer::new(format!("{name}.temb"), temb, cout),
            gn2: GroupNormLayer::new(format!("{name}.gn2"), cout),
            conv2: Conv2dLayer::new(format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2dLayer::new(format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.gn1.init(store, rng);
        self.conv1.init(store, rng);
        self.temb_proj.init(store, rng);
        self.gn2.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    fn fwd(&self, cx: &mut Ctx, x: Var, temb: Var) -> Var {
        let mut h = self.gn1.fwd(cx, x);
        h = cx.tape.silu(h);
        h = self.conv1.fwd(cx, h);
        let ts = cx.tape.silu(temb);
        let trow = self.temb_proj.fwd(cx, ts);
        let cout = cx.tape.value(trow).numel();
        let tvec = cx.tape.reshape(trow, &[cout]);
        h = cx.tape.add_channel_vec(h, tvec);
        let mut h2 = self.gn2.fwd(cx, h);
        h2 = cx.tape.silu(h2);
        h2 = self.conv2.fwd(cx, h2);
        let sk = match &self.skip {
            Some(s) => s.fwd(cx, x),
            None => x,
        };
        cx.tape.add(sk, h2)
    }
}

/// Decoupled dual cross-attention block:
/// `out = x + W_o(Attn(Q,K,V) + lambda * Attn(Q,K_f,V_f))`
/// with separate learned key/value projections for the identity tokens.
pub struct AttnBlock {
    pub name: String,
    gn: GroupNormLayer,
    to_q: LinearLayer,
    to_k: LinearLayer,
    to_v: LinearLayer,
    to_kf: LinearLayer,
    to_vf: LinearLayer,
    to_out: LinearLayer,
    heads: usize,
}

impl AttnBlock {
    fn new(name: &str, channels: usize, dim: usize, heads: usize) -> Self {
        AttnBlock {
            name: name.to_string(),
            gn: GroupNormLayer::new(format!("{name}.gn"), channels),
            to_q: LinearLayer::new(format!("{name}.q"), channels, dim),
            to_k: LinearLayer::new(format!("{name}.k"), dim, dim),
            to_v: LinearLayer::new(format!("{name}.v"), dim, dim),
            to_kf: LinearLayer::new(format!("{name}.kf"), dim, dim),
            to_vf: LinearLayer::new(format!("{name}.vf"), dim, dim),
            to_out: LinearLayer::new(format!("{name}.out"), dim, channels),
            heads,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.gn.init(store, rng);
        self.to_q.init(store, rng);
        self.to_k.init(store, rng);
        self.to_v.init(store, rng);
        // Identity projections start as copies of the text projections so
        // the branch is live from the first step.
        self.to_kf.init(store, rng);
        self.to_vf.init(store, rng);
        store.set(
            &format!("{}.w", self.to_kf.name),
            store.get(&format!("{}.w", self.to_k.name)).clone(),
        );
        store.set(
            &format!("{}.b", self.to_kf.name),
            store.get(&format!("{}.b", self.to_k.name)).clone(),
        );
        store.set(
            &format!("{}.w", self.to_vf.name),
            store.get(&format!("{}.w", self.to_v.name)).clone(),
        );
        store.set(
            &format!("{}.b", self.to_vf.name),
            store.get(&format!("{}.b", self.to_v.name)).clone(),
        );
        self.to_out.init(store, rng);
    }

    /// Returns the block output and, when requested, the identity-branch
    /// attention logits `[heads, HW, N]`.
    pub fn fwd(
        &self,
        cx: &mut Ctx,
        x: Var,
        text_tokens: Var,
        id_tokens: Option<Var>,
        lambda_id: f64,
        record: bool,
    ) -> (Var, Option<Tensor>) {
        let shape = cx.tape.value(x).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let xn = self.gn.fwd(cx, x);
        let flat = cx.tape.reshape(xn, &[c, h * w]);
        let tokens_in = cx.tape.transpose(flat);
        let q = self.to_q.fwd(cx, tokens_in);
        let kt = self.to_k.fwd(cx, text_tokens);
        let vt = self.to_v.fwd(cx, text_tokens);
        let text_attn = cx.tape.attention(q, kt, vt, self.heads);
        let mut logits = None;
        let combined = match id_tokens {
            Some(id) if lambda_id != 0.0 => {
                let kf = self.to_kf.fwd(cx, id);
                let vf = self.to_vf.fwd(cx, id);
                let (id_attn, lg) = cx.tape.attention_with_logits(q, kf, vf, self.heads);
                if record {
                    logits = Some(lg);
                }
                let scaled = cx.tape.scale(id_attn, lambda_id);
                cx.tape.add(text_attn, scaled)
            }
            _ => text_attn,
        };
        let out_tokens = self.to_out.fwd(cx, combined);
        let back = cx.tape.transpose(out_tokens);
        let grid = cx.tape.reshape(back, &[c, h, w]);
        (cx.tape.add(x, grid), logits)
    }
}

/// Gated Residual Fusion:
/// `F = concat(GN(F_lq), GN(F_skip)); G = sigmoid(PW(DW(Conv(F))));
///  out = F_skip + G .* F_lq`.
pub struct GrfBlock {
    pub name: String,
    gn_lq: GroupNormLayer,
    gn_skip: GroupNormLayer,
    conv: Conv2dLayer,
    dw_name: String,
    pw: Conv2dLayer,
    channels: usize,
}

impl GrfBlock {
    fn new(name: &str, channels: usize) -> Self {
        GrfBlock {
            name: name.to_string(),
            gn_lq: GroupNormLayer::new(format!("{name}.gn_lq"), channels),
            gn_skip: GroupNormLayer::new(format!("{name}.gn_skip"), channels),
            conv: Conv2dLayer::new(format!("{name}.conv"), channels * 2, channels, 3, 1),
            dw_name: format!("{name}.dw"),
            pw: Conv2dLayer::new(format!("{name}.pw"), channels, channels, 1, 1),
            channels,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.gn_lq.init(store, rng);
        self.gn_skip.init(store, rng);
        self.conv.init(store, rng);
        store.register(
            &format!("{}.w", self.dw_name),
            crate::nn::kaiming_uniform(&[self.channels, 3, 3], 9, rng),
        );
        store.register(&format!("{}.b", self.dw_name), Tensor::zeros(&[self.channels]));
        self.pw.init(store, rng);
    }

    /// Returns `(fused, gate)`.
    pub fn fuse(&self, cx: &mut Ctx, f_lq: Var, f_skip: Var) -> (Var, Var) {
        let a = self.gn_lq.fwd(cx, f_lq);
        let b = self.gn_skip.fwd(cx, f_skip);
        let f = cx.tape.concat_channels(a, b);
        let h = self.conv.fwd(cx, f);
        let dw_w = cx.p(&format!("{}.w", self.dw_name));
        let dw_b = cx.p(&format!("{}.b", self.dw_name));
        let h = cx.tape.dwconv3x3(h, dw_w, Some(dw_b));
        let h = self.pw.fwd(cx, h);
        let gate = cx.tape.sigmoid(h);
        let weighted = cx.tape.mul(gate, f_lq);
        (cx.tape.add(f_skip, weighted), gate)
    }
}

/// Structural-guidance branch: a small conv encoder mirroring the U-Net
/// encoder level shapes, with zero-initialized output projections so the
/// features start silent.
pub struct ControlBranch {
    conv_in: Conv2dLayer,
    bodies: Vec<Conv2dLayer>,
    projs: Vec<Conv2dLayer>,
    downs: Vec<Conv2dLayer>,
}

impl ControlBranch {
    fn new(cfg: &DenoiserConfig) -> Self {
        let ch = cfg.level_channels();
        let conv_in = Conv2dLayer::new("control.conv_in", cfg.image_channels, ch[0], 3, 1);
        let mut bodies = Vec::new();
        let mut projs = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            bodies.push(Conv2dLayer::new(format!("control.body{i}"), c, c, 3, 1));
            projs.push(Conv2dLayer::new(format!("control.proj{i}"), c, c, 1, 1));
            if i + 1 < ch.len() {
                downs.push(Conv2dLayer::new(format!("control.down{i}"), c, ch[i + 1], 3, 2));
            }
        }
        ControlBranch {
            conv_in,
            bodies,
            projs,
            downs,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.conv_in.init(store, rng);
        for b in &self.bodies {
            b.init(store, rng);
        }
        for p in &self.projs {
            p.init_zero(store, rng);
        }
        for d in &self.downs {
            d.init(store, rng);
        }
    }

    /// Per-level structural features for a `[-1,1]`-domain degraded image.
    pub fn fwd(&self, cx: &mut Ctx, lq: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.bodies.len());
        let mut h = self.conv_in.fwd(cx, lq);
        h = cx.tape.silu(h);
        for i in 0..self.bodies.len() {
            h = self.bodies[i].fwd(cx, h);
            h = cx.tape.silu(h);
            feats.push(self.projs[i].fwd(cx, h));
            if i < self.downs.len() {
                h = self.downs[i].fwd(cx, h);
                h = cx.tape.silu(h);
            }
        }
        feats
    }
}

/// The full epsilon-predictor.
pub struct Denoiser {
    pub config: DenoiserConfig,
    text_embed_name: String,
    temb_fc1: LinearLayer,
    temb_fc2: LinearLayer,
    conv_in: Conv2dLayer,
    enc_blocks: Vec<ResBlock>,
    enc_attn: Vec<Option<AttnBlock>>,
    downs: Vec<Conv2dLayer>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    pub grf: Vec<GrfBlock>,
    dec_blocks: Vec<ResBlock>,
    dec_attn: Vec<Option<AttnBlock>>,
    ups: Vec<Conv2dLayer>,
    gn_out: GroupNormLayer,
    conv_out: Conv2dLayer,
    pub control: ControlBranch,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.level_channels();
        let temb_w = config.temb_width();
        let attn_levels = config.attn_levels();
        let mut enc_blocks = Vec::new();
        let mut enc_attn = Vec::new();
        let mut downs = Vec::new();
        for i in 0..config.num_levels {
            // The down convs change channel counts between levels.
            enc_blocks.push(ResBlock::new(&format!("denoiser.enc{i}"), ch[i], ch[i], temb_w));
            enc_attn.push(attn_levels.contains(&i).then(|| {
                AttnBlock::new(
                    &format!("denoiser.enc{i}.attn"),
                    ch[i],
                    config.attn_dim,
                    config.num_heads,
                )
            }));
            if i + 1 < config.num_levels {
                downs.push(Conv2dLayer::new(format!("denoiser.down{i}"), ch[i], ch[i + 1], 3, 2));
            }
        }
        let top = *ch.last().unwrap();
        let mid1 = ResBlock::new("denoiser.mid1", top, top, temb_w);
        let mid_attn = AttnBlock::new("denoiser.mid.attn", top, config.attn_dim, config.num_heads);
        let mid2 = ResBlock::new("denoiser.mid2", top, top, temb_w);
        let mut grf = Vec::new();
        let mut dec_blocks = Vec::new();
        let mut dec_attn = Vec::new();
        let mut ups = Vec::new();
        for i in 0..config.num_levels {
            grf.push(GrfBlock::new(&format!("denoiser.grf{i}"), ch[i]));
            dec_blocks.push(ResBlock::new(
                &format!("denoiser.dec{i}"),
                ch[i] * 2,
                ch[i],
                temb_w,
            ));
            dec_attn.push(attn_levels.contains(&i).then(|| {
                AttnBlock::new(
                    &format!("denoiser.dec{i}.attn"),
                    ch[i],
                    config.attn_dim,
                    config.num_heads,
                )
            }));
            if i > 0 {
                ups.push(Conv2dLayer::new(format!("denoiser.up{i}"), ch[i], ch[i - 1], 3, 1));
            }
        }
        Ok(Denoiser {
            text_embed_name: "denoiser.text_embed".to_string(),
            temb_fc1: LinearLayer::new("denoiser.temb.fc1", config.temb_dim, temb_w),
            temb_fc2: LinearLayer::new("denoiser.temb.fc2", temb_w, temb_w),
            conv_in: Conv2dLayer::new("denoiser.conv_in", config.image_channels, ch[0], 3, 1),
            enc_blocks,
            enc_attn,
            downs,
            mid1,
            mid_attn,
            mid2,
            grf,
            dec_blocks,
            dec_attn,
            ups,
            gn_out: GroupNormLayer::new("denoiser.gn_out", ch[0]),
            conv_out: Conv2dLayer::new("denoiser.conv_out", ch[0], config.image_channels, 3, 1),
            control: ControlBranch::new(&config),
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        store.register(
            &self.text_embed_name,
            token_embedding_init(self.config.attn_dim, rng),
        );
        self.temb_fc1.init(store, rng);
        self.temb_fc2.init(store, rng);
        self.conv_in.init(store, rng);
        for b in &self.enc_blocks {
            b.init(store, rng);
        }
        for a in self.enc_attn.iter().flatten() {
            a.init(store, rng);
        }
        for d in &self.downs {
            d.init(store, rng);
        }
        self.mid1.init(store, rng);
        self.mid_attn.init(store, rng);
        self.mid2.init(store, rng);
        for g in &self.grf {
            g.init(store, rng);
        }
        for b in &self.dec_blocks {
            b.init(store, rng);
        }
        for a in self.dec_attn.iter().flatten() {
            a.init(store, rng);
        }
        for u in &self.ups {
            u.init(store, rng);
        }
        self.gn_out.init(store, rng);
        // Zero-initialized output conv: the untrained model predicts zero.
        self.conv_out.init_zero(store, rng);
        self.control.init(store, rng);
    }

    /// Embed prompt token ids through the learned table.
    pub fn embed_prompt(&self, cx: &mut Ctx, tokens: &[TokenId]) -> Var {
        let table = cx.p(&self.text_embed_name);
        cx.tape.embed(table, tokens)
    }

    /// One representative decoupled-attention block (the mid block), for
    /// block-level contract tests.
    pub fn attn_block_for_tests(&self) -> &AttnBlock {
        &self.mid_attn
    }

    /// Core U-Net forward on an existing tape (GRF skip fusion).
    pub fn forward_on(
        &self,
        cx: &mut Ctx,
        z: Var,
        t: usize,
        cond: &CondVars,
        record: Option<RecordAttn>,
    ) -> (Var, AttnTrace) {
        self.forward_with_fusion(cx, z, t, cond, record, true)
    }

    /// Forward pass with a fusion switch: `grf = false` is the ablation that
    /// adds structural features directly onto the skip features.
    pub fn forward_with_fusion(
        &self,
        cx: &mut Ctx,
        z: Var,
        t: usize,
        cond: &CondVars,
        record: Option<RecordAttn>,
        grf: bool,
    ) -> (Var, AttnTrace) {
        let mut trace = AttnTrace::default();
        let temb_sin = cx
            .tape
            .input(timestep_embedding(t, self.config.temb_dim));
        let n = self.config.temb_dim;
        let trow = cx.tape.reshape(temb_sin, &[1, n]);
        let t1 = self.temb_fc1.fwd(cx, trow);
        let t1 = cx.tape.silu(t1);
        let temb = self.temb_fc2.fwd(cx, t1);

        let lambda = self.config.lambda_id;
        let attn_site = |cx: &mut Ctx,
                             block: &AttnBlock,
                             x: Var,
                             trace: &mut AttnTrace|
         -> Var {
            let side = cx.tape.value(x).shape()[1];
            let rec = record.map(|r| r.spatial_side == side).unwrap_or(false);
            let (out, logits) =
                block.fwd(cx, x, cond.text_tokens, cond.id_tokens, lambda, rec);
            if let Some(lg) = logits {
                trace.sites.push((side, lg));
            }
            out
        };

        let mut h = self.conv_in.fwd(cx, z);
        let mut skips = Vec::with_capacity(self.config.num_levels);
        for i in 0..self.config.num_levels {
            h = self.enc_blocks[i].fwd(cx, h, temb);
            if let Some(a) = &self.enc_attn[i] {
                h = attn_site(cx, a, h, &mut trace);
            }
            skips.push(h);
            if i + 1 < self.config.num_levels {
                h = self.downs[i].fwd(cx, h);
            }
        }
        h = self.mid1.fwd(cx, h, temb);
        h = attn_site(cx, &self.mid_attn, h, &mut trace);
        h = self.mid2.fwd(cx, h, temb);

        for i in (0..self.config.num_levels).rev() {
            let skip = skips[i];
            let fused = match &cond.lq_features {
                Some(feats) if grf => self.grf[i].fuse(cx, feats[i], skip).0,
                Some(feats) => cx.tape.add(skip, feats[i]),
                None => skip,
            };
            let cat = cx.tape.concat_channels(h, fused);
            h = self.dec_blocks[i].fwd(cx, cat, temb);
            if let Some(a) = &self.dec_attn[i] {
                h = attn_site(cx, a, h, &mut trace);
            }
            if i > 0 {
                h = cx.tape.upsample2x(h);
                h = self.ups[i - 1].fwd(cx, h);
            }
        }
        let out = self.gn_out.fwd(cx, h);
        let out = cx.tape.silu(out);
        (self.conv_out.fwd(cx, out), trace)
    }

    fn validate_cond(&self, z: &LatentGrid, cond: &ConditionBundle) -> Result<()> {
        let cfg = &self.config;
        let want = [cfg.image_channels, cfg.image_size, cfg.image_size];
        if z.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} vs config {:?}",
                z.shape(),
                want
            )));
        }
        if let Some(id) = &cond.id_tokens {
            if id.shape() != [cfg.id_token_count, cfg.attn_dim] {
                return Err(Error::ShapeMismatch(format!(
                    "id tokens {:?}, expected [{}, {}]",
                    id.shape(),
                    cfg.id_token_count,
                    cfg.attn_dim
                )));
            }
        }
        if let Some(feats) = &cond.lq_features {
            if feats.len() != cfg.num_levels {
                return Err(Error::ShapeMismatch(format!(
                    "{} lq feature levels, expected {}",
                    feats.len(),
                    cfg.num_levels
                )));
            }
            let ch = cfg.level_channels();
            for (i, f) in feats.iter().enumerate() {
                let want = [ch[i], cfg.level_size(i), cfg.level_size(i)];
                if f.shape() != want {
                    return Err(Error::ShapeMismatch(format!(
                        "lq feature {i}: {:?} vs {:?}",
                        f.shape(),
                        want
                    )));
                }
            }
        }
        Ok(())
    }

    /// Inference-mode epsilon prediction from a plain condition bundle.
    pub fn predict_eps(
        &self,
        store: &ParamStore,
        z: &LatentGrid,
        t: usize,
        cond: &ConditionBundle,
        record: Option<RecordAttn>,
    ) -> Result<(LatentGrid, AttnTrace)> {
        self.predict_eps_with_fusion(store, z, t, cond, record, true)
    }

    pub fn predict_eps_with_fusion(
        &self,
        store: &ParamStore,
        z: &LatentGrid,
        t: usize,
        cond: &ConditionBundle,
        record: Option<RecordAttn>,
        grf: bool,
    ) -> Result<(LatentGrid, AttnTrace)> {
        self.validate_cond(z, cond)?;
        let mut cx = Ctx::inference(store);
        let zv = cx.tape.input(z.clone());
        let text = self.embed_prompt(&mut cx, &cond.prompt_tokens);
        let id = cond.id_tokens.as_ref().map(|x| cx.tape.input(x.clone()));
        let lq = cond
            .lq_features
            .as_ref()
            .map(|fs| fs.iter().map(|f| cx.tape.input(f.clone())).collect());
        let cv = CondVars {
            text_tokens: text,
            id_tokens: id,
            lq_features: lq,
        };
        let (out, trace) = self.forward_with_fusion(&mut cx, zv, t, &cv, record, grf);
        Ok((cx.tape.value(out).clone(), trace))
    }

    /// Structural features for a degraded image in the 8-bit pixel domain.
    pub fn control_features(&self, store: &ParamStore, lq_image: &LatentGrid) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        if lq_image.shape() != [cfg.image_channels, cfg.image_size, cfg.image_size] {
            return Err(Error::ShapeMismatch(format!(
                "lq image {:?} vs config size {}",
                lq_image.shape(),
                cfg.image_size
            )));
        }
        let mut cx = Ctx::inference(store);
        let lq = cx
            .tape
            .input(crate::imageio::to_model_domain(lq_image));
        let feats = self.control.fwd(&mut cx, lq);
        Ok(feats.iter().map(|&f| cx.tape.value(f).clone()).collect())
    }
}

/// Sinusoidal timestep embedding.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(j as f64) * (10000.0f64.ln()) / (half as f64 - 1.0).max(1.0)).exp();
        v[j] = (t as f64 * freq).sin();
        v[half + j] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[dim], v)
}

/// Token embedding table with smooth ordinal structure over the age tokens:
/// each age embedding is a shared base plus an age-scaled direction plus a
/// small sinusoidal code, so adjacent ages start out near each other.
fn token_embedding_init(dim: usize, rng: &mut impl rand::Rng) -> Tensor {
    use crate::vocab;
    let scale = (1.0 / dim as f64).sqrt();
    let mut table = Tensor::rand_uniform(&[VOCAB_SIZE, dim], -scale, scale, rng);
    let base = Tensor::rand_uniform(&[dim], -scale, scale, rng);
    let dir = Tensor::rand_uniform(&[dim], -scale, scale, rng);
    {
        let td = table.data_mut();
        for age in 0..=vocab::MAX_AGE {
            let tok = vocab::age_token(age).unwrap();
            let a = age as f64 / vocab::MAX_AGE as f64;
            for j in 0..dim {
                let code = (a * 8.0 * std::f64::consts::PI * (j + 1) as f64 / dim as f64).sin();
                td[tok * dim + j] = base.data()[j] + 2.0 * a * dir.data()[j] + 0.3 * scale * code;
            }
        }
    }
    table
}
