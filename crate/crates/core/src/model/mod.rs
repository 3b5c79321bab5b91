//! A tiny multimodal decoder.
//!
//! Image patches go through a per-patch perceptron (optionally followed by a
//! cross-patch self-attention "mixer") and a linear projector; text tokens
//! are looked up in an embedding table. The resulting `system | image | user`
//! sequence runs through pre-norm decoder blocks whose attention rotates
//! queries and keys to the ids chosen by the configured position scheme. A
//! two-way yes/no head reads the final token.
//!
//! Gradients are computed by a hand-written reverse pass over the cached
//! forward activations.

mod checkpoint;
mod layers;
mod params;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{add_row_bias, matmul_acc, matmul_t_acc, sum_rows_acc, t_matmul_acc, Matrix};
use crate::positions::{ModalityLayout, PositionIds, Scheme};
use crate::rope::{make_thetas, RopeParams, DEFAULT_BASE};

use layers::{
    attention_backward, attention_forward, rmsnorm_backward, rmsnorm_forward, silu, silu_grad,
    AttnCache, AttnSpec,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use params::{AttentionParams, LayerParams, Params};
pub use train::{
    align_projector, cross_entropy, loss_and_grads, train, Adam, AdamConfig, Example, TrainConfig,
    TrainLogEntry,
};

/// Which vision encoder sits in front of the projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Each patch is encoded independently; no positional information.
    PerPatch,
    /// Per-patch encoding plus 2-D sinusoidal patch positions and one
    /// bidirectional self-attention layer across patches.
    Mixing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_dim: usize,
    pub patch_dim: usize,
    pub text_vocab_size: usize,
    pub scheme: Scheme,
    pub rope_base: f64,
    pub encoder: EncoderKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            head_dim: 16,
            num_heads: 4,
            num_layers: 2,
            mlp_dim: 128,
            patch_dim: 16,
            text_vocab_size: 67,
            scheme: Scheme::Bapa,
            rope_base: DEFAULT_BASE,
            encoder: EncoderKind::PerPatch,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_dim", self.mlp_dim),
            ("patch_dim", self.patch_dim),
            ("text_vocab_size", self.text_vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "embed_dim {} != num_heads {} x head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary embedding",
                self.head_dim
            )));
        }
        if self.encoder == EncoderKind::Mixing && self.embed_dim % 4 != 0 {
            return Err(Error::config(
                "mixing encoder needs embed_dim divisible by 4 for 2-D sinusoidal positions",
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be a positive real"));
        }
        Ok(())
    }

    fn shapes(&self) -> params::ParamShapes {
        params::ParamShapes {
            embed_dim: self.embed_dim,
            patch_dim: self.patch_dim,
            mlp_dim: self.mlp_dim,
            vocab: self.text_vocab_size,
            layers: self.num_layers,
            mixer: self.encoder == EncoderKind::Mixing,
        }
    }
}

/// One multimodal prompt: system tokens, a raster-ordered patch grid, and
/// user tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalInput {
    layout: ModalityLayout,
    system_tokens: Vec<usize>,
    patches: Matrix,
    grid_cols: usize,
    user_tokens: Vec<usize>,
}

impl MultimodalInput {
    /// `patches` holds one patch per row in raster order over a grid with
    /// `grid_cols` columns.
    pub fn new(
        system_tokens: Vec<usize>,
        patches: Matrix,
        grid_cols: usize,
        user_tokens: Vec<usize>,
    ) -> Result<Self> {
        let layout = ModalityLayout::new(system_tokens.len(), patches.rows(), user_tokens.len())?;
        if grid_cols == 0 || patches.rows() % grid_cols != 0 {
            return Err(Error::shape(format!(
                "{} patches do not fill a grid with {grid_cols} columns",
                patches.rows()
            )));
        }
        if !patches.is_finite() {
            return Err(Error::shape("patches must be finite"));
        }
        Ok(Self {
            layout,
            system_tokens,
            patches,
            grid_cols,
            user_tokens,
        })
    }

    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    pub fn system_tokens(&self) -> &[usize] {
        &self.system_tokens
    }

    pub fn user_tokens(&self) -> &[usize] {
        &self.user_tokens
    }

    pub fn patches(&self) -> &Matrix {
        &self.patches
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    /// Copy with different patch contents (same grid shape).
    pub fn with_patches(&self, patches: Matrix) -> Result<Self> {
        if patches.shape() != self.patches.shape() {
            return Err(Error::shape(format!(
                "replacement patches {:?} differ from {:?}",
                patches.shape(),
                self.patches.shape()
            )));
        }
        Self::new(
            self.system_tokens.clone(),
            patches,
            self.grid_cols,
            self.user_tokens.clone(),
        )
    }
}

/// Activations captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    /// `[layer][head]` softmaxed attention, n×n. Future (masked) entries are 0.
    pub attention: Vec<Vec<Matrix>>,
    /// `[layer][head]` scaled pre-softmax scores. Masked entries are 0.
    pub attention_logits: Vec<Vec<Matrix>>,
    /// Residual stream after each block, n×embed_dim.
    pub hidden: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[yes, no]`
    pub logits: [f64; 2],
    pub position_ids: PositionIds,
    pub layout: ModalityLayout,
    pub capture: Option<Capture>,
}

impl ForwardTrace {
    pub fn predicts_yes(&self) -> bool {
        self.logits[0] > self.logits[1]
    }
}

pub const YES: usize = 0;
pub const NO: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    rope: RopeParams,
}

pub(crate) struct EncoderCache {
    a1: Matrix,
    h1: Matrix,
    mixer: Option<AttnCache>,
    /// Projector input.
    pub(crate) features: Matrix,
}

struct LayerCache {
    x_in: Matrix,
    inv1: Vec<f64>,
    attn: AttnCache,
    x_mid: Matrix,
    inv2: Vec<f64>,
    u2: Matrix,
    pre: Matrix,
    act: Matrix,
}

pub(crate) struct Cache {
    enc: EncoderCache,
    positions: PositionIds,
    layers: Vec<LayerCache>,
    x_last: Matrix,
    inv_final: Vec<f64>,
    u_final: Matrix,
}

/// 2-D sinusoidal table: the first half of each row encodes the patch row,
/// the second half the patch column.
pub fn sincos_2d(grid_rows: usize, grid_cols: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let pairs = half / 2;
    let mut m = Matrix::zeros(grid_rows * grid_cols, dim);
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            let row = m.row_mut(r * grid_cols + c);
            for (offset, coord) in [(0, r), (half, c)] {
                for i in 0..pairs {
                    let freq = 10_000f64.powf(-(i as f64) / pairs as f64);
                    let (s, co) = (coord as f64 * freq).sin_cos();
                    row[offset + 2 * i] = s;
                    row[offset + 2 * i + 1] = co;
                }
            }
        }
    }
    m
}

impl Model {
    /// Deterministic initialization from `config.seed`: weights uniform in
    /// `±1/sqrt(embed_dim)`, unit norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.embed_dim as f64).sqrt();
        let params = Params::init(config.shapes(), &mut rng, scale);
        Self::from_parts(config, params)
    }

    /// Reassembles a model, checking that every tensor has the shape the
    /// configuration implies.
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(config.shapes());
        let want = expected.named_tensors();
        let got = params.named_tensors();
        if want.len() != got.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, w), (_, g)) in want.iter().zip(&got) {
            if w.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::shape("parameters must be finite"));
        }
        let rope = make_thetas(config.head_dim, config.rope_base)?;
        Ok(Self {
            config,
            params,
            rope,
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

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    /// Returns a copy of this model that assigns positions with `scheme`.
    /// Parameters are shared as-is, so this is a no-retraining switch.
    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        let mut m = self.clone();
        m.config.scheme = scheme;
        m
    }

    fn check_input(&self, input: &MultimodalInput) -> Result<()> {
        if input.patches.cols() != self.config.patch_dim {
            return Err(Error::shape(format!(
                "patch length {} != patch_dim {}",
                input.patches.cols(),
                self.config.patch_dim
            )));
        }
        let vocab = self.config.text_vocab_size;
        if let Some(t) = input
            .system_tokens
            .iter()
            .chain(&input.user_tokens)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::shape(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    fn attn_spec<'a>(&self, rope: Option<(&'a RopeParams, &'a [usize])>, causal: bool, capture: bool) -> AttnSpec<'a> {
        AttnSpec {
            heads: self.config.num_heads,
            head_dim: self.config.head_dim,
            rope,
            causal,
            capture_logits: capture,
        }
    }

    pub(crate) fn encode_cached(&self, patches: &Matrix, grid_cols: usize) -> (Matrix, EncoderCache) {
        let p = &self.params;
        let j = patches.rows();
        let e = self.config.embed_dim;

        let mut a1 = Matrix::zeros(j, e);
        matmul_acc(patches, &p.patch_w1, &mut a1);
        add_row_bias(&mut a1, p.patch_b1.as_slice());
        let mut h1 = a1.clone();
        h1.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
        let mut f = Matrix::zeros(j, e);
        matmul_acc(&h1, &p.patch_w2, &mut f);
        add_row_bias(&mut f, p.patch_b2.as_slice());

        let (features, mixer) = match &p.mixer {
            Some(mp) => {
                let mut m_in = f;
                m_in.add_assign(&sincos_2d(j / grid_cols, grid_cols, e));
                let spec = self.attn_spec(None, false, false);
                let (delta, cache) = attention_forward(mp, m_in, &spec);
                let mut mixed = cache.input.clone();
                mixed.add_assign(&delta);
                (mixed, Some(cache))
            }
            None => (f, None),
        };

        let mut out = Matrix::zeros(j, e);
        matmul_acc(&features, &p.proj_w, &mut out);
        add_row_bias(&mut out, p.proj_b.as_slice());
        (
            out,
            EncoderCache {
                a1,
                h1,
                mixer,
                features,
            },
        )
    }

    /// Projected image-token embeddings for a raster-ordered patch grid, one
    /// row per patch. With the per-patch encoder row `k` depends only on
    /// patch `k`.
    pub fn encode_image(&self, patches: &Matrix, grid_cols: usize) -> Result<Matrix> {
        if patches.cols() != self.config.patch_dim {
            return Err(Error::shape(format!(
                "patch length {} != patch_dim {}",
                patches.cols(),
                self.config.patch_dim
            )));
        }
        if patches.rows() == 0 || grid_cols == 0 || patches.rows() % grid_cols != 0 {
            return Err(Error::shape("patches do not form a grid"));
        }
        Ok(self.encode_cached(patches, grid_cols).0)
    }

    /// Text embedding `E(token)`.
    pub fn embed_token(&self, token: usize) -> Result<&[f64]> {
        if token >= self.config.text_vocab_size {
            return Err(Error::shape(format!("token {token} outside vocabulary")));
        }
        Ok(self.params.tok_emb.row(token))
    }

    pub(crate) fn run(&self, input: &MultimodalInput, capture: bool) -> Result<([f64; 2], Cache, Option<Capture>)> {
        self.check_input(input)?;
        let p = &self.params;
        let layout = input.layout;
        let n = layout.total();
        let e = self.config.embed_dim;

        let (img, enc) = self.encode_cached(&input.patches, input.grid_cols);
        let mut x = Matrix::zeros(n, e);
        for (r, &t) in input.system_tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(p.tok_emb.row(t));
        }
        for (k, r) in layout.image_range().enumerate() {
            x.row_mut(r).copy_from_slice(img.row(k));
        }
        for (k, r) in layout.user_range().enumerate() {
            x.row_mut(r).copy_from_slice(p.tok_emb.row(input.user_tokens[k]));
        }

        let positions = self.config.scheme.assign(&layout);
        let rope = self.rope();
        let spec = self.attn_spec(Some((rope, positions.as_slice())), true, capture);
        let mut cap = capture.then(|| Capture {
            attention: Vec::new(),
            attention_logits: Vec::new(),
            hidden: Vec::new(),
        });

        let mut caches = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let (u1, inv1) = rmsnorm_forward(&x, lp.attn_norm.as_slice());
            let (attn_out, attn) = attention_forward(&lp.attn, u1, &spec);
            let mut x_mid = x.clone();
            x_mid.add_assign(&attn_out);

            let (u2, inv2) = rmsnorm_forward(&x_mid, lp.mlp_norm.as_slice());
            let mut pre = Matrix::zeros(n, self.config.mlp_dim);
            matmul_acc(&u2, &lp.w_up, &mut pre);
            add_row_bias(&mut pre, lp.b_up.as_slice());
            let mut act = pre.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
            let mut x_out = x_mid.clone();
            matmul_acc(&act, &lp.w_down, &mut x_out);
            add_row_bias(&mut x_out, lp.b_down.as_slice());

            if let Some(c) = cap.as_mut() {
                c.attention.push(attn.probs.clone());
                c.attention_logits.push(attn.logits.clone().unwrap_or_default());
                c.hidden.push(x_out.clone());
            }
            caches.push(LayerCache {
                x_in: x,
                inv1,
                attn,
                x_mid,
                inv2,
                u2,
                pre,
                act,
            });
            x = x_out;
        }

        let x_last = Matrix::new(1, e, x.row(n - 1).to_vec())?;
        let (u_final, inv_final) = rmsnorm_forward(&x_last, p.final_norm.as_slice());
        let mut logits = p.head_b.as_slice().to_vec();
        for (c, &u) in u_final.as_slice().iter().enumerate() {
            logits[YES] += u * p.head_w.get(c, YES);
            logits[NO] += u * p.head_w.get(c, NO);
        }
        Ok((
            [logits[YES], logits[NO]],
            Cache {
                enc,
                positions,
                layers: caches,
                x_last,
                inv_final,
                u_final,
            },
            cap,
        ))
    }

    /// Runs the model. With `capture`, per-layer attention (weights and
    /// pre-softmax scores) and hidden states are recorded.
    pub fn forward(&self, input: &MultimodalInput, capture: bool) -> Result<ForwardTrace> {
        let (logits, cache, capture) = self.run(input, capture)?;
        Ok(ForwardTrace {
            logits,
            position_ids: cache.positions,
            layout: input.layout,
            capture,
        })
    }

    pub fn logits(&self, input: &MultimodalInput) -> Result<[f64; 2]> {
        Ok(self.run(input, false)?.0)
    }

    /// Reverse pass for one example: accumulates `d loss / d params` into
    /// `grads`, given the gradient of the loss with respect to the logits.
    pub(crate) fn backward(
        &self,
        input: &MultimodalInput,
        cache: &Cache,
        d_logits: [f64; 2],
        grads: &mut Params,
    ) {
        let p = &self.params;
        let layout = input.layout;
        let n = layout.total();
        let e = self.config.embed_dim;

        // head
        let mut d_u = Matrix::zeros(1, e);
        for c in 0..e {
            let u = cache.u_final.as_slice()[c];
            for (k, &dl) in d_logits.iter().enumerate() {
                grads.head_w.as_mut_slice()[c * 2 + k] += u * dl;
                d_u.as_mut_slice()[c] += p.head_w.get(c, k) * dl;
            }
        }
        for (k, &dl) in d_logits.iter().enumerate() {
            grads.head_b.as_mut_slice()[k] += dl;
        }
        let d_last = rmsnorm_backward(
            &cache.x_last,
            p.final_norm.as_slice(),
            &cache.inv_final,
            &d_u,
            grads.final_norm.as_mut_slice(),
        );
        let mut dx = Matrix::zeros(n, e);
        dx.row_mut(n - 1).copy_from_slice(d_last.as_slice());

        let spec = self.attn_spec(Some((self.rope(), cache.positions.as_slice())), true, false);
        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let lg = &mut grads.layers[l];

            // mlp branch: x_out = x_mid + silu(u2 W_up + b_up) W_down + b_down
            t_matmul_acc(&lc.act, &dx, &mut lg.w_down);
            sum_rows_acc(&dx, lg.b_down.as_mut_slice());
            let mut d_pre = Matrix::zeros(n, self.config.mlp_dim);
            matmul_t_acc(&dx, &lp.w_down, &mut d_pre);
            for (g, &a) in d_pre.as_mut_slice().iter_mut().zip(lc.pre.as_slice()) {
                *g *= silu_grad(a);
            }
            t_matmul_acc(&lc.u2, &d_pre, &mut lg.w_up);
            sum_rows_acc(&d_pre, lg.b_up.as_mut_slice());
            let mut d_u2 = Matrix::zeros(n, e);
            matmul_t_acc(&d_pre, &lp.w_up, &mut d_u2);
            let mut d_mid = rmsnorm_backward(
                &lc.x_mid,
                lp.mlp_norm.as_slice(),
                &lc.inv2,
                &d_u2,
                lg.mlp_norm.as_mut_slice(),
            );
            d_mid.add_assign(&dx);

            // attention branch: x_mid = x_in + attn(rmsnorm(x_in))
            let d_u1 = attention_backward(&lp.attn, &lc.attn, &d_mid, &spec, &mut lg.attn);
            let mut d_in = rmsnorm_backward(
                &lc.x_in,
                lp.attn_norm.as_slice(),
                &lc.inv1,
                &d_u1,
                lg.attn_norm.as_mut_slice(),
            );
            d_in.add_assign(&d_mid);
            dx = d_in;
        }

        // embeddings
        for (r, &t) in input.system_tokens.iter().enumerate() {
            for (g, d) in grads.tok_emb.row_mut(t).iter_mut().zip(dx.row(r)) {
                *g += d;
            }
        }
        for (k, r) in layout.user_range().enumerate() {
            let t = input.user_tokens[k];
            for (g, d) in grads.tok_emb.row_mut(t).iter_mut().zip(dx.row(r)) {
                *g += d;
            }
        }
        let j = layout.image_len();
        let mut d_img = Matrix::zeros(j, e);
        for (k, r) in layout.image_range().enumerate() {
            d_img.row_mut(k).copy_from_slice(dx.row(r));
        }
        self.encoder_backward(&input.patches, &cache.enc, &d_img, grads);
    }

    fn encoder_backward(&self, patches: &Matrix, enc: &EncoderCache, d_img: &Matrix, grads: &mut Params) {
        let p = &self.params;
        let (j, e) = d_img.shape();
        t_matmul_acc(&enc.features, d_img, &mut grads.proj_w);
        sum_rows_acc(d_img, grads.proj_b.as_mut_slice());
        let mut d_feat = Matrix::zeros(j, e);
        matmul_t_acc(d_img, &p.proj_w, &mut d_feat);

        let d_f = match (&p.mixer, &enc.mixer) {
            (Some(mp), Some(mc)) => {
                let spec = self.attn_spec(None, false, false);
                let mg = grads.mixer.as_mut().expect("gradient layout mirrors parameters");
                let mut d_in = attention_backward(mp, mc, &d_feat, &spec, mg);
                d_in.add_assign(&d_feat);
                d_in
            }
            _ => d_feat,
        };

        t_matmul_acc(&enc.h1, &d_f, &mut grads.patch_w2);
        sum_rows_acc(&d_f, grads.patch_b2.as_mut_slice());
        let mut d_a1 = Matrix::zeros(j, e);
        matmul_t_acc(&d_f, &p.patch_w2, &mut d_a1);
        for (g, &a) in d_a1.as_mut_slice().iter_mut().zip(enc.a1.as_slice()) {
            *g *= silu_grad(a);
        }
        t_matmul_acc(patches, &d_a1, &mut grads.patch_w1);
        sum_rows_acc(&d_a1, grads.patch_b1.as_mut_slice());
    }
}
