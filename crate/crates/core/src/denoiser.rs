//! The noise-prediction network ε_θ(z_t, t, y).
//!
//! A three-level convolutional encoder/decoder (widths 32/64/128 by
//! default) over channel-first latents, with one self-attention and one
//! cross-attention block at each of the two coarsest levels and a
//! sinusoidal timestep embedding projected into every residual block.
//! Latents arrive in the codec's height×width×channel layout and are
//! permuted internally.
//!
//! The instance carries an [`AttentionMode`] that every attention block
//! honors, so one `set_attention_mode` call switches a whole sampling run
//! between normal computation, trace capture, and feature injection.


use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::nn::attention::{AttentionKind, AttentionLayer, AttentionMode, AttnLayerCache};
use crate::nn::ops::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv2d,
    ConvCache, Linear,
};
use crate::nn::time_embed::sinusoidal_embedding;
use crate::nn::GradStore;
use crate::schedule::ScheduleSpec;
use crate::text::{encode_prompt_ids, EncodedText, TextEncoder, Vocabulary};

/// Network shape and initialization parameters, persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub widths: [usize; 3],
    pub heads: usize,
    pub d_cond: usize,
    pub max_len: usize,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 16,
            widths: [32, 64, 128],
            heads: 1,
            d_cond: crate::text::DEFAULT_D_COND,
            max_len: crate::text::DEFAULT_MAX_LEN,
            time_dim: 64,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_side % 4 != 0 || self.latent_side == 0 {
            return Err(Error::Config(format!(
                "latent_side must be a positive multiple of 4 (two pooling levels), got {}",
                self.latent_side
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        if self.heads == 0 || self.widths.iter().any(|w| w % self.heads != 0) {
            return Err(Error::Config(format!(
                "head count {} must divide every level width {:?}",
                self.heads, self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.latent_channels == 0 || self.d_cond == 0 {
            return Err(Error::Config("widths, channels, and d_cond must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional residual block: `conv2(silu(conv1(x) + proj(temb))) + skip(x)`.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    tproj: Linear,
}

struct ResCache {
    conv1_cache: ConvCache,
    pre_act: Array3<f64>,
    conv2_cache: ConvCache,
    skip_cache: Option<ConvCache>,
}

impl ResBlock {
    fn new(name: &str, c_in: usize, c_out: usize, time_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let skip = (c_in != c_out).then(|| {
            Conv2d::new(&format!("{name}.skip"), c_in, c_out, 1, (1.0 / c_in as f64).sqrt(), rng)
        });
        Self {
            conv1: Conv2d::kaiming(&format!("{name}.conv1"), c_in, c_out, 3, rng),
            conv2: Conv2d::kaiming(&format!("{name}.conv2"), c_out, c_out, 3, rng),
            skip,
            tproj: Linear::new(
                &format!("{name}.tproj"),
                time_dim,
                c_out,
                false,
                (1.0 / time_dim as f64).sqrt(),
                rng,
            ),
        }
    }

    fn forward(&self, x: &Array3<f64>, temb: &Array2<f64>) -> (Array3<f64>, ResCache) {
        let (mut pre_act, conv1_cache) = self.conv1.forward(x);
        let proj = self.tproj.forward(temb);
        for (ch, mut plane) in pre_act.outer_iter_mut().enumerate() {
            plane += proj[(0, ch)];
        }
        let act = silu(&pre_act);
        let (y, conv2_cache) = self.conv2.forward(&act);
        let (skip_out, skip_cache) = match &self.skip {
            Some(sk) => {
                let (s, c) = sk.forward(x);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        (y + skip_out, ResCache { conv1_cache, pre_act, conv2_cache, skip_cache })
    }

    fn backward(
        &self,
        cache: &ResCache,
        temb: &Array2<f64>,
        dy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let d_act = self.conv2.backward(&cache.conv2_cache, dy, grads);
        let d_pre = silu_backward(&cache.pre_act, &d_act);
        let mut d_proj = Array2::zeros((1, d_pre.dim().0));
        for (ch, plane) in d_pre.outer_iter().enumerate() {
            d_proj[(0, ch)] = plane.sum();
        }
        self.tproj.backward(temb, &d_proj, grads);
        let mut dx = self.conv1.backward(&cache.conv1_cache, &d_pre, grads);
        match (&self.skip, &cache.skip_cache) {
            (Some(sk), Some(c)) => dx += &sk.backward(c, dy, grads),
            _ => dx += dy,
        }
        dx
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(sk) = &self.skip {
            sk.visit_params(f);
        }
        self.tproj.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.conv1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        if let Some(sk) = &mut self.skip {
            sk.visit_params_mut(f);
        }
        self.tproj.visit_params_mut(f);
    }
}

/// (C,H,W) feature map to (H·W, C) token rows.
fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut t = Array2::zeros((h * w, c));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                t[(i * w + j, ch)] = x[(ch, i, j)];
            }
        }
    }
    t
}

fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = t.ncols();
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                x[(ch, i, j)] = t[(i * w + j, ch)];
            }
        }
    }
    x
}

struct AttnStage {
    cache: AttnLayerCache,
    h: usize,
    w: usize,
}

/// Forward activations retained for the backward pass.
pub struct DenoiserCache {
    temb: Array2<f64>,
    stem_cache: ConvCache,
    enc0: ResCache,
    enc1: ResCache,
    enc1_self: AttnStage,
    enc1_cross: AttnStage,
    mid: ResCache,
    mid_self: AttnStage,
    mid_cross: AttnStage,
    mid2: ResCache,
    dec1: ResCache,
    dec0: ResCache,
    head_cache: ConvCache,
    cond_rows: usize,
}

/// Checkpoint metadata stored next to the weight arrays.
#[derive(serde::Serialize, serde::Deserialize)]
struct DenoiserMeta {
    kind: String,
    config: DenoiserConfig,
    vocab: Vocabulary,
    schedule: ScheduleSpec,
    phase: String,
    merged_lora: bool,
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub schedule_spec: ScheduleSpec,
    /// Training stage this instance came from ("fresh", "base", "phase2",
    /// "phase3"), carried through checkpoints for provenance.
    pub phase: String,
    /// Set once LoRA deltas have been folded into the base weights.
    pub merged_lora: bool,
    pub adapters: AdapterSet,
    mode: AttentionMode,
    stem: Conv2d,
    enc0: ResBlock,
    enc1: ResBlock,
    enc1_self: AttentionLayer,
    enc1_cross: AttentionLayer,
    mid: ResBlock,
    mid_self: AttentionLayer,
    mid_cross: AttentionLayer,
    mid2: ResBlock,
    dec1: ResBlock,
    dec0: ResBlock,
    head: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, vocab: Vocabulary, schedule_spec: ScheduleSpec) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [w0, w1, w2] = config.widths;
        let c = config.latent_channels;
        let td = config.time_dim;
        let text = TextEncoder::new(vocab.len(), config.d_cond, config.max_len, &mut rng);
        Ok(Self {
            stem: Conv2d::kaiming("stem", c, w0, 3, &mut rng),
            enc0: ResBlock::new("enc0", w0, w0, td, &mut rng),
            enc1: ResBlock::new("enc1", w0, w1, td, &mut rng),
            enc1_self: AttentionLayer::new(
                "enc1.self",
                AttentionKind::SelfAttn,
                w1,
                w1,
                w1,
                config.heads,
                &mut rng,
            ),
            enc1_cross: AttentionLayer::new(
                "enc1.cross",
                AttentionKind::Cross,
                w1,
                config.d_cond,
                w1,
                config.heads,
                &mut rng,
            ),
            mid: ResBlock::new("mid", w1, w2, td, &mut rng),
            mid_self: AttentionLayer::new(
                "mid.self",
                AttentionKind::SelfAttn,
                w2,
                w2,
                w2,
                config.heads,
                &mut rng,
            ),
            mid_cross: AttentionLayer::new(
                "mid.cross",
                AttentionKind::Cross,
                w2,
                config.d_cond,
                w2,
                config.heads,
                &mut rng,
            ),
            mid2: ResBlock::new("mid2", w2, w2, td, &mut rng),
            dec1: ResBlock::new("dec1", w2 + w1, w1, td, &mut rng),
            dec0: ResBlock::new("dec0", w1 + w0, w0, td, &mut rng),
            // Zero-initialized head: an untrained network predicts zero
            // noise, which keeps early training steps well-scaled.
            head: Conv2d::zeroed("head", w0, c, 3),
            text,
            config,
            vocab,
            schedule_spec,
            phase: "fresh".to_string(),
            merged_lora: false,
            adapters: AdapterSet::new(),
            mode: AttentionMode::Normal,
        })
    }

    pub fn attention_layer_ids(&self) -> Vec<String> {
        ["enc1.self", "enc1.cross", "mid.self", "mid.cross"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn self_attention_layer_ids(&self) -> Vec<String> {
        vec!["enc1.self".to_string(), "mid.self".to_string()]
    }

    fn attention_layer(&self, id: &str) -> Option<&AttentionLayer> {
        match id {
            "enc1.self" => Some(&self.enc1_self),
            "enc1.cross" => Some(&self.enc1_cross),
            "mid.self" => Some(&self.mid_self),
            "mid.cross" => Some(&self.mid_cross),
            _ => None,
        }
    }

    pub fn attention_mode(&self) -> &AttentionMode {
        &self.mode
    }

    /// Install a mode for subsequent `predict_noise` calls and return the
    /// previous one (which carries the finished trace after a capture run).
    pub fn set_attention_mode(&mut self, mode: AttentionMode) -> Result<AttentionMode> {
        match &mode {
            AttentionMode::Capture { target_layers: Some(layers), .. } => {
                for id in layers {
                    if self.attention_layer(id).is_none() {
                        return Err(Error::Config(format!("unknown attention layer '{id}'")));
                    }
                }
            }
            AttentionMode::Inject { gamma, target_layers, content, style, .. } => {
                if !(0.0..=1.0).contains(gamma) || !gamma.is_finite() {
                    return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
                }
                if target_layers.is_empty() {
                    return Err(Error::Config("inject mode needs at least one target layer".into()));
                }
                for id in target_layers {
                    if self.attention_layer(id).is_none() {
                        return Err(Error::Config(format!("unknown attention layer '{id}'")));
                    }
                }
                if content.is_empty() || style.is_empty() {
                    return Err(Error::Config(
                        "inject mode requires non-empty content and style traces".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(std::mem::replace(&mut self.mode, mode))
    }

    /// Tokenize and embed a prompt; empty text maps to the null embedding.
    pub fn encode_prompt(&self, prompt: &str) -> Result<EncodedText> {
        let ids = encode_prompt_ids(prompt, &self.vocab)?;
        self.text.encode(&ids)
    }

    fn validate_inputs(&self, z_t: &Array3<f64>, t: usize, cond: &Array2<f64>) -> Result<()> {
        let side = self.config.latent_side;
        let expected = (side, side, self.config.latent_channels);
        if z_t.dim() != expected {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match configured {:?}",
                z_t.dim(),
                expected
            )));
        }
        if t == 0 {
            return Err(Error::Param("timestep must be >= 1".into()));
        }
        if cond.ncols() != self.config.d_cond {
            return Err(Error::Shape(format!(
                "conditioning width {} does not match d_cond {}",
                cond.ncols(),
                self.config.d_cond
            )));
        }
        if cond.nrows() == 0 {
            return Err(Error::Shape("conditioning sequence must be non-empty".into()));
        }
        Ok(())
    }

    /// Predict the noise component of `z_t` (height×width×channel layout).
    /// Deterministic given parameters, inputs, and the attention mode.
    pub fn predict_noise(
        &mut self,
        z_t: &Array3<f64>,
        t: usize,
        cond: &Array2<f64>,
    ) -> Result<Array3<f64>> {
        self.validate_inputs(z_t, t, cond)?;
        let mut mode = std::mem::take(&mut self.mode);
        let result = self.forward_inner(z_t, t, cond, &mut mode);
        self.mode = mode;
        Ok(result?.0)
    }

    /// Normal-mode forward that retains activations for [`Self::backward`].
    pub fn forward_train(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        cond: &Array2<f64>,
    ) -> Result<(Array3<f64>, DenoiserCache)> {
        self.validate_inputs(z_t, t, cond)?;
        let mut mode = AttentionMode::Normal;
        self.forward_inner(z_t, t, cond, &mut mode)
    }

    fn attn_stage(
        &self,
        layer: &AttentionLayer,
        x: &Array3<f64>,
        psi: Option<&Array2<f64>>,
        t: usize,
        mode: &mut AttentionMode,
    ) -> Result<(Array3<f64>, AttnStage)> {
        let (_, h, w) = x.dim();
        let tokens = to_tokens(x);
        let psi_tokens = psi.unwrap_or(&tokens);
        let (out, cache) = layer.forward(&tokens, psi_tokens, t, mode, &self.adapters)?;
        Ok((from_tokens(&out, h, w), AttnStage { cache, h, w }))
    }

    fn forward_inner(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        cond: &Array2<f64>,
        mode: &mut AttentionMode,
    ) -> Result<(Array3<f64>, DenoiserCache)> {
        let temb_vec: Array1<f64> = sinusoidal_embedding(t, self.config.time_dim);
        let temb = temb_vec.insert_axis(Axis(0));

        let z = z_t.view().permuted_axes([2, 0, 1]).to_owned();
        let (x0, stem_cache) = self.stem.forward(&z);
        let (h0, enc0) = self.enc0.forward(&x0, &temb);
        let p1 = avg_pool2(&h0);
        let (h1, enc1) = self.enc1.forward(&p1, &temb);
        let (h1s, enc1_self) = self.attn_stage(&self.enc1_self, &h1, None, t, mode)?;
        let (h1c, enc1_cross) = self.attn_stage(&self.enc1_cross, &h1s, Some(cond), t, mode)?;
        let p2 = avg_pool2(&h1c);
        let (h2, mid) = self.mid.forward(&p2, &temb);
        let (h2s, mid_self) = self.attn_stage(&self.mid_self, &h2, None, t, mode)?;
        let (h2c, mid_cross) = self.attn_stage(&self.mid_cross, &h2s, Some(cond), t, mode)?;
        let (h3, mid2) = self.mid2.forward(&h2c, &temb);
        let u1 = upsample2(&h3);
        let cat1 = concatenate(Axis(0), &[u1.view(), h1c.view()]).expect("widths agree");
        let (d1, dec1) = self.dec1.forward(&cat1, &temb);
        let u0 = upsample2(&d1);
        let cat0 = concatenate(Axis(0), &[u0.view(), h0.view()]).expect("widths agree");
        let (d0, dec0) = self.dec0.forward(&cat0, &temb);
        let (eps, head_cache) = self.head.forward(&d0);

        Ok((
            eps.view().permuted_axes([1, 2, 0]).to_owned(),
            DenoiserCache {
                temb,
                stem_cache,
                enc0,
                enc1,
                enc1_self,
                enc1_cross,
                mid,
                mid_self,
                mid_cross,
                mid2,
                dec1,
                dec0,
                head_cache,
                cond_rows: cond.nrows(),
            },
        ))
    }

    /// Accumulate parameter gradients for a training forward. `d_eps` is
    /// the loss gradient in the latent's height×width×channel layout; the
    /// return value is the gradient with respect to the conditioning rows.
    pub fn backward(
        &self,
        cache: &DenoiserCache,
        d_eps: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let temb = &cache.temb;
        let d_eps_chw = d_eps.view().permuted_axes([2, 0, 1]).to_owned();
        let mut d_cond = Array2::zeros((cache.cond_rows, self.config.d_cond));

        let d_d0 = self.head.backward(&cache.head_cache, &d_eps_chw, grads);
        let d_cat0 = self.dec0.backward(&cache.dec0, temb, &d_d0, grads);
        let w1 = self.config.widths[1];
        let (d_u0, d_h0_skip) = d_cat0.view().split_at(Axis(0), w1);
        let d_d1 = upsample2_backward(&d_u0.to_owned());
        let d_cat1 = self.dec1.backward(&cache.dec1, temb, &d_d1, grads);
        let w2 = self.config.widths[2];
        let (d_u1, d_h1c_skip) = d_cat1.view().split_at(Axis(0), w2);
        let d_h3 = upsample2_backward(&d_u1.to_owned());
        let d_h2c = self.mid2.backward(&cache.mid2, temb, &d_h3, grads);

        let d_h2s = self.attn_backward(
            &self.mid_cross,
            &cache.mid_cross,
            &d_h2c,
            Some(&mut d_cond),
            grads,
        );
        let d_h2 = self.attn_backward(&self.mid_self, &cache.mid_self, &d_h2s, None, grads);
        let d_p2 = self.mid.backward(&cache.mid, temb, &d_h2, grads);
        let s2 = self.config.latent_side / 2;
        let mut d_h1c = avg_pool2_backward(&d_p2, s2, s2);
        d_h1c += &d_h1c_skip;

        let d_h1s = self.attn_backward(
            &self.enc1_cross,
            &cache.enc1_cross,
            &d_h1c,
            Some(&mut d_cond),
            grads,
        );
        let d_h1 = self.attn_backward(&self.enc1_self, &cache.enc1_self, &d_h1s, None, grads);
        let d_p1 = self.enc1.backward(&cache.enc1, temb, &d_h1, grads);
        let s1 = self.config.latent_side;
        let mut d_h0 = avg_pool2_backward(&d_p1, s1, s1);
        d_h0 += &d_h0_skip;

        let d_x0 = self.enc0.backward(&cache.enc0, temb, &d_h0, grads);
        self.stem.backward(&cache.stem_cache, &d_x0, grads);
        d_cond
    }

    fn attn_backward(
        &self,
        layer: &AttentionLayer,
        stage: &AttnStage,
        dy: &Array3<f64>,
        d_cond: Option<&mut Array2<f64>>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let dy_tokens = to_tokens(dy);
        let (dx, dpsi) = layer.backward(&stage.cache, &dy_tokens, &self.adapters, grads);
        match d_cond {
            // Cross-attention: ψ is the conditioning sequence.
            Some(dc) => {
                *dc += &dpsi;
                from_tokens(&dx, stage.h, stage.w)
            }
            // Self-attention: ψ was the same tokens, so both paths add up.
            None => from_tokens(&(dx + dpsi), stage.h, stage.w),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.stem.visit_params(f);
        self.enc0.visit_params(f);
        self.enc1.visit_params(f);
        self.enc1_self.visit_params(f);
        self.enc1_cross.visit_params(f);
        self.mid.visit_params(f);
        self.mid_self.visit_params(f);
        self.mid_cross.visit_params(f);
        self.mid2.visit_params(f);
        self.dec1.visit_params(f);
        self.dec0.visit_params(f);
        self.head.visit_params(f);
        self.text.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.stem.visit_params_mut(f);
        self.enc0.visit_params_mut(f);
        self.enc1.visit_params_mut(f);
        self.enc1_self.visit_params_mut(f);
        self.enc1_cross.visit_params_mut(f);
        self.mid.visit_params_mut(f);
        self.mid_self.visit_params_mut(f);
        self.mid_cross.visit_params_mut(f);
        self.mid2.visit_params_mut(f);
        self.dec1.visit_params_mut(f);
        self.dec0.visit_params_mut(f);
        self.head.visit_params_mut(f);
        self.text.visit_params_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }

    /// Hex SHA-256 over every base parameter (name then values, in visit
    /// order). Adapters are excluded, so this hash certifies whether the
    /// frozen base changed during adapter-only training.
    pub fn params_hash(&self) -> String {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        self.visit_params(&mut |name, a| {
            hasher.update(name.as_bytes());
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    fn attention_layer_mut(&mut self, id: &str) -> Option<&mut AttentionLayer> {
        match id {
            "enc1.self" => Some(&mut self.enc1_self),
            "enc1.cross" => Some(&mut self.enc1_cross),
            "mid.self" => Some(&mut self.mid_self),
            "mid.cross" => Some(&mut self.mid_cross),
            _ => None,
        }
    }

    /// Weight shape (input width, output width) of one attention
    /// projection, used to size adapters for it.
    pub fn projection_shape(&self, layer_id: &str, proj: crate::lora::ProjKind) -> Option<(usize, usize)> {
        let layer = self.attention_layer(layer_id)?;
        let lin = match proj {
            crate::lora::ProjKind::Q => &layer.wq,
            crate::lora::ProjKind::K => &layer.wk,
            crate::lora::ProjKind::V => &layer.wv,
        };
        Some((lin.w.shape()[0], lin.w.shape()[1]))
    }

    /// Install an adapter set after checking every target against the
    /// network: the layer must exist and A/B must match that projection's
    /// weight shape.
    pub fn attach_adapters(&mut self, set: AdapterSet) -> Result<()> {
        for ad in set.iter() {
            let (layer_id, proj) = &ad.target;
            let layer = self.attention_layer(layer_id).ok_or_else(|| {
                Error::Config(format!("adapter targets unknown attention layer '{layer_id}'"))
            })?;
            let lin = match proj {
                crate::lora::ProjKind::Q => &layer.wq,
                crate::lora::ProjKind::K => &layer.wk,
                crate::lora::ProjKind::V => &layer.wv,
            };
            let (m, n) = (ad.a.nrows(), ad.b.ncols());
            if lin.w.shape() != [m, n] {
                return Err(Error::Config(format!(
                    "adapter for '{layer_id}.{proj}' implies weight shape {m}x{n}, layer has {:?}",
                    lin.w.shape()
                )));
            }
        }
        self.adapters = set;
        Ok(())
    }

    /// Fold every attached adapter into its targeted projection weight
    /// (`W += α·A·B`), clear the adapter set, and mark the model merged.
    /// Returns how many adapters were folded. Merging twice would apply
    /// the deltas twice, so a second call on a merged model is refused;
    /// an empty adapter set leaves the model untouched and mergeable.
    pub fn merge_adapters(&mut self) -> Result<usize> {
        if self.adapters.is_empty() {
            return Ok(0);
        }
        if self.merged_lora {
            return Err(Error::Config(
                "model already contains merged adapter weights; refusing to merge again".into(),
            ));
        }
        // Validate every target before touching any weight so a bad
        // adapter cannot leave the model half-merged.
        for ad in self.adapters.iter() {
            let (layer_id, proj) = &ad.target;
            let layer = self.attention_layer(layer_id).ok_or_else(|| {
                Error::Config(format!("adapter targets unknown attention layer '{layer_id}'"))
            })?;
            let lin = match proj {
                crate::lora::ProjKind::Q => &layer.wq,
                crate::lora::ProjKind::K => &layer.wk,
                crate::lora::ProjKind::V => &layer.wv,
            };
            if lin.w.shape() != [ad.a.nrows(), ad.b.ncols()] {
                return Err(Error::Config(format!(
                    "adapter for '{layer_id}.{proj}' implies weight shape {}x{}, layer has {:?}",
                    ad.a.nrows(),
                    ad.b.ncols(),
                    lin.w.shape()
                )));
            }
        }
        let adapters = std::mem::take(&mut self.adapters);
        for ad in adapters.iter() {
            let (layer_id, proj) = &ad.target;
            let layer = self.attention_layer_mut(layer_id).expect("target validated above");
            let lin = match proj {
                crate::lora::ProjKind::Q => &mut layer.wq,
                crate::lora::ProjKind::K => &mut layer.wk,
                crate::lora::ProjKind::V => &mut layer.wv,
            };
            lin.w += &(ad.delta_weight() * ad.alpha).into_dyn();
        }
        self.merged_lora = true;
        Ok(adapters.len())
    }

    /// Serialize config, vocabulary, and all parameters. Reload is
    /// bit-exact.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let meta = DenoiserMeta {
            kind: "denoiser".to_string(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schedule: self.schedule_spec,
            phase: self.phase.clone(),
            merged_lora: self.merged_lora,
        };
        let mut arrays = Vec::new();
        self.visit_params(&mut |name, a| arrays.push((name.to_string(), a.clone())));
        checkpoint::save_container(path, &serde_json::to_value(&meta)?, &arrays)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let (meta_value, mut arrays) = checkpoint::load_container(path)?;
        let meta: DenoiserMeta = serde_json::from_value(meta_value)?;
        if meta.kind != "denoiser" {
            return Err(Error::Format(format!(
                "expected a denoiser checkpoint, found kind '{}'",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.config, meta.vocab, meta.schedule)?;
        model.phase = meta.phase;
        model.merged_lora = meta.merged_lora;
        let mut missing = Vec::new();
        model.visit_params_mut(&mut |name, param| {
            match arrays.remove(name) {
                Some(loaded) if loaded.shape() == param.shape() => *param = loaded,
                Some(loaded) => missing.push(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    loaded.shape(),
                    param.shape()
                )),
                None => missing.push(format!("'{name}' absent")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint arrays do not match: {}", missing.join("; "))));
        }
        if !arrays.is_empty() {
            let extra: Vec<String> = arrays.keys().cloned().collect();
            return Err(Error::Format(format!("checkpoint has unknown arrays: {}", extra.join(", "))));
        }
        Ok(model)
    }

    /// Relative-error comparison of analytic gradients against central
    /// finite differences for `n_params` randomly chosen parameters.
    /// Returns the worst relative error observed.
    pub fn gradient_check(&mut self, n_params: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.config.latent_side;
        let ch = self.config.latent_channels;
        let z = crate::nn::gaussian(&[side, side, ch], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("shape is 3d");
        let loss_w = crate::nn::gaussian(&[side, side, ch], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("shape is 3d");
        let cond_ids = vec![crate::text::NULL_ID, crate::text::UNK_ID];
        let cond = self.text.encode(&cond_ids)?.embedding;
        let t = 3;

        let (_, cache) = self.forward_train(&z, t, &cond)?;
        let mut grads = GradStore::new();
        let d_cond = self.backward(&cache, &loss_w, &mut grads);
        self.text.backward(&cond_ids, &d_cond, &mut grads);

        let mut names = Vec::new();
        self.visit_params(&mut |name, a| names.push((name.to_string(), a.len())));
        let mut worst: f64 = 0.0;
        let h = 1e-3;
        for _ in 0..n_params {
            let (name, len) = &names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..*len);
            let analytic = grads
                .get(name)
                .map(|g| g.as_slice().expect("standard layout")[idx])
                .unwrap_or(0.0);
            let mut eval = |delta: f64| -> Result<f64> {
                self.visit_params_mut(&mut |n, a| {
                    if n == name {
                        a.as_slice_mut().expect("standard layout")[idx] += delta;
                    }
                });
                let ids = vec![crate::text::NULL_ID, crate::text::UNK_ID];
                let c = self.text.encode(&ids)?.embedding;
                let (eps, _) = self.forward_train(&z, t, &c)?;
                self.visit_params_mut(&mut |n, a| {
                    if n == name {
                        a.as_slice_mut().expect("standard layout")[idx] -= delta;
                    }
                });
                Ok((&eps * &loss_w).sum())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        Ok(worst)
    }
}
