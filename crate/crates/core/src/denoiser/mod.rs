//! The `x_0`-prediction network: a residual encoder-decoder that re-injects
//! pooled input features at every encoder level, with multi-head
//! self-attention and the timestep embedding at the bottleneck.

pub(crate) mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use serde::{Deserialize, Serialize};

use crate::diffusion::X0Predictor;
use crate::error::{ensure, Error, Result};
use crate::grid::{CategoricalGrid, ConditionStack};
use crate::nn::{
    avgpool2, avgpool2_backward, pixel_shuffle, pixel_unshuffle, silu, silu_backward, upsample2,
    upsample2_backward, Attention, AttentionCache, Conv2d, Float, Layout, LayoutBuilder, Linear,
    LayerNorm, LayerNormCache, ResBlock, ResBlockCache, Tensor,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of encoder levels; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub attention_heads: usize,
    pub attention_layers: usize,
    pub layer_repetition: usize,
    pub dropout: f64,
    pub n_categories: usize,
    pub condition_channels: usize,
    pub timestep_embed_dim: usize,
    /// Diffusion length `T` the embedding is defined over.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            attention_heads: 8,
            attention_layers: 4,
            layer_repetition: 2,
            dropout: 0.01,
            n_categories: 8,
            condition_channels: 2,
            timestep_embed_dim: 64,
            timesteps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn bottleneck_width(&self) -> usize {
        self.level_width(self.depth.saturating_sub(1))
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn input_channels(&self) -> usize {
        self.condition_channels + self.n_categories
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels >= 1, InvalidArgument, "base_channels must be at least 1");
        ensure!(
            (1..=8).contains(&self.depth),
            InvalidArgument,
            "depth must be in 1..=8, got {}",
            self.depth
        );
        ensure!(self.n_categories >= 2, InvalidArgument, "need at least 2 categories");
        ensure!(self.layer_repetition >= 1, InvalidArgument, "layer_repetition must be at least 1");
        ensure!(self.timesteps >= 1, InvalidArgument, "timesteps must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            InvalidArgument,
            "dropout must be in [0, 1), got {}",
            self.dropout
        );
        ensure!(
            self.timestep_embed_dim >= 2 && self.timestep_embed_dim % 2 == 0,
            InvalidArgument,
            "timestep_embed_dim must be even and positive, got {}",
            self.timestep_embed_dim
        );
        let width = self.bottleneck_width();
        ensure!(
            self.attention_layers == 0
                || (self.attention_heads >= 1 && width % self.attention_heads == 0),
            InvalidArgument,
            "{} attention heads do not divide the bottleneck width {}",
            self.attention_heads,
            width
        );
        Ok(())
    }
}

/// Sinusoidal embedding of `t` in `1..=total`, computed at `t - 1` so the
/// first step sits at phase zero. Entries come in `(sin, cos)` pairs with
/// frequencies `10000^(-2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize, total: usize) -> Result<Vec<f64>> {
    ensure!(dim >= 2 && dim % 2 == 0, InvalidArgument, "embedding dim must be even, got {dim}");
    ensure!(
        (1..=total).contains(&t),
        InvalidArgument,
        "timestep {t} outside 1..={total}"
    );
    Ok(sinusoid((t - 1) as f64, dim))
}

fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    out
}

#[derive(Debug, Clone)]
struct Level {
    /// Absent at the first level, which starts from the stem.
    down: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Network {
    stem: Conv2d,
    levels: Vec<Level>,
    time_in: Linear,
    time_out: Linear,
    attention: Vec<Attention>,
    /// Decoder stages, applied from the deepest skip to the shallowest.
    decoder: Vec<Vec<ResBlock>>,
    head_norm: LayerNorm,
    head: Conv2d,
}

impl Network {
    fn build(cfg: &DenoiserConfig, lb: &mut LayoutBuilder) -> Self {
        let cin4 = 4 * cfg.input_channels();
        let b = cfg.base_channels;
        let stem = Conv2d::new(lb, "stem", cin4, b, 3);
        let mut levels = Vec::new();
        for l in 0..cfg.depth {
            lb.push_scope(format!("enc{l}"));
            let width = cfg.level_width(l);
            let down = (l > 0).then(|| Conv2d::new(lb, "down", cfg.level_width(l - 1) + cin4, width, 3));
            let blocks = (0..cfg.layer_repetition)
                .map(|r| ResBlock::new(lb, &format!("res{r}"), width, width))
                .collect();
            lb.pop_scope();
            levels.push(Level { down, blocks });
        }
        let bw = cfg.bottleneck_width();
        let time_in = Linear::new(lb, "time_in", cfg.timestep_embed_dim, bw, 1);
        let time_out = Linear::new(lb, "time_out", bw, bw, 1);
        let attention = (0..cfg.attention_layers)
            .map(|i| Attention::new(lb, &format!("attn{i}"), bw, cfg.attention_heads, cfg.dropout))
            .collect();
        let mut decoder = Vec::new();
        for l in (0..cfg.depth.saturating_sub(1)).rev() {
            lb.push_scope(format!("dec{l}"));
            let width = cfg.level_width(l);
            let blocks = (0..cfg.layer_repetition)
                .map(|r| {
                    let cin = if r == 0 { cfg.level_width(l + 1) + width } else { width };
                    ResBlock::new(lb, &format!("res{r}"), cin, width)
                })
                .collect();
            lb.pop_scope();
            decoder.push(blocks);
        }
        let head_norm = LayerNorm::new(lb, "head_norm", b);
        let head = Conv2d::new(lb, "head", b, 4 * cfg.n_categories, 3);
        Self { stem, levels, time_in, time_out, attention, decoder, head_norm, head }
    }
}

/// Activations retained by a training-mode forward pass.
pub struct Trace<T> {
    u0: Tensor<T>,
    down_inputs: Vec<Option<Tensor<T>>>,
    enc_blocks: Vec<Vec<ResBlockCache<T>>>,
    emb: Tensor<T>,
    time_hidden: Tensor<T>,
    attention: Vec<AttentionCache<T>>,
    dec_blocks: Vec<Vec<ResBlockCache<T>>>,
    head_in: Tensor<T>,
    head_ln: LayerNormCache<T>,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Float = f32> {
    config: DenoiserConfig,
    net: Network,
    layout: Layout,
    params: Vec<T>,
}

/// Deterministic fan-in-uniform initialization from `seed`.
pub fn build_denoiser(config: DenoiserConfig, seed: u64) -> Result<DenoiserModel> {
    DenoiserModel::new(config, seed)
}

impl<T: Float> DenoiserModel<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut lb = LayoutBuilder::new(rng::rng_for(seed, &[rng::stream::INIT]));
        let net = Network::build(&config, &mut lb);
        let (layout, params) = lb.finish();
        Ok(Self { config, net, layout, params })
    }

    /// Rebuilds the architecture and installs `params`.
    pub fn from_params(config: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        ensure!(
            params.len() == model.params.len(),
            Checkpoint,
            "expected {} parameters, got {}",
            model.params.len(),
            params.len()
        );
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Float>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            net: self.net.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Stacks `[condition channels | x_t categories]` into one CHW tensor.
    pub fn assemble_input(&self, xt: &CategoricalGrid, condition: &ConditionStack) -> Result<Tensor<T>> {
        let cfg = &self.config;
        ensure!(
            xt.n_categories() == cfg.n_categories,
            ShapeMismatch,
            "x_t has {} categories, model expects {}",
            xt.n_categories(),
            cfg.n_categories
        );
        ensure!(
            condition.channels() == cfg.condition_channels,
            ShapeMismatch,
            "condition has {} channels, model expects {}",
            condition.channels(),
            cfg.condition_channels
        );
        ensure!(
            condition.height() == xt.height() && condition.width() == xt.width(),
            ShapeMismatch,
            "condition is {}x{}, x_t is {}x{}",
            condition.height(),
            condition.width(),
            xt.height(),
            xt.width()
        );
        let m = cfg.size_multiple();
        ensure!(
            xt.height() % m == 0 && xt.width() % m == 0 && xt.height() > 0 && xt.width() > 0,
            ShapeMismatch,
            "input {}x{} is not divisible by {m}",
            xt.height(),
            xt.width()
        );
        let (h, w) = (xt.height(), xt.width());
        let mut data: Vec<T> = condition.data().iter().map(|&v| T::of(v as f64)).collect();
        data.extend(xt.to_channels_f32().into_iter().map(|v| T::of(v as f64)));
        Ok(Tensor::from_vec(cfg.input_channels(), h, w, data))
    }

    fn time_features(&self, t: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let cfg = &self.config;
        let e = timestep_embedding(t, cfg.timestep_embed_dim, cfg.timesteps)?;
        let emb = Tensor::from_vec(e.len(), 1, 1, e.into_iter().map(T::of).collect());
        let hidden = self.net.time_in.forward(&self.params, &emb);
        let temb = self.net.time_out.forward(&self.params, &silu(&hidden));
        Ok((emb, hidden, temb))
    }

    /// Full forward pass. Dropout is applied only when `dropout_seed` is
    /// given; activations are kept only when `keep` is set.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        t: usize,
        dropout_seed: Option<u64>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<Trace<T>>)> {
        let cfg = &self.config;
        let p = &self.params;
        let net = &self.net;
        ensure!(
            input.c == cfg.input_channels(),
            ShapeMismatch,
            "input has {} channels, model expects {}",
            input.c,
            cfg.input_channels()
        );
        let m = cfg.size_multiple();
        ensure!(
            input.h % m == 0 && input.w % m == 0 && input.h > 0 && input.w > 0,
            ShapeMismatch,
            "input {}x{} is not divisible by {m}",
            input.h,
            input.w
        );
        let (emb, time_hidden, temb) = self.time_features(t)?;

        let u0 = pixel_unshuffle(input);
        let mut pooled = u0.clone();
        let mut down_inputs = Vec::new();
        let mut enc_blocks = Vec::new();
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut h = Tensor::zeros(0, 0, 0);
        for (l, level) in net.levels.iter().enumerate() {
            let mut x = match &level.down {
                None => {
                    down_inputs.push(None);
                    net.stem.forward(p, &u0)
                }
                Some(down) => {
                    pooled = avgpool2(&pooled);
                    let prev = skips.last().expect("previous level");
                    let d_in = Tensor::concat(&[&avgpool2(prev), &pooled]);
                    let out = down.forward(p, &d_in);
                    down_inputs.push(keep.then_some(d_in));
                    out
                }
            };
            if l + 1 == net.levels.len() {
                add_channel_bias(&mut x, &temb.data);
            }
            let mut caches = Vec::new();
            for block in &level.blocks {
                let (y, c) = block.forward(p, x, keep);
                caches.extend(c);
                x = y;
            }
            enc_blocks.push(caches);
            if l + 1 == net.levels.len() {
                h = x;
            } else {
                skips.push(x);
            }
        }

        let mut attention = Vec::new();
        for (i, layer) in net.attention.iter().enumerate() {
            let seed = dropout_seed.map(|s| rng::derive_seed(s, &[i as u64]));
            let (y, c) = layer.forward(p, h, seed, keep);
            attention.extend(c);
            h = y;
        }

        let mut dec_blocks = Vec::new();
        for stage in &net.decoder {
            let skip = skips.pop().expect("decoder skip");
            let mut x = Tensor::concat(&[&upsample2(&h), &skip]);
            drop(skip);
            let mut caches = Vec::new();
            for block in stage {
                let (y, c) = block.forward(p, x, keep);
                caches.extend(c);
                x = y;
            }
            dec_blocks.push(caches);
            h = x;
        }

        let (head_in, head_ln) = net.head_norm.forward(p, &h);
        drop(h);
        let logits = pixel_shuffle(&net.head.forward(p, &silu(&head_in)));
        ensure!(
            logits.is_finite(),
            Divergence,
            "denoiser produced non-finite scores at t={t}"
        );
        let trace = keep.then(|| Trace {
            u0,
            down_inputs,
            enc_blocks,
            emb,
            time_hidden,
            attention,
            dec_blocks,
            head_in,
            head_ln,
        });
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients of a scalar loss given its gradient
    /// with respect to the output scores.
    pub fn backward(&self, trace: &Trace<T>, d_logits: &Tensor<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let p = &self.params;
        let net = &self.net;

        let dz = pixel_unshuffle(d_logits);
        let d_act = net
            .head
            .backward(p, &silu(&trace.head_in), &dz, grads, true)
            .expect("dx");
        let mut dh = net
            .head_norm
            .backward(p, &trace.head_ln, &silu_backward(&trace.head_in, &d_act), grads);

        let n_skips = net.decoder.len();
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; n_skips];
        for (stage_idx, (stage, caches)) in net.decoder.iter().zip(&trace.dec_blocks).enumerate().rev() {
            for (block, cache) in stage.iter().zip(caches).rev() {
                dh = block.backward(p, cache, &dh, grads);
            }
            let up_c = dh.c - skip_width(&self.config, n_skips - 1 - stage_idx);
            let (d_up, d_skip) = dh.split(up_c);
            // Decoder stage `i` consumed encoder level `n_skips - 1 - i`.
            d_skips[n_skips - 1 - stage_idx] = Some(d_skip);
            dh = upsample2_backward(&d_up);
        }

        for (layer, cache) in net.attention.iter().zip(&trace.attention).rev() {
            dh = layer.backward(p, cache, &dh, grads);
        }

        for l in (0..net.levels.len()).rev() {
            let level = &net.levels[l];
            if l + 1 < net.levels.len() {
                dh = d_skips[l].take().expect("skip gradient").add(&dh);
            }
            for (block, cache) in level.blocks.iter().zip(&trace.enc_blocks[l]).rev() {
                dh = block.backward(p, cache, &dh, grads);
            }
            if l + 1 == net.levels.len() {
                self.time_backward(trace, &dh, grads);
            }
            match &level.down {
                None => {
                    net.stem.backward(p, &trace.u0, &dh, grads, false);
                }
                Some(down) => {
                    let d_in = trace.down_inputs[l].as_ref().expect("down input");
                    let d = down.backward(p, d_in, &dh, grads, true).expect("dx");
                    let prev_c = self.config.level_width(l - 1);
                    let (d_prev, _) = d.split(prev_c);
                    dh = avgpool2_backward(&d_prev);
                }
            }
        }
    }

    fn time_backward(&self, trace: &Trace<T>, dh: &Tensor<T>, grads: &mut [T]) {
        let p = &self.params;
        let d_temb: Vec<T> = (0..dh.c).map(|c| dh.plane(c).iter().copied().sum()).collect();
        let d_temb = Tensor::from_vec(dh.c, 1, 1, d_temb);
        let act = silu(&trace.time_hidden);
        let d_act = self.net.time_out.backward(p, &act, &d_temb, grads, true).expect("dx");
        let d_hidden = silu_backward(&trace.time_hidden, &d_act);
        self.net.time_in.backward(p, &trace.emb, &d_hidden, grads, false);
    }

    /// Eval-mode prediction on an assembled input.
    pub fn predict_tensor(&self, input: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        Ok(self.forward(input, t, None, false)?.0)
    }
}

fn skip_width(cfg: &DenoiserConfig, level: usize) -> usize {
    cfg.level_width(level)
}

fn add_channel_bias<T: Float>(x: &mut Tensor<T>, bias: &[T]) {
    for (c, &b) in bias.iter().enumerate() {
        x.plane_mut(c).iter_mut().for_each(|v| *v += b);
    }
}

impl<T: Float> X0Predictor for DenoiserModel<T> {
    fn n_categories(&self) -> usize {
        self.config.n_categories
    }

    /// Raw per-category scores at input resolution, in eval mode.
    fn predict_x0(&self, xt: &CategoricalGrid, condition: &ConditionStack, t: usize) -> Result<CategoricalGrid> {
        let input = self.assemble_input(xt, condition)?;
        let logits = self.predict_tensor(&input, t)?;
        let (h, w) = (logits.h, logits.w);
        let data: Vec<f64> = logits.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        CategoricalGrid::from_channels(h, w, self.config.n_categories, &data)
            .map_err(|e| Error::Divergence(e.to_string()))
    }
}
