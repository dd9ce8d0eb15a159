//! Multi-view encoder-decoder shared by every network in the pipeline.
//!
//! Views of one sample are processed as a batch of images; information moves
//! between views only through the self-attention layer at the lowest
//! resolution, whose tokens are all positions of all views. The only
//! view-specific signal is an optional learned per-view embedding.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

const TIME_FEATURES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub views: usize,
    pub resolution: usize,
    /// Per-view input channels.
    pub in_channels: usize,
    /// Channels of the condition image appended to every view; 0 disables it.
    pub cond_channels: usize,
    /// Per-view output channels.
    pub out_channels: usize,
    /// Pixel-unshuffle factor applied before the first convolution.
    pub patch: usize,
    pub width: usize,
    pub width_low: usize,
    /// Residual blocks at the lowest resolution; attention follows the first.
    pub blocks_low: usize,
    pub time_embedding: bool,
    pub view_embedding: bool,
    pub groups: usize,
    pub seed: u64,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.views == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("views, in_channels and out_channels must be positive".into());
        }
        if self.patch == 0 || self.width == 0 || self.width_low == 0 || self.groups == 0 {
            return bad("patch, widths and groups must be positive".into());
        }
        if self.resolution == 0 || self.resolution % (2 * self.patch) != 0 {
            return bad(format!("resolution {} must be a multiple of {}", self.resolution, 2 * self.patch));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, groups: usize, temb: Option<usize>) -> Self {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), ci, groups),
            conv1: Conv2d::new(ps, r, &format!("{name}.conv1"), ci, co, 3, 1, 1.0),
            time: temb.map(|e| Linear::new(ps, r, &format!("{name}.time"), e, co, 1.0)),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), co, groups),
            conv2: Conv2d::new(ps, r, &format!("{name}.conv2"), co, co, 3, 1, 0.5),
            skip: (ci != co).then(|| Conv2d::new(ps, r, &format!("{name}.skip"), ci, co, 1, 1, 1.0)),
        }
    }

    /// `x` is `[B*V, C, h, w]`; `temb` is `[B, E]`.
    fn forward(&self, ps: &ParamStore, x: &Tensor, temb: Option<&Tensor>, views: usize) -> Tensor {
        let mut h = self.conv1.forward(ps, &self.norm1.forward(ps, x).silu());
        if let (Some(lin), Some(e)) = (&self.time, temb) {
            let b = e.dim(0);
            let c = h.dim(1);
            let bias = lin.forward(ps, &e.silu()).reshape(&[b, 1, c, 1, 1]).expand(&[b, views, c, 1, 1]).reshape(&[b * views, c, 1, 1]);
            h = h.add(&bias);
        }
        let h = self.conv2.forward(ps, &self.norm2.forward(ps, &h).silu());
        let base = match &self.skip {
            Some(s) => s.forward(ps, x),
            None => x.clone(),
        };
        base.add(&h)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: GroupNorm,
    qkv: Linear,
    out: Linear,
    channels: usize,
}

impl Attention {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, c: usize, groups: usize) -> Self {
        Attention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c, groups),
            qkv: Linear::new(ps, r, &format!("{name}.qkv"), c, 3 * c, 1.0),
            out: Linear::new(ps, r, &format!("{name}.out"), c, c, 0.5),
            channels: c,
        }
    }

    /// Single-head attention over the `V*h*w` tokens of each sample.
    fn forward(&self, ps: &ParamStore, x: &Tensor, views: usize) -> Tensor {
        let (bv, c, h, w) = (x.dim(0), self.channels, x.dim(2), x.dim(3));
        let b = bv / views;
        let n = views * h * w;
        let tokens = self.norm.forward(ps, x).reshape(&[b, views, c, h * w]).permute(&[0, 1, 3, 2]).reshape(&[b, n, c]);
        let qkv = self.qkv.forward(ps, &tokens);
        let q = qkv.narrow(2, 0, c);
        let k = qkv.narrow(2, c, c);
        let v = qkv.narrow(2, 2 * c, c);
        let scores = q.matmul(&k.permute(&[0, 2, 1])).mul_scalar(1.0 / (c as f32).sqrt());
        let mixed = scores.softmax_last().matmul(&v);
        let out = self.out.forward(ps, &mixed).reshape(&[b, views, h * w, c]).permute(&[0, 1, 3, 2]).reshape(&[bv, c, h, w]);
        x.add(&out)
    }
}

/// Encoder-decoder over `[B, V, C, H, W]` batches.
#[derive(Clone, Debug)]
pub struct MultiViewUNet {
    pub config: UNetConfig,
    time_mlp: Option<(Linear, Linear)>,
    view_emb: Option<ParamId>,
    conv_in: Conv2d,
    res_in: ResBlock,
    down: Conv2d,
    res_low: Vec<ResBlock>,
    attn: Attention,
    up: Conv2d,
    res_out: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    evaluations: Cell<u64>,
}

pub fn sinusoidal_embedding(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            out.push((1000.0 * t * f).sin() as f32);
        }
        for i in 0..half {
            let f = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            out.push((1000.0 * t * f).cos() as f32);
        }
    }
    Tensor::new(out, &[ts.len(), 2 * half])
}

impl MultiViewUNet {
    /// Builds the network, registering its parameters in `ps`.
    pub fn new(config: &UNetConfig, ps: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(config.seed);
        let r = &mut r;
        let (c1, c2, g) = (config.width, config.width_low, config.groups);
        let temb = config.time_embedding.then_some(c2);
        let time_mlp = config
            .time_embedding
            .then(|| (Linear::new(ps, r, "time.fc1", TIME_FEATURES, c2, 1.0), Linear::new(ps, r, "time.fc2", c2, c2, 1.0)));
        let view_emb = config.view_embedding.then(|| ps.add_randn("view_embedding", &[config.views, c1], 0.5, r));
        let f2 = config.patch * config.patch;
        let cin = f2 * (config.in_channels + config.cond_channels);
        let conv_in = Conv2d::new(ps, r, "conv_in", cin, c1, 3, 1, 1.0);
        let res_in = ResBlock::new(ps, r, "res_in", c1, c1, g, temb);
        let down = Conv2d::new(ps, r, "down", c1, c2, 3, 2, 1.0);
        let res_low = (0..config.blocks_low.max(1)).map(|i| ResBlock::new(ps, r, &format!("res_low{i}"), c2, c2, g, temb)).collect();
        let attn = Attention::new(ps, r, "attn", c2, g);
        let up = Conv2d::new(ps, r, "up", c2 + c1, c1, 3, 1, 1.0);
        let res_out = ResBlock::new(ps, r, "res_out", c1, c1, g, temb);
        let norm_out = GroupNorm::new(ps, "norm_out", c1, g);
        let conv_out = Conv2d::new(ps, r, "conv_out", c1, f2 * config.out_channels, 3, 1, 0.5);
        Ok(MultiViewUNet {
            config: config.clone(),
            time_mlp,
            view_emb,
            conv_in,
            res_in,
            down,
            res_low,
            attn,
            up,
            res_out,
            norm_out,
            conv_out,
            evaluations: Cell::new(0),
        })
    }

    /// Number of forward evaluations so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.get()
    }

    pub fn view_embedding_id(&self) -> Option<ParamId> {
        self.view_emb
    }

    /// Bias of the output convolution, laid out as `out_channels` groups of
    /// `patch^2` consecutive channels.
    pub fn output_bias_id(&self) -> ParamId {
        self.conv_out.bias_id()
    }

    /// `x`: `[B, V, in, H, W]`; `ts`: one time per item (ignored without a
    /// time embedding); `cond`: `[B, cond_channels, H, W]`, `None` meaning
    /// all zeros. Returns `[B, V, out, H, W]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, ts: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        let cfg = &self.config;
        let (v, res) = (cfg.views, cfg.resolution);
        let expect = [x.shape().first().copied().unwrap_or(0), v, cfg.in_channels, res, res];
        if x.shape() != expect || expect[0] == 0 {
            return Err(Error::Shape(format!("network input {:?}, expected [B, {v}, {}, {res}, {res}]", x.shape(), cfg.in_channels)));
        }
        let b = expect[0];
        if cfg.time_embedding && ts.len() != b {
            return Err(Error::Shape(format!("{} times for batch {b}", ts.len())));
        }
        let mut input = x.clone();
        if cfg.cond_channels > 0 {
            let cc = cfg.cond_channels;
            let c = match cond {
                Some(c) => {
                    if c.shape() != [b, cc, res, res] {
                        return Err(Error::Shape(format!("condition {:?}, expected [{b}, {cc}, {res}, {res}]", c.shape())));
                    }
                    c.reshape(&[b, 1, cc, res, res]).expand(&[b, v, cc, res, res])
                }
                None => Tensor::zeros(&[b, v, cc, res, res]),
            };
            input = Tensor::cat(&[&input, &c], 2);
        }
        self.evaluations.set(self.evaluations.get() + 1);
        let cin = input.dim(2);
        let h = input.reshape(&[b * v, cin, res, res]).space_to_depth(cfg.patch);

        let temb = self.time_mlp.as_ref().map(|(fc1, fc2)| fc2.forward(ps, &fc1.forward(ps, &sinusoidal_embedding(ts, TIME_FEATURES)).silu()));
        let temb = temb.as_ref();

        let mut h = self.conv_in.forward(ps, &h);
        if let Some(id) = self.view_emb {
            let (c1, s) = (cfg.width, res / cfg.patch);
            h = h.reshape(&[b, v, c1, s, s]).add(&ps.get(id).reshape(&[1, v, c1, 1, 1])).reshape(&[b * v, c1, s, s]);
        }
        let skip = self.res_in.forward(ps, &h, temb, v);
        let mut low = self.down.forward(ps, &skip);
        for (i, block) in self.res_low.iter().enumerate() {
            low = block.forward(ps, &low, temb, v);
            if i == 0 {
                low = self.attn.forward(ps, &low, v);
            }
        }
        let h = self.up.forward(ps, &Tensor::cat(&[&low.upsample2(), &skip], 1));
        let h = self.res_out.forward(ps, &h, temb, v);
        let h = self.conv_out.forward(ps, &self.norm_out.forward(ps, &h).silu());
        Ok(h.depth_to_space(cfg.patch).reshape(&[b, v, cfg.out_channels, res, res]))
    }
}
