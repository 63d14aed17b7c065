//! The matting network: a five-level convolutional encoder, a dilated context
//! head, a decoder that aligns adjacent pyramid levels multiplicatively
//! (or, as an ablation, a plain skip-concatenation decoder), a one-channel
//! prediction head and a residual multi-scale refinement stage.
//!
//! Pyramid level `k` runs at `1/2^k` of the input resolution. The decoder walks
//! from level 4 down to level 0, doubling the resolution at every step.

mod params;

use std::sync::atomic::{AtomicBool, Ordering};

use mattekit_autograd::{nearest_upsample_kernel, Conv2dOptions, PadMode, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use params::Params;

use crate::rng::{stream, stream_rng, Rng};
use crate::{Error, Image, Result, Trimap};

/// RGB plus the encoded trimap.
pub const INPUT_CHANNELS: usize = 4;
pub const LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Multiplicative match of adjacent levels followed by aggregation with the
    /// upsampled upstream feature.
    #[default]
    InfoAlign,
    /// U-Net style: concatenate the skip feature with the upsampled upstream
    /// feature, then a 3×3 conv and relu.
    SkipConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub block_channels: [usize; LEVELS],
    pub aspp_rates: Vec<usize>,
    /// Also the common decoder width every level is projected to.
    pub aspp_out_channels: usize,
    pub msr_rates: Vec<usize>,
    pub msr_channels: usize,
    pub decoder: DecoderKind,
    /// Rescale the context map and every match/aggregate output to unit RMS
    /// per sample before it feeds the next alignment step. The aggregation
    /// is quadratic in its upstream input, so without this the chain's
    /// magnitude goes as the 16th power of the context scale.
    pub align_normalize: bool,
    pub msr: bool,
}

/// Smoothing added under the RMS (as eps²) so that all-zero maps, common
/// behind relu at small widths, stay zero without a singular gradient.
pub const NORM_EPS: f64 = 1e-3;

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            block_channels: [8, 16, 32, 48, 48],
            aspp_rates: vec![1, 8, 16],
            aspp_out_channels: 16,
            msr_rates: vec![1, 2, 4],
            msr_channels: 8,
            decoder: DecoderKind::InfoAlign,
            align_normalize: true,
            msr: true,
        }
    }
}

impl NetConfig {
    /// Smallest widths that still exercise every path; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            block_channels: [2, 2, 3, 3, 3],
            aspp_rates: vec![1, 2, 3],
            aspp_out_channels: 2,
            msr_rates: vec![1, 2],
            msr_channels: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.contains(&0) || self.aspp_out_channels == 0 || self.msr_channels == 0
        {
            return Err(Error::Config("network widths must be positive".into()));
        }
        for (name, rates) in [
            ("aspp_rates", &self.aspp_rates),
            ("msr_rates", &self.msr_rates),
        ] {
            if rates.is_empty() || rates.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} must be a non-empty list of positive rates"
                )));
            }
            let mut sorted = rates.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != rates.len() {
                return Err(Error::Config(format!(
                    "{name} must be distinct, got {rates:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Largest useful dilation for a 3×3 kernel on an `size`×`size` map.
pub fn max_useful_rate(size: usize) -> usize {
    (size.saturating_sub(1) / 2).max(1)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    opts: Conv2dOptions,
}

impl Conv {
    fn apply(&self, g: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.apply_with(g, p, x, self.opts)
    }

    fn apply_with(&self, g: &mut Tape, p: &[Var], x: Var, opts: Conv2dOptions) -> Result<Var> {
        Ok(g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), opts)?)
    }
}

/// Learnable ×2 upsampling (transposed conv, kernel 4, stride 2, padding 1).
#[derive(Debug, Clone, Copy)]
struct Upsample {
    weight: usize,
    bias: Option<usize>,
}

impl Upsample {
    fn apply(&self, g: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.conv_transpose2d(x, p[self.weight], self.bias.map(|b| p[b]), 2, 1)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    scale: usize,
    shift: usize,
}

impl Affine {
    /// Per-sample RMS normalization, then the learned per-channel affine.
    fn apply(&self, g: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = g.rms_normalize(x, NORM_EPS)?;
        Ok(g.channel_affine(y, p[self.scale], p[self.shift])?)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv_a: Conv,
    norm: Affine,
    conv_b: Conv,
}

#[derive(Debug, Clone)]
struct Aspp {
    rates: Vec<usize>,
    branches: Vec<Conv>,
    pool: Conv,
    fuse: Conv,
    norm: Affine,
}

/// Match projections and every alignment upsampler are bias-free: a zero
/// high-level or upstream feature then yields an exactly zero output.
#[derive(Debug, Clone)]
struct Imm {
    low: Conv,
    high: Conv,
    up: Upsample,
}

#[derive(Debug, Clone)]
enum Decoder {
    /// Index `k` joins level `k` with level `k + 1`.
    InfoAlign {
        imm: Vec<Imm>,
        up: Vec<Upsample>,
    },
    SkipConcat {
        up: Vec<Upsample>,
        fuse: Vec<Conv>,
    },
}

#[derive(Debug, Clone)]
struct Msr {
    branches: Vec<Conv>,
    project: Conv,
}

struct Builder {
    params: Params,
    rng: Rng,
}

impl Builder {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    /// Zero bias; weights drawn with the given fan-in gain (`std = sqrt(gain / fan_in)`).
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        opts: Conv2dOptions,
        gain: f64,
    ) -> Conv {
        let std = (gain / (cin * k * k) as f64).sqrt();
        let w = self.normal(vec![cout, cin, k, k], std);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = Some(
            self.params
                .push(format!("{name}.bias"), Tensor::zeros([cout])),
        );
        Conv { weight, bias, opts }
    }

    /// 1×1 projection without bias, so a zero input maps to exactly zero.
    fn projection(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.normal(vec![cout, cin, 1, 1], (1.0 / cin as f64).sqrt());
        let weight = self.params.push(format!("{name}.weight"), w);
        Conv {
            weight,
            bias: None,
            opts: Conv2dOptions::default(),
        }
    }

    /// Starts near exact nearest-neighbour replication so the decoder's
    /// products begin at the scale of their inputs.
    fn upsample(&mut self, name: &str, channels: usize, with_bias: bool) -> Upsample {
        let noise = self.normal(vec![channels, channels, 4, 4], 0.02);
        let base = nearest_upsample_kernel(channels);
        let w = Tensor::from_fn(base.shape().to_vec(), |i| base.data()[i] + noise.data()[i]);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = with_bias.then(|| {
            self.params
                .push(format!("{name}.bias"), Tensor::zeros([channels]))
        });
        Upsample { weight, bias }
    }

    fn affine(&mut self, name: &str, channels: usize) -> Affine {
        let scale = self
            .params
            .push(format!("{name}.scale"), Tensor::ones([channels]));
        let shift = self
            .params
            .push(format!("{name}.shift"), Tensor::zeros([channels]));
        Affine { scale, shift }
    }
}

/// Named handles into the tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub prelim_logit: Var,
    pub prelim: Var,
    pub refined_logit: Var,
    pub refined: Var,
}

#[derive(Debug)]
pub struct Network {
    config: NetConfig,
    encoder: Vec<EncoderBlock>,
    aspp: Aspp,
    decoder: Decoder,
    head: Conv,
    msr: Option<Msr>,
    warned_rates: AtomicBool,
}

impl Network {
    /// Builds the layer graph and draws initial parameters from `seed`.
    pub fn new(config: &NetConfig, seed: u64) -> Result<(Network, Params)> {
        config.validate()?;
        let mut b = Builder {
            params: Params::new(),
            rng: stream_rng(seed, stream::INIT, 0),
        };
        let ch = config.block_channels;
        let d = config.aspp_out_channels;
        let relu_gain = 2.0;

        let mut encoder = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let cin = if k == 0 { INPUT_CHANNELS } else { ch[k - 1] };
            let stride = if k == 0 { 1 } else { 2 };
            let name = format!("encoder.block{k}");
            encoder.push(EncoderBlock {
                conv_a: b.conv(
                    &format!("{name}.conv_a"),
                    cin,
                    ch[k],
                    3,
                    Conv2dOptions::new(stride, 1, 1),
                    relu_gain,
                ),
                norm: b.affine(&format!("{name}.norm"), ch[k]),
                conv_b: b.conv(
                    &format!("{name}.conv_b"),
                    ch[k],
                    ch[k],
                    3,
                    Conv2dOptions::same(3, 1),
                    relu_gain,
                ),
            });
        }

        let replicate = |rate| Conv2dOptions::same(3, rate).with_pad_mode(PadMode::Replicate);
        let branches = config
            .aspp_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                b.conv(
                    &format!("aspp.branch{i}"),
                    ch[4],
                    d,
                    3,
                    replicate(r),
                    relu_gain,
                )
            })
            .collect::<Vec<_>>();
        let pool = b.conv(
            "aspp.pool",
            ch[4],
            d,
            1,
            Conv2dOptions::default(),
            relu_gain,
        );
        let fuse_in = d * (branches.len() + 1);
        let aspp = Aspp {
            rates: config.aspp_rates.clone(),
            branches,
            pool,
            fuse: b.conv("aspp.fuse", fuse_in, d, 3, replicate(1), relu_gain),
            norm: b.affine("aspp.norm", d),
        };

        let decoder = match config.decoder {
            DecoderKind::InfoAlign => {
                let imm = (0..LEVELS - 1)
                    .map(|k| Imm {
                        low: b.projection(&format!("imm{k}.low"), ch[k], d),
                        high: b.projection(&format!("imm{k}.high"), ch[k + 1], d),
                        up: b.upsample(&format!("imm{k}.up"), d, false),
                    })
                    .collect();
                let up = (0..LEVELS - 1)
                    .map(|k| b.upsample(&format!("iam{k}.up"), d, false))
                    .collect();
                Decoder::InfoAlign { imm, up }
            }
            DecoderKind::SkipConcat => {
                let up = (0..LEVELS - 1)
                    .map(|k| b.upsample(&format!("skip{k}.up"), d, true))
                    .collect();
                let fuse = (0..LEVELS - 1)
                    .map(|k| {
                        b.conv(
                            &format!("skip{k}.fuse"),
                            ch[k] + d,
                            d,
                            3,
                            Conv2dOptions::same(3, 1),
                            relu_gain,
                        )
                    })
                    .collect();
                Decoder::SkipConcat { up, fuse }
            }
        };

        let head = b.conv("head", d, 1, 3, Conv2dOptions::same(3, 1), 1.0);

        let msr = config.msr.then(|| {
            let m = config.msr_channels;
            let branches = config
                .msr_rates
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    b.conv(
                        &format!("msr.branch{i}"),
                        4,
                        m,
                        3,
                        Conv2dOptions::same(3, r),
                        relu_gain,
                    )
                })
                .collect();
            // Small projection: refinement starts close to the identity.
            let project = b.conv("msr.project", m, 1, 1, Conv2dOptions::default(), 1e-4);
            Msr { branches, project }
        });

        let net = Network {
            config: config.clone(),
            encoder,
            aspp,
            decoder,
            head,
            msr,
            warned_rates: AtomicBool::new(false),
        };
        Ok((net, b.params))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn encoder_forward(&self, g: &mut Tape, p: &[Var], x: Var) -> Result<[Var; LEVELS]> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "network input needs {INPUT_CHANNELS} channels, got {c}"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}×{w} must be divisible by 16"
            )));
        }
        let mut feats = [x; LEVELS];
        let mut cur = x;
        for (k, block) in self.encoder.iter().enumerate() {
            let y = block.conv_a.apply(g, p, cur)?;
            let y = block.norm.apply(g, p, y)?;
            let y = g.relu(y)?;
            let y = block.conv_b.apply(g, p, y)?;
            cur = g.relu(y)?;
            feats[k] = cur;
        }
        Ok(feats)
    }

    /// Rates actually used on a map of the given size.
    pub fn effective_aspp_rates(&self, size: usize) -> Vec<usize> {
        let cap = max_useful_rate(size);
        let rates: Vec<usize> = self.aspp.rates.iter().map(|&r| r.min(cap)).collect();
        if rates != self.aspp.rates && !self.warned_rates.swap(true, Ordering::Relaxed) {
            log::warn!(
                "context dilation rates {:?} clamped to {:?} for a {size}×{size} feature map",
                self.aspp.rates,
                rates
            );
        }
        rates
    }

    pub fn aspp_forward(&self, g: &mut Tape, p: &[Var], f4: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(f4).dims4()?;
        let rates = self.effective_aspp_rates(h.min(w));
        let mut parts = Vec::with_capacity(rates.len() + 1);
        for (conv, &r) in self.aspp.branches.iter().zip(&rates) {
            let opts = Conv2dOptions::same(3, r).with_pad_mode(PadMode::Replicate);
            let y = conv.apply_with(g, p, f4, opts)?;
            parts.push(g.relu(y)?);
        }
        let pooled = g.global_avg_pool(f4)?;
        let pooled = self.aspp.pool.apply(g, p, pooled)?;
        let pooled = g.relu(pooled)?;
        parts.push(g.broadcast_spatial(pooled, h, w)?);
        let cat = g.concat(&parts)?;
        let y = self.aspp.fuse.apply(g, p, cat)?;
        let y = self.aspp.norm.apply(g, p, y)?;
        Ok(g.relu(y)?)
    }

    fn check_double(g: &Tape, low: Var, high: Var, what: &str) -> Result<()> {
        let l = g.shape(low);
        let h = g.shape(high);
        if l.len() != 4 || h.len() != 4 || l[2] != 2 * h[2] || l[3] != 2 * h[3] || l[0] != h[0] {
            return Err(Error::Invariant(format!(
                "{what}: {l:?} is not twice the resolution of {h:?}"
            )));
        }
        Ok(())
    }

    /// `P_low(f_low) ⊙ T(P_high(f_high))` for the level pair `(level, level + 1)`.
    pub fn imm_forward(
        &self,
        g: &mut Tape,
        p: &[Var],
        level: usize,
        f_low: Var,
        f_high: Var,
    ) -> Result<Var> {
        let Decoder::InfoAlign { imm, .. } = &self.decoder else {
            return Err(Error::Config(
                "network was built with the skip-concat decoder".into(),
            ));
        };
        Self::check_double(g, f_low, f_high, "match")?;
        let m = &imm[level];
        let low = m.low.apply(g, p, f_low)?;
        let high = m.high.apply(g, p, f_high)?;
        let high = m.up.apply(g, p, high)?;
        Ok(g.mul(low, high)?)
    }

    /// `(f_imm + T(u)) ⊙ T(u)` with a single shared upsampling of `upstream`.
    pub fn iam_forward(
        &self,
        g: &mut Tape,
        p: &[Var],
        level: usize,
        f_imm: Var,
        upstream: Var,
    ) -> Result<Var> {
        let Decoder::InfoAlign { up, .. } = &self.decoder else {
            return Err(Error::Config(
                "network was built with the skip-concat decoder".into(),
            ));
        };
        Self::check_double(g, f_imm, upstream, "aggregate")?;
        let t = up[level].apply(g, p, upstream)?;
        let s = g.add(f_imm, t)?;
        Ok(g.mul(s, t)?)
    }

    /// Decoder output at full input resolution.
    pub fn decoder_forward(
        &self,
        g: &mut Tape,
        p: &[Var],
        feats: &[Var; LEVELS],
        top: Var,
    ) -> Result<Var> {
        let normalize =
            matches!(self.decoder, Decoder::InfoAlign { .. }) && self.config.align_normalize;
        let rescale = |g: &mut Tape, x: Var| -> Result<Var> {
            if normalize {
                Ok(g.rms_normalize(x, NORM_EPS)?)
            } else {
                Ok(x)
            }
        };
        let mut u = rescale(g, top)?;
        for k in (0..LEVELS - 1).rev() {
            u = match &self.decoder {
                Decoder::InfoAlign { .. } => {
                    let m = self.imm_forward(g, p, k, feats[k], feats[k + 1])?;
                    let m = rescale(g, m)?;
                    let a = self.iam_forward(g, p, k, m, u)?;
                    rescale(g, a)?
                }
                Decoder::SkipConcat { up, fuse } => {
                    Self::check_double(g, feats[k], u, "skip")?;
                    let t = up[k].apply(g, p, u)?;
                    let cat = g.concat(&[feats[k], t])?;
                    let y = fuse[k].apply(g, p, cat)?;
                    g.relu(y)?
                }
            };
        }
        Ok(u)
    }

    /// 3×3 conv to one channel; returns `(logit, sigmoid(logit))`.
    pub fn predict_alpha(&self, g: &mut Tape, p: &[Var], decoder_out: Var) -> Result<(Var, Var)> {
        let logit = self.head.apply(g, p, decoder_out)?;
        let alpha = g.sigmoid(logit)?;
        Ok((logit, alpha))
    }

    /// Residual refinement in logit space: with a zero projection the output
    /// equals the preliminary alpha exactly.
    pub fn msr_forward(
        &self,
        g: &mut Tape,
        p: &[Var],
        image: Var,
        prelim_logit: Var,
        prelim: Var,
    ) -> Result<(Var, Var)> {
        let Some(msr) = &self.msr else {
            return Ok((prelim_logit, prelim));
        };
        let x = g.concat(&[image, prelim])?;
        let mut acc: Option<Var> = None;
        for conv in &msr.branches {
            let y = conv.apply(g, p, x)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        let h = g.relu(acc.expect("at least one rate"))?;
        let residual = msr.project.apply(g, p, h)?;
        let logit = g.add(prelim_logit, residual)?;
        let alpha = g.sigmoid(logit)?;
        Ok((logit, alpha))
    }

    /// `image`: N×3×H×W, `trimap`: N×1×H×W (encoded labels).
    pub fn forward(&self, g: &mut Tape, p: &[Var], image: Var, trimap: Var) -> Result<Outputs> {
        let x = g.concat(&[image, trimap])?;
        let feats = self.encoder_forward(g, p, x)?;
        let top = self.aspp_forward(g, p, feats[LEVELS - 1])?;
        let dec = self.decoder_forward(g, p, &feats, top)?;
        let (prelim_logit, prelim) = self.predict_alpha(g, p, dec)?;
        let (refined_logit, refined) = self.msr_forward(g, p, image, prelim_logit, prelim)?;
        Ok(Outputs {
            prelim_logit,
            prelim,
            refined_logit,
            refined,
        })
    }

    /// Gradient-free forward; returns the refined alphas.
    pub fn infer(
        &self,
        params: &Params,
        images: &[&Image],
        trimaps: &[&Trimap],
    ) -> Result<Vec<crate::AlphaMatte>> {
        let (img, tri) = batch_inputs(images, trimaps)?;
        let mut g = Tape::new();
        let p = params.bind_constant(&mut g);
        let iv = g.constant(img);
        let tv = g.constant(tri);
        let out = self.forward(&mut g, &p, iv, tv)?;
        split_alphas(g.value(out.refined))
    }
}

/// Per-parameter `(name, shape)` listing plus the total scalar count.
#[derive(Debug, Clone, PartialEq)]
pub struct Description {
    pub tensors: Vec<(String, Vec<usize>)>,
    pub total: usize,
}

impl Description {
    /// Scalar count over tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl std::fmt::Display for Description {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.tensors.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, shape) in &self.tensors {
            let count: usize = shape.iter().product();
            writeln!(f, "{name:<width$}  {shape:?}  {count}")?;
        }
        write!(f, "total parameters: {}", self.total)
    }
}

pub fn describe(config: &NetConfig) -> Result<Description> {
    let (_, params) = Network::new(config, 0)?;
    Ok(Description {
        tensors: params
            .names()
            .iter()
            .cloned()
            .zip(params.tensors().iter().map(|t| t.shape().to_vec()))
            .collect(),
        total: params.numel(),
    })
}

/// Stacks images into N×3×H×W and encoded trimaps into N×1×H×W.
pub fn batch_inputs(images: &[&Image], trimaps: &[&Trimap]) -> Result<(Tensor, Tensor)> {
    if images.is_empty() || images.len() != trimaps.len() {
        return Err(Error::Config(
            "batch needs equally many images and trimaps, at least one".into(),
        ));
    }
    let (w, h) = (images[0].width(), images[0].height());
    let mut img = Vec::with_capacity(images.len() * 3 * w * h);
    let mut tri = Vec::with_capacity(images.len() * w * h);
    for (i, t) in images.iter().zip(trimaps) {
        if (i.width(), i.height()) != (w, h) || (t.width(), t.height()) != (w, h) {
            return Err(Error::Config(
                "all batch members must share one size".into(),
            ));
        }
        img.extend(i.to_planar());
        tri.extend(t.encode_channel());
    }
    let n = images.len();
    Ok((
        Tensor::new([n, 3, h, w], img)?,
        Tensor::new([n, 1, h, w], tri)?,
    ))
}

/// Splits an N×1×H×W tensor into mattes.
pub fn split_alphas(t: &Tensor) -> Result<Vec<crate::AlphaMatte>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Invariant(format!(
            "expected one alpha channel, got {c}"
        )));
    }
    t.data()
        .chunks_exact(h * w)
        .take(n)
        .map(|chunk| crate::AlphaMatte::new(w, h, chunk.to_vec()))
        .collect()
}
