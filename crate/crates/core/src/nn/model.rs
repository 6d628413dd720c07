//! Siamese encoder-decoder with channel and spatial attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::kernels::ConvGeom;
use crate::nn::params::{Init, ParamStore};
use crate::nn::tensor::Tensor;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    VggS,
    ResnetS,
    DrnS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Channel,
    ChannelSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub variant: EncoderVariant,
    /// Width of the stride-2 stem convolution.
    pub stem_width: usize,
    /// Widths of the four encoder stages.
    pub widths: [usize; 4],
    pub decoder_width: usize,
    pub attention: AttentionKind,
    /// Total downsampling of vgg-s and resnet-s (16 or 32); drn-s is always 8.
    pub output_stride: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::DrnS,
            stem_width: 8,
            widths: [8, 16, 32, 32],
            decoder_width: 16,
            attention: AttentionKind::Channel,
            output_stride: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.decoder_width == 0 || self.widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.variant != EncoderVariant::DrnS && !matches!(self.output_stride, 16 | 32) {
            return Err(Error::Config(format!("output_stride must be 16 or 32, got {}", self.output_stride)));
        }
        Ok(())
    }

    /// Total encoder downsampling factor.
    pub fn encoder_stride(&self) -> usize {
        match self.variant {
            EncoderVariant::DrnS => 8,
            _ => self.output_stride,
        }
    }

    /// `(stride, dilation)` of each of the four stages.
    fn stage_geometry(&self) -> [(usize, usize); 4] {
        match self.variant {
            EncoderVariant::DrnS => [(2, 1), (2, 1), (1, 2), (1, 4)],
            _ if self.output_stride == 32 => [(2, 1), (2, 1), (2, 1), (2, 1)],
            _ => [(2, 1), (2, 1), (2, 1), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
enum Stage {
    Vgg { pool: bool, c1: Conv, c2: Conv },
    Res { c1: Conv, c2: Conv, proj: Option<Conv> },
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv,
    stages: Vec<Stage>,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_skip: Conv,
    head: Conv,
    channel: Option<(Dense, Dense)>,
    spatial: Option<Conv>,
}

/// Encoder output plus the stride-2 skip features.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub features: Var,
    pub skip: Var,
}

#[derive(Debug, Clone)]
pub struct CosegNet {
    config: NetConfig,
    store: ParamStore,
    layers: Layers,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, zero: bool) -> Result<Conv> {
        let init = if zero { Init::Zeros } else { Init::HeFanIn(cin * k * k) };
        let w = self.store.add(&format!("{name}.w"), &[cout, cin, k, k], init, self.rng)?;
        let b = self.store.add(&format!("{name}.b"), &[cout], Init::Zeros, self.rng)?;
        Ok(Conv { w, b, geom })
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize, zero: bool) -> Result<Dense> {
        let init = if zero { Init::Zeros } else { Init::HeFanIn(fin) };
        let w = self.store.add(&format!("{name}.w"), &[fout, fin], init, self.rng)?;
        let b = self.store.add(&format!("{name}.b"), &[fout], Init::Zeros, self.rng)?;
        Ok(Dense { w, b })
    }
}

fn same3(stride: usize, dilation: usize) -> ConvGeom {
    ConvGeom::new(stride, dilation, dilation)
}

impl CosegNet {
    pub fn new(config: NetConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::new(), rng };
        let stem = b.conv("stem", 1, config.stem_width, 3, same3(2, 1), false)?;
        let mut stages = Vec::new();
        let mut cin = config.stem_width;
        for (i, (&cout, (stride, dil))) in config.widths.iter().zip(config.stage_geometry()).enumerate() {
            let name = format!("enc{}", i + 1);
            let stage = match config.variant {
                EncoderVariant::VggS => Stage::Vgg {
                    pool: stride == 2,
                    c1: b.conv(&format!("{name}.conv1"), cin, cout, 3, same3(1, 1), false)?,
                    c2: b.conv(&format!("{name}.conv2"), cout, cout, 3, same3(1, 1), false)?,
                },
                _ => Stage::Res {
                    c1: b.conv(&format!("{name}.conv1"), cin, cout, 3, same3(stride, dil), false)?,
                    c2: b.conv(&format!("{name}.conv2"), cout, cout, 3, same3(1, dil), false)?,
                    proj: if stride != 1 || cin != cout {
                        Some(b.conv(&format!("{name}.proj"), cin, cout, 1, ConvGeom::new(stride, 0, 1), false)?)
                    } else {
                        None
                    },
                },
            };
            stages.push(stage);
            cin = cout;
        }
        let feat = cin;
        let dw = config.decoder_width;
        let channel = if config.attention != AttentionKind::None {
            let hidden = (feat / 4).max(1);
            Some((b.dense("att.fc1", feat, hidden, false)?, b.dense("att.fc2", hidden, feat, true)?))
        } else {
            None
        };
        let spatial = if config.attention == AttentionKind::ChannelSpatial {
            Some(b.conv("att.spatial", 2, 1, 7, ConvGeom::new(1, 3, 1), true)?)
        } else {
            None
        };
        let dec_in = b.conv("dec.in", feat, dw, 3, same3(1, 1), false)?;
        let mut dec_up = Vec::new();
        let mut stride = config.encoder_stride();
        while stride > 4 {
            stride /= 2;
            dec_up.push(b.conv(&format!("dec.up{stride}"), dw, dw, 3, same3(1, 1), false)?);
        }
        let dec_skip = b.conv("dec.skip", dw + config.stem_width, dw, 3, same3(1, 1), false)?;
        let head = b.conv("head", dw, 2, 1, ConvGeom::new(1, 0, 1), false)?;
        let layers = Layers { stem, stages, dec_in, dec_up, dec_skip, head, channel, spatial };
        Ok(Self { config, store: b.store, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn conv(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        let w = g.param(&self.store, c.w);
        let b = g.param(&self.store, c.b);
        g.conv2d(x, w, Some(b), c.geom)
    }

    fn conv_relu(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        let y = self.conv(g, x, c)?;
        Ok(g.relu(y))
    }

    /// Shared encoder applied to an `[N, 1, H, W]` batch.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Encoded> {
        let skip = self.conv_relu(g, x, self.layers.stem)?;
        let mut h = skip;
        for stage in &self.layers.stages {
            h = match *stage {
                Stage::Vgg { pool, c1, c2 } => {
                    let p = if pool { g.max_pool2d(h)? } else { h };
                    let a = self.conv_relu(g, p, c1)?;
                    self.conv_relu(g, a, c2)?
                }
                Stage::Res { c1, c2, proj } => {
                    let a = self.conv_relu(g, h, c1)?;
                    let r = self.conv(g, a, c2)?;
                    let short = match proj {
                        Some(p) => self.conv(g, h, p)?,
                        None => h,
                    };
                    let s = g.add(r, short)?;
                    g.relu(s)
                }
            };
        }
        Ok(Encoded { features: h, skip })
    }

    /// Shared gate for a pair of feature maps, shaped `[N, C, 1, 1]`.
    pub fn channel_gate(&self, g: &mut Graph, fa: Var, fb: Var) -> Result<Var> {
        let (fc1, fc2) = self.layers.channel.ok_or_else(|| Error::InvalidArgument("network has no attention".into()))?;
        if g.value(fa).shape() != g.value(fb).shape() {
            return Err(Error::shape(
                "channel_attention",
                format!("{:?} vs {:?}", g.value(fa).shape(), g.value(fb).shape()),
            ));
        }
        let (n, c, _, _) = g.value(fa).dims4("channel_attention")?;
        let za = g.global_avg_pool(fa)?;
        let zb = g.global_avg_pool(fb)?;
        let j = g.mul(za, zb)?;
        let j = g.reshape(j, &[n, c])?;
        let (w1, b1) = (g.param(&self.store, fc1.w), g.param(&self.store, fc1.b));
        let h = g.fully_connected(j, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(&self.store, fc2.w), g.param(&self.store, fc2.b));
        let z = g.fully_connected(h, w2, Some(b2))?;
        let gate = g.sigmoid(z);
        g.reshape(gate, &[n, c, 1, 1])
    }

    /// Spatial gate `[N, 1, h, w]` of one feature map.
    pub fn spatial_gate(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let c = self.layers.spatial.ok_or_else(|| Error::InvalidArgument("network has no spatial attention".into()))?;
        let mm = g.channel_mean_max(f)?;
        let s = self.conv(g, mm, c)?;
        Ok(g.sigmoid(s))
    }

    fn decode(&self, g: &mut Graph, enc: Encoded, out_h: usize, out_w: usize) -> Result<Var> {
        let mut h = self.conv_relu(g, enc.features, self.layers.dec_in)?;
        let (_, _, sh, sw) = g.value(enc.skip).dims4("decoder")?;
        for &c in &self.layers.dec_up {
            let (_, _, ch, cw) = g.value(h).dims4("decoder")?;
            let up = g.bilinear_upsample(h, (ch * 2).min(sh), (cw * 2).min(sw))?;
            h = self.conv_relu(g, up, c)?;
        }
        let up = g.bilinear_upsample(h, sh, sw)?;
        let cat = g.concat_channels(up, enc.skip)?;
        let h = self.conv_relu(g, cat, self.layers.dec_skip)?;
        let logits = self.conv(g, h, self.layers.head)?;
        g.bilinear_upsample(logits, out_h, out_w)
    }

    /// Logits `[N, 2, H, W]` for both members of a pair batch. Channel 1 is
    /// foreground.
    pub fn forward_pair(&self, g: &mut Graph, a: Var, b: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = g.value(a).dims4("forward_siamese")?;
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::shape("forward_siamese", "pair members must share a shape"));
        }
        let mut ea = self.encode(g, a)?;
        let mut eb = self.encode(g, b)?;
        if self.config.attention != AttentionKind::None {
            let gate = self.channel_gate(g, ea.features, eb.features)?;
            ea.features = g.mul(ea.features, gate)?;
            eb.features = g.mul(eb.features, gate)?;
            if self.config.attention == AttentionKind::ChannelSpatial {
                let sa = self.spatial_gate(g, ea.features)?;
                let sb = self.spatial_gate(g, eb.features)?;
                ea.features = g.mul(ea.features, sa)?;
                eb.features = g.mul(eb.features, sb)?;
            }
        }
        Ok((self.decode(g, ea, h, w)?, self.decode(g, eb, h, w)?))
    }

    /// Logits for independent images; attention is skipped.
    pub fn forward_single(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4("forward_single")?;
        let e = self.encode(g, x)?;
        self.decode(g, e, h, w)
    }

    /// Foreground probability maps for a pair batch.
    pub fn predict_pair(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let (la, lb) = self.forward_pair(&mut g, va, vb)?;
        Ok((foreground_prob(g.value(la))?, foreground_prob(g.value(lb))?))
    }

    pub fn predict_single(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let l = self.forward_single(&mut g, v)?;
        foreground_prob(g.value(l))
    }
}

/// Channel-1 softmax probability, shaped `[N, 1, H, W]`.
pub fn foreground_prob(logits: &Tensor) -> Result<Tensor> {
    let p = crate::nn::graph::softmax_channels(logits)?;
    let (n, c, h, w) = p.dims4("foreground_prob")?;
    if c != 2 {
        return Err(Error::shape("foreground_prob", format!("expected 2 class channels, got {c}")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        out.extend_from_slice(&p.data()[(i * 2 + 1) * hw..(i * 2 + 2) * hw]);
    }
    Tensor::new(vec![n, 1, h, w], out)
}
