//! Prompt encoder, two-way mask decoder and the three-channel instance head,
//! composed with the image encoder into one model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Component, Init, ParamId, ParamStore, Role};
use crate::peft::{self, PeftConfig};
use crate::tensor::{Float, NdArray};
use crate::vit::{attention, layer_norm, Builder, Encoder, Linear, Norm, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Output channels of the four upsampling blocks.
    pub channels: [usize; 4],
    /// Channels of the projected encoder output fed to blocks 2..4.
    pub skip_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub vit: VitConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "toy" => Self {
                preset: name.into(),
                vit: VitConfig::toy(),
                decoder: DecoderConfig {
                    token_dim: 32,
                    heads: 2,
                    layers: 2,
                    mlp_dim: 64,
                },
                head: HeadConfig {
                    channels: [32, 16, 16, 8],
                    skip_channels: 8,
                },
            },
            "vit-b-shape" => Self {
                preset: name.into(),
                vit: VitConfig::vit_b_shape(),
                decoder: DecoderConfig {
                    token_dim: 256,
                    heads: 8,
                    layers: 2,
                    mlp_dim: 2048,
                },
                head: HeadConfig {
                    channels: [256, 128, 64, 32],
                    skip_channels: 64,
                },
            },
            // Smallest configuration exercising every component.
            "micro" => Self {
                preset: name.into(),
                vit: VitConfig {
                    image_size: 32,
                    patch_size: 16,
                    embed_dim: 16,
                    depth: 2,
                    heads: 2,
                    mlp_ratio: 2,
                    neck_dim: 8,
                    in_channels: 1,
                },
                decoder: DecoderConfig {
                    token_dim: 8,
                    heads: 2,
                    layers: 1,
                    mlp_dim: 16,
                },
                head: HeadConfig {
                    channels: [8, 4, 4, 4],
                    skip_channels: 2,
                },
            },
            _ => return Err(Error::Config(format!("unknown preset {name:?} (toy, vit-b-shape, micro)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Presets too large to materialize; only parameter counting applies.
    pub fn count_only(&self) -> bool {
        self.preset == "vit-b-shape"
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let d = &self.decoder;
        if d.token_dim != self.vit.neck_dim {
            return Err(Error::Config(format!(
                "decoder token dim {} must equal encoder neck dim {}",
                d.token_dim, self.vit.neck_dim
            )));
        }
        if d.heads == 0 || !d.token_dim.is_multiple_of(d.heads) || !d.token_dim.is_multiple_of(8) || d.layers == 0 {
            return Err(Error::Config(format!(
                "decoder token dim {} must be a multiple of 8 and of {} heads",
                d.token_dim, d.heads
            )));
        }
        if self.vit.grid() * 16 != self.vit.image_size {
            return Err(Error::Config(format!(
                "instance head cannot reach {}px from a {}px grid with 4 doublings",
                self.vit.image_size,
                self.vit.grid()
            )));
        }
        if self.head.channels.contains(&0) || self.head.skip_channels == 0 {
            return Err(Error::Config("instance head channels must be positive".into()));
        }
        Ok(())
    }
}

/// Point and box prompts in pixel coordinates `(row, col)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
    /// `(r0, c0, r1, c1)`, inclusive.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

impl PromptSet {
    pub fn point(p: (usize, usize)) -> Self {
        Self {
            positive: vec![p],
            ..Self::default()
        }
    }

    pub fn bbox(b: (usize, usize, usize, usize)) -> Self {
        Self {
            bbox: Some(b),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len() + if self.bbox.is_some() { 2 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        let inside = |&(r, c): &(usize, usize)| r < size && c < size;
        if let Some(p) = self.positive.iter().chain(&self.negative).find(|p| !inside(p)) {
            return Err(Error::Config(format!("prompt point {p:?} outside {size}x{size} image")));
        }
        if let Some((r0, c0, r1, c1)) = self.bbox {
            if r0 > r1 || c0 > c1 || r1 >= size || c1 >= size {
                return Err(Error::Config(format!(
                    "box {:?} invalid for {size}x{size} image",
                    (r0, c0, r1, c1)
                )));
            }
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of normalized `(y, x)` in `[0, 1]`.
pub fn sinusoidal_pe(y: f64, x: f64, dim: usize) -> Vec<f64> {
    let nf = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [x, y] {
        for f in 0..nf {
            let w = std::f64::consts::TAU * 2f64.powf(f as f64 / 2.0);
            out.push((w * coord).sin());
        }
        for f in 0..nf {
            let w = std::f64::consts::TAU * 2f64.powf(f as f64 / 2.0);
            out.push((w * coord).cos());
        }
    }
    out
}

fn pixel_pe(r: usize, c: usize, size: usize, dim: usize) -> Vec<f64> {
    sinusoidal_pe((r as f64 + 0.5) / size as f64, (c as f64 + 0.5) / size as f64, dim)
}

pub const LABEL_POSITIVE: usize = 0;
pub const LABEL_NEGATIVE: usize = 1;
pub const LABEL_BOX_START: usize = 2;
pub const LABEL_BOX_END: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct PromptEncoder {
    /// Learned label embeddings `[4, D]`: positive, negative, box corners.
    pub labels: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    /// The fixed positional part and the label index of every token.
    pub fn token_layout(&self, prompts: &PromptSet, image_size: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut pe = Vec::new();
        let mut labels = Vec::new();
        for &(r, c) in &prompts.positive {
            pe.push(pixel_pe(r, c, image_size, self.dim));
            labels.push(LABEL_POSITIVE);
        }
        for &(r, c) in &prompts.negative {
            pe.push(pixel_pe(r, c, image_size, self.dim));
            labels.push(LABEL_NEGATIVE);
        }
        if let Some((r0, c0, r1, c1)) = prompts.bbox {
            pe.push(pixel_pe(r0, c0, image_size, self.dim));
            labels.push(LABEL_BOX_START);
            pe.push(pixel_pe(r1, c1, image_size, self.dim));
            labels.push(LABEL_BOX_END);
        }
        (pe, labels)
    }

    /// `[k, D]` prompt tokens.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, prompts: &PromptSet, image_size: usize) -> Result<Var> {
        prompts.validate(image_size)?;
        tape.set_region("prompt-encoder");
        let (pe, labels) = self.token_layout(prompts, image_size);
        let k = labels.len();
        let pe = NdArray::new(vec![k, self.dim], pe.into_iter().flatten().map(T::of).collect())?;
        let pe = tape.input(pe);
        let table = tape.param(store, self.labels)?;
        let rows = labels
            .iter()
            .map(|&l| tape.slice(table, 0, l, l + 1))
            .collect::<Result<Vec<_>>>()?;
        let lab = tape.concat(&rows, 0)?;
        tape.add(pe, lab)
    }
}

#[derive(Debug, Clone)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attn {
    fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, region: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{name}.q"), region, d, d, true, true)?,
            k: b.linear(&format!("{name}.k"), region, d, d, true, true)?,
            v: b.linear(&format!("{name}.v"), region, d, d, true, true)?,
            o: b.linear(&format!("{name}.o"), region, d, d, true, true)?,
            heads,
        })
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let split = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
            let x = tape.reshape(x, &[n, self.heads, d / self.heads])?;
            tape.permute(x, &[1, 0, 2])
        };
        let qp = peft::linear_forward(tape, store, q, &self.q, None)?;
        let kp = peft::linear_forward(tape, store, k, &self.k, None)?;
        let vp = peft::linear_forward(tape, store, v, &self.v, None)?;
        let (qh, kh, vh) = (split(tape, qp)?, split(tape, kp)?, split(tape, vp)?);
        let o = attention(tape, qh, kh, vh)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let n = tape.shape(o)[0];
        let d = self.q.d_out;
        let o = tape.reshape(o, &[n, d])?;
        peft::linear_forward(tape, store, o, &self.o, None)
    }
}

#[derive(Debug, Clone)]
pub struct TwoWayLayer {
    pub self_attn: Attn,
    pub norm1: Norm,
    pub token_to_image: Attn,
    pub norm2: Norm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub norm3: Norm,
    pub image_to_token: Attn,
    pub norm4: Norm,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub output_token: ParamId,
    pub layers: Vec<TwoWayLayer>,
    pub final_attn: Attn,
    pub final_norm: Norm,
    pub up1: (ParamId, ParamId),
    pub up2: (ParamId, ParamId),
    pub hyper1: Linear,
    pub hyper2: Linear,
}

fn add_bias_chw<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, b: ParamId) -> Result<Var> {
    let b = tape.param(store, b)?;
    let c = tape.shape(b)[0];
    let b = tape.reshape(b, &[c, 1, 1])?;
    tape.add(x, b)
}

impl MaskDecoder {
    fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, cfg: DecoderConfig) -> Result<Self> {
        let r = "decoder";
        let d = cfg.token_dim;
        let h = cfg.heads;
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let n = format!("mask_decoder.layers.{i}");
            layers.push(TwoWayLayer {
                self_attn: Attn::build(b, &format!("{n}.self_attn"), r, d, h)?,
                norm1: b.norm(&format!("{n}.norm1"), r, d)?,
                token_to_image: Attn::build(b, &format!("{n}.cross_token_to_image"), r, d, h)?,
                norm2: b.norm(&format!("{n}.norm2"), r, d)?,
                mlp1: b.linear(&format!("{n}.mlp.lin1"), r, d, cfg.mlp_dim, true, false)?,
                mlp2: b.linear(&format!("{n}.mlp.lin2"), r, cfg.mlp_dim, d, true, false)?,
                norm3: b.norm(&format!("{n}.norm3"), r, d)?,
                image_to_token: Attn::build(b, &format!("{n}.cross_image_to_token"), r, d, h)?,
                norm4: b.norm(&format!("{n}.norm4"), r, d)?,
            });
        }
        let (c1, c2) = (d / 4, d / 8);
        Ok(Self {
            cfg,
            output_token: b.add("mask_decoder.output_token", r, &[1, d], Role::Embedding, false, Init::Normal(1.0))?,
            layers,
            final_attn: Attn::build(b, "mask_decoder.final_attn", r, d, h)?,
            final_norm: b.norm("mask_decoder.final_norm", r, d)?,
            up1: (
                b.add("mask_decoder.upscale.0.weight", r, &[d, c1, 2, 2], Role::Weight, false, Init::fan_in(d))?,
                b.add("mask_decoder.upscale.0.bias", r, &[c1], Role::Bias, false, Init::Zeros)?,
            ),
            up2: (
                b.add("mask_decoder.upscale.1.weight", r, &[c1, c2, 2, 2], Role::Weight, false, Init::fan_in(c1))?,
                b.add("mask_decoder.upscale.1.bias", r, &[c2], Role::Bias, false, Init::Zeros)?,
            ),
            hyper1: b.linear("mask_decoder.hyper.lin1", r, d, d, true, false)?,
            hyper2: b.linear("mask_decoder.hyper.lin2", r, d, c2, true, false)?,
        })
    }

    fn dense_pe(&self, grid: usize) -> NdArray<f64> {
        let d = self.cfg.token_dim;
        let mut data = Vec::with_capacity(grid * grid * d);
        for i in 0..grid {
            for j in 0..grid {
                data.extend(pixel_pe(i, j, grid, d));
            }
        }
        NdArray::new(vec![grid * grid, d], data).expect("sized above")
    }

    /// Mask logits `[H, W]` from `[D, g, g]` features and `[k, D]` prompts.
    pub fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: Var,
        prompt_tokens: Var,
        image_size: usize,
    ) -> Result<Var> {
        let d = self.cfg.token_dim;
        let fs = tape.shape(feats).to_vec();
        if fs.len() != 3 || fs[0] != d || fs[1] != fs[2] || tape.shape(prompt_tokens).get(1) != Some(&d) {
            return Err(Error::shape(
                "decode_mask",
                format!("features {fs:?}, prompts {:?}, token dim {d}", tape.shape(prompt_tokens)),
            ));
        }
        tape.set_region("decoder");
        let g = fs[1];
        let img = tape.reshape(feats, &[d, g * g])?;
        let mut img = tape.transpose(img)?;
        let ipe = tape.constant(self.dense_pe(g).cast());
        let out_tok = tape.param(store, self.output_token)?;
        let qpe = tape.concat(&[out_tok, prompt_tokens], 0)?;
        let mut t = qpe;
        for l in &self.layers {
            let tq = tape.add(t, qpe)?;
            let a = l.self_attn.forward(tape, store, tq, tq, t)?;
            let s = tape.add(t, a)?;
            t = layer_norm(tape, store, s, l.norm1)?;

            let tq = tape.add(t, qpe)?;
            let ik = tape.add(img, ipe)?;
            let a = l.token_to_image.forward(tape, store, tq, ik, img)?;
            let s = tape.add(t, a)?;
            t = layer_norm(tape, store, s, l.norm2)?;

            let m = peft::linear_forward(tape, store, t, &l.mlp1, None)?;
            let m = tape.relu(m)?;
            let m = peft::linear_forward(tape, store, m, &l.mlp2, None)?;
            let s = tape.add(t, m)?;
            t = layer_norm(tape, store, s, l.norm3)?;

            let tq = tape.add(t, qpe)?;
            let ik = tape.add(img, ipe)?;
            let a = l.image_to_token.forward(tape, store, ik, tq, t)?;
            let s = tape.add(img, a)?;
            img = layer_norm(tape, store, s, l.norm4)?;
        }
        let tq = tape.add(t, qpe)?;
        let ik = tape.add(img, ipe)?;
        let a = self.final_attn.forward(tape, store, tq, ik, img)?;
        let s = tape.add(t, a)?;
        t = layer_norm(tape, store, s, self.final_norm)?;

        let x = tape.transpose(img)?;
        let x = tape.reshape(x, &[d, g, g])?;
        let w1 = tape.param(store, self.up1.0)?;
        let x = tape.conv_transpose2d(x, w1)?;
        let x = add_bias_chw(tape, store, x, self.up1.1)?;
        let x = tape.gelu(x)?;
        let w2 = tape.param(store, self.up2.0)?;
        let x = tape.conv_transpose2d(x, w2)?;
        let x = add_bias_chw(tape, store, x, self.up2.1)?;
        let x = tape.gelu(x)?;
        let (c2, s4) = (d / 8, 4 * g);
        let x = tape.reshape(x, &[c2, s4 * s4])?;

        let tok = tape.slice(t, 0, 0, 1)?;
        let h = peft::linear_forward(tape, store, tok, &self.hyper1, None)?;
        let h = tape.relu(h)?;
        let h = peft::linear_forward(tape, store, h, &self.hyper2, None)?;
        let m = tape.matmul(h, x)?;
        let m = tape.reshape(m, &[1, s4, s4])?;
        let m = tape.upsample_bilinear(m, image_size, image_size)?;
        tape.reshape(m, &[image_size, image_size])
    }
}

#[derive(Debug, Clone)]
pub struct HeadBlock {
    /// 1x1 projection of the encoder output, `[skip, neck, 1, 1]`.
    pub skip: Option<ParamId>,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct InstanceHead {
    pub cfg: HeadConfig,
    pub blocks: Vec<HeadBlock>,
    pub out_conv: (ParamId, ParamId),
    pub out_proj: (ParamId, ParamId),
}

pub const CH_CENTER: usize = 0;
pub const CH_BOUNDARY: usize = 1;
pub const CH_FOREGROUND: usize = 2;

/// Gives all four taps of a 2x2 transposed-convolution kernel the same
/// value, so the layer starts as a nearest-neighbour upsampling followed by
/// a 1x1 mixing and cannot emit a checkerboard at init.
fn tie_subpixels<T: Float>(store: &mut ParamStore<T>, id: ParamId) -> Result<()> {
    if store.is_virtual() {
        return Ok(());
    }
    for k in store.dense_mut(id)?.data_mut().chunks_mut(4) {
        let v = k[0];
        k.fill(v);
    }
    Ok(())
}

impl InstanceHead {
    fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, cfg: HeadConfig, neck: usize, in_ch: usize) -> Result<Self> {
        let r = "head";
        let ch = cfg.channels;
        let s = cfg.skip_channels;
        let conv = |b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize, k: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                b.add(&format!("{name}.weight"), r, &[cout, cin, k, k], Role::Weight, false, Init::fan_in(cin * k * k))?,
                b.add(&format!("{name}.bias"), r, &[cout], Role::Bias, false, Init::Zeros)?,
            ))
        };
        let mut blocks = Vec::new();
        for k in 0..4 {
            let n = format!("instance_head.blocks.{k}");
            let (skip, cin) = if k == 0 {
                (None, neck)
            } else {
                let w = b.add(&format!("{n}.skip.weight"), r, &[s, neck, 1, 1], Role::Weight, false, Init::fan_in(neck))?;
                (Some(w), ch[k] + s)
            };
            let cout_up = if k < 3 { ch[k + 1] } else { ch[3] };
            let conv1 = conv(b, &format!("{n}.conv1"), cin, ch[k], 3)?;
            let conv2 = conv(b, &format!("{n}.conv2"), ch[k], ch[k], 3)?;
            let up = (
                b.add(&format!("{n}.up.weight"), r, &[ch[k], cout_up, 2, 2], Role::Weight, false, Init::fan_in(ch[k]))?,
                b.add(&format!("{n}.up.bias"), r, &[cout_up], Role::Bias, false, Init::Zeros)?,
            );
            tie_subpixels(b.store, up.0)?;
            blocks.push(HeadBlock { skip, conv1, conv2, up });
        }
        let out_conv = conv(b, "instance_head.out_conv", ch[3] + in_ch, ch[3], 3)?;
        let out_proj = conv(b, "instance_head.out_proj", ch[3], 3, 1)?;
        Ok(Self {
            cfg,
            blocks,
            out_conv,
            out_proj,
        })
    }

    fn conv<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, p: (ParamId, ParamId), pad: usize) -> Result<Var> {
        let w = tape.param(store, p.0)?;
        let y = tape.conv2d(x, w, 1, pad)?;
        add_bias_chw(tape, store, y, p.1)
    }

    /// `[3, H, W]` sigmoid outputs: center distance, boundary distance,
    /// foreground.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: Var, image: Var) -> Result<Var> {
        tape.set_region("head");
        let mut x = feats;
        for (k, blk) in self.blocks.iter().enumerate() {
            if let Some(skip) = blk.skip {
                let w = tape.param(store, skip)?;
                let s = tape.conv2d(feats, w, 1, 0)?;
                let s = tape.upsample_nearest(s, 1 << k)?;
                x = tape.concat(&[x, s], 0)?;
            }
            x = Self::conv(tape, store, x, blk.conv1, 1)?;
            x = tape.relu(x)?;
            x = Self::conv(tape, store, x, blk.conv2, 1)?;
            x = tape.relu(x)?;
            let w = tape.param(store, blk.up.0)?;
            x = tape.conv_transpose2d(x, w)?;
            x = add_bias_chw(tape, store, x, blk.up.1)?;
        }
        if tape.shape(x)[1..] != tape.shape(image)[1..] {
            return Err(Error::shape(
                "instance_head",
                format!("head output {:?} vs image {:?}", tape.shape(x), tape.shape(image)),
            ));
        }
        let x = tape.concat(&[x, image], 0)?;
        let x = Self::conv(tape, store, x, self.out_conv, 1)?;
        let x = tape.relu(x)?;
        let x = Self::conv(tape, store, x, self.out_proj, 0)?;
        tape.sigmoid(x)
    }
}

/// Model structure; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub peft: Option<PeftConfig>,
    pub encoder: Encoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub head: InstanceHead,
}

impl Arch {
    pub fn image_size(&self) -> usize {
        self.cfg.vit.image_size
    }

    /// `[neck, g, g]` image features.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        self.encoder.encode_image(tape, store, image)
    }

    pub fn mask_logits<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: Var, prompts: &PromptSet) -> Result<Var> {
        let toks = self.prompt.encode(tape, store, prompts, self.image_size())?;
        self.decoder.decode(tape, store, feats, toks, self.image_size())
    }

    pub fn instance_output<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: Var, image: Var) -> Result<Var> {
        self.head.forward(tape, store, feats, image)
    }
}

/// Structure plus parameter values.
#[derive(Debug, Clone)]
pub struct SamLite<T> {
    pub arch: Arch,
    pub store: ParamStore<T>,
}

impl<T: Float> SamLite<T> {
    /// Builds the base model and, when given, applies a PEFT method. Base
    /// weights depend only on `cfg` and `seed`.
    pub fn build(cfg: ModelConfig, peft_cfg: Option<&PeftConfig>, seed: u64) -> Result<Self> {
        let base = Self::build_base(cfg, seed)?;
        match peft_cfg {
            Some(p) => base.adapt(p, seed),
            None => Ok(base),
        }
    }

    /// The model without adapters; every parameter is trainable.
    pub fn build_base(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = if cfg.count_only() {
            ParamStore::new_virtual()
        } else {
            ParamStore::new()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::build(cfg.vit, &mut store, &mut rng)?;
        let d = cfg.decoder.token_dim;
        let (prompt, decoder) = {
            let mut b = Builder {
                store: &mut store,
                rng: &mut rng,
                component: Component::PromptEncoder,
            };
            let labels = b.add("prompt_encoder.labels", "prompt-encoder", &[4, d], Role::Embedding, false, Init::Normal(1.0))?;
            b.component = Component::MaskDecoder;
            (PromptEncoder { labels, dim: d }, MaskDecoder::build(&mut b, cfg.decoder)?)
        };
        let head = {
            let mut b = Builder {
                store: &mut store,
                rng: &mut rng,
                component: Component::InstanceHead,
            };
            InstanceHead::build(&mut b, cfg.head.clone(), cfg.vit.neck_dim, cfg.vit.in_channels)?
        };
        Ok(Self {
            arch: Arch {
                cfg,
                peft: None,
                encoder,
                prompt,
                decoder,
                head,
            },
            store,
        })
    }

    /// Applies a PEFT method to a base model. Adapter initialization is
    /// drawn from a stream derived from `seed`, independent of the base.
    pub fn adapt(mut self, peft_cfg: &PeftConfig, seed: u64) -> Result<Self> {
        if let Some(p) = &self.arch.peft {
            return Err(Error::Config(format!("model already adapted with {}", p.method)));
        }
        let mut arng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
        peft::apply_peft(&mut self.arch.encoder, &mut self.store, peft_cfg, &mut arng)?;
        self.arch.peft = Some(peft_cfg.clone());
        Ok(self)
    }

    /// Overwrites parameters with same-named dense values from `other`.
    /// Fails if `other` lacks a parameter of this model or shapes differ.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.meta(id).name.clone();
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Config(format!("weights lack parameter {name}")))?;
            self.store.set_dense(id, (**other.dense(src)?).clone())?;
        }
        Ok(())
    }

    pub fn image_input(&self, tape: &mut Tape<T>, image: &NdArray<f32>) -> Result<Var> {
        let v = &self.arch.cfg.vit;
        let want = [v.in_channels, v.image_size, v.image_size];
        if image.shape() != want {
            return Err(Error::shape("image", format!("{:?}, model expects {want:?}", image.shape())));
        }
        Ok(tape.input(image.cast()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_upsamplers_start_without_a_checkerboard() {
        let m = SamLite::<f32>::build_base(ModelConfig::preset("micro").unwrap(), 0).unwrap();
        let mut seen = 0;
        for id in m.store.ids().filter(|&id| m.store.meta(id).name.ends_with(".up.weight")) {
            for taps in m.store.dense(id).unwrap().data().chunks(4) {
                assert!(taps.iter().all(|&v| v == taps[0]));
            }
            seen += 1;
        }
        assert_eq!(seen, 4);
    }

    #[test]
    fn prompts_outside_the_image_are_rejected() {
        assert!(PromptSet::point((3, 40)).validate(32).is_err());
        assert!(PromptSet::bbox((5, 5, 2, 9)).validate(32).is_err());
        assert!(PromptSet::bbox((0, 0, 31, 31)).validate(32).is_ok());
    }
}
