//! Plain ViT image encoder: patch embedding, pre-norm blocks with fused-QKV
//! global attention, and a two-convolution neck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Component, Init, ParamId, ParamMeta, ParamStore, Role};
use crate::peft::{self, AdaptFormerModule, FactShared, LinearAdapters, SsfSlot};
use crate::tensor::Float;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub neck_dim: usize,
    pub in_channels: usize,
}

impl VitConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            neck_dim: 32,
            in_channels: 1,
        }
    }

    /// SAM ViT-B geometry with plain global attention.
    pub fn vit_b_shape() -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            neck_dim: 256,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.neck_dim == 0 || self.in_channels == 0 {
            return bad("depth, mlp ratio, neck dim and channels must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Dense layer `y = x W + b` with `W` stored as `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub adapters: LinearAdapters,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ssf_norm1: Option<SsfSlot>,
    pub ssf_norm2: Option<SsfSlot>,
    pub adaptformer: Option<AdaptFormerModule>,
}

impl Block {
    pub fn region(&self) -> String {
        block_region(self.index)
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.qkv, &self.proj, &self.fc1, &self.fc2]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.qkv, &mut self.proj, &mut self.fc1, &mut self.fc2]
    }
}

pub fn block_region(k: usize) -> String {
    format!("encoder-block-{k}")
}

#[derive(Debug, Clone, Copy)]
pub struct Neck {
    /// 1x1 convolution as a `[d, neck]` matrix, no bias.
    pub proj: ParamId,
    pub ln1: Norm,
    /// 3x3 convolution `[neck, neck, 3, 3]`, no bias.
    pub conv: ParamId,
    pub ln2: Norm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: VitConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub neck: Neck,
    pub fact: Option<FactShared>,
}

pub(crate) struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub component: Component,
}

impl<T: Float, R: Rng + ?Sized> Builder<'_, T, R> {
    pub fn add(
        &mut self,
        name: &str,
        region: &str,
        shape: &[usize],
        role: Role,
        attention: bool,
        init: Init,
    ) -> Result<ParamId> {
        self.store.add(
            ParamMeta {
                name: name.to_string(),
                shape: shape.to_vec(),
                role,
                attention,
                component: self.component,
                region: region.to_string(),
                trainable: true,
            },
            init,
            self.rng,
        )
    }

    pub fn linear(&mut self, name: &str, region: &str, d_in: usize, d_out: usize, bias: bool, attention: bool) -> Result<Linear> {
        let w = self.add(&format!("{name}.weight"), region, &[d_in, d_out], Role::Weight, attention, Init::fan_in(d_in))?;
        let b = if bias {
            Some(self.add(&format!("{name}.bias"), region, &[d_out], Role::Bias, attention, Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear {
            name: name.to_string(),
            w,
            b,
            d_in,
            d_out,
            adapters: LinearAdapters::default(),
        })
    }

    pub fn norm(&mut self, name: &str, region: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.add(&format!("{name}.weight"), region, &[dim], Role::Norm, false, Init::Ones)?,
            b: self.add(&format!("{name}.bias"), region, &[dim], Role::Norm, false, Init::Zeros)?,
            dim,
        })
    }
}

impl Encoder {
    pub fn build<T: Float, R: Rng + ?Sized>(cfg: VitConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut b = Builder {
            store,
            rng,
            component: Component::Encoder,
        };
        let p = cfg.patch_size;
        let fan = cfg.in_channels * p * p;
        let patch_w = b.add("encoder.patch_embed.weight", "patch-embed", &[d, cfg.in_channels, p, p], Role::Weight, false, Init::fan_in(fan))?;
        let patch_b = b.add("encoder.patch_embed.bias", "patch-embed", &[d], Role::Bias, false, Init::Zeros)?;
        let pos = b.add("encoder.pos_embed", "patch-embed", &[cfg.seq_len(), d], Role::Embedding, false, Init::TruncNormal(0.02))?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for k in 0..cfg.depth {
            let r = block_region(k);
            let n = format!("encoder.blocks.{k}");
            blocks.push(Block {
                index: k,
                norm1: b.norm(&format!("{n}.norm1"), &r, d)?,
                qkv: b.linear(&format!("{n}.attn.qkv"), &r, d, 3 * d, true, true)?,
                proj: b.linear(&format!("{n}.attn.proj"), &r, d, d, true, true)?,
                norm2: b.norm(&format!("{n}.norm2"), &r, d)?,
                fc1: b.linear(&format!("{n}.mlp.fc1"), &r, d, cfg.mlp_dim(), true, false)?,
                fc2: b.linear(&format!("{n}.mlp.fc2"), &r, cfg.mlp_dim(), d, true, false)?,
                ssf_norm1: None,
                ssf_norm2: None,
                adaptformer: None,
            });
        }
        let nd = cfg.neck_dim;
        let neck = Neck {
            proj: b.add("encoder.neck.0.weight", "neck", &[d, nd], Role::Weight, false, Init::fan_in(d))?,
            ln1: b.norm("encoder.neck.1", "neck", nd)?,
            conv: b.add("encoder.neck.2.weight", "neck", &[nd, nd, 3, 3], Role::Weight, false, Init::fan_in(nd * 9))?,
            ln2: b.norm("encoder.neck.3", "neck", nd)?,
        };
        Ok(Self {
            cfg,
            patch_w,
            patch_b,
            pos,
            blocks,
            neck,
            fact: None,
        })
    }

    fn check_image<T: Float>(&self, tape: &Tape<T>, image: Var) -> Result<()> {
        let c = &self.cfg;
        let want = [c.in_channels, c.image_size, c.image_size];
        if tape.shape(image) != want {
            return Err(Error::shape(
                "patch_embed",
                format!("image {:?}, encoder expects {want:?}", tape.shape(image)),
            ));
        }
        Ok(())
    }

    /// `[C,H,W]` image to `[seq, d]` tokens with the positional term added.
    pub fn patch_embed<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        self.check_image(tape, image)?;
        tape.set_region("patch-embed");
        let c = &self.cfg;
        let w = tape.param(store, self.patch_w)?;
        let x = tape.conv2d(image, w, c.patch_size, 0)?;
        let x = tape.reshape(x, &[c.embed_dim, c.seq_len()])?;
        let x = tape.transpose(x)?;
        let b = tape.param(store, self.patch_b)?;
        let x = tape.add(x, b)?;
        let pos = tape.param(store, self.pos)?;
        tape.add(x, pos)
    }

    pub fn block_forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, blk: &Block, x: Var) -> Result<Var> {
        tape.set_region(&blk.region());
        let c = &self.cfg;
        let (seq, d, h) = (tape.shape(x)[0], c.embed_dim, c.heads);
        let dh = d / h;
        let fact = self.fact.as_ref();

        let n1 = layer_norm(tape, store, x, blk.norm1)?;
        let n1 = peft::ssf_apply(tape, store, n1, blk.ssf_norm1.as_ref())?;
        let qkv = peft::linear_forward(tape, store, n1, &blk.qkv, fact)?;
        let qkv = tape.reshape(qkv, &[seq, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
        let q = tape.slice(qkv, 0, 0, 1)?;
        let q = tape.reshape(q, &[h, seq, dh])?;
        let k = tape.slice(qkv, 0, 1, 2)?;
        let k = tape.reshape(k, &[h, seq, dh])?;
        let v = tape.slice(qkv, 0, 2, 3)?;
        let v = tape.reshape(v, &[h, seq, dh])?;
        let o = attention(tape, q, k, v)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let o = tape.reshape(o, &[seq, d])?;
        let o = peft::linear_forward(tape, store, o, &blk.proj, fact)?;
        let x = tape.add(x, o)?;

        let n2 = layer_norm(tape, store, x, blk.norm2)?;
        let n2 = peft::ssf_apply(tape, store, n2, blk.ssf_norm2.as_ref())?;
        let hdn = peft::linear_forward(tape, store, n2, &blk.fc1, fact)?;
        let hdn = tape.gelu(hdn)?;
        let mut m = peft::linear_forward(tape, store, hdn, &blk.fc2, fact)?;
        if let Some(af) = &blk.adaptformer {
            m = peft::adaptformer_forward(tape, store, n2, m, af)?;
        }
        tape.add(x, m)
    }

    /// `[seq, d]` tokens to a `[neck, grid, grid]` feature map.
    pub fn neck_forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        tape.set_region("neck");
        let (g, nd) = (self.cfg.grid(), self.cfg.neck_dim);
        let w = tape.param(store, self.neck.proj)?;
        let y = tape.matmul(x, w)?;
        let y = layer_norm(tape, store, y, self.neck.ln1)?;
        let y = tape.transpose(y)?;
        let y = tape.reshape(y, &[nd, g, g])?;
        let w2 = tape.param(store, self.neck.conv)?;
        let y = tape.conv2d(y, w2, 1, 1)?;
        let y = tape.reshape(y, &[nd, g * g])?;
        let y = tape.transpose(y)?;
        let y = layer_norm(tape, store, y, self.neck.ln2)?;
        let y = tape.transpose(y)?;
        tape.reshape(y, &[nd, g, g])
    }

    pub fn encode_image<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let mut x = self.patch_embed(tape, store, image)?;
        for blk in &self.blocks {
            x = self.block_forward(tape, store, blk, x)?;
            if !tape.value(x).all_finite() {
                return Err(Error::NonFinite(format!("output of {}", blk.region())));
            }
        }
        self.neck_forward(tape, store, x)
    }
}

pub(crate) fn layer_norm<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, n: Norm) -> Result<Var> {
    let g = tape.param(store, n.g)?;
    let b = tape.param(store, n.b)?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Scaled dot-product attention over `[h, n, dh]` queries and `[h, m, dh]`
/// keys/values.
pub fn attention<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let s = tape.batch_matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    let a = tape.softmax(s)?;
    tape.batch_matmul(a, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NdArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize) -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            neck_dim: 4,
            in_channels: 1,
        }
    }

    fn image() -> NdArray<f64> {
        NdArray::from_fn(&[1, 16, 16], |i| ((i * 7919) % 31) as f64 / 31.0)
    }

    #[test]
    fn sequence_length_follows_the_patch_grid() {
        assert_eq!(tiny(1).seq_len(), 16);
        assert_eq!(VitConfig::vit_b_shape().seq_len(), 4096);
        let bad = VitConfig { patch_size: 5, ..tiny(1) };
        assert!(bad.validate().is_err());
        let bad = VitConfig { heads: 3, ..tiny(1) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_is_the_composition_of_its_parts() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::build(tiny(1), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut t = Tape::inference();
        let x = t.input(image());
        let whole = enc.encode_image(&mut t, &store, x).unwrap();
        let mut u = Tape::inference();
        let x = u.input(image());
        let p = enc.patch_embed(&mut u, &store, x).unwrap();
        let b = enc.block_forward(&mut u, &store, &enc.blocks[0], p).unwrap();
        let n = enc.neck_forward(&mut u, &store, b).unwrap();
        assert_eq!(t.value(whole).data(), u.value(n).data());
        assert_eq!(t.shape(whole), &[4, 4, 4]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut t = Tape::<f64>::inference();
        let q = t.input(NdArray::from_fn(&[2, 5, 3], |i| (i as f64 * 0.37).sin()));
        let k = t.input(NdArray::from_fn(&[2, 7, 3], |i| (i as f64 * 0.91).cos()));
        let ones = t.input(NdArray::from_fn(&[2, 7, 1], |_| 1.0));
        // attention against a constant value column returns each row's sum
        let o = attention(&mut t, q, k, ones).unwrap();
        for v in t.value(o).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
