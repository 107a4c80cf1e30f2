//! Parameter-efficient finetuning: selective unfreezing, low-rank and
//! bottleneck adapters, scale-shift features, shared-factor tuning, late
//! placement and 4-bit frozen bases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::kernels;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Component, Init, ParamId, ParamStore, Role};
use crate::quant::DEFAULT_BLOCK;
use crate::tensor::{Float, NdArray};
use crate::vit::{block_region, Builder, Encoder, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullFt,
    FreezeEncoder,
    BiasTune,
    LnTune,
    AttnTune,
    Lora,
    Qlora,
    Adaptformer,
    Ssf,
    Fact,
    LateFt,
    LateLora,
    LateQlora,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::FullFt,
        Method::FreezeEncoder,
        Method::BiasTune,
        Method::LnTune,
        Method::AttnTune,
        Method::Lora,
        Method::Qlora,
        Method::Adaptformer,
        Method::Ssf,
        Method::Fact,
        Method::LateFt,
        Method::LateLora,
        Method::LateQlora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFt => "full_ft",
            Method::FreezeEncoder => "freeze_encoder",
            Method::BiasTune => "bias_tune",
            Method::LnTune => "ln_tune",
            Method::AttnTune => "attn_tune",
            Method::Lora => "lora",
            Method::Qlora => "qlora",
            Method::Adaptformer => "adaptformer",
            Method::Ssf => "ssf",
            Method::Fact => "fact",
            Method::LateFt => "late_ft",
            Method::LateLora => "late_lora",
            Method::LateQlora => "late_qlora",
        }
    }

    pub fn is_late(self) -> bool {
        matches!(self, Method::LateFt | Method::LateLora | Method::LateQlora)
    }

    pub fn is_lora(self) -> bool {
        matches!(self, Method::Lora | Method::Qlora | Method::LateLora | Method::LateQlora)
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, Method::Qlora | Method::LateQlora)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Adapter output scale: a fixed constant or a learned scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    Learned,
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Fixed(v) => s.serialize_f64(*v),
            Alpha::Learned => s.serialize_str("learned"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Alpha::Fixed(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("learned") {
            return Ok(Alpha::Learned);
        }
        s.parse::<f64>()
            .map(Alpha::Fixed)
            .map_err(|_| Error::Config(format!("alpha must be a number or \"learned\", got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScope {
    /// Query and value slices of the fused QKV projection.
    Classic,
    /// Fused QKV, attention output projection and both MLP layers.
    All,
}

impl FromStr for LoraScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classic" => Ok(LoraScope::Classic),
            "all" => Ok(LoraScope::All),
            _ => Err(Error::Config(format!("lora scope must be classic or all, got {s:?}"))),
        }
    }
}

/// Method plus the hyperparameters it accepts. Unset fields take the
/// method's defaults; setting a field the method does not use is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Alpha>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scope: Option<LoraScope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub late_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_block: Option<usize>,
}

impl PeftConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rank: None,
            alpha: None,
            lora_scope: None,
            projection_size: None,
            dropout: None,
            late_fraction: None,
            quant_bits: None,
            quant_block: None,
        }
    }

    pub fn with_rank(mut self, r: usize) -> Self {
        self.rank = Some(r);
        self
    }

    pub fn with_alpha(mut self, a: Alpha) -> Self {
        self.alpha = Some(a);
        self
    }

    pub fn with_scope(mut self, s: LoraScope) -> Self {
        self.lora_scope = Some(s);
        self
    }

    pub fn with_projection(mut self, p: usize) -> Self {
        self.projection_size = Some(p);
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = Some(p);
        self
    }

    pub fn with_late_fraction(mut self, f: f64) -> Self {
        self.late_fraction = Some(f);
        self
    }

    pub fn with_quant_block(mut self, b: usize) -> Self {
        self.quant_block = Some(b);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let reject = |field: &str| Err(Error::Config(format!("{field} does not apply to method {m}")));
        let uses_rank = m.is_lora() || m == Method::Fact;
        if self.rank.is_some() && !uses_rank {
            return reject("rank");
        }
        if self.alpha.is_some() && !(uses_rank || m == Method::Adaptformer) {
            return reject("alpha");
        }
        if self.lora_scope.is_some() && !uses_rank {
            return reject("lora_scope");
        }
        if self.projection_size.is_some() && m != Method::Adaptformer {
            return reject("projection_size");
        }
        if self.dropout.is_some() && !matches!(m, Method::Adaptformer | Method::Fact) {
            return reject("dropout");
        }
        if self.late_fraction.is_some() && !m.is_late() {
            return reject("late_fraction");
        }
        if (self.quant_bits.is_some() || self.quant_block.is_some()) && !m.is_quantized() {
            return reject("quantization settings");
        }
        if self.rank == Some(0) || self.projection_size == Some(0) || self.quant_block == Some(0) {
            return Err(Error::Config("rank, projection size and quant block must be positive".into()));
        }
        if let Some(Alpha::Fixed(a)) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
            }
        }
        if let Some(f) = self.late_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("late fraction must lie in (0, 1], got {f}")));
            }
        }
        if let Some(b) = self.quant_bits {
            if b != 4 {
                return Err(Error::Config(format!("only 4-bit quantization is supported, got {b}")));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(if self.method == Method::Fact { 16 } else { 32 })
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha.unwrap_or(Alpha::Fixed(1.0))
    }

    pub fn scope(&self) -> LoraScope {
        self.lora_scope.unwrap_or(LoraScope::Classic)
    }

    pub fn projection_size(&self) -> usize {
        self.projection_size.unwrap_or(64)
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or(if self.method == Method::Fact { 0.1 } else { 0.0 })
    }

    pub fn late_fraction(&self) -> f64 {
        self.late_fraction.unwrap_or(0.5)
    }

    pub fn quant_block(&self) -> usize {
        self.quant_block.unwrap_or(DEFAULT_BLOCK)
    }

    /// Blocks that are adapted or unfrozen.
    pub fn adapted_blocks(&self, depth: usize) -> std::ops::Range<usize> {
        if self.method.is_late() {
            late_range(self.late_fraction(), depth)
        } else {
            0..depth
        }
    }
}

/// The last `ceil(fraction * depth)` blocks.
pub fn late_range(fraction: f64, depth: usize) -> std::ops::Range<usize> {
    let n = ((fraction * depth as f64) - 1e-9).ceil().clamp(1.0, depth as f64) as usize;
    depth - n..depth
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaParam {
    Fixed(f64),
    Learned(ParamId),
}

/// `y += alpha * (x A) B` on output columns `cols`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: AlphaParam,
    pub cols: (usize, usize),
}

/// Factors shared by every block: `dW = U Sigma V^T`.
#[derive(Debug, Clone)]
pub struct FactShared {
    pub u: ParamId,
    pub v: ParamId,
    pub alpha: AlphaParam,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct FactSlot {
    pub target: String,
    pub sigma: ParamId,
    pub cols: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct SsfSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Default)]
pub struct LinearAdapters {
    pub lora: Vec<LoraAdapter>,
    pub fact: Vec<FactSlot>,
    pub ssf: Option<SsfSlot>,
}

impl LinearAdapters {
    pub fn is_empty(&self) -> bool {
        self.lora.is_empty() && self.fact.is_empty() && self.ssf.is_none()
    }
}

/// Bottleneck parallel to a block's MLP.
#[derive(Debug, Clone)]
pub struct AdaptFormerModule {
    pub down: Linear,
    pub up: Linear,
    pub alpha: AlphaParam,
    pub dropout: f64,
}

fn alpha_scale<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, y: Var, alpha: AlphaParam) -> Result<Var> {
    match alpha {
        AlphaParam::Fixed(a) => tape.scale(y, a),
        AlphaParam::Learned(id) => {
            let a = tape.param(store, id)?;
            tape.mul(y, a)
        }
    }
}

pub fn lora_delta<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ad: &LoraAdapter) -> Result<Var> {
    let a = tape.param(store, ad.a)?;
    let b = tape.param(store, ad.b)?;
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, b)?;
    alpha_scale(tape, store, xab, ad.alpha)
}

pub fn fact_delta<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    shared: &FactShared,
    slot: &FactSlot,
) -> Result<Var> {
    let u = tape.param(store, shared.u)?;
    let s = tape.param(store, slot.sigma)?;
    let v = tape.param(store, shared.v)?;
    let xu = tape.matmul(x, u)?;
    let xu = tape.dropout(xu, shared.dropout)?;
    let xus = tape.matmul(xu, s)?;
    let vt = tape.transpose(v)?;
    let y = tape.matmul(xus, vt)?;
    alpha_scale(tape, store, y, shared.alpha)
}

/// Places column-range deltas into a zero `[rows, width]` frame.
fn assemble<T: Float>(tape: &mut Tape<T>, mut parts: Vec<(usize, usize, Var)>, rows: usize, width: usize) -> Result<Var> {
    parts.sort_by_key(|p| p.0);
    if parts.len() == 1 && parts[0].0 == 0 && parts[0].1 == width {
        return Ok(parts[0].2);
    }
    let mut pieces = Vec::new();
    let mut at = 0;
    for (start, end, v) in parts {
        if start < at {
            return Err(Error::Config(format!("overlapping adapter columns at {start}")));
        }
        if start > at {
            pieces.push(tape.constant(NdArray::zeros(&[rows, start - at])));
        }
        pieces.push(v);
        at = end;
    }
    if at < width {
        pieces.push(tape.constant(NdArray::zeros(&[rows, width - at])));
    }
    tape.concat(&pieces, 1)
}

/// `x W + b` plus any attached low-rank deltas, then scale-shift.
pub fn linear_forward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    lin: &Linear,
    fact: Option<&FactShared>,
) -> Result<Var> {
    let w = tape.param(store, lin.w)?;
    let mut y = tape.matmul(x, w)?;
    if let Some(b) = lin.b {
        let b = tape.param(store, b)?;
        y = tape.add(y, b)?;
    }
    let mut parts = Vec::new();
    for ad in &lin.adapters.lora {
        parts.push((ad.cols.0, ad.cols.1, lora_delta(tape, store, x, ad)?));
    }
    if !lin.adapters.fact.is_empty() {
        let shared = fact.ok_or_else(|| Error::Config(format!("{} has factor slots but no shared factors", lin.name)))?;
        for slot in &lin.adapters.fact {
            parts.push((slot.cols.0, slot.cols.1, fact_delta(tape, store, x, shared, slot)?));
        }
    }
    if !parts.is_empty() {
        let rows = tape.shape(y)[0];
        let delta = assemble(tape, parts, rows, lin.d_out)?;
        y = tape.add(y, delta)?;
    }
    ssf_apply(tape, store, y, lin.adapters.ssf.as_ref())
}

pub fn ssf_apply<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, y: Var, slot: Option<&SsfSlot>) -> Result<Var> {
    let Some(s) = slot else { return Ok(y) };
    let g = tape.param(store, s.gamma)?;
    let b = tape.param(store, s.beta)?;
    let y = tape.mul(y, g)?;
    tape.add(y, b)
}

/// `mlp_out + alpha * up(relu(down(x)))`.
pub fn adaptformer_forward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    mlp_out: Var,
    m: &AdaptFormerModule,
) -> Result<Var> {
    let h = linear_forward(tape, store, x, &m.down, None)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, m.dropout)?;
    let h = linear_forward(tape, store, h, &m.up, None)?;
    let h = alpha_scale(tape, store, h, m.alpha)?;
    tape.add(mlp_out, h)
}

/// `W + alpha A B` on the adapter's columns.
pub fn merge_lora<T: Float>(w: &NdArray<T>, a: &NdArray<T>, b: &NdArray<T>, alpha: T, cols: (usize, usize)) -> Result<NdArray<T>> {
    let (sw, sa, sb) = (w.shape(), a.shape(), b.shape());
    if sw.len() != 2
        || sa.len() != 2
        || sb.len() != 2
        || sa[0] != sw[0]
        || sa[1] != sb[0]
        || cols.1 <= cols.0
        || cols.1 > sw[1]
        || sb[1] != cols.1 - cols.0
    {
        return Err(Error::shape("merge_lora", format!("W {sw:?}, A {sa:?}, B {sb:?}, columns {cols:?}")));
    }
    let (rows, r, width) = (sw[0], sa[1], sb[1]);
    let ab = kernels::matmul(a.data(), b.data(), rows, r, width);
    let mut out = w.clone();
    let n = sw[1];
    for i in 0..rows {
        for j in 0..width {
            out.data_mut()[i * n + cols.0 + j] += alpha * ab[i * width + j];
        }
    }
    Ok(out)
}

struct Adder<'a, 'b, T, R: ?Sized> {
    b: Builder<'a, T, R>,
    added: &'b mut Vec<ParamId>,
}

impl<T: Float, R: Rng + ?Sized> Adder<'_, '_, T, R> {
    fn add(&mut self, name: &str, region: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let id = self.b.add(name, region, shape, Role::Adapter, false, init)?;
        self.added.push(id);
        Ok(id)
    }

    fn alpha(&mut self, name: &str, region: &str, alpha: Alpha) -> Result<AlphaParam> {
        Ok(match alpha {
            Alpha::Fixed(a) => AlphaParam::Fixed(a),
            Alpha::Learned => AlphaParam::Learned(self.add(&format!("{name}.alpha"), region, &[1], Init::Ones)?),
        })
    }

    fn ssf(&mut self, name: &str, region: &str, dim: usize) -> Result<SsfSlot> {
        Ok(SsfSlot {
            gamma: self.add(&format!("{name}.ssf_scale"), region, &[dim], Init::Ones)?,
            beta: self.add(&format!("{name}.ssf_shift"), region, &[dim], Init::Zeros)?,
        })
    }

    fn lora(&mut self, lin: &Linear, tag: &str, region: &str, r: usize, alpha: Alpha, cols: (usize, usize)) -> Result<LoraAdapter> {
        let name = format!("{}.lora_{tag}", lin.name);
        Ok(LoraAdapter {
            target: tag.to_string(),
            a: self.add(&format!("{name}.a"), region, &[lin.d_in, r], Init::Normal(0.02))?,
            b: self.add(&format!("{name}.b"), region, &[r, cols.1 - cols.0], Init::Zeros)?,
            alpha: self.alpha(&name, region, alpha)?,
            cols,
        })
    }
}

/// Attaches the configured adapters to the encoder and assigns encoder
/// trainability. Decoder-side parameters are always trainable.
pub fn apply_peft<T: Float, R: Rng + ?Sized>(
    enc: &mut Encoder,
    store: &mut ParamStore<T>,
    cfg: &PeftConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = enc.cfg.embed_dim;
    let depth = enc.cfg.depth;
    let m = cfg.method;
    if (m.is_lora() || m == Method::Fact) && cfg.rank() >= d {
        return Err(Error::Config(format!("rank {} must be smaller than embed dim {d}", cfg.rank())));
    }
    if m == Method::Adaptformer && cfg.projection_size() >= d {
        return Err(Error::Config(format!(
            "projection size {} must be smaller than embed dim {d}",
            cfg.projection_size()
        )));
    }
    if enc.blocks.iter().any(|b| {
        b.adaptformer.is_some() || b.ssf_norm1.is_some() || b.linears().iter().any(|l| !l.adapters.is_empty())
    }) || enc.fact.is_some()
    {
        return Err(Error::Config("encoder already carries adapters".into()));
    }

    let range = cfg.adapted_blocks(depth);
    let in_range = |region: &str| range.clone().any(|k| region == block_region(k));

    // Trainability of the base encoder.
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        let meta = store.meta(id).clone();
        if meta.component != Component::Encoder {
            if !store.is_quantized(id) {
                store.set_trainable(id, true)?;
            }
            continue;
        }
        if matches!(m, Method::BiasTune | Method::LnTune | Method::AttnTune) && meta.role == Role::Unlabeled {
            return Err(Error::Config(format!("parameter {} has no role label", meta.name)));
        }
        let on = match m {
            Method::FullFt => true,
            Method::BiasTune => meta.role == Role::Bias,
            Method::LnTune => meta.role == Role::Norm,
            Method::AttnTune => meta.attention,
            Method::LateFt => in_range(&meta.region),
            _ => false,
        };
        store.set_trainable(id, on)?;
    }

    if m.is_quantized() {
        for blk in &enc.blocks {
            for lin in blk.linears() {
                store.quantize(lin.w, cfg.quant_block())?;
            }
        }
    }

    let mut added = Vec::new();
    let mut ad = Adder {
        b: Builder {
            store,
            rng,
            component: Component::EncoderAdapter,
        },
        added: &mut added,
    };
    let r = cfg.rank();
    let alpha = cfg.alpha();
    match m {
        Method::Lora | Method::Qlora | Method::LateLora | Method::LateQlora => {
            for k in range.clone() {
                let region = block_region(k);
                let blk = &mut enc.blocks[k];
                match cfg.scope() {
                    LoraScope::Classic => {
                        let q = ad.lora(&blk.qkv, "q", &region, r, alpha, (0, d))?;
                        let v = ad.lora(&blk.qkv, "v", &region, r, alpha, (2 * d, 3 * d))?;
                        blk.qkv.adapters.lora = vec![q, v];
                    }
                    LoraScope::All => {
                        for lin in blk.linears_mut() {
                            let a = ad.lora(lin, "all", &region, r, alpha, (0, lin.d_out))?;
                            lin.adapters.lora = vec![a];
                        }
                    }
                }
            }
        }
        Method::Fact => {
            let shared = FactShared {
                u: ad.add("encoder.fact.u", "encoder-shared", &[d, r], Init::fan_in(d))?,
                v: ad.add("encoder.fact.v", "encoder-shared", &[d, r], Init::fan_in(d))?,
                alpha: ad.alpha("encoder.fact", "encoder-shared", alpha)?,
                dropout: cfg.dropout(),
            };
            for k in range.clone() {
                let region = block_region(k);
                let blk = &mut enc.blocks[k];
                let mut slot = |lin: &Linear, tag: &str, cols: (usize, usize)| -> Result<FactSlot> {
                    Ok(FactSlot {
                        target: tag.into(),
                        sigma: ad.add(&format!("{}.fact_{tag}.sigma", lin.name), &region, &[r, r], Init::Zeros)?,
                        cols,
                    })
                };
                let qkv_slots: Vec<FactSlot> = match cfg.scope() {
                    LoraScope::Classic => vec![slot(&blk.qkv, "q", (0, d))?, slot(&blk.qkv, "v", (2 * d, 3 * d))?],
                    LoraScope::All => vec![
                        slot(&blk.qkv, "q", (0, d))?,
                        slot(&blk.qkv, "k", (d, 2 * d))?,
                        slot(&blk.qkv, "v", (2 * d, 3 * d))?,
                    ],
                };
                if cfg.scope() == LoraScope::All {
                    blk.proj.adapters.fact = vec![slot(&blk.proj, "o", (0, d))?];
                }
                blk.qkv.adapters.fact = qkv_slots;
            }
            enc.fact = Some(shared);
        }
        Method::Adaptformer => {
            let p = cfg.projection_size();
            for k in range.clone() {
                let region = block_region(k);
                let name = format!("encoder.blocks.{k}.adaptformer");
                let mut down = ad.b.linear(&format!("{name}.down"), &region, d, p, true, false)?;
                let mut up = ad.b.linear(&format!("{name}.up"), &region, p, d, true, false)?;
                for id in [down.w, down.b.unwrap(), up.w, up.b.unwrap()] {
                    ad.added.push(id);
                }
                if !ad.b.store.is_virtual() {
                    ad.b.store.set_dense(up.w, NdArray::zeros(&[p, d]))?;
                }
                down.adapters = LinearAdapters::default();
                up.adapters = LinearAdapters::default();
                let alpha = ad.alpha(&name, &region, alpha)?;
                enc.blocks[k].adaptformer = Some(AdaptFormerModule {
                    down,
                    up,
                    alpha,
                    dropout: cfg.dropout(),
                });
            }
        }
        Method::Ssf => {
            for k in range.clone() {
                let region = block_region(k);
                let n = format!("encoder.blocks.{k}");
                let blk = &mut enc.blocks[k];
                blk.ssf_norm1 = Some(ad.ssf(&format!("{n}.norm1"), &region, d)?);
                blk.ssf_norm2 = Some(ad.ssf(&format!("{n}.norm2"), &region, d)?);
                for lin in blk.linears_mut() {
                    lin.adapters.ssf = Some(ad.ssf(&lin.name, &region, lin.d_out)?);
                }
            }
        }
        _ => {}
    }
    for id in added {
        let meta = store.meta(id);
        debug_assert_eq!(meta.component, Component::EncoderAdapter);
        store.set_trainable(id, true)?;
    }
    Ok(())
}

/// Marks exactly the role-matching encoder parameters (plus the decoder
/// side) trainable. Fails on parameters without a role label.
pub fn select_trainable<T: Float>(store: &mut ParamStore<T>, method: Method) -> Result<()> {
    if !matches!(method, Method::BiasTune | Method::LnTune | Method::AttnTune) {
        return Err(Error::Config(format!("{method} is not a selective method")));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let meta = store.meta(id).clone();
        let on = match meta.component {
            Component::Encoder => {
                if meta.role == Role::Unlabeled {
                    return Err(Error::Config(format!("parameter {} has no role label", meta.name)));
                }
                match method {
                    Method::BiasTune => meta.role == Role::Bias,
                    Method::LnTune => meta.role == Role::Norm,
                    _ => meta.attention,
                }
            }
            Component::EncoderAdapter => false,
            _ => true,
        };
        if !(on && store.is_quantized(id)) {
            store.set_trainable(id, on)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegionCount {
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Trainable parameters on the image-encoder side, adapters included.
    pub encoder_trainable: usize,
    pub adapter_params: usize,
    pub decoder_side_params: usize,
    pub quantized_params: usize,
    pub quantized_bytes: usize,
    pub per_region: BTreeMap<String, RegionCount>,
}

pub fn count_params<T: Float>(store: &ParamStore<T>) -> ParamReport {
    let mut r = ParamReport::default();
    for id in store.ids() {
        let meta = store.meta(id);
        let n = meta.numel();
        r.total_params += n;
        let e = r.per_region.entry(meta.region.clone()).or_default();
        e.total += n;
        if meta.trainable {
            r.trainable_params += n;
            e.trainable += n;
            if meta.component.is_encoder_side() {
                r.encoder_trainable += n;
            }
        } else {
            r.frozen_params += n;
        }
        match meta.component {
            Component::EncoderAdapter => r.adapter_params += n,
            Component::Encoder => {}
            _ => r.decoder_side_params += n,
        }
        if store.is_quantized(id) {
            r.quantized_params += n;
            r.quantized_bytes += store.storage_bytes(id);
        }
    }
    r
}

/// Parameters per sequence element, the quantity that sets the balance
/// between parameter state and activation memory.
pub fn param_seq_ratio(params: f64, seq_len: f64) -> Result<f64> {
    if seq_len <= 0.0 || params <= 0.0 {
        return Err(Error::Config(format!(
            "parameter count and sequence length must be positive, got {params} and {seq_len}"
        )));
    }
    Ok(params / seq_len)
}
