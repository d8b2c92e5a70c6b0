//! Conditional noise predictor: a shared encoder, twin decoders (shape and
//! mix branches) and two condition encoders (image and mask) whose per-level
//! output projections start at zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{timestep_embedding, Graph, ParamId, Tensor, Var};
use crate::rng::{standard_normal, stream};

const GN_EPS: f64 = 1e-5;
const MAX_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub embed_dim: usize,
    /// Category ids must be below this.
    pub num_categories: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            base_width: 32,
            levels: 3,
            embed_dim: 64,
            num_categories: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("denoiser: {m}")));
        if self.image_channels == 0 || self.base_width == 0 || self.num_categories == 0 {
            return bad("image_channels, base_width and num_categories must be positive");
        }
        if self.levels == 0 || self.levels > 5 {
            return bad("levels must be in 1..=5");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad("embed_dim must be positive and even");
        }
        Ok(())
    }

    /// Channel width at resolution level `l`.
    pub fn width(&self, l: usize) -> usize {
        self.base_width * if l == 0 { 1 } else { 2 }
    }

    /// Canvas sides must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SharedEncoder,
    ShapeDecoder,
    MixDecoder,
    ImageEncoder,
    MaskEncoder,
    Embeddings,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::SharedEncoder,
        ParamGroup::ShapeDecoder,
        ParamGroup::MixDecoder,
        ParamGroup::ImageEncoder,
        ParamGroup::MaskEncoder,
        ParamGroup::Embeddings,
    ];

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::SharedEncoder => "shared_encoder",
            ParamGroup::ShapeDecoder => "shape_decoder",
            ParamGroup::MixDecoder => "mix_decoder",
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::MaskEncoder => "mask_encoder",
            ParamGroup::Embeddings => "embeddings",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Shape,
    Mix,
    Both,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    in_ch: usize,
    out_ch: usize,
    conv1: Conv,
    emb: Linear,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    block: ResBlock,
    up: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<DecoderLevel>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct CondEncoder {
    conv_in: Conv,
    levels: Vec<Conv>,
    proj: Vec<Conv>,
}

#[derive(Clone, Debug)]
struct Arch {
    conv_in: Conv,
    enc: Vec<ResBlock>,
    time1: Linear,
    time2: Linear,
    table: ParamId,
    shape_dec: Decoder,
    mix_dec: Decoder,
    image_enc: CondEncoder,
    mask_enc: CondEncoder,
}

/// Parameter tensors with their names and groups, plus the wiring that maps
/// them onto the network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Tensor>,
    arch: Arch,
}

struct Builder {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Tensor>,
    rng: crate::rng::Rng,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, t: Tensor) -> ParamId {
        self.names.push(name);
        self.groups.push(group);
        self.params.push(t);
        ParamId(self.params.len() - 1)
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| std * standard_normal(rng))
    }

    fn conv(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let shape = [cout, cin, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            self.randn(&shape, (1.0 / (cin * k * k) as f64).sqrt())
        };
        Conv {
            w: self.add(format!("{name}.w"), group, w),
            b: self.add(format!("{name}.b"), group, Tensor::zeros(&[cout, 1, 1])),
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, group: ParamGroup, din: usize, dout: usize) -> Linear {
        let w = self.randn(&[din, dout], (1.0 / din as f64).sqrt());
        Linear {
            w: self.add(format!("{name}.w"), group, w),
            b: self.add(format!("{name}.b"), group, Tensor::zeros(&[dout])),
        }
    }

    fn res_block(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            in_ch: cin,
            out_ch: cout,
            conv1: self.conv(&format!("{name}.conv1"), group, cin, cout, 3, false),
            emb: self.linear(&format!("{name}.emb"), group, emb, cout),
            conv2: self.conv(&format!("{name}.conv2"), group, cout, cout, 3, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), group, cin, cout, 1, false)),
        }
    }

    fn decoder(&mut self, name: &str, group: ParamGroup, cfg: &DenoiserConfig) -> Decoder {
        let levels = (0..cfg.levels)
            .rev()
            .map(|l| {
                let ch = cfg.width(l);
                DecoderLevel {
                    block: self.res_block(&format!("{name}.l{l}"), group, ch, ch, cfg.embed_dim),
                    up: (l > 0).then(|| self.conv(&format!("{name}.l{l}.up"), group, ch, cfg.width(l - 1), 1, false)),
                }
            })
            .collect();
        let out = self.conv(&format!("{name}.out"), group, cfg.base_width, cfg.image_channels, 3, false);
        Decoder { levels, out }
    }

    fn cond_encoder(&mut self, name: &str, group: ParamGroup, cin: usize, cfg: &DenoiserConfig) -> CondEncoder {
        let conv_in = self.conv(&format!("{name}.in"), group, cin, cfg.base_width, 3, false);
        let mut levels = Vec::new();
        let mut proj = Vec::new();
        let mut prev = cfg.base_width;
        for l in 0..cfg.levels {
            let ch = cfg.width(l);
            levels.push(self.conv(&format!("{name}.l{l}"), group, prev, ch, 3, false));
            proj.push(self.conv(&format!("{name}.l{l}.zero"), group, ch, ch, 1, true));
            prev = ch;
        }
        CondEncoder { conv_in, levels, proj }
    }
}

fn groups_for(ch: usize) -> usize {
    (1..=MAX_GROUPS.min(ch)).rev().find(|g| ch % g == 0).unwrap_or(1)
}

/// Per-level feature maps, finest first.
pub type Pyramid = Vec<Var>;

#[derive(Clone, Debug)]
pub struct ConditionBundle {
    /// Image features; training only.
    pub c_i: Option<Pyramid>,
    /// Mask features. The shape branch consumes these directly.
    pub c_l: Pyramid,
    /// Mixed condition for the mix branch; training only.
    pub c_m: Option<Pyramid>,
    /// Category embedding, `(B, embed_dim)`.
    pub c_t: Var,
    /// Optional extra pyramid added to both branches' injections.
    pub c_f: Option<Pyramid>,
}

impl ConditionBundle {
    pub fn c_s(&self) -> &Pyramid {
        &self.c_l
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoisePrediction {
    pub eps_s: Option<Var>,
    pub eps_m: Option<Var>,
}

/// Row-normalised one-hot weights: row `b` averages the embedding rows of the
/// categories in `category_ids[b]`. An empty list gives a zero row.
pub fn category_weights(category_ids: &[Vec<u32>], num_categories: usize) -> Result<Tensor> {
    let mut w = Tensor::zeros(&[category_ids.len(), num_categories]);
    let data = w.data_mut();
    for (b, ids) in category_ids.iter().enumerate() {
        for &id in ids {
            if id as usize >= num_categories {
                return Err(Error::contract(format!(
                    "category id {id} outside embedding table of {num_categories}"
                )));
            }
            data[b * num_categories + id as usize] += 1.0 / ids.len() as f64;
        }
    }
    Ok(w)
}

/// `c_m = (n / total) * c_i + sg(c_l)`, level by level.
pub fn mix_conditions(g: &mut Graph, c_i: &[Var], c_l: &[Var], n: u64, total: u64) -> Result<Pyramid> {
    if total == 0 || n > total {
        return Err(Error::contract(format!("mix_conditions needs 0 <= n <= N, N >= 1; got n={n}, N={total}")));
    }
    if c_i.len() != c_l.len() {
        return Err(Error::shape("mix_conditions", format!("{} vs {} levels", c_i.len(), c_l.len())));
    }
    let w = n as f64 / total as f64;
    c_i.iter()
        .zip(c_l)
        .map(|(&ci, &cl)| {
            if g.shape(ci) != g.shape(cl) {
                return Err(Error::shape(
                    "mix_conditions",
                    format!("{:?} vs {:?}", g.shape(ci), g.shape(cl)),
                ));
            }
            let scaled = g.scale(ci, w);
            let anchor = g.stop_gradient(cl)?;
            g.add(scaled, anchor)
        })
        .collect()
}

/// Parameter binding restricted to a set of groups.
#[derive(Clone, Copy)]
struct Access<'a> {
    model: &'a Denoiser,
    allowed: u8,
}

impl Access<'_> {
    fn p(&self, g: &mut Graph, id: ParamId) -> Result<Var> {
        let group = self.model.groups[id.0];
        if self.allowed & group.bit() == 0 {
            return Err(Error::contract(format!(
                "parameter {} ({group}) is not reachable from this view",
                self.model.names[id.0]
            )));
        }
        Ok(g.param(id, &self.model.params[id.0]))
    }

    fn conv(&self, g: &mut Graph, c: &Conv, x: Var) -> Result<Var> {
        let w = self.p(g, c.w)?;
        let b = self.p(g, c.b)?;
        let y = g.conv2d(x, w, 1, c.pad)?;
        g.add(y, b)
    }

    fn linear(&self, g: &mut Graph, l: &Linear, x: Var) -> Result<Var> {
        let w = self.p(g, l.w)?;
        let b = self.p(g, l.b)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm_act(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let ch = g.shape(x)[1];
        let y = g.group_norm(x, groups_for(ch), GN_EPS)?;
        Ok(g.silu(y))
    }

    fn res_block(&self, g: &mut Graph, r: &ResBlock, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm_act(g, x)?;
        let h = self.conv(g, &r.conv1, h)?;
        let e = self.linear(g, &r.emb, emb)?;
        let batch = g.shape(e)[0];
        let e = g.reshape(e, &[batch, r.out_ch, 1, 1])?;
        let h = g.add(h, e)?;
        let h = self.norm_act(g, h)?;
        let h = self.conv(g, &r.conv2, h)?;
        let skip = match &r.skip {
            Some(c) => self.conv(g, c, x)?,
            None => x,
        };
        debug_assert_eq!(g.shape(x)[1], r.in_ch);
        g.add(skip, h)
    }

    fn cond_encoder(&self, g: &mut Graph, e: &CondEncoder, x: Var) -> Result<Pyramid> {
        let mut h = self.conv(g, &e.conv_in, x)?;
        h = g.silu(h);
        let mut out = Vec::with_capacity(e.levels.len());
        for (l, (c, p)) in e.levels.iter().zip(&e.proj).enumerate() {
            if l > 0 {
                h = g.avg_pool2(h)?;
            }
            h = self.conv(g, c, h)?;
            h = g.silu(h);
            out.push(self.conv(g, p, h)?);
        }
        Ok(out)
    }

    fn category_embedding(&self, g: &mut Graph, weights: &Tensor) -> Result<Var> {
        let w = g.constant(weights.clone());
        let table = self.p(g, self.model.arch.table)?;
        g.matmul(w, table)
    }

    fn encode(&self, g: &mut Graph, mask: Var, image: Option<Var>, categories: &[Vec<u32>]) -> Result<ConditionBundle> {
        let cfg = &self.model.config;
        let s = g.shape(mask).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] % cfg.size_divisor() != 0 || s[3] % cfg.size_divisor() != 0 {
            return Err(Error::shape(
                "encode_conditions",
                format!("mask must be (B, 1, H, W) with H, W divisible by {}, got {s:?}", cfg.size_divisor()),
            ));
        }
        if categories.len() != s[0] {
            return Err(Error::shape(
                "encode_conditions",
                format!("{} category lists for batch {}", categories.len(), s[0]),
            ));
        }
        let c_l = self.cond_encoder(g, &self.model.arch.mask_enc, mask)?;
        let c_i = match image {
            Some(img) => {
                let si = g.shape(img);
                if si.len() != 4 || si[0] != s[0] || si[1] != cfg.image_channels || si[2..] != s[2..] {
                    return Err(Error::shape(
                        "encode_conditions",
                        format!("image {:?} does not match mask {s:?}", si),
                    ));
                }
                Some(self.cond_encoder(g, &self.model.arch.image_enc, img)?)
            }
            None => None,
        };
        let c_t = self.category_embedding(g, &category_weights(categories, cfg.num_categories)?)?;
        Ok(ConditionBundle {
            c_i,
            c_l,
            c_m: None,
            c_t,
            c_f: None,
        })
    }

    fn decode(&self, g: &mut Graph, d: &Decoder, skips: &[Var], cond: &[Var], extra: Option<&[Var]>, emb: Var) -> Result<Var> {
        let levels = skips.len();
        let mut h = skips[levels - 1];
        for (i, lvl) in d.levels.iter().enumerate() {
            let l = levels - 1 - i;
            if i > 0 {
                h = g.add(h, skips[l])?;
            }
            h = g.add(h, cond[l])?;
            if let Some(extra) = extra {
                h = g.add(h, extra[l])?;
            }
            h = self.res_block(g, &lvl.block, h, emb)?;
            if let Some(up) = &lvl.up {
                h = g.upsample2(h)?;
                h = self.conv(g, up, h)?;
            }
        }
        let h = self.norm_act(g, h)?;
        self.conv(g, &d.out, h)
    }

    fn predict(&self, g: &mut Graph, z_t: Var, t: &[usize], bundle: &ConditionBundle, branches: Branches) -> Result<NoisePrediction> {
        let cfg = &self.model.config;
        let arch = &self.model.arch;
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[1] != cfg.image_channels || t.len() != zs[0] {
            return Err(Error::shape(
                "predict_noise",
                format!("z_t {zs:?} with {} timesteps (channels {})", t.len(), cfg.image_channels),
            ));
        }
        let want_mix = matches!(branches, Branches::Mix | Branches::Both);
        let want_shape = matches!(branches, Branches::Shape | Branches::Both);
        let c_m = match (&bundle.c_m, want_mix) {
            (None, true) => return Err(Error::contract("mix branch requested without c_m")),
            (c, _) => c,
        };
        for level in bundle.c_l.iter().chain(c_m.iter().flatten()) {
            let ls = g.shape(*level);
            if ls[0] != zs[0] {
                return Err(Error::shape("predict_noise", format!("condition batch {} vs z_t batch {}", ls[0], zs[0])));
            }
        }

        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let temb = g.constant(timestep_embedding(&ts, cfg.embed_dim)?);
        let e = self.linear(g, &arch.time1, temb)?;
        let e = g.silu(e);
        let e = self.linear(g, &arch.time2, e)?;
        let emb = g.add(e, bundle.c_t)?;

        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = self.conv(g, &arch.conv_in, z_t)?;
        for (l, block) in arch.enc.iter().enumerate() {
            if l > 0 {
                h = g.avg_pool2(h)?;
            }
            h = self.res_block(g, block, h, emb)?;
            skips.push(h);
        }

        let extra = bundle.c_f.as_deref();
        let eps_s = if want_shape {
            Some(self.decode(g, &arch.shape_dec, &skips, bundle.c_s(), extra, emb)?)
        } else {
            None
        };
        let eps_m = match c_m {
            Some(c_m) if want_mix => Some(self.decode(g, &arch.mix_dec, &skips, c_m, extra, emb)?),
            _ => None,
        };
        Ok(NoisePrediction { eps_s, eps_m })
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            groups: Vec::new(),
            params: Vec::new(),
            rng: stream(seed, &[0x494e_4954]),
        };
        let cfg = &config;
        use ParamGroup::*;
        let time1 = b.linear("time.fc1", Embeddings, cfg.embed_dim, cfg.embed_dim);
        let time2 = b.linear("time.fc2", Embeddings, cfg.embed_dim, cfg.embed_dim);
        let table = b.randn(&[cfg.num_categories, cfg.embed_dim], 1.0);
        let table = b.add("category.table".into(), Embeddings, table);
        let conv_in = b.conv("enc.in", SharedEncoder, cfg.image_channels, cfg.base_width, 3, false);
        let mut enc = Vec::new();
        let mut prev = cfg.base_width;
        for l in 0..cfg.levels {
            enc.push(b.res_block(&format!("enc.l{l}"), SharedEncoder, prev, cfg.width(l), cfg.embed_dim));
            prev = cfg.width(l);
        }
        let shape_dec = b.decoder("shape_dec", ShapeDecoder, cfg);
        let mix_dec = b.decoder("mix_dec", MixDecoder, cfg);
        let image_enc = b.cond_encoder("image_enc", ImageEncoder, cfg.image_channels, cfg);
        let mask_enc = b.cond_encoder("mask_enc", MaskEncoder, 1, cfg);
        let arch = Arch {
            conv_in,
            enc,
            time1,
            time2,
            table,
            shape_dec,
            mix_dec,
            image_enc,
            mask_enc,
        };
        Ok(Denoiser {
            config,
            names: b.names,
            groups: b.groups,
            params: b.params,
            arch,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.groups[i] == group).map(ParamId).collect()
    }

    /// Number of scalar parameters per group.
    pub fn group_sizes(&self) -> Vec<(ParamGroup, usize)> {
        ParamGroup::ALL
            .iter()
            .map(|&grp| {
                let n = self
                    .params
                    .iter()
                    .zip(&self.groups)
                    .filter(|(_, g)| **g == grp)
                    .map(|(p, _)| p.len())
                    .sum();
                (grp, n)
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameter values; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("set_params", format!("{} tensors for {}", params.len(), self.params.len())));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{}: {:?} vs {:?}", self.names[i], new.shape(), old.shape()),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    fn full(&self) -> Access<'_> {
        Access {
            model: self,
            allowed: u8::MAX,
        }
    }

    /// Builds the condition bundle. `mask` is `(B, 1, H, W)`; `image`, when
    /// given, is `(B, C, H, W)` and yields `c_i`.
    pub fn encode_conditions(&self, g: &mut Graph, image: Option<Var>, mask: Var, categories: &[Vec<u32>]) -> Result<ConditionBundle> {
        self.full().encode(g, mask, image, categories)
    }

    /// Attaches `c_m` to a bundle that carries `c_i`.
    pub fn attach_mix(&self, g: &mut Graph, bundle: &mut ConditionBundle, n: u64, total: u64) -> Result<()> {
        let c_i = bundle
            .c_i
            .as_ref()
            .ok_or_else(|| Error::contract("c_m needs image features, but the bundle has no c_i"))?;
        bundle.c_m = Some(mix_conditions(g, c_i, &bundle.c_l, n, total)?);
        Ok(())
    }

    /// Runs the shared encoder once and the requested decoder(s).
    pub fn predict_noise(&self, g: &mut Graph, z_t: Var, t: &[usize], bundle: &ConditionBundle, branches: Branches) -> Result<NoisePrediction> {
        self.full().predict(g, z_t, t, bundle, branches)
    }

    /// Sampling-phase view: only the shared encoder, shape decoder, mask
    /// encoder and embeddings are reachable.
    pub fn shape_view(&self) -> ShapeBranchView<'_> {
        ShapeBranchView {
            access: Access {
                model: self,
                allowed: ParamGroup::SharedEncoder.bit()
                    | ParamGroup::ShapeDecoder.bit()
                    | ParamGroup::MaskEncoder.bit()
                    | ParamGroup::Embeddings.bit(),
            },
        }
    }
}

/// Restricted handle used by the sampler and the policy-gradient stage.
/// Binding any image-encoder or mix-decoder parameter through it is a
/// contract error.
#[derive(Clone, Copy)]
pub struct ShapeBranchView<'a> {
    access: Access<'a>,
}

impl<'a> ShapeBranchView<'a> {
    pub fn model(&self) -> &'a Denoiser {
        self.access.model
    }

    pub fn encode(&self, g: &mut Graph, mask: Var, categories: &[Vec<u32>]) -> Result<ConditionBundle> {
        self.access.encode(g, mask, None, categories)
    }

    pub fn predict(&self, g: &mut Graph, z_t: Var, t: &[usize], bundle: &ConditionBundle) -> Result<Var> {
        let out = self.access.predict(g, z_t, t, bundle, Branches::Shape)?;
        out.eps_s.ok_or_else(|| Error::Internal("shape branch produced no output".into()))
    }

    #[doc(hidden)]
    pub fn try_bind(&self, g: &mut Graph, id: ParamId) -> Result<Var> {
        self.access.p(g, id)
    }
}
