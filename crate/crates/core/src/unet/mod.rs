//! Velocity UNet with self-attention, text cross-attention and multi-scale
//! DEM feature fusion.

mod blocks;
mod config;

pub use blocks::{time_embedding, Conv, CrossAttention, Gates, Linear, Norm, ParamBuilder, ResBlock, SeFuse, SelfAttention};
pub use config::{McaMode, SizePreset, UNetConfig};

use geodiffussr_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::flow::{Branch, GuidedVelocity, VelocityModel};
use crate::text::TextBatch;
use crate::tile::TerrainTile;

/// Per-batch conditioning. `pyramid` levels are `[n, r/2^l, r/2^l, C_l]`;
/// `dem` is `[n, r, r, 1]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub text: Option<TextBatch<T>>,
    pub pyramid: Option<[Tensor<T>; 3]>,
    pub dem: Option<Tensor<T>>,
}

impl<T: Real> Conditioning<T> {
    pub fn new(text: TextBatch<T>, pyramids: &[&FeaturePyramid], dems: &[&TerrainTile]) -> Result<Self> {
        Ok(Self {
            text: Some(text),
            pyramid: if pyramids.is_empty() { None } else { Some(stack_pyramids(pyramids)?) },
            dem: if dems.is_empty() { None } else { Some(stack_dems(dems)?) },
        })
    }

    pub fn batch(&self) -> Option<usize> {
        self.text.as_ref().map(|t| t.batch())
    }

    /// Same DEM conditioning, text replaced by the null sequence.
    pub fn unconditional(&self, text_dim: usize) -> Self {
        let n = self.batch().unwrap_or(1);
        Self { text: Some(TextBatch::null(n, text_dim)), pyramid: self.pyramid.clone(), dem: self.dem.clone() }
    }
}

pub fn stack_pyramids<T: Real>(pyramids: &[&FeaturePyramid]) -> Result<[Tensor<T>; 3]> {
    let level = |l: usize| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = pyramids.iter().map(|p| p.levels[l].cast::<T>()).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::stack(&refs)?)
    };
    Ok([level(0)?, level(1)?, level(2)?])
}

pub fn stack_dems<T: Real>(dems: &[&TerrainTile]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = dems.iter().map(|d| d.to_tensor::<T>()).collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

#[derive(Clone, Debug)]
struct EncLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    xattn: CrossAttention,
    se: Option<SeFuse>,
}

#[derive(Clone, Debug)]
struct DecLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    xattn: CrossAttention,
}

#[derive(Clone, Debug)]
pub struct UNet<T: Real> {
    cfg: UNetConfig,
    store: ParamStore<T>,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv,
    enc: Vec<EncLevel>,
    mid_res1: ResBlock,
    mid_attn: SelfAttention,
    mid_xattn: CrossAttention,
    mid_res2: ResBlock,
    dec: Vec<DecLevel>,
    out_norm: Norm,
    out_conv: Conv,
    gates: Gates,
}

impl<T: Real> UNet<T> {
    /// Fresh weights. Each parameter's initial value depends only on `seed`
    /// and its name, so models in different modes share all common weights.
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let ch = cfg.level_channels();
        let (tdim, groups, heads) = (cfg.time_dim(), cfg.norm_groups, cfg.heads);
        let time_fc1 = b.linear("time.fc1", cfg.base_channels, tdim);
        let time_fc2 = b.linear("time.fc2", tdim, tdim);
        let conv_in = b.conv("conv_in", cfg.input_channels(), ch[0]);
        let injected = cfg.mca_mode.injected_levels();
        let mut enc = Vec::new();
        let mut cin = ch[0];
        for l in 0..3 {
            let c = ch[l];
            enc.push(EncLevel {
                res: ResBlock::new(&mut b, &format!("enc{l}.res"), cin, c, tdim, groups),
                attn: cfg.has_attention(l).then(|| SelfAttention::new(&mut b, &format!("enc{l}.attn"), c, heads, groups)),
                xattn: CrossAttention::new(&mut b, &format!("enc{l}.xattn"), c, cfg.text_dim, heads, groups),
                se: injected
                    .contains(&l)
                    .then(|| SeFuse::new(&mut b, &format!("enc{l}.se"), c, cfg.dem_channels[l], cfg.se_reduction)),
            });
            cin = c;
        }
        let mid_res1 = ResBlock::new(&mut b, "mid.res1", ch[2], ch[2], tdim, groups);
        let mid_attn = SelfAttention::new(&mut b, "mid.attn", ch[2], heads, groups);
        let mid_xattn = CrossAttention::new(&mut b, "mid.xattn", ch[2], cfg.text_dim, heads, groups);
        let mid_res2 = ResBlock::new(&mut b, "mid.res2", ch[2], ch[2], tdim, groups);
        let mut dec = Vec::new();
        let mut cin = ch[2];
        for l in (0..3).rev() {
            let c = ch[l];
            dec.push(DecLevel {
                res: ResBlock::new(&mut b, &format!("dec{l}.res"), cin + c, c, tdim, groups),
                attn: cfg.has_attention(l).then(|| SelfAttention::new(&mut b, &format!("dec{l}.attn"), c, heads, groups)),
                xattn: CrossAttention::new(&mut b, &format!("dec{l}.xattn"), c, cfg.text_dim, heads, groups),
            });
            cin = c;
        }
        let out_norm = b.norm("out.norm", ch[0], groups);
        let out_conv = if cfg.zero_init_output { b.zero_conv("out.conv", ch[0], 3) } else { b.conv("out.conv", ch[0], 3) };
        Ok(Self {
            cfg,
            store,
            time_fc1,
            time_fc2,
            conv_in,
            enc,
            mid_res1,
            mid_attn,
            mid_xattn,
            mid_res2,
            dec,
            out_norm,
            out_conv,
            gates: Gates::Excite,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Forces every SE gate to 1 (test mode).
    pub fn set_gates(&mut self, gates: Gates) {
        self.gates = gates;
    }

    /// The fusion block at `level`, if that level is injected.
    pub fn se_block(&self, level: usize) -> Option<&SeFuse> {
        self.enc.get(level).and_then(|e| e.se.as_ref())
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number copied.
    pub fn copy_shared_from(&mut self, other: &UNet<T>) -> usize {
        let mut n = 0;
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            if let Some(oid) = other.store.find(&name) {
                let v = other.store.value(oid);
                if v.shape() == self.store.value(id).shape() {
                    *self.store.value_mut(id) = v.clone();
                    n += 1;
                }
            }
        }
        n
    }

    fn time_input(&self, t: &[T]) -> Result<Tensor<T>> {
        let d = self.cfg.base_channels;
        let mut data = Vec::with_capacity(t.len() * d);
        for &ti in t {
            data.extend(time_embedding(ti.as_f64(), d)?.into_iter().map(T::lit));
        }
        Ok(Tensor::from_vec([t.len(), d], data)?)
    }

    fn check_inputs(&self, g: &Graph<'_, T>, x_t: Var, t: &[T], cond: &Conditioning<T>) -> Result<usize> {
        let shape = g.shape(x_t);
        let r = self.cfg.resolution;
        if shape.len() != 4 || shape[1] != r || shape[2] != r || shape[3] != 3 {
            return Err(Error::Shape(format!("x_t must be [n, {r}, {r}, 3], got {shape:?}")));
        }
        let n = shape[0];
        if t.len() != n {
            return Err(Error::Shape(format!("{} flow times for a batch of {n}", t.len())));
        }
        let text = cond.text.as_ref().ok_or_else(|| Error::MissingConditioning("text embedding (use the null embedding for the unconditional branch)".into()))?;
        if text.batch() != n || text.dim() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "text batch {:?} does not match batch {n} × dim {}",
                text.tokens.shape(),
                self.cfg.text_dim
            )));
        }
        match self.cfg.mca_mode {
            McaMode::None => {
                let dem = cond.dem.as_ref().ok_or_else(|| Error::MissingConditioning("raw DEM".into()))?;
                if dem.shape() != [n, r, r, 1] {
                    return Err(Error::Shape(format!("DEM must be [{n}, {r}, {r}, 1], got {:?}", dem.shape())));
                }
            }
            _ => {
                let p = cond.pyramid.as_ref().ok_or_else(|| Error::MissingConditioning("DEM feature pyramid".into()))?;
                if p.iter().any(|l| l.shape().first() != Some(&n)) {
                    return Err(Error::Shape(format!("pyramid batch does not match batch {n}")));
                }
            }
        }
        Ok(n)
    }

    /// Predicted velocity `[n, r, r, 3]` for `x_t` at per-sample times `t`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[T], cond: &Conditioning<T>) -> Result<Var> {
        self.check_inputs(g, x_t, t, cond)?;
        let text_batch = cond.text.as_ref().expect("checked");
        let text = g.input(text_batch.tokens.clone());
        let lens = &text_batch.lens;

        let temb = g.input(self.time_input(t)?);
        let temb = self.time_fc1.forward(g, temb)?;
        let temb = g.silu(temb);
        let temb = self.time_fc2.forward(g, temb)?;
        let temb = g.silu(temb);

        let mut h = x_t;
        if self.cfg.mca_mode == McaMode::None {
            let dem = cond.dem.as_ref().expect("checked").map(|v| v + v - T::one());
            let d = g.input(dem);
            h = g.concat(h, d)?;
        }
        h = self.conv_in.forward(g, h)?;

        let mut skips = Vec::with_capacity(3);
        for (l, lvl) in self.enc.iter().enumerate() {
            h = lvl.res.forward(g, h, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h)?;
            }
            h = lvl.xattn.forward(g, h, text, lens)?;
            if let Some(se) = &lvl.se {
                let feats = &cond.pyramid.as_ref().expect("checked")[l];
                let d = g.input(feats.clone());
                h = se.forward(g, h, d, self.gates)?;
            }
            skips.push(h);
            if l < 2 {
                h = g.avg_pool2(h)?;
            }
        }

        h = self.mid_res1.forward(g, h, temb)?;
        h = self.mid_attn.forward(g, h)?;
        h = self.mid_xattn.forward(g, h, text, lens)?;
        h = self.mid_res2.forward(g, h, temb)?;

        for (i, lvl) in self.dec.iter().enumerate() {
            let l = 2 - i;
            h = g.concat(h, skips[l])?;
            h = lvl.res.forward(g, h, temb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h)?;
            }
            h = lvl.xattn.forward(g, h, text, lens)?;
            if l > 0 {
                h = g.upsample2(h)?;
            }
        }

        h = self.out_norm.forward(g, h)?;
        h = g.silu(h);
        self.out_conv.forward(g, h)
    }

    /// Gradient-free forward on plain tensors.
    pub fn infer(&self, x_t: &Tensor<T>, t: &[T], cond: &Conditioning<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(x_t.clone());
        let v = self.forward(&mut g, x, t, cond)?;
        let v = g.value(v).clone();
        if !v.all_finite() {
            return Err(Error::NonFinite { what: "velocity".into(), step: 0 });
        }
        Ok(v)
    }

    /// Binds conditioning for sampling; the unconditional branch swaps in
    /// the null text sequence and keeps the DEM.
    pub fn guided(&self, cond: Conditioning<T>) -> Guided<'_, T> {
        let uncond = cond.unconditional(self.cfg.text_dim);
        Guided { unet: self, cond, uncond }
    }
}

impl<T: Real> VelocityModel<T> for UNet<T> {
    type Cond = Conditioning<T>;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn predict(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[T], cond: &Conditioning<T>) -> Result<Var> {
        self.forward(g, x_t, t, cond)
    }
}

pub struct Guided<'a, T: Real> {
    unet: &'a UNet<T>,
    cond: Conditioning<T>,
    uncond: Conditioning<T>,
}

impl<T: Real> GuidedVelocity<T> for Guided<'_, T> {
    fn velocity(&self, x: &Tensor<T>, t: T, branch: Branch) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let cond = match branch {
            Branch::Conditional => &self.cond,
            Branch::Unconditional => &self.uncond,
        };
        self.unet.infer(x, &vec![t; n], cond)
    }
}

/// Trainable parameter count of the UNet built from `cfg`. The frozen DEM
/// encoder is not part of the UNet and is never counted.
pub fn count_parameters(cfg: &UNetConfig) -> Result<usize> {
    Ok(UNet::<f32>::new(cfg.clone(), 0)?.store().trainable_count())
}
