//! Parameterized building blocks. Each block holds only parameter handles;
//! values live in the owning [`ParamStore`].

use geodiffussr_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Registers parameters with per-name seeded initialization, so a weight's
/// initial value depends only on `(seed, name)`.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed }
    }

    fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let n: usize = shape.iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut rng = substream(self.seed, name);
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        self.store.add(name, Tensor::from_vec(shape, data).expect("init shape"))
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.uniform(&format!("{name}.weight"), vec![din, dout], din),
            b: self.constant(&format!("{name}.bias"), vec![dout], 0.0),
        }
    }

    pub fn zero_linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.constant(&format!("{name}.weight"), vec![din, dout], 0.0),
            b: self.constant(&format!("{name}.bias"), vec![dout], 0.0),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self.uniform(&format!("{name}.weight"), vec![3, 3, cin, cout], 9 * cin),
            b: self.constant(&format!("{name}.bias"), vec![cout], 0.0),
        }
    }

    pub fn zero_conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self.constant(&format!("{name}.weight"), vec![3, 3, cin, cout], 0.0),
            b: self.constant(&format!("{name}.bias"), vec![cout], 0.0),
        }
    }

    pub fn norm(&mut self, name: &str, c: usize, groups: usize) -> Norm {
        Norm {
            gamma: self.constant(&format!("{name}.gamma"), vec![c], 1.0),
            beta: self.constant(&format!("{name}.beta"), vec![c], 0.0),
            groups,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// 3×3 same-padded convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv2d(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.group_norm(x, ga, be, self.groups)?)
    }
}

/// GroupNorm → SiLU → conv, plus a per-sample time shift, twice, with a
/// (projected) identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Linear>,
}

impl ResBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        Self {
            norm1: b.norm(&format!("{name}.norm1"), cin, groups),
            conv1: b.conv(&format!("{name}.conv1"), cin, cout),
            time: b.linear(&format!("{name}.time"), tdim, cout),
            norm2: b.norm(&format!("{name}.norm2"), cout, groups),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout),
            skip: (cin != cout).then(|| b.linear(&format!("{name}.skip"), cin, cout)),
        }
    }

    /// `temb_act` is `silu(time embedding)`, shape `[n, tdim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let shift = self.time.forward(g, temb_act)?;
        let h = g.add_per_sample(h, shift)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

fn as_tokens<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(x).to_vec();
    let [n, h, w, c] = shape[..] else {
        return Err(Error::Shape(format!("expected NHWC feature map, got {shape:?}")));
    };
    Ok((g.reshape(x, &[n, h * w, c])?, shape))
}

/// Pixel-wise multi-head self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize, heads: usize, groups: usize) -> Self {
        Self {
            norm: b.norm(&format!("{name}.norm"), c, groups),
            q: b.linear(&format!("{name}.q"), c, c),
            k: b.linear(&format!("{name}.k"), c, c),
            v: b.linear(&format!("{name}.v"), c, c),
            out: b.linear(&format!("{name}.out"), c, c),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let hn = self.norm.forward(g, x)?;
        let (tokens, shape) = as_tokens(g, hn)?;
        let q = self.q.forward(g, tokens)?;
        let k = self.k.forward(g, tokens)?;
        let v = self.v.forward(g, tokens)?;
        let a = g.attention(q, k, v, self.heads, None)?;
        let o = self.out.forward(g, a)?;
        let o = g.reshape(o, &shape)?;
        Ok(g.add(x, o)?)
    }
}

/// Pixel queries attending over the text token sequence.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize, text_dim: usize, heads: usize, groups: usize) -> Self {
        Self {
            norm: b.norm(&format!("{name}.norm"), c, groups),
            q: b.linear(&format!("{name}.q"), c, c),
            k: b.linear(&format!("{name}.k"), text_dim, c),
            v: b.linear(&format!("{name}.v"), text_dim, c),
            out: b.linear(&format!("{name}.out"), c, c),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, text: Var, lens: &[usize]) -> Result<Var> {
        let hn = self.norm.forward(g, x)?;
        let (tokens, shape) = as_tokens(g, hn)?;
        let q = self.q.forward(g, tokens)?;
        let k = self.k.forward(g, text)?;
        let v = self.v.forward(g, text)?;
        let a = g.attention(q, k, v, self.heads, Some(lens.to_vec()))?;
        let o = self.out.forward(g, a)?;
        let o = g.reshape(o, &shape)?;
        Ok(g.add(x, o)?)
    }
}

/// How SE gates are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Gates {
    #[default]
    Excite,
    /// Gates fixed to 1 (test mode): the excitation branch is skipped.
    Bypass,
}

/// Squeeze-and-excitation fusion of UNet features with DEM features.
///
/// `z = [u ‖ d]`, `s = mean_hw(z)`, `e = σ(W₂ relu(W₁ s))`, and the output is
/// `u + P(e ⊙ z)` where `P` is a 1×1 projection back to `u`'s channels.
#[derive(Clone, Debug)]
pub struct SeFuse {
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Linear,
    pub unet_channels: usize,
    pub dem_channels: usize,
}

impl SeFuse {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cu: usize, cd: usize, reduction: usize) -> Self {
        let c = cu + cd;
        let hidden = (c / reduction).max(1);
        Self {
            fc1: b.linear(&format!("{name}.fc1"), c, hidden),
            fc2: b.linear(&format!("{name}.fc2"), hidden, c),
            proj: b.linear(&format!("{name}.proj"), c, cu),
            unet_channels: cu,
            dem_channels: cd,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, u: Var, d: Var, gates: Gates) -> Result<Var> {
        let (su, sd) = (g.shape(u).to_vec(), g.shape(d).to_vec());
        if su.len() != 4 || sd.len() != 4 || su[..3] != sd[..3] {
            return Err(Error::Shape(format!("SE fusion: UNet features {su:?} vs DEM features {sd:?}")));
        }
        if su[3] != self.unet_channels || sd[3] != self.dem_channels {
            return Err(Error::Shape(format!(
                "SE fusion expects {}+{} channels, got {}+{}",
                self.unet_channels, self.dem_channels, su[3], sd[3]
            )));
        }
        let z = g.concat(u, d)?;
        let z = match gates {
            Gates::Bypass => z,
            Gates::Excite => {
                let s = g.spatial_mean(z)?;
                let e = self.fc1.forward(g, s)?;
                let e = g.relu(e);
                let e = self.fc2.forward(g, e)?;
                let e = g.sigmoid(e);
                g.scale_per_sample(z, e)?
            }
        };
        let p = self.proj.forward(g, z)?;
        Ok(g.add(u, p)?)
    }
}

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]` (scaled by 1000) into
/// `dim` features: `dim/2` sines followed by `dim/2` cosines over
/// geometrically spaced frequencies.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim must be even and positive, got {dim}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("flow time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let arg = t * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (arg * freq).sin();
        out[half + i] = (arg * freq).cos();
    }
    Ok(out)
}
