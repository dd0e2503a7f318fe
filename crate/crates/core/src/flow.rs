//! Linear-interpolant conditional flow matching: the probability path,
//! velocity regression loss, classifier-free guidance and an Euler sampler.
//!
//! Textures live in `[-1, 1]` inside the flow. `t = 0` is pure noise and
//! `t = 1` is data.

use geodiffussr_tensor::{Gradients, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, substream};
use crate::tile::TextureTile;

pub const DEFAULT_SAMPLER_STEPS: usize = 50;
/// Guidance scale used for evaluation.
pub const DEFAULT_CFG_SCALE: f64 = 8.0;

/// A point on the probability path.
#[derive(Clone, Debug)]
pub struct FlowState<T> {
    pub x_t: Tensor<T>,
    pub t: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_SAMPLER_STEPS, cfg_scale: DEFAULT_CFG_SCALE, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be ≥ 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("sampler.cfg_scale must be finite and ≥ 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

fn check_time<T: Real>(t: T) -> Result<()> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::OutOfRange(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate_path<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    same_shape(x0, x1)?;
    check_time(t)?;
    let s = T::one() - t;
    Ok(x0.zip_map(x1, |a, b| s * a + t * b)?)
}

/// `x1 − x0`, the constant velocity along the linear path.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x0, x1)?;
    Ok(x1.zip_map(x0, |b, a| b - a)?)
}

/// A trainable velocity field `v(x_t, t | cond)` evaluated on a tape.
pub trait VelocityModel<T: Real> {
    type Cond;

    fn params(&self) -> &ParamStore<T>;

    /// `x_t` is `[n, h, w, c]`; `t` holds one time per batch element.
    fn predict(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[T], cond: &Self::Cond) -> Result<Var>;
}

/// The random draws behind one loss evaluation.
#[derive(Clone, Debug)]
pub struct CfmDraw<T> {
    pub x0: Tensor<T>,
    pub t: Vec<T>,
    pub x_t: Tensor<T>,
    pub target: Tensor<T>,
}

/// Draw `x0 ~ N(0, I)` and `t ~ U[0, 1)` per batch element for data `x1`
/// of shape `[n, ...]`.
pub fn draw_cfm<T: Real>(x1: &Tensor<T>, rng: &mut impl Rng) -> Result<CfmDraw<T>> {
    let n = *x1.shape().first().ok_or_else(|| Error::Shape("empty data shape".into()))?;
    let per = x1.numel() / n.max(1);
    let t: Vec<T> = (0..n).map(|_| T::lit(rng.random::<f64>())).collect();
    let x0 = Tensor::from_vec(x1.shape().to_vec(), normal_vec(rng, x1.numel()).into_iter().map(T::lit).collect())?;
    let mut x_t = Tensor::zeros(x1.shape().to_vec());
    for b in 0..n {
        let (tb, sb) = (t[b], T::one() - t[b]);
        let span = b * per..(b + 1) * per;
        for ((o, &a), &d) in x_t.data_mut()[span.clone()].iter_mut().zip(&x0.data()[span.clone()]).zip(&x1.data()[span]) {
            *o = sb * a + tb * d;
        }
    }
    let target = velocity_target(&x0, x1)?;
    Ok(CfmDraw { x0, t, x_t, target })
}

/// Conditional flow-matching loss: mean squared error between the predicted
/// velocity at `x_t` and `x1 − x0`. Returns the scalar loss node.
pub fn cfm_loss<T: Real, M: VelocityModel<T>>(
    g: &mut Graph<'_, T>,
    model: &M,
    x1: &Tensor<T>,
    cond: &M::Cond,
    rng: &mut impl Rng,
    step: usize,
) -> Result<Var> {
    let draw = draw_cfm(x1, rng)?;
    cfm_loss_on(g, model, &draw, cond, step)
}

/// [`cfm_loss`] with the random draws supplied by the caller.
pub fn cfm_loss_on<T: Real, M: VelocityModel<T>>(
    g: &mut Graph<'_, T>,
    model: &M,
    draw: &CfmDraw<T>,
    cond: &M::Cond,
    step: usize,
) -> Result<Var> {
    let x_t = g.input(draw.x_t.clone());
    let pred = model.predict(g, x_t, &draw.t, cond)?;
    if g.shape(pred) != draw.target.shape() {
        return Err(Error::Shape(format!(
            "model output {:?} vs target {:?}",
            g.shape(pred),
            draw.target.shape()
        )));
    }
    if !g.value(pred).all_finite() {
        return Err(Error::NonFinite { what: "model output".into(), step });
    }
    let target = g.input(draw.target.clone());
    Ok(g.mse(pred, target)?)
}

/// Loss value and parameter gradients in one pass.
pub fn cfm_loss_and_grads<T: Real, M: VelocityModel<T>>(
    model: &M,
    x1: &Tensor<T>,
    cond: &M::Cond,
    rng: &mut impl Rng,
    step: usize,
) -> Result<(T, Gradients<T>)> {
    let mut g = Graph::new(model.params(), true);
    let loss = cfm_loss(&mut g, model, x1, cond, rng, step)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), step });
    }
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Loss value without gradients.
pub fn cfm_loss_value<T: Real, M: VelocityModel<T>>(
    model: &M,
    x1: &Tensor<T>,
    cond: &M::Cond,
    rng: &mut impl Rng,
    step: usize,
) -> Result<T> {
    let mut g = Graph::new(model.params(), false);
    let loss = cfm_loss(&mut g, model, x1, cond, rng, step)?;
    Ok(g.value(loss).data()[0])
}

/// Which half of a guided evaluation is requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// A velocity field with a conditional and an unconditional branch.
pub trait GuidedVelocity<T: Real> {
    fn velocity(&self, x: &Tensor<T>, t: T, branch: Branch) -> Result<Tensor<T>>;
}

/// `v_uncond + w·(v_cond − v_uncond)`. `w = 0` and `w = 1` return the
/// respective branch unchanged.
pub fn cfg_combine<T: Real>(v_uncond: &Tensor<T>, v_cond: &Tensor<T>, w: T) -> Result<Tensor<T>> {
    same_shape(v_uncond, v_cond)?;
    if w == T::zero() {
        return Ok(v_uncond.clone());
    }
    if w == T::one() {
        return Ok(v_cond.clone());
    }
    Ok(v_uncond.zip_map(v_cond, |u, c| u + w * (c - u))?)
}

/// Guided velocity at `(x, t)`; only the needed branches are evaluated.
pub fn guided_velocity<T: Real, M: GuidedVelocity<T> + ?Sized>(model: &M, x: &Tensor<T>, t: T, w: T) -> Result<Tensor<T>> {
    if w == T::one() {
        return model.velocity(x, t, Branch::Conditional);
    }
    if w == T::zero() {
        return model.velocity(x, t, Branch::Unconditional);
    }
    let vc = model.velocity(x, t, Branch::Conditional)?;
    let vu = model.velocity(x, t, Branch::Unconditional)?;
    cfg_combine(&vu, &vc, w)
}

/// Explicit Euler from `t = 0` to `t = 1` with `steps` uniform steps.
/// Returns the unclamped final state.
pub fn euler_integrate<T: Real, M: GuidedVelocity<T> + ?Sized>(
    model: &M,
    x0: &Tensor<T>,
    steps: usize,
    cfg_scale: f64,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler.steps must be ≥ 1".into()));
    }
    let dt = T::one() / T::lit(steps as f64);
    let w = T::lit(cfg_scale);
    let mut x = x0.clone();
    for i in 0..steps {
        let t = T::lit(i as f64) * dt;
        let v = guided_velocity(model, &x, t, w)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape(format!("velocity {:?} vs state {:?}", v.shape(), x.shape())));
        }
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { what: "sampler state".into(), step: i });
        }
    }
    Ok(x)
}

/// Standard-normal starting noise, one seeded stream per batch element.
pub fn sample_noise<T: Real>(per_sample: &[usize], seeds: &[u64]) -> Tensor<T> {
    let per: usize = per_sample.iter().product();
    let mut data = Vec::with_capacity(per * seeds.len());
    for &s in seeds {
        let mut rng = substream(s, "sampler/noise");
        data.extend(normal_vec(&mut rng, per).into_iter().map(T::lit));
    }
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(per_sample);
    Tensor::from_vec(shape, data).expect("noise shape")
}

/// Integrate one texture per seed and map the result from `[-1, 1]` into
/// clamped `[0, 1]` storage.
pub fn euler_sample_batch<T: Real, M: GuidedVelocity<T> + ?Sized>(
    model: &M,
    height: usize,
    width: usize,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<TextureTile>> {
    cfg.validate()?;
    let x0 = sample_noise::<T>(&[height, width, 3], seeds);
    let x = euler_integrate(model, &x0, cfg.steps, cfg.cfg_scale)?;
    let per = height * width * 3;
    x.data().chunks_exact(per).map(|c| TextureTile::from_model_range(height, width, c)).collect()
}

/// Single texture seeded by `cfg.seed`.
pub fn euler_sample<T: Real, M: GuidedVelocity<T> + ?Sized>(
    model: &M,
    height: usize,
    width: usize,
    cfg: &SamplerConfig,
) -> Result<TextureTile> {
    Ok(euler_sample_batch(model, height, width, cfg, &[cfg.seed])?.remove(0))
}
