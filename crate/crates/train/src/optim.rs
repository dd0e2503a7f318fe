use geodiffussr_tensor::{Gradients, ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { beta1, beta2, eps, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every trainable parameter. A parameter with no
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (lr32, eps) = (lr as f32, self.eps as f32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                p[i] = p[i] * decay - lr32 * (mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
    }
}

/// Exponential moving average of the weights.
pub fn ema_update(ema: &mut ParamStore<f32>, current: &ParamStore<f32>, decay: f64) {
    let d = decay as f32;
    let ids: Vec<_> = ema.ids().collect();
    for id in ids {
        let cur = current.value(id).data();
        for (e, &c) in ema.value_mut(id).data_mut().iter_mut().zip(cur) {
            *e = d * *e + (1.0 - d) * c;
        }
    }
}
