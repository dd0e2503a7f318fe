//! Central finite differences against the tape for every op.

use geodiffussr_tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a loss as `mse(f(params), target)` and compares every parameter
/// entry against a central difference.
fn check<F>(store: ParamStore<f64>, target_shape: &[usize], f: F)
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let target = rand_tensor(&mut rng, target_shape);
    let loss_of = |s: &ParamStore<f64>| -> (f64, Option<geodiffussr_tensor::Gradients<f64>>) {
        let mut g = Graph::new(s, true);
        let out = f(&mut g).unwrap();
        let t = g.input(target.clone());
        let l = g.mse(out, t).unwrap();
        let v = g.value(l).data()[0];
        (v, Some(g.backward(l).unwrap()))
    };
    let (_, grads) = loss_of(&store);
    let grads = grads.unwrap();
    let h = 1e-6;
    for id in store.ids() {
        let n = store.value(id).numel();
        for i in 0..n {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[i] -= h;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "param {} [{i}]: fd {fd} vs analytic {an}", store.get(id).name);
        }
    }
}

fn store_with(shapes: &[(&str, &[usize])]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let ids = shapes.iter().map(|(n, sh)| s.add(*n, rand_tensor(&mut rng, sh))).collect();
    (s, ids)
}

#[test]
fn conv_and_bias() {
    let (s, ids) = store_with(&[("x", &[2, 4, 5, 3]), ("w", &[3, 3, 3, 2]), ("b", &[2])]);
    check(s, &[2, 4, 5, 2], |g| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        g.conv2d(x, w, Some(b))
    });
}

#[test]
fn linear_silu_sigmoid_relu() {
    let (s, ids) = store_with(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])]);
    check(s, &[3, 5], |g| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.linear(x, w, Some(b))?;
        let a = g.silu(y);
        let c = g.sigmoid(y);
        let r = g.relu(y);
        let s = g.add(a, c)?;
        let s = g.mul(s, r)?;
        let s = g.sub(s, y)?;
        Ok(g.scale(s, 0.5))
    });
}

#[test]
fn pooling_upsampling_concat_reshape() {
    let (s, ids) = store_with(&[("x", &[2, 4, 4, 3]), ("y", &[2, 2, 2, 2])]);
    check(s, &[2, 4, 4, 5], |g| {
        let (x, y) = (g.param(ids[0]), g.param(ids[1]));
        let p = g.avg_pool2(x)?;
        let c = g.concat(p, y)?;
        let u = g.upsample2(c)?;
        let r = g.reshape(u, &[2, 16, 5])?;
        g.reshape(r, &[2, 4, 4, 5])
    });
}

#[test]
fn group_norm_and_per_sample_ops() {
    let (s, ids) =
        store_with(&[("x", &[2, 3, 3, 4]), ("gamma", &[4]), ("beta", &[4]), ("e", &[2, 4]), ("bias", &[4])]);
    check(s, &[2, 3, 3, 4], |g| {
        let x = g.param(ids[0]);
        let (ga, be, e, bias) = (g.param(ids[1]), g.param(ids[2]), g.param(ids[3]), g.param(ids[4]));
        let n = g.group_norm(x, ga, be, 2)?;
        let n = g.add_per_sample(n, e)?;
        let m = g.spatial_mean(n)?;
        let gate = g.sigmoid(m);
        let y = g.scale_per_sample(n, gate)?;
        g.add_bias(y, bias)
    });
}

#[test]
fn masked_multihead_attention() {
    let (s, ids) = store_with(&[("q", &[2, 5, 4]), ("k", &[2, 3, 4]), ("v", &[2, 3, 4])]);
    check(s, &[2, 5, 4], |g| {
        let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        g.attention(q, k, v, 2, Some(vec![3, 2]))
    });
}

#[test]
fn attention_rows_are_distributions() {
    use geodiffussr_tensor::kernels::{attention_forward, AttnGeom};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = rand_tensor(&mut rng, &[2, 6, 8]);
    let k = rand_tensor(&mut rng, &[2, 4, 8]);
    let geom = AttnGeom { b: 2, tq: 6, tk: 4, c: 8, heads: 2, key_lens: Some(vec![4, 1]) };
    let (_, probs) = attention_forward(q.data(), k.data(), k.data(), &geom);
    for (r, row) in probs.chunks(4).enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        if r >= 12 {
            assert!(row[1..].iter().all(|&p| p == 0.0), "masked keys must get zero weight");
        }
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_tensor(&mut rng, &[3]));
    let b = s.add_frozen("b", rand_tensor(&mut rng, &[3]));
    let mut g = Graph::new(&s, true);
    let (va, vb) = (g.param(a), g.param(b));
    let y = g.mul(va, vb).unwrap();
    let z = g.input(Tensor::zeros([3]));
    let l = g.mse(y, z).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
}
