use geodiffussr_core::flow::{cfm_loss_on, draw_cfm, guided_velocity, Branch, GuidedVelocity};
use geodiffussr_core::rng::{normal_vec, substream};
use geodiffussr_core::text::TextBatch;
use geodiffussr_core::unet::{count_parameters, Conditioning, Gates, McaMode, SizePreset, UNet, UNetConfig};
use geodiffussr_core::Error;
use geodiffussr_tensor::{Graph, Tensor};
use rand::Rng;

const DEM_CH: [usize; 3] = [16, 32, 64];

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), normal_vec(&mut substream(seed, "test"), n)).unwrap()
}

fn cond_for(cfg: &UNetConfig, n: usize, seed: u64) -> Conditioning<f64> {
    let r = cfg.resolution;
    let dem = randn(seed + 3, &[n, r, r, 1]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
    Conditioning {
        text: Some(TextBatch { tokens: randn(seed, &[n, 5, cfg.text_dim]), lens: (0..n).map(|i| 5 - i % 3).collect() }),
        pyramid: Some([
            randn(seed + 1, &[n, r, r, cfg.dem_channels[0]]),
            randn(seed + 2, &[n, r / 2, r / 2, cfg.dem_channels[1]]),
            randn(seed + 4, &[n, r / 4, r / 4, cfg.dem_channels[2]]),
        ]),
        dem: Some(dem),
    }
}

fn live(mut cfg: UNetConfig) -> UNetConfig {
    cfg.zero_init_output = false;
    cfg
}

#[test]
fn output_shape_matches_input_in_every_mode() {
    for mode in [McaMode::Full, McaMode::Single16, McaMode::None] {
        let cfg = UNetConfig::preset(SizePreset::S, mode, 16, DEM_CH);
        let unet = UNet::<f64>::new(live(cfg.clone()), 1).unwrap();
        let x = randn(9, &[2, 32, 32, 3]);
        let v = unet.infer(&x, &[0.2, 0.7], &cond_for(&cfg, 2, 5)).unwrap();
        assert_eq!(v.shape(), x.shape(), "{mode:?}");
    }
}

#[test]
fn non_mca_dem_channel_is_live() {
    let cfg = live(UNetConfig::preset(SizePreset::S, McaMode::None, 16, DEM_CH));
    let unet = UNet::<f64>::new(cfg.clone(), 2).unwrap();
    let x = randn(1, &[1, 32, 32, 3]);
    let mut c = cond_for(&cfg, 1, 0);
    c.dem = Some(Tensor::zeros([1, 32, 32, 1]));
    let v0 = unet.infer(&x, &[0.5], &c).unwrap();
    c.dem = Some(Tensor::full([1, 32, 32, 1], 1.0));
    let v1 = unet.infer(&x, &[0.5], &c).unwrap();
    let diff = v0.zip_map(&v1, |a, b| a - b).unwrap().max_abs();
    assert!(diff > 1e-6, "diff {diff}");
}

#[test]
fn missing_conditioning_is_an_error() {
    let cfg = UNetConfig::preset(SizePreset::S, McaMode::Full, 16, DEM_CH);
    let unet = UNet::<f64>::new(cfg.clone(), 0).unwrap();
    let x = randn(1, &[1, 32, 32, 3]);
    let mut c = cond_for(&cfg, 1, 0);
    c.pyramid = None;
    assert!(matches!(unet.infer(&x, &[0.5], &c), Err(Error::MissingConditioning(_))));
    let mut c = cond_for(&cfg, 1, 0);
    c.text = None;
    assert!(matches!(unet.infer(&x, &[0.5], &c), Err(Error::MissingConditioning(_))));
    let wrong = randn(1, &[1, 16, 16, 3]);
    assert!(matches!(unet.infer(&wrong, &[0.5], &cond_for(&cfg, 1, 0)), Err(Error::Shape(_))));
}

#[test]
fn full_with_outer_projections_zeroed_equals_single16() {
    let full_cfg = live(UNetConfig::preset(SizePreset::S, McaMode::Full, 16, DEM_CH));
    let single_cfg = live(UNetConfig::preset(SizePreset::S, McaMode::Single16, 16, DEM_CH));
    let mut full = UNet::<f64>::new(full_cfg.clone(), 42).unwrap();
    let single = UNet::<f64>::new(single_cfg, 42).unwrap();
    for level in [0, 2] {
        let proj = full.se_block(level).unwrap().proj.clone();
        for id in [proj.w, proj.b] {
            full.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = randn(3, &[2, 32, 32, 3]);
    let c = cond_for(&full_cfg, 2, 8);
    let a = full.infer(&x, &[0.1, 0.9], &c).unwrap();
    let b = single.infer(&x, &[0.1, 0.9], &c).unwrap();
    assert_eq!(a.data(), b.data());
    // sanity: without zeroing the two modes differ
    let full = UNet::<f64>::new(full_cfg, 42).unwrap();
    assert_ne!(full.infer(&x, &[0.1, 0.9], &c).unwrap().data(), b.data());
}

#[test]
fn bypassed_gates_change_the_output_only_through_excitation() {
    let cfg = live(UNetConfig::preset(SizePreset::S, McaMode::Full, 16, DEM_CH));
    let mut unet = UNet::<f64>::new(cfg.clone(), 4).unwrap();
    let x = randn(3, &[1, 32, 32, 3]);
    let c = cond_for(&cfg, 1, 8);
    let excited = unet.infer(&x, &[0.3], &c).unwrap();
    unet.set_gates(Gates::Bypass);
    let bypassed = unet.infer(&x, &[0.3], &c).unwrap();
    assert!(bypassed.all_finite());
    assert_ne!(excited.data(), bypassed.data());
}

#[test]
fn inference_is_deterministic() {
    let cfg = live(UNetConfig::preset(SizePreset::M, McaMode::Full, 16, DEM_CH));
    let unet = UNet::<f32>::new(cfg.clone(), 4).unwrap();
    let x = randn(3, &[2, 32, 32, 3]).cast::<f32>();
    let c64 = cond_for(&cfg, 2, 8);
    let c = Conditioning {
        text: c64.text.map(|t| TextBatch { tokens: t.tokens.cast(), lens: t.lens }),
        pyramid: c64.pyramid.map(|p| p.map(|l| l.cast())),
        dem: c64.dem.map(|d| d.cast()),
    };
    let a = unet.infer(&x, &[0.3, 0.6], &c).unwrap();
    let b = unet.infer(&x, &[0.3, 0.6], &c).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn unconditional_branch_uses_null_text() {
    let cfg = live(UNetConfig::preset(SizePreset::S, McaMode::Full, 16, DEM_CH));
    let unet = UNet::<f64>::new(cfg.clone(), 4).unwrap();
    let c = cond_for(&cfg, 1, 2);
    let x = randn(7, &[1, 32, 32, 3]);
    let guided = unet.guided(c.clone());
    let vu = guided.velocity(&x, 0.4, Branch::Unconditional).unwrap();
    let want = unet.infer(&x, &[0.4], &c.unconditional(16)).unwrap();
    assert_eq!(vu.data(), want.data());
    let vc = guided.velocity(&x, 0.4, Branch::Conditional).unwrap();
    assert_ne!(vu.data(), vc.data());
    assert_eq!(guided_velocity(&guided, &x, 0.4, 1.0).unwrap().data(), vc.data());
}

#[test]
fn cfm_gradient_matches_finite_differences() {
    let mut cfg = live(UNetConfig::preset(SizePreset::S, McaMode::Full, 8, [4, 8, 8]));
    cfg.resolution = 8;
    cfg.base_channels = 4;
    cfg.attention_levels = vec![4];
    let unet = UNet::<f64>::new(cfg.clone(), 13).unwrap();
    let x1 = randn(1, &[2, 8, 8, 3]).map(f64::tanh);
    let c = cond_for(&cfg, 2, 1);
    let draw = draw_cfm(&x1, &mut substream(5, "draw")).unwrap();
    let loss = |m: &UNet<f64>| {
        let mut g = Graph::new(m.store(), false);
        let l = cfm_loss_on(&mut g, m, &draw, &c, 0).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(unet.store(), true);
    let l = cfm_loss_on(&mut g, &unet, &draw, &c, 0).unwrap();
    let grads = g.backward(l).unwrap();
    let ids: Vec<_> = unet.store().ids().collect();
    let mut rng = substream(17, "probes");
    let h = 1e-5;
    for _ in 0..20 {
        let id = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..unet.store().value(id).numel());
        let mut plus = unet.clone();
        plus.store_mut().value_mut(id).data_mut()[i] += h;
        let mut minus = unet.clone();
        minus.store_mut().value_mut(id).data_mut()[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(err < 1e-3, "{}[{i}]: fd {fd} vs analytic {an}", unet.store().get(id).name);
    }
}

/// Closed-form count built from the block definitions.
fn analytic_count(cfg: &UNetConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize| 9 * i * o + o;
    let norm = |c: usize| 2 * c;
    let td = cfg.time_dim();
    let res = |i: usize, o: usize| norm(i) + conv(i, o) + lin(td, o) + norm(o) + conv(o, o) + if i != o { lin(i, o) } else { 0 };
    let sa = |c: usize| norm(c) + 4 * lin(c, c);
    let xa = |c: usize| norm(c) + 2 * lin(c, c) + 2 * lin(cfg.text_dim, c);
    let se = |cu: usize, cd: usize| {
        let c = cu + cd;
        let hdn = (c / cfg.se_reduction).max(1);
        lin(c, hdn) + lin(hdn, c) + lin(c, cu)
    };
    let ch = cfg.level_channels();
    let mut n = lin(cfg.base_channels, td) + lin(td, td) + conv(cfg.input_channels(), ch[0]);
    let mut cin = ch[0];
    for l in 0..3 {
        n += res(cin, ch[l]) + xa(ch[l]);
        if cfg.has_attention(l) {
            n += sa(ch[l]);
        }
        if cfg.mca_mode.injected_levels().contains(&l) {
            n += se(ch[l], cfg.dem_channels[l]);
        }
        cin = ch[l];
    }
    n += 2 * res(ch[2], ch[2]) + sa(ch[2]) + xa(ch[2]);
    for l in (0..3).rev() {
        n += res(cin + ch[l], ch[l]) + xa(ch[l]);
        if cfg.has_attention(l) {
            n += sa(ch[l]);
        }
        cin = ch[l];
    }
    n + norm(ch[0]) + conv(ch[0], 3)
}

#[test]
fn parameter_counts() {
    let mut last = 0;
    for size in [SizePreset::S, SizePreset::M, SizePreset::L] {
        let cfg = UNetConfig::preset(size, McaMode::Full, 32, DEM_CH);
        let n = count_parameters(&cfg).unwrap();
        assert_eq!(n, analytic_count(&cfg), "{size:?}");
        assert_eq!(n, count_parameters(&cfg).unwrap());
        assert!(n > last, "{size:?}: {n} <= {last}");
        last = n;
    }
    for mode in [McaMode::Single16, McaMode::None] {
        let cfg = UNetConfig::preset(SizePreset::M, mode, 32, DEM_CH);
        assert_eq!(count_parameters(&cfg).unwrap(), analytic_count(&cfg));
    }
    let mut small = UNetConfig::preset(SizePreset::S, McaMode::Full, 32, DEM_CH);
    let mut big = small.clone();
    big.base_channels *= 2;
    // the text and DEM widths stay fixed, so growth is a bit under 4×
    let ratio = count_parameters(&big).unwrap() as f64 / count_parameters(&small).unwrap() as f64;
    assert!((3.3..=4.0).contains(&ratio), "ratio {ratio}");
    small.text_dim = 1;
    small.dem_channels = [1, 1, 1];
    big.text_dim = 1;
    big.dem_channels = [1, 1, 1];
    let ratio = count_parameters(&big).unwrap() as f64 / count_parameters(&small).unwrap() as f64;
    assert!((3.8..=4.0).contains(&ratio), "conv-dominated ratio {ratio}");
}

#[test]
fn encoder_parameters_are_not_in_the_unet() {
    let enc = geodiffussr_core::encoder::DemEncoder::tiny_seeded();
    let unet = UNet::<f32>::new(UNetConfig::preset(SizePreset::S, McaMode::Full, 32, enc.channels()), 0).unwrap();
    for (_, p) in enc.store().iter() {
        assert!(unet.store().find(&p.name).is_none(), "{}", p.name);
    }
    assert_eq!(unet.store().trainable_count(), count_parameters(unet.config()).unwrap());
}
