mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use ksdiff::kernelgen::*;
use ksdiff::nn::ParamStore;
use ksdiff::Error;
use proptest::prelude::*;

fn t(v: Vec<f64>, d: &[usize]) -> Tensor {
    Tensor::from_vec(v, d, &Device::Cpu).unwrap()
}

fn random_tucker(rng: &mut impl rand::Rng, ranks: [usize; 4], sizes: [usize; 4]) -> (CoreTensor, FactorSet) {
    let core = CoreTensor::new(uniform(rng, &ranks, DType::F64)).unwrap();
    let f = FactorSet::new(std::array::from_fn(|n| uniform(rng, &[sizes[n], ranks[n]], DType::F64))).unwrap();
    (core, f)
}

#[test]
fn centroid_matches_token_mean_loop() {
    let mut r = rng(11);
    let z = uniform(&mut r, &[16, 128], DType::F64);
    let rows = z.to_vec2::<f64>().unwrap();
    let got = to_vec(&pool_centroid(&z).unwrap());
    for c in 0..128 {
        let mean = rows.iter().map(|row| row[c]).sum::<f64>() / 16.0;
        assert!((got[c] - mean).abs() <= 1e-12);
    }
    let batched = z.unsqueeze(0).unwrap();
    assert_eq!(pool_centroid(&batched).unwrap().dims(), &[1, 128]);
}

#[test]
fn single_linear_core_with_identity_weight_reshapes_centroid() {
    let store = ParamStore::new(DType::F64, 0);
    let mut cfg = KernelGenConfig::new(2, 2, 1, [2, 2, 2, 2], 16);
    cfg.core_layers = 0;
    let g = CoreGenerator::new(&store.root(), &cfg).unwrap();
    assert_eq!(g.layers.len(), 1);
    g.layers[0].weight.set(&Tensor::eye(16, DType::F64, &Device::Cpu).unwrap()).unwrap();
    let e: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 1.0).collect();
    let core = g.forward(&t(e.clone(), &[16])).unwrap();
    assert_eq!(core.ranks(), [2, 2, 2, 2]);
    assert_eq!(to_vec(&core.0), e);
}

#[test]
fn factor_heads_match_hand_attention() {
    let store = ParamStore::new(DType::F64, 5);
    let mut cfg = KernelGenConfig::new(2, 2, 1, [1, 1, 1, 1], 4);
    cfg.factor_width = 3;
    let fg = FactorGenerator::new(&store.root(), &cfg).unwrap();
    let mut r = rng(6);
    let tokens = uniform(&mut r, &[1, 4, 3], DType::F64);
    let tok = tokens.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    let f = fg.factors_from_tokens(&tokens).unwrap();
    for (n, head) in fg.heads.iter().enumerate() {
        let q = head.queries.to_vec2::<f64>().unwrap()[0].clone();
        let wk = head.key.weight.to_vec2::<f64>().unwrap();
        let wv = head.value.weight.to_vec2::<f64>().unwrap();
        let wp = head.proj.weight.to_vec2::<f64>().unwrap();
        let bp = head.proj.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let lin = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> { w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
        let logits: Vec<f64> = tok.iter().map(|x| lin(&wk, x).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let zsum: f64 = ex.iter().sum();
        let mut ctx = [0.0; 3];
        for (x, e) in tok.iter().zip(&ex) {
            for (c, v) in lin(&wv, x).iter().enumerate() {
                ctx[c] += e / zsum * v;
            }
        }
        let expect: Vec<f64> = lin(&wp, &ctx).iter().zip(&bp).map(|(a, b)| a + b).collect();
        let got = to_vec(&f.0[n]);
        assert_eq!(f.0[n].dims(), &[1, cfg.mode_sizes()[n], 1]);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "mode {n}: {g} vs {e}");
        }
    }
}

#[test]
fn expansion_matches_quadruple_sum() {
    let mut r = rng(21);
    for (ranks, sizes) in [([4, 4, 2, 2], [32, 32, 3, 3]), ([1, 3, 2, 1], [2, 5, 3, 1]), ([2, 2, 2, 2], [2, 2, 2, 2])] {
        let (core, f) = random_tucker(&mut r, ranks, sizes);
        let got = to_vec(&tucker_expand(&core, &f).unwrap());
        let fv: Vec<Vec<f64>> = f.0.iter().map(to_vec).collect();
        let want = tucker_brute(&to_vec(&core.0), ranks, [&fv[0], &fv[1], &fv[2], &fv[3]], sizes);
        let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = got.iter().zip(&want).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err <= 1e-12 * scale.max(1.0), "{ranks:?}: {err}");
    }
}

#[test]
fn mode_order_does_not_matter() {
    let mut r = rng(22);
    let (core, f) = random_tucker(&mut r, [3, 2, 2, 2], [5, 4, 3, 3]);
    let reference = tucker_expand(&core, &f).unwrap();
    let mut orders = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let o = [a, b, c, d];
                    let mut s = o;
                    s.sort();
                    if s == [0, 1, 2, 3] {
                        orders.push(o);
                    }
                }
            }
        }
    }
    assert_eq!(orders.len(), 24);
    for o in orders {
        let w = tucker_expand_ordered(&core, &f, o).unwrap();
        assert!(max_abs_diff(&w, &reference) <= 1e-10, "order {o:?}");
    }
    assert!(matches!(tucker_expand_ordered(&core, &f, [0, 0, 1, 2]), Err(Error::Config(_))));
}

#[test]
fn zero_core_or_zero_factor_gives_zero_kernel() {
    let mut r = rng(23);
    let (core, f) = random_tucker(&mut r, [2, 2, 1, 1], [3, 3, 3, 3]);
    let zero_core = CoreTensor::new(core.0.zeros_like().unwrap()).unwrap();
    assert!(to_vec(&tucker_expand(&zero_core, &f).unwrap()).iter().all(|v| *v == 0.0));
    let mut us = f.0.clone();
    us[2] = us[2].zeros_like().unwrap();
    let w = tucker_expand(&core, &FactorSet::new(us).unwrap()).unwrap();
    assert!(to_vec(&w).iter().all(|v| *v == 0.0));
}

#[test]
fn modulation_is_elementwise_product() {
    let mut r = rng(24);
    let base = uniform(&mut r, &[3, 4, 3, 3], DType::F64);
    let w = uniform(&mut r, &[2, 3, 4, 3, 3], DType::F64);
    let got = to_vec(&modulate(&base, &w).unwrap());
    let (bv, wv) = (to_vec(&base), to_vec(&w));
    for (i, g) in got.iter().enumerate() {
        assert_eq!(*g, wv[i] * bv[i % bv.len()]);
    }
    assert!(matches!(modulate(&base, &uniform(&mut r, &[3, 4, 3, 1], DType::F64)), Err(Error::Shape(_))));
}

#[test]
fn modulated_conv_matches_dense_oracle() {
    let store = ParamStore::new(DType::F64, 30);
    let mut cfg = KernelGenConfig::new(2, 3, 3, [2, 2, 2, 1], 5);
    cfg.core_hidden = 8;
    cfg.factor_width = 4;
    let layer = KsConv::new(&store.root(), cfg, true).unwrap();
    let mut r = rng(31);
    randomize(&store.vars("gen."), &mut r, 0.8);
    let x = uniform(&mut r, &[1, 2, 4, 4], DType::F64);
    let z = uniform(&mut r, &[1, 3, 5], DType::F64);
    let kernel = layer.effective_kernel(&x, Some(&z), Modulation::Generated).unwrap();
    let base = to_vec(layer.spec.base.as_tensor());
    let kv = to_vec(&kernel);
    assert!(kv.iter().zip(&base).any(|(a, b)| (a - b).abs() > 1e-3), "modulation should be active");
    let bias = to_vec(layer.spec.bias.as_ref().unwrap().as_tensor());
    let want = conv_dense(&to_vec(&x), 2, 4, 4, &kv, 3, 3, &bias);
    let got = to_vec(&layer.forward(&x, Some(&z), Modulation::Generated).unwrap());
    let err = got.iter().zip(&want).fold(0.0f64, |a, (g, w)| a.max((g - w).abs()));
    assert!(err <= 1e-12, "{err}");
    let plain = conv_dense(&to_vec(&x), 2, 4, 4, &base, 3, 3, &bias);
    let ident = to_vec(&layer.forward(&x, Some(&z), Modulation::Identity).unwrap());
    let err = ident.iter().zip(&plain).fold(0.0f64, |a, (g, w)| a.max((g - w).abs()));
    assert!(err <= 1e-12);
}

#[test]
fn fresh_generator_leaves_base_kernel_untouched() {
    let store = ParamStore::new(DType::F32, 32);
    let cfg = KernelGenConfig::new(4, 4, 3, [2, 2, 2, 2], 8);
    let layer = KsConv::new(&store.root(), cfg, true).unwrap();
    let mut r = rng(33);
    let x = uniform(&mut r, &[2, 4, 8, 8], DType::F32);
    let z = uniform(&mut r, &[2, 16, 8], DType::F32);
    let a = layer.forward(&x, Some(&z), Modulation::Generated).unwrap();
    let b = layer.forward(&x, Some(&z), Modulation::Identity).unwrap();
    assert_eq!(to_vec(&a), to_vec(&b));
}

#[test]
fn registry_counts_match_closed_forms() {
    for (c_in, c_out, ranks, settings) in [
        (32, 32, [4, 4, 2, 2], GeneratorSettings::default()),
        (64, 128, [8, 8, 2, 2], GeneratorSettings::default()),
        (3, 5, [1, 2, 3, 1], GeneratorSettings { core_hidden: 7, core_layers: 1, factor_width: 6, ..Default::default() }),
        (4, 2, [2, 2, 1, 1], GeneratorSettings { core_layers: 0, factor_width: 3, ..Default::default() }),
    ] {
        let cfg = settings.layer(c_in, c_out, 3, ranks, 16);
        let store = ParamStore::new(DType::F32, 0);
        KsConv::new(&store.root(), cfg, true).unwrap();
        assert_eq!(store.num_params("gen."), param_count(&cfg), "{cfg:?}");
        let naive = GeneratorSettings { kind: GeneratorKind::NaiveMlp, ..settings }.layer(c_in, c_out, 3, ranks, 16);
        let store = ParamStore::new(DType::F32, 0);
        KsConv::new(&store.root(), naive, true).unwrap();
        assert_eq!(store.num_params("gen."), naive_mlp_param_count(&naive));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let store = ParamStore::new(DType::F32, 0);
    let bad = KernelGenConfig::new(4, 4, 3, [0, 1, 1, 1], 8);
    assert!(matches!(KsConv::new(&store.root(), bad, true), Err(Error::Config(_))));
    let cfg = KernelGenConfig::new(4, 4, 3, [1, 1, 1, 1], 8);
    let layer = KsConv::new(&store.root().pp("ok"), cfg, true).unwrap();
    let x = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
    let z = Tensor::zeros((1, 2, 8), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(layer.forward(&x, Some(&z), Modulation::Generated), Err(Error::Shape(_))));
    let x = Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
    let wrong_cz = Tensor::zeros((1, 2, 7), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(layer.forward(&x, Some(&wrong_cz), Modulation::Generated), Err(Error::Shape(_))));
}

#[test]
fn kernel_generation_gradients() {
    let mut r = rng(40);
    let store = ParamStore::new(DType::F64, 41);
    let mut cfg = KernelGenConfig::new(2, 2, 3, [2, 1, 2, 1], 4);
    cfg.core_hidden = 5;
    cfg.core_layers = 1;
    cfg.factor_width = 3;
    let layer = KsConv::new(&store.root(), cfg, true).unwrap();
    randomize(&store.vars("gen."), &mut r, 0.7);
    let x = uniform(&mut r, &[1, 2, 6, 6], DType::F64);
    let z = uniform(&mut r, &[1, 2, 4], DType::F64);
    let wts = uniform(&mut r, &[1, 2, 6, 6], DType::F64);
    let rep = grad_check(&store.vars(""), || probe(&layer.forward(&x, Some(&z), Modulation::Generated)?, &wts), 1e-5, 24);
    assert!(rep.rel_err <= 1e-4, "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expansion_is_linear_in_the_core(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (g1, f) = random_tucker(&mut r, [2, 3, 1, 2], [4, 3, 3, 2]);
        let g2 = CoreTensor::new(uniform(&mut r, &[2, 3, 1, 2], DType::F64)).unwrap();
        let mix = CoreTensor::new(((&g1.0 * a).unwrap() + (&g2.0 * b).unwrap()).unwrap()).unwrap();
        let lhs = tucker_expand(&mix, &f).unwrap();
        let rhs = ((tucker_expand(&g1, &f).unwrap() * a).unwrap() + (tucker_expand(&g2, &f).unwrap() * b).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn scaling_a_factor_scales_the_kernel(seed in 0u64..1000, mode in 0usize..4, s in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (g, f) = random_tucker(&mut r, [2, 2, 2, 2], [3, 2, 3, 3]);
        let mut us = f.0.clone();
        us[mode] = (&us[mode] * s).unwrap();
        let scaled = tucker_expand(&g, &FactorSet::new(us).unwrap()).unwrap();
        let want = (tucker_expand(&g, &f).unwrap() * s).unwrap();
        prop_assert!(max_abs_diff(&scaled, &want) <= 1e-12);
    }

    #[test]
    fn factorized_count_grows_linearly(d in 1usize..64) {
        let c = |d: usize| param_count(&KernelGenConfig::new(d, 16, 3, [2, 2, 2, 2], 32)) as i64;
        prop_assert_eq!(c(d + 1) - c(d), c(2) - c(1));
    }
}
