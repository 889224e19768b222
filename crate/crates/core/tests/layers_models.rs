//! Layer and model behavior: attention properties, block identities,
//! generator/discriminator contracts.

use stgan_core::fdcheck::{finite_diff_check_multi, finite_diff_check_steps};
use stgan_core::graph::GradGraph;
use stgan_core::models::{
    discriminator_forward, discriminator_params, generator_forward, generator_params, param_count,
    DiscriminatorKind, DiscriminatorSpec, GeneratorConfig,
};
use stgan_core::nn::{
    self, add_linear, add_mhsa, add_transformer_block, bind, init_params, AttentionConfig,
    ParamSet,
};
use stgan_core::rng::Rng;
use stgan_core::tensor::Tensor;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        in_channels: 1,
        base_channels: 2,
        downsample_stages: 2,
        transformer_blocks: 1,
        n_heads: 2,
        out_channels: 1,
    }
}

#[test]
fn linear_identity_and_hand_value() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero = g.constant(Tensor::zeros(&[2]));
    let y = nn::linear(&mut g, x, eye, zero).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let x2 = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
    let w = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_vec(&[1], vec![3.0]).unwrap());
    let y2 = nn::linear(&mut g, x2, w, b).unwrap();
    assert_eq!(g.value(y2).data(), &[6.0]);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = Rng::new(2);
    let x = random_tensor(&[3, 4], &mut rng);
    let w = random_tensor(&[4, 2], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let report = finite_diff_check_multi(
        "linear",
        &[x, w, b],
        |g, vars| {
            let y = nn::linear(g, vars[0], vars[1], vars[2])?;
            let sq = g.power(y, 2.0);
            Ok(g.sum(sq))
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

fn mhsa_fixture(cfg: &AttentionConfig, seed: u64) -> ParamSet {
    let mut ps = ParamSet::new();
    add_mhsa(&mut ps, "attn", cfg);
    let mut rng = Rng::new(seed);
    init_params(&mut ps, &mut rng);
    // non-zero biases so the output projection is exercised fully
    for name in ps.names() {
        if name.ends_with(".bias") {
            for v in ps.get_mut(&name).unwrap().data_mut() {
                *v = 0.01;
            }
        }
    }
    ps
}

#[test]
fn mhsa_single_token_reduces_to_projected_value() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let ps = mhsa_fixture(&cfg, 3);
    let mut rng = Rng::new(4);
    let x = random_tensor(&[1, 8], &mut rng);

    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let xv = g.constant(x);
    let (out, attns) = nn::mhsa_with_attn(&mut g, xv, &bound, "attn", &cfg).unwrap();
    for a in &attns {
        assert_eq!(g.value(*a).data(), &[1.0]);
    }
    // expected: out = (x Wv + bv) Wo + bo
    let wv = bound.var("attn.wv.weight");
    let bv = bound.var("attn.wv.bias");
    let wo = bound.var("attn.wo.weight");
    let bo = bound.var("attn.wo.bias");
    let v = nn::linear(&mut g, xv, wv, bv).unwrap();
    let expect = nn::linear(&mut g, v, wo, bo).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn mhsa_identical_tokens_attend_half_half() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let ps = mhsa_fixture(&cfg, 5);
    let mut rng = Rng::new(6);
    let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let two = Tensor::from_vec(&[2, 8], [row.clone(), row].concat()).unwrap();

    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let xv = g.constant(two);
    let (out, attns) = nn::mhsa_with_attn(&mut g, xv, &bound, "attn", &cfg).unwrap();
    for a in &attns {
        for &w in g.value(*a).data() {
            assert!((w - 0.5).abs() < 1e-12, "weight {w}");
        }
    }
    let o = g.value(out).data();
    assert_eq!(o[..8], o[8..], "identical tokens must produce identical rows");
}

#[test]
fn mhsa_permutation_equivariance_is_exact() {
    let cfg = AttentionConfig::new(8, 4).unwrap();
    let ps = mhsa_fixture(&cfg, 7);
    let mut rng = Rng::new(8);
    let t = 12;
    let x = random_tensor(&[t, 8], &mut rng);

    let mut perm: Vec<usize> = (0..t).collect();
    rng.shuffle(&mut perm);
    let mut permuted = vec![0.0; t * 8];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&x.data()[src * 8..(src + 1) * 8]);
    }
    let px = Tensor::from_vec(&[t, 8], permuted).unwrap();

    let run = |input: Tensor| -> Vec<f64> {
        let mut g = GradGraph::new();
        let bound = bind(&mut g, &ps, false);
        let xv = g.constant(input);
        let out = nn::mhsa(&mut g, xv, &bound, "attn", &cfg).unwrap();
        g.value(out).data().to_vec()
    };
    let base = run(x);
    let shuffled = run(px);
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..8 {
            assert_eq!(
                shuffled[dst * 8 + j].to_bits(),
                base[src * 8 + j].to_bits(),
                "mhsa(P x) != P mhsa(x) at row {dst}, col {j}"
            );
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = AttentionConfig::new(16, 4).unwrap();
    let ps = mhsa_fixture(&cfg, 9);
    let mut rng = Rng::new(10);
    let x = random_tensor(&[20, 16], &mut rng);
    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let xv = g.constant(x);
    let (_, attns) = nn::mhsa_with_attn(&mut g, xv, &bound, "attn", &cfg).unwrap();
    for a in attns {
        for row in g.value(a).data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn transformer_block_with_zero_weights_is_identity() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mut ps = ParamSet::new();
    add_transformer_block(&mut ps, "blk", &cfg);
    // zero weights, unit gains: both sublayers emit exactly zero
    for name in ps.names() {
        if name.ends_with(".gain") {
            ps.get_mut(&name).unwrap().data_mut().fill(1.0);
        }
    }
    let mut rng = Rng::new(11);
    let x = random_tensor(&[6, 8], &mut rng);
    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let xv = g.constant(x.clone());
    let out = nn::transformer_block(&mut g, xv, &bound, "blk", &cfg).unwrap();
    for (a, b) in g.value(out).data().iter().zip(x.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn transformer_block_preserves_shape() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mut ps = ParamSet::new();
    add_transformer_block(&mut ps, "blk", &cfg);
    let mut rng = Rng::new(12);
    init_params(&mut ps, &mut rng);
    for t in [1usize, 4, 16] {
        let x = random_tensor(&[t, 8], &mut rng);
        let mut g = GradGraph::new();
        let bound = bind(&mut g, &ps, false);
        let xv = g.constant(x);
        let out = nn::transformer_block(&mut g, xv, &bound, "blk", &cfg).unwrap();
        assert_eq!(g.value(out).shape(), &[t, 8]);
    }
}

#[test]
fn transformer_block_gradient_matches_finite_differences() {
    let cfg = AttentionConfig::new(4, 2).unwrap();
    let mut ps = ParamSet::new();
    add_transformer_block(&mut ps, "blk", &cfg);
    let mut rng = Rng::new(13);
    // well-scaled weights keep all gradient magnitudes away from the
    // relative-error floor (0.02-scale init leaves score-path gradients
    // at the machine-noise level)
    for (_, t) in ps.iter_mut() {
        for v in t.data_mut() {
            *v = 0.3 * rng.normal();
        }
    }

    let x = random_tensor(&[3, 4], &mut rng);
    let names = ps.names();
    let mut inputs = vec![x];
    for n in &names {
        inputs.push(ps.get(n).unwrap().clone());
    }
    let report = finite_diff_check_multi(
        "transformer_block",
        &inputs,
        |g, vars| {
            let pairs: Vec<(String, stgan_core::graph::Var)> =
                names.iter().cloned().zip(vars[1..].iter().copied()).collect();
            let bound = nn::Bound::from_pairs(pairs);
            let out = nn::transformer_block(g, vars[0], &bound, "blk", &cfg)?;
            let sq = g.power(out, 2.0);
            Ok(g.sum(sq))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn generator_shape_range_and_determinism() {
    let cfg = GeneratorConfig::default();
    let mut ps = generator_params(&cfg).unwrap();
    let mut rng = Rng::new(14);
    init_params(&mut ps, &mut rng);

    // two identical batch items
    let one: Vec<f64> = (0..64 * 64).map(|i| ((i % 97) as f64) / 96.0).collect();
    let image = Tensor::from_vec(&[2, 1, 64, 64], [one.clone(), one].concat()).unwrap();

    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let img = g.constant(image);
    let out = generator_forward(&mut g, img, &bound, &cfg).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 1, 64, 64]);
    let data = g.value(out).data();
    assert!(data.iter().all(|&v| v > 0.0 && v < 1.0), "output not in (0,1)");
    let half = data.len() / 2;
    assert_eq!(data[..half], data[half..], "identical inputs must map identically");
}

#[test]
fn generator_rejects_bad_spatial_size() {
    let cfg = GeneratorConfig::default();
    let mut ps = generator_params(&cfg).unwrap();
    let mut rng = Rng::new(15);
    init_params(&mut ps, &mut rng);
    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let img = g.constant(Tensor::zeros(&[1, 1, 30, 30]));
    let err = generator_forward(&mut g, img, &bound, &cfg).unwrap_err();
    assert!(err.to_string().contains("divisible"), "{err}");
}

#[test]
fn generator_param_count_matches_layer_sum() {
    let cfg = GeneratorConfig::default();
    let ps = generator_params(&cfg).unwrap();

    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let linear = |di: usize, do_: usize| di * do_ + do_;
    let d = cfg.d_model(); // 64
    let block = 2 * (2 * d) // two layer norms (gain + bias)
        + 4 * linear(d, d) // wq, wk, wv, wo
        + linear(d, 2 * d) + linear(2 * d, d); // mlp
    let expected = conv(16, 1, 7)
        + conv(32, 16, 3)
        + conv(64, 32, 3)
        + cfg.transformer_blocks * block
        + (64 * 32 * 9 + 32) // convt1 weight [64,32,3,3] + bias
        + (32 * 16 * 9 + 16) // convt2
        + conv(1, 16, 7);
    assert_eq!(param_count(&ps), expected);
    assert_eq!(expected, 114_753);

    // arithmetic spot checks
    let mut single = ParamSet::new();
    nn::add_conv(&mut single, "c", 16, 1, 3, 3);
    assert_eq!(param_count(&single), 160);
    assert_eq!(param_count(&ParamSet::new()), 0);
}

#[test]
fn pixel_discriminator_shape_and_locality() {
    let spec = DiscriminatorSpec { kind: DiscriminatorKind::Pixel, conditional: true };
    let mut ps = discriminator_params(&spec).unwrap();
    let mut rng = Rng::new(16);
    init_params(&mut ps, &mut rng);

    let image = random_tensor(&[1, 1, 32, 32], &mut rng);
    let mask = random_tensor(&[1, 1, 32, 32], &mut rng);
    let logits = |img: &Tensor, msk: &Tensor| -> Vec<f64> {
        let mut g = GradGraph::new();
        let bound = bind(&mut g, &ps, false);
        let iv = g.constant(img.clone());
        let mv = g.constant(msk.clone());
        let out = discriminator_forward(&mut g, iv, mv, &bound, &spec).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 32, 32]);
        g.value(out).data().to_vec()
    };
    let base = logits(&image, &mask);

    // 1x1 receptive field: flipping one pixel changes exactly that logit
    let mut rng2 = Rng::new(99);
    for _ in 0..8 {
        let idx = rng2.uniform_int(32 * 32);
        let mut perturbed = mask.clone();
        perturbed.data_mut()[idx] += 1.5;
        let out = logits(&image, &perturbed);
        for (i, (a, b)) in base.iter().zip(&out).enumerate() {
            if i == idx {
                assert_ne!(a, b, "perturbed pixel must change its own logit");
            } else {
                assert_eq!(a, b, "logit {i} changed by a distant pixel");
            }
        }
    }
}

#[test]
fn whole_image_discriminator_is_one_logit_per_sample() {
    let spec = DiscriminatorSpec { kind: DiscriminatorKind::WholeImage, conditional: true };
    let mut ps = discriminator_params(&spec).unwrap();
    let mut rng = Rng::new(17);
    init_params(&mut ps, &mut rng);
    let image = random_tensor(&[3, 1, 32, 32], &mut rng);
    let mask = random_tensor(&[3, 1, 32, 32], &mut rng);
    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let iv = g.constant(image);
    let mv = g.constant(mask);
    let out = discriminator_forward(&mut g, iv, mv, &bound, &spec).unwrap();
    assert_eq!(g.value(out).shape(), &[3, 1, 1, 1]);
}

#[test]
fn patch_discriminator_downsamples_by_depth() {
    for (n, factor) in [(8usize, 4usize), (16, 8), (32, 16), (70, 32)] {
        let spec = DiscriminatorSpec { kind: DiscriminatorKind::Patch(n), conditional: true };
        let mut ps = discriminator_params(&spec).unwrap();
        let mut rng = Rng::new(18);
        init_params(&mut ps, &mut rng);
        let image = random_tensor(&[1, 1, 64, 64], &mut rng);
        let mask = random_tensor(&[1, 1, 64, 64], &mut rng);
        let mut g = GradGraph::new();
        let bound = bind(&mut g, &ps, false);
        let iv = g.constant(image);
        let mv = g.constant(mask);
        let out = discriminator_forward(&mut g, iv, mv, &bound, &spec).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 64 / factor, 64 / factor], "N={n}");
    }
    let bad = DiscriminatorSpec { kind: DiscriminatorKind::Patch(9), conditional: true };
    assert!(discriminator_params(&bad).is_err());
}

#[test]
fn conditional_discriminator_reacts_to_the_image() {
    let spec = DiscriminatorSpec::default();
    let mut ps = discriminator_params(&spec).unwrap();
    let mut rng = Rng::new(19);
    init_params(&mut ps, &mut rng);
    let image_a = random_tensor(&[1, 1, 16, 16], &mut rng);
    let image_b = random_tensor(&[1, 1, 16, 16], &mut rng);
    let mask = random_tensor(&[1, 1, 16, 16], &mut rng);
    let run = |img: &Tensor| {
        let mut g = GradGraph::new();
        let bound = bind(&mut g, &ps, false);
        let iv = g.constant(img.clone());
        let mv = g.constant(mask.clone());
        let out = discriminator_forward(&mut g, iv, mv, &bound, &spec).unwrap();
        g.value(out).data().to_vec()
    };
    assert_ne!(run(&image_a), run(&image_b));
}

#[test]
fn discriminator_rejects_spatial_mismatch() {
    let spec = DiscriminatorSpec::default();
    let ps = discriminator_params(&spec).unwrap();
    let mut g = GradGraph::new();
    let bound = bind(&mut g, &ps, false);
    let iv = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    let mv = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    assert!(discriminator_forward(&mut g, iv, mv, &bound, &spec).is_err());
}

#[test]
fn generator_end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_generator_config();
    let mut ps = generator_params(&cfg).unwrap();
    let mut rng = Rng::new(20);
    for (name, t) in ps.iter_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with(".gain") { 1.0 + 0.1 * rng.normal() } else { 0.2 * rng.normal() };
        }
    }

    let image = Tensor::from_vec(
        &[1, 1, 8, 8],
        (0..64).map(|_| rng.uniform()).collect(),
    )
    .unwrap();
    let target = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect()).unwrap();

    let names = ps.names();
    let inputs: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    let report = finite_diff_check_steps(
        "generator_e2e",
        &inputs,
        |g, vars| {
            let pairs: Vec<(String, stgan_core::graph::Var)> =
                names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = nn::Bound::from_pairs(pairs);
            let img = g.constant(image.clone());
            let probs = generator_forward(g, img, &bound, &cfg)?;
            let tgt = g.constant(target.clone());
            let diff = g.sub(probs, tgt)?;
            let sq = g.power(diff, 2.0);
            Ok(g.mean(sq))
        },
        // deep composite: two step sizes cover both the round-off-noise
        // regime (zero-gradient norm biases) and the curvature regime
        &[1e-5, 1e-4],
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
