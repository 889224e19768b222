//! The gradient-verification registry: every differentiable operation, the
//! layers, the generator end-to-end and both loss bundles, each swept against
//! the central finite-difference oracle at its stated tolerance.

use crate::error::Result;
use crate::fdcheck::{finite_diff_check_tampered, FdReport};
use crate::graph::{GradGraph, Var};
use crate::losses::{bce_probs, cyclegan_losses, dice_loss, gan_losses, supervised_loss};
use crate::models::{
    discriminator_forward, discriminator_params, generator_forward, generator_params,
    DiscriminatorKind, DiscriminatorSpec, GeneratorConfig,
};
use crate::nn::{self, bind, Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

const PRIMITIVE_STEPS: &[f64] = &[1e-5];
const COMPOSITE_STEPS: &[f64] = &[1e-5, 1e-4, 1e-3];
/// Deliberate gradient offset used when an op is corrupted for the
/// sensitivity self-test.
const TAMPER: f64 = 0.05;

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        in_channels: 1,
        base_channels: 2,
        downsample_stages: 2,
        transformer_blocks: 1,
        n_heads: 2,
        out_channels: 1,
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn unit_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn binary_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_int(2) as f64).collect()).unwrap()
}

/// Parameters scaled for healthy gradient magnitudes in the oracle sweep.
fn scaled_params(mut ps: ParamSet, rng: &mut Rng) -> ParamSet {
    for (name, t) in ps.iter_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with(".gain") { 1.0 + 0.1 * rng.normal() } else { 0.2 * rng.normal() };
        }
    }
    ps
}

fn params_as_inputs(ps: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    let names = ps.names();
    let tensors = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    (names, tensors)
}

struct Entry {
    name: &'static str,
    steps: &'static [f64],
    tol: f64,
    run: Box<dyn Fn(&[f64], f64, f64) -> Result<FdReport>>,
}

fn elementwise_entry(
    name: &'static str,
    tol: f64,
    shape: &'static [usize],
    seed: u64,
    apply: fn(&mut GradGraph, Var) -> Result<Var>,
) -> Entry {
    Entry {
        name,
        steps: PRIMITIVE_STEPS,
        tol,
        run: Box::new(move |steps, tol, tamper| {
            let mut rng = Rng::new(seed);
            // keep relu-family inputs away from the kink
            let x = Tensor::from_vec(
                shape,
                (0..shape.iter().product::<usize>())
                    .map(|_| {
                        let v = rng.normal();
                        if v.abs() < 0.05 {
                            v + 0.1_f64.copysign(v)
                        } else {
                            v
                        }
                    })
                    .collect(),
            )
            .unwrap();
            finite_diff_check_tampered(
                name,
                std::slice::from_ref(&x),
                |g, vars| {
                    let y = apply(g, vars[0])?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    }
}

fn registry() -> Vec<Entry> {
    let mut entries: Vec<Entry> = Vec::new();

    // ---- elementwise primitives
    entries.push(elementwise_entry("add", 1e-6, &[2, 3], 101, |g, v| {
        let c = g.scalar(0.7);
        g.add(v, c)
    }));
    entries.push(elementwise_entry("sub", 1e-6, &[2, 3], 102, |g, v| {
        let c = g.scalar(0.3);
        g.sub(c, v)
    }));
    entries.push(elementwise_entry("mul", 1e-6, &[2, 3], 103, |g, v| g.mul(v, v)));
    entries.push(elementwise_entry("neg", 1e-6, &[2, 3], 104, |g, v| {
        let n = g.neg(v);
        let c = g.scalar(1.5);
        g.mul(n, c)
    }));
    entries.push(elementwise_entry("exp", 1e-6, &[2, 3], 105, |g, v| Ok(g.exp(v))));
    entries.push(elementwise_entry("log", 1e-6, &[2, 3], 106, |g, v| {
        let sq = g.power(v, 2.0); // keep log inputs positive
        let c = g.scalar(0.5);
        let shifted = g.add(sq, c)?;
        Ok(g.log(shifted))
    }));
    entries.push(elementwise_entry("sigmoid", 1e-6, &[2, 3], 107, |g, v| Ok(g.sigmoid(v))));
    entries.push(elementwise_entry("relu", 1e-6, &[3, 3], 108, |g, v| Ok(g.relu(v))));
    entries.push(elementwise_entry("leaky_relu", 1e-6, &[3, 3], 109, |g, v| {
        Ok(g.leaky_relu(v, 0.2))
    }));
    entries.push(elementwise_entry("power", 1e-6, &[2, 3], 110, |g, v| Ok(g.power(v, 3.0))));
    entries.push(elementwise_entry("abs", 1e-6, &[3, 3], 111, |g, v| Ok(g.abs(v))));

    // ---- shape and reduction primitives
    entries.push(elementwise_entry("sum", 1e-6, &[2, 4], 112, |g, v| {
        let s = g.sum(v);
        Ok(g.power(s, 2.0))
    }));
    entries.push(elementwise_entry("mean", 1e-6, &[2, 4], 113, |g, v| {
        let m = g.mean(v);
        Ok(g.power(m, 3.0))
    }));
    entries.push(elementwise_entry("reshape", 1e-6, &[2, 6], 114, |g, v| g.reshape(v, &[3, 4])));
    entries.push(elementwise_entry("transpose", 1e-6, &[3, 4], 115, |g, v| g.transpose2(v)));
    entries.push(elementwise_entry("slice_concat", 1e-6, &[4, 4], 116, |g, v| {
        let a = g.slice(v, 0, 0, 2)?;
        let b = g.slice(v, 0, 2, 2)?;
        g.concat(&[b, a], 0)
    }));
    entries.push(elementwise_entry("softmax", 1e-6, &[3, 5], 117, |g, v| {
        let s = g.softmax(v, 1)?;
        Ok(g.power(s, 2.0))
    }));
    entries.push(elementwise_entry("instance_norm", 1e-5, &[1, 2, 3, 3], 118, |g, v| {
        let y = g.instance_norm(v, 1e-5)?;
        Ok(g.power(y, 3.0))
    }));

    // ---- multi-input primitives
    entries.push(Entry {
        name: "add_row",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(119);
            let m = random_tensor(&[3, 4], &mut rng);
            let r = random_tensor(&[4], &mut rng);
            finite_diff_check_tampered(
                "add_row",
                &[m, r],
                |g, vars| {
                    let y = g.add_row(vars[0], vars[1])?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "matmul",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(120);
            let a = random_tensor(&[3, 4], &mut rng);
            let b = random_tensor(&[4, 2], &mut rng);
            finite_diff_check_tampered(
                "matmul",
                &[a, b],
                |g, vars| {
                    let c = g.matmul(vars[0], vars[1])?;
                    let sq = g.power(c, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "matmul_stable",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(121);
            let a = random_tensor(&[3, 4], &mut rng);
            let b = random_tensor(&[4, 2], &mut rng);
            finite_diff_check_tampered(
                "matmul_stable",
                &[a, b],
                |g, vars| {
                    let c = g.matmul_stable(vars[0], vars[1])?;
                    let sq = g.power(c, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "conv2d",
        steps: PRIMITIVE_STEPS,
        tol: 1e-5,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(122);
            let x = random_tensor(&[1, 1, 6, 6], &mut rng);
            let w = random_tensor(&[2, 1, 3, 3], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            finite_diff_check_tampered(
                "conv2d",
                &[x, w, b],
                |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "conv2d_transpose",
        steps: PRIMITIVE_STEPS,
        tol: 1e-5,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(123);
            let x = random_tensor(&[1, 2, 3, 3], &mut rng);
            let w = random_tensor(&[2, 1, 3, 3], &mut rng);
            let b = random_tensor(&[1], &mut rng);
            finite_diff_check_tampered(
                "conv2d_transpose",
                &[x, w, b],
                |g, vars| {
                    let y = g.conv2d_transpose(vars[0], vars[1], vars[2], 2, 1, 1)?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "layer_norm",
        steps: PRIMITIVE_STEPS,
        tol: 1e-5,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(124);
            let x = random_tensor(&[3, 4], &mut rng);
            let gain = random_tensor(&[4], &mut rng);
            let bias = random_tensor(&[4], &mut rng);
            finite_diff_check_tampered(
                "layer_norm",
                &[x, gain, bias],
                |g, vars| {
                    let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "bce_with_logits",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(125);
            let z = random_tensor(&[3, 3], &mut rng);
            let y = binary_tensor(&[3, 3], &mut rng);
            finite_diff_check_tampered(
                "bce_with_logits",
                std::slice::from_ref(&z),
                |g, vars| {
                    let t = g.constant(y.clone());
                    g.bce_with_logits(vars[0], t)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });

    // ---- layers
    entries.push(Entry {
        name: "linear",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(126);
            let x = random_tensor(&[3, 4], &mut rng);
            let w = random_tensor(&[4, 2], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            finite_diff_check_tampered(
                "linear",
                &[x, w, b],
                |g, vars| {
                    let y = nn::linear(g, vars[0], vars[1], vars[2])?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "mhsa",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let cfg = nn::AttentionConfig::new(4, 2).unwrap();
            let mut ps = ParamSet::new();
            nn::add_mhsa(&mut ps, "attn", &cfg);
            let mut rng = Rng::new(127);
            let ps = scaled_params(ps, &mut rng);
            let x = random_tensor(&[3, 4], &mut rng);
            let (names, tensors) = params_as_inputs(&ps);
            let mut inputs = vec![x];
            inputs.extend(tensors);
            finite_diff_check_tampered(
                "mhsa",
                &inputs,
                |g, vars| {
                    let bound =
                        Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
                    let y = nn::mhsa(g, vars[0], &bound, "attn", &cfg)?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "transformer_block",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let cfg = nn::AttentionConfig::new(4, 2).unwrap();
            let mut ps = ParamSet::new();
            nn::add_transformer_block(&mut ps, "blk", &cfg);
            let mut rng = Rng::new(128);
            let ps = scaled_params(ps, &mut rng);
            let x = random_tensor(&[3, 4], &mut rng);
            let (names, tensors) = params_as_inputs(&ps);
            let mut inputs = vec![x];
            inputs.extend(tensors);
            finite_diff_check_tampered(
                "transformer_block",
                &inputs,
                |g, vars| {
                    let bound =
                        Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
                    let y = nn::transformer_block(g, vars[0], &bound, "blk", &cfg)?;
                    let sq = g.power(y, 2.0);
                    Ok(g.sum(sq))
                },
                steps,
                tol,
                tamper,
            )
        }),
    });

    // ---- losses
    entries.push(Entry {
        name: "bce_probs",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(129);
            let p = Tensor::from_vec(&[3, 3], (0..9).map(|_| rng.range(0.05, 0.95)).collect())
                .unwrap();
            let y = binary_tensor(&[3, 3], &mut rng);
            finite_diff_check_tampered(
                "bce_probs",
                std::slice::from_ref(&p),
                |g, vars| {
                    let t = g.constant(y.clone());
                    bce_probs(g, vars[0], t)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "dice_loss",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(130);
            let p = unit_tensor(&[1, 1, 4, 4], &mut rng);
            let y = binary_tensor(&[1, 1, 4, 4], &mut rng);
            finite_diff_check_tampered(
                "dice_loss",
                std::slice::from_ref(&p),
                |g, vars| {
                    let t = g.constant(y.clone());
                    dice_loss(g, vars[0], t)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "supervised_loss",
        steps: PRIMITIVE_STEPS,
        tol: 1e-6,
        run: Box::new(|steps, tol, tamper| {
            let mut rng = Rng::new(131);
            let p = Tensor::from_vec(
                &[1, 1, 4, 4],
                (0..16).map(|_| rng.range(0.05, 0.95)).collect(),
            )
            .unwrap();
            let y = binary_tensor(&[1, 1, 4, 4], &mut rng);
            finite_diff_check_tampered(
                "supervised_loss",
                std::slice::from_ref(&p),
                |g, vars| {
                    let t = g.constant(y.clone());
                    supervised_loss(g, vars[0], t)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });

    // ---- models end-to-end
    entries.push(Entry {
        name: "generator_e2e",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let cfg = tiny_generator();
            let mut rng = Rng::new(132);
            let ps = scaled_params(generator_params(&cfg).unwrap(), &mut rng);
            let image = unit_tensor(&[1, 1, 8, 8], &mut rng);
            let target = binary_tensor(&[1, 1, 8, 8], &mut rng);
            let (names, inputs) = params_as_inputs(&ps);
            finite_diff_check_tampered(
                "generator_e2e",
                &inputs,
                |g, vars| {
                    let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                    let img = g.constant(image.clone());
                    let probs = generator_forward(g, img, &bound, &cfg)?;
                    let gt = g.constant(target.clone());
                    supervised_loss(g, probs, gt)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    for (name, kind) in [
        ("discriminator_pixel", DiscriminatorKind::Pixel),
        ("discriminator_patch8", DiscriminatorKind::Patch(8)),
        ("discriminator_whole", DiscriminatorKind::WholeImage),
    ] {
        entries.push(Entry {
            name,
            steps: COMPOSITE_STEPS,
            tol: 1e-4,
            run: Box::new(move |steps, tol, tamper| {
                let spec = DiscriminatorSpec { kind, conditional: true };
                let mut rng = Rng::new(133);
                let ps = scaled_params(discriminator_params(&spec).unwrap(), &mut rng);
                let image = unit_tensor(&[1, 1, 8, 8], &mut rng);
                let mask = unit_tensor(&[1, 1, 8, 8], &mut rng);
                let (names, inputs) = params_as_inputs(&ps);
                finite_diff_check_tampered(
                    name,
                    &inputs,
                    |g, vars| {
                        let bound =
                            Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                        let img = g.constant(image.clone());
                        let m = g.constant(mask.clone());
                        let logits = discriminator_forward(g, img, m, &bound, &spec)?;
                        let ones = g.constant(Tensor::filled(
                            &g.value(logits).shape().to_vec(),
                            1.0,
                        ));
                        g.bce_with_logits(logits, ones)
                    },
                    steps,
                    tol,
                    tamper,
                )
            }),
        });
    }

    // ---- loss bundles
    entries.push(Entry {
        name: "gan_loss_d",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let (model, spec, g_ps, d_ps, image, mask) = gan_fixture(134);
            let (names, inputs) = params_as_inputs(&d_ps);
            finite_diff_check_tampered(
                "gan_loss_d",
                &inputs,
                |g, vars| {
                    let d_bound =
                        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                    let g_bound = bind(g, &g_ps, false);
                    let img = g.constant(image.clone());
                    let gt = g.constant(mask.clone());
                    let out = gan_losses(g, &d_bound, &spec, &g_bound, &model, img, gt, 1.0)?;
                    Ok(out.loss_d)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "gan_loss_g",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let (model, spec, g_ps, d_ps, image, mask) = gan_fixture(135);
            let (names, inputs) = params_as_inputs(&g_ps);
            finite_diff_check_tampered(
                "gan_loss_g",
                &inputs,
                |g, vars| {
                    let g_bound =
                        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                    let d_bound = bind(g, &d_ps, false);
                    let img = g.constant(image.clone());
                    let gt = g.constant(mask.clone());
                    let out = gan_losses(g, &d_bound, &spec, &g_bound, &model, img, gt, 1.0)?;
                    Ok(out.loss_g)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "cyclegan_loss_d",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let (model, spec, fixture) = cyclegan_fixture(136);
            let (names, inputs) = params_as_inputs(&fixture.d1);
            finite_diff_check_tampered(
                "cyclegan_loss_d",
                &inputs,
                |g, vars| {
                    let d1 = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                    let d2 = bind(g, &fixture.d2, false);
                    let g1 = bind(g, &fixture.g1, false);
                    let g2 = bind(g, &fixture.g2, false);
                    let img = g.constant(fixture.image.clone());
                    let gt = g.constant(fixture.mask.clone());
                    let out = cyclegan_losses(g, &d1, &d2, &spec, &g1, &g2, &model, img, gt, 1.0, 1.0)?;
                    Ok(out.loss_d1)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });
    entries.push(Entry {
        name: "cyclegan_loss_g",
        steps: COMPOSITE_STEPS,
        tol: 1e-4,
        run: Box::new(|steps, tol, tamper| {
            let (model, spec, fixture) = cyclegan_fixture(137);
            let (n1, t1) = params_as_inputs(&fixture.g1);
            let (n2, t2) = params_as_inputs(&fixture.g2);
            let split = t1.len();
            let mut inputs = t1;
            inputs.extend(t2);
            finite_diff_check_tampered(
                "cyclegan_loss_g",
                &inputs,
                |g, vars| {
                    let g1 = Bound::from_pairs(n1.iter().cloned().zip(vars[..split].iter().copied()));
                    let g2 = Bound::from_pairs(n2.iter().cloned().zip(vars[split..].iter().copied()));
                    let d1 = bind(g, &fixture.d1, false);
                    let d2 = bind(g, &fixture.d2, false);
                    let img = g.constant(fixture.image.clone());
                    let gt = g.constant(fixture.mask.clone());
                    let out = cyclegan_losses(g, &d1, &d2, &spec, &g1, &g2, &model, img, gt, 1.0, 1.0)?;
                    Ok(out.loss_g_total)
                },
                steps,
                tol,
                tamper,
            )
        }),
    });

    entries
}

fn gan_fixture(
    seed: u64,
) -> (GeneratorConfig, DiscriminatorSpec, ParamSet, ParamSet, Tensor, Tensor) {
    let model = tiny_generator();
    let spec = DiscriminatorSpec::default();
    let mut rng = Rng::new(seed);
    let g_ps = scaled_params(generator_params(&model).unwrap(), &mut rng);
    let d_ps = scaled_params(discriminator_params(&spec).unwrap(), &mut rng);
    let image = unit_tensor(&[1, 1, 8, 8], &mut rng);
    let mask = binary_tensor(&[1, 1, 8, 8], &mut rng);
    (model, spec, g_ps, d_ps, image, mask)
}

struct CycleFixture {
    g1: ParamSet,
    g2: ParamSet,
    d1: ParamSet,
    d2: ParamSet,
    image: Tensor,
    mask: Tensor,
}

fn cyclegan_fixture(seed: u64) -> (GeneratorConfig, DiscriminatorSpec, CycleFixture) {
    let model = tiny_generator();
    let spec = DiscriminatorSpec::default();
    let mut rng = Rng::new(seed);
    let g1 = scaled_params(generator_params(&model).unwrap(), &mut rng);
    let g2 = scaled_params(generator_params(&model).unwrap(), &mut rng);
    let d1 = scaled_params(discriminator_params(&spec).unwrap(), &mut rng);
    let d2 = scaled_params(discriminator_params(&spec).unwrap(), &mut rng);
    let image = unit_tensor(&[1, 1, 8, 8], &mut rng);
    let mask = binary_tensor(&[1, 1, 8, 8], &mut rng);
    (model, spec, CycleFixture { g1, g2, d1, d2, image, mask })
}

/// Names of every registered check, in run order.
pub fn registered_ops() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

/// Run the whole suite (or the single op named by `only`), optionally
/// corrupting the op named by `corrupt` to prove the harness notices.
pub fn run(only: Option<&str>, corrupt: Option<&str>) -> Result<Vec<FdReport>> {
    let mut reports = Vec::new();
    for entry in registry() {
        if let Some(filter) = only {
            if entry.name != filter {
                continue;
            }
        }
        let tamper = if corrupt == Some(entry.name) { TAMPER } else { 0.0 };
        reports.push((entry.run)(entry.steps, entry.tol, tamper)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn registry_names_are_unique_and_complete() {
        let names = registered_ops();
        let set: BTreeSet<&&str> = names.iter().collect();
        assert_eq!(set.len(), names.len(), "duplicate registry entries");
        for expected in [
            "add", "sub", "mul", "neg", "exp", "log", "sigmoid", "relu", "leaky_relu", "power",
            "abs", "add_row", "matmul", "matmul_stable", "softmax", "conv2d", "conv2d_transpose",
            "sum", "mean", "reshape", "transpose", "slice_concat", "instance_norm", "layer_norm",
            "bce_with_logits", "linear", "mhsa", "transformer_block", "bce_probs", "dice_loss",
            "supervised_loss", "generator_e2e", "discriminator_pixel", "discriminator_patch8",
            "discriminator_whole", "gan_loss_d", "gan_loss_g", "cyclegan_loss_d",
            "cyclegan_loss_g",
        ] {
            assert!(names.contains(&expected), "missing registry entry {expected}");
        }
    }

    #[test]
    fn single_op_runs_and_passes() {
        let reports = run(Some("relu"), None).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].passed(), "{}", reports[0]);
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let reports = run(Some("matmul"), Some("matmul")).unwrap();
        assert!(!reports[0].passed(), "tampered gradient slipped through: {}", reports[0]);
    }
}
