//! The registry of differentiable operations checked by `gradcheck`.
//!
//! Every case reduces its output to a scalar through a fixed random weighting,
//! so no element's gradient is trivially uniform.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var, IGNORE_INDEX};
use crate::eci::{EciConfig, EciHead};
use crate::error::Result;
use crate::gradcheck::{GradCase, GradInstance, ScalarFn};
use crate::lora::{inject_lora, lora_forward, LoraConfig, LoraTarget};
use crate::model::{transformer_forward, LanguageModel, Model, ModelConfig};
use crate::params::{Bound, Param};
use crate::tensor::Tensor;
use crate::train::{joint_loss, Reduction};

/// Instances per case.
pub const SHAPES_PER_CASE: usize = 3;

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let h = name.bytes().fold(seed, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(h)
}

fn param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

/// `Σ w ⊙ x` with a fixed random `w`.
fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone())?;
    let p = g.mul(x, wv)?;
    g.sum(p)
}

fn weights_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Builds a case whose reduction weights match the shape `out_shape` returns.
fn case<S>(name: &str, seed: u64, mut setup: S) -> GradCase
where
    S: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>, ScalarFn),
{
    let mut rng = rng_for(name, seed);
    let instances = (0..SHAPES_PER_CASE)
        .map(|_| {
            let (inputs, out_shape, f) = setup(&mut rng);
            let w = weights_like(&out_shape, &mut rng);
            let f: ScalarFn = Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = f(g, v)?;
                weighted_sum(g, y, &w)
            });
            GradInstance { inputs, f }
        })
        .collect();
    GradCase {
        name: name.into(),
        instances,
    }
}

/// Scalar-valued case; no extra reduction.
fn scalar_case<S>(name: &str, seed: u64, mut setup: S) -> GradCase
where
    S: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, ScalarFn),
{
    let mut rng = rng_for(name, seed);
    let instances = (0..SHAPES_PER_CASE)
        .map(|_| {
            let (inputs, f) = setup(&mut rng);
            GradInstance { inputs, f }
        })
        .collect();
    GradCase {
        name: name.into(),
        instances,
    }
}

fn elementwise(name: &str, seed: u64, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> GradCase {
    case(name, seed, move |rng| {
        let shape = vec![dim(rng, 1, 4), dim(rng, 1, 5)];
        let inputs = vec![param(&shape, rng), param(&shape, rng)];
        (inputs, shape, Box::new(move |g: &mut Graph, v: &[Var]| op(g, v[0], v[1])))
    })
}

fn eci_config(s: usize, d: usize, n: usize, k: usize, widths: Vec<usize>) -> EciConfig {
    EciConfig {
        max_kernel: n,
        avg_kernel: k,
        hidden_widths: widths,
        ..EciConfig::new(vec!["yes".into(), "no".into(), "maybe".into()], s, d)
    }
}

fn tiny_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        vocab_size: dim(rng, 5, 9),
        d_model: 16,
        n_layers: 2,
        n_heads: [1, 2, 4][rng.random_range(0..3)],
        max_seq_len: 4,
        ff_mult: 2,
        init_std: 0.3,
        norm_eps: 1e-6,
    }
}

/// All registered cases.
pub fn registry(seed: u64) -> Vec<GradCase> {
    let mut cases = vec![
        elementwise("add", seed, |g, a, b| g.add(a, b)),
        elementwise("mul", seed, |g, a, b| g.mul(a, b)),
        case("add_bias", seed, |rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let inputs = vec![param(&[m, n], rng), param(&[n], rng)];
            (inputs, vec![m, n], Box::new(|g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1])))
        }),
        case("scale", seed, |rng| {
            let shape = vec![dim(rng, 1, 6)];
            let k = rng.random_range(-2.0..2.0);
            (vec![param(&shape, rng)], shape, Box::new(move |g: &mut Graph, v: &[Var]| g.scale(v[0], k)))
        }),
        case("matmul", seed, |rng| {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let inputs = vec![param(&[m, k], rng), param(&[k, n], rng)];
            (inputs, vec![m, n], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])))
        }),
        case("linear", seed, |rng| {
            let (m, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
            let inputs = vec![param(&[m, i], rng), param(&[o, i], rng)];
            (inputs, vec![m, o], Box::new(|g: &mut Graph, v: &[Var]| g.linear(v[0], v[1])))
        }),
        case("transpose", seed, |rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
            (vec![param(&[m, n], rng)], vec![n, m], Box::new(|g: &mut Graph, v: &[Var]| g.transpose(v[0])))
        }),
        case("reshape", seed, |rng| {
            let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let out = vec![a * b, c];
            let target = out.clone();
            (vec![param(&[a, b, c], rng)], out, Box::new(move |g: &mut Graph, v: &[Var]| {
                let r = g.reshape(v[0], &target)?;
                let f = g.flatten(r)?;
                g.reshape(f, &target)
            }))
        }),
        case("gather", seed, |rng| {
            let (rows, d, n) = (dim(rng, 2, 6), dim(rng, 1, 4), dim(rng, 1, 6));
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
            (vec![param(&[rows, d], rng)], vec![n, d], Box::new(move |g: &mut Graph, v: &[Var]| g.gather(v[0], &ids)))
        }),
        case("silu", seed, |rng| {
            let shape = vec![dim(rng, 1, 4), dim(rng, 1, 4)];
            (vec![param(&shape, rng)], shape, Box::new(|g: &mut Graph, v: &[Var]| g.silu(v[0])))
        }),
        scalar_case("sum_mean", seed, |rng| {
            let shape = vec![dim(rng, 1, 4), dim(rng, 1, 4)];
            let w = weights_like(&shape, rng);
            (vec![param(&shape, rng)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let wv = g.constant(w.clone())?;
                let p = g.mul(v[0], wv)?;
                let s = g.sum(p)?;
                let q = g.mul(p, p)?;
                let m = g.mean(q)?;
                g.add(s, m)
            }))
        }),
        case("softmax", seed, |rng| {
            let shape = vec![dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            (vec![param(&shape, rng)], shape, Box::new(move |g: &mut Graph, v: &[Var]| g.softmax(v[0], axis)))
        }),
        scalar_case("cross_entropy", seed, |rng| {
            let (rows, c) = (dim(rng, 2, 5), dim(rng, 2, 5));
            let mut targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..c)).collect();
            targets[0] = IGNORE_INDEX;
            (vec![param(&[rows, c], rng)], Box::new(move |g: &mut Graph, v: &[Var]| {
                g.cross_entropy(v[0], &targets, Some(IGNORE_INDEX))
            }))
        }),
        case("max_pool_1d", seed, |rng| {
            let (b, len, d) = (dim(rng, 1, 2), dim(rng, 4, 9), dim(rng, 1, 3));
            let kernel = dim(rng, 1, 3);
            let stride = dim(rng, 1, 3);
            let out = vec![b, crate::autograd::pooled_len(len, kernel, stride).unwrap(), d];
            (vec![param(&[b, len, d], rng)], out, Box::new(move |g: &mut Graph, v: &[Var]| {
                g.max_pool_1d(v[0], 1, kernel, stride)
            }))
        }),
        case("avg_pool_1d", seed, |rng| {
            let (b, s, len) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 4, 10));
            let kernel = dim(rng, 1, 4);
            let stride = dim(rng, 1, 3);
            let out = vec![b, s, crate::autograd::pooled_len(len, kernel, stride).unwrap()];
            (vec![param(&[b, s, len], rng)], out, Box::new(move |g: &mut Graph, v: &[Var]| {
                g.avg_pool_1d(v[0], 2, kernel, stride)
            }))
        }),
        case("rms_norm", seed, |rng| {
            let (m, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let inputs = vec![param(&[m, d], rng), param(&[d], rng)];
            (inputs, vec![m, d], Box::new(|g: &mut Graph, v: &[Var]| g.rms_norm(v[0], v[1], 1e-6)))
        }),
        case("causal_attention", seed, |rng| {
            let (b, s, heads) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 2));
            let d = heads * dim(rng, 1, 3);
            let shape = [b * s, d];
            let inputs = vec![param(&shape, rng), param(&shape, rng), param(&shape, rng)];
            (inputs, shape.to_vec(), Box::new(move |g: &mut Graph, v: &[Var]| {
                g.causal_attention(v[0], v[1], v[2], b, s, heads)
            }))
        }),
        case("lora_forward", seed, |rng| {
            let (n, i, o, r) = (dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5), dim(rng, 1, 2));
            let scale = rng.random_range(0.5..2.0);
            let w0 = Tensor::randn(&[o, i], 1.0, rng);
            let inputs = vec![param(&[n, i], rng), w0, param(&[r, i], rng), param(&[o, r], rng)];
            (inputs, vec![n, o], Box::new(move |g: &mut Graph, v: &[Var]| {
                lora_forward(g, v[0], v[1], v[2], v[3], scale)
            }))
        }),
        scalar_case("eci_forward+cross_entropy", seed, |rng| {
            let (s, d) = (dim(rng, 5, 11), dim(rng, 8, 17));
            let b = dim(rng, 1, 3);
            let cfg = eci_config(s, d, dim(rng, 2, 5), dim(rng, 2, 8), vec![dim(rng, 2, 6), dim(rng, 2, 4)]);
            let head = EciHead::init(cfg.clone(), rng.random()).unwrap();
            let names: Vec<String> = head.params().names().map(String::from).collect();
            let mut inputs = vec![param(&[b, s, d], rng)];
            inputs.extend(head.params().iter().map(|(_, p)| match p {
                Param::Dense(t) => {
                    // Nonzero biases so every path is exercised.
                    let mut t = t.clone();
                    t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
                    t
                }
                Param::Nf4(_) => unreachable!(),
            }));
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
            let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s)).collect();
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut bound = Bound::new();
                for (name, &var) in names.iter().zip(&v[1..]) {
                    bound.insert(name.clone(), var);
                }
                let logits = head.forward_graph(g, &bound, v[0], Some(&lens))?;
                g.cross_entropy(logits, &targets, None)
            }))
        }),
        scalar_case("joint_loss", seed, |rng| {
            let (b, s, vocab, c) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 3, 6), dim(rng, 2, 4));
            let lambda = [0.0, 0.3, 1.0][rng.random_range(0..3)];
            let reduction = if rng.random() { Reduction::Mean } else { Reduction::Sum };
            let mut tg: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..vocab)).collect();
            tg[0] = IGNORE_INDEX;
            let cls: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            let lambda = if b * s == 1 { 1.0 } else { lambda };
            let tg = if b * s == 1 { vec![0] } else { tg };
            let inputs = vec![param(&[b, s, vocab], rng), param(&[b, c], rng)];
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                Ok(joint_loss(g, v[0], &tg, v[1], &cls, lambda, reduction)?.total)
            }))
        }),
    ];
    cases.push(model_case(seed));
    cases.push(lora_model_case(seed));
    cases
}

/// Decoder forward, gradient with respect to the token-embedding table.
fn model_case(seed: u64) -> GradCase {
    case("transformer_forward", seed, |rng| {
        let cfg = tiny_model_config(rng);
        let model = Model::init(cfg.clone(), rng.random()).unwrap();
        let (b, s) = (dim(rng, 1, 2), dim(rng, 2, 4));
        let ids: Vec<Vec<usize>> = (0..b)
            .map(|_| (0..s).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
            .collect();
        let names: Vec<String> = model.params().names().map(String::from).collect();
        let inputs: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(n, p)| p.to_dense().with_requires_grad(n == "tok_embed"))
            .collect();
        let out = vec![b, s, cfg.vocab_size];
        (inputs, out, Box::new(move |g: &mut Graph, v: &[Var]| {
            let mut bound = Bound::new();
            for (n, &var) in names.iter().zip(v) {
                bound.insert(n.clone(), var);
            }
            Ok(transformer_forward(&cfg, 1.0, g, &bound, &ids)?.logits)
        }))
    })
}

/// Decoder with adapters: gradient with respect to every A and B.
fn lora_model_case(seed: u64) -> GradCase {
    case("lora_model_forward", seed, |rng| {
        let cfg = tiny_model_config(rng);
        let model = Model::init(cfg.clone(), rng.random()).unwrap();
        let lcfg = LoraConfig {
            rank: 2,
            alpha: 3.0,
            targets: vec![LoraTarget::QProj, LoraTarget::VProj],
        };
        let mut lm = inject_lora(model, lcfg, rng.random()).unwrap();
        for (_, p) in lm.adapters_mut().iter_mut() {
            if let Param::Dense(t) = p {
                t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
        }
        let scale = lm.lora_scale();
        let (b, s) = (1, dim(rng, 2, 4));
        let ids: Vec<Vec<usize>> = vec![(0..s).map(|_| rng.random_range(0..cfg.vocab_size)).collect()];
        let mut names: Vec<String> = lm.base().params().names().map(String::from).collect();
        let mut inputs: Vec<Tensor> = lm.base().params().iter().map(|(_, p)| p.to_dense()).collect();
        for (n, p) in lm.adapters().iter() {
            names.push(n.into());
            inputs.push(p.to_dense());
        }
        let out = vec![b, s, cfg.vocab_size];
        (inputs, out, Box::new(move |g: &mut Graph, v: &[Var]| {
            let mut bound = Bound::new();
            for (n, &var) in names.iter().zip(v) {
                bound.insert(n.clone(), var);
            }
            Ok(transformer_forward(&cfg, scale, g, &bound, &ids)?.logits)
        }))
    })
}

/// Names of the registered cases, in order.
pub fn case_names() -> Vec<String> {
    registry(0).into_iter().map(|c| c.name).collect()
}

/// `"name: ok"`-style line for a result row.
pub fn format_row(row: &crate::gradcheck::GradRow) -> String {
    format!(
        "{:<28} {:>2} shapes  max rel err {:.3e}  {}",
        row.name,
        row.instances,
        row.max_rel_error,
        if row.passed { "PASS" } else { "FAIL" }
    )
}
