//! Finite-difference cases over every differentiable op and every loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnrselect::diff::{Axis, Conv2dSpec, DiffError, Graph, Tensor, Var};
use dnrselect::loss::{
    freq_loss, mse_loss, perceptual_loss, reg_loss, ssim_loss, step2_loss, tv_loss,
    FeatureExtractor, LossWeights,
};
use dnrselect::render::{DnrConfig, DnrModel, ViewInput};
use dnrselect::testing::{check, compare, GradCheck};
use dnrselect::texture::AggregatorMode;

pub const TRIALS: u64 = 10;
pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
const H: f64 = 1e-6;

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradCheck, DiffError>;

pub struct Case {
    pub name: &'static str,
    pub run: CaseFn,
}

/// Entries bounded away from zero so kinks of relu/abs stay out of reach of the step.
fn away(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.05, 0.95, rng)
}

/// Random linear functional of `v`, so every output entry matters.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var, DiffError> {
    let w = Tensor::randn(g.shape(v), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: fn(&mut Graph, Var) -> Result<Var, DiffError>) -> Result<GradCheck, DiffError> {
    let x = away(shape, rng);
    let seed = rng.random();
    check(&[x], H, |g, v| {
        let y = op(g, v[0])?;
        project(g, y, seed)
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var, DiffError>) -> Result<GradCheck, DiffError> {
    let (a, b) = (away(&[2, 3, 4], rng), away(&[2, 3, 4], rng));
    let seed = rng.random();
    check(&[a, b], H, |g, v| {
        let y = op(g, v[0], v[1])?;
        project(g, y, seed)
    })
}

fn conv(rng: &mut ChaCha8Rng, spec: Conv2dSpec, k: usize) -> Result<GradCheck, DiffError> {
    let x = away(&[2, 7, 7], rng);
    let w = away(&[3, 2, k, k], rng);
    let b = away(&[3], rng);
    let seed = rng.random();
    check(&[x, w, b], H, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], spec)?;
        project(g, y, seed)
    })
}

fn image_pair(rng: &mut ChaCha8Rng, side: usize) -> [Tensor; 2] {
    [unit(&[3, side, side], rng), unit(&[3, side, side], rng)]
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", run: |r| binary(r, |g, a, b| g.add(a, b)) },
        Case { name: "sub", run: |r| binary(r, |g, a, b| g.sub(a, b)) },
        Case { name: "mul", run: |r| binary(r, |g, a, b| g.mul(a, b)) },
        Case { name: "div", run: |r| binary(r, |g, a, b| g.div(a, b)) },
        Case { name: "relu", run: |r| unary(r, &[2, 3, 4], |g, a| g.relu(a)) },
        Case { name: "tanh", run: |r| unary(r, &[2, 3, 4], |g, a| g.tanh(a)) },
        Case { name: "abs", run: |r| unary(r, &[2, 3, 4], |g, a| g.abs(a)) },
        Case { name: "square", run: |r| unary(r, &[2, 3, 4], |g, a| g.square(a)) },
        Case { name: "scale", run: |r| unary(r, &[5], |g, a| g.scale(a, -1.7)) },
        Case { name: "offset", run: |r| unary(r, &[5], |g, a| g.offset(a, 0.3)) },
        Case { name: "sum", run: |r| unary(r, &[2, 3], |g, a| g.sum(a)) },
        Case { name: "mean", run: |r| unary(r, &[2, 3], |g, a| g.mean(a)) },
        Case { name: "reshape", run: |r| unary(r, &[2, 3, 4], |g, a| g.reshape(a, &[4, 6])) },
        Case { name: "narrow", run: |r| unary(r, &[4, 3], |g, a| g.narrow(a, 1, 2)) },
        Case {
            name: "concat",
            run: |r| {
                let (a, b) = (away(&[2, 3], r), away(&[1, 3], r));
                let seed = r.random();
                check(&[a, b], H, |g, v| {
                    let y = g.concat(&[v[0], v[1], v[0]])?;
                    project(g, y, seed)
                })
            },
        },
        Case { name: "conv2d_same", run: |r| conv(r, Conv2dSpec::same(3), 3) },
        Case { name: "conv2d_stride2", run: |r| conv(r, Conv2dSpec { stride: 2, padding: 1 }, 3) },
        Case { name: "conv2d_1x1", run: |r| conv(r, Conv2dSpec::same(1), 1) },
        Case { name: "avg_down2", run: |r| unary(r, &[2, 4, 6], |g, a| g.avg_down2(a)) },
        Case { name: "bilinear_up2", run: |r| unary(r, &[2, 3, 4], |g, a| g.bilinear_up2(a)) },
        Case {
            name: "bilinear_sample",
            run: |r| {
                let tex = away(&[3, 5, 7], r);
                let coords = Tensor::uniform(&[2, 4, 4], 0.0, 1.0, r);
                let mask = Tensor::new(&[1, 4, 4], (0..16).map(|i| (i % 5 != 0) as u8 as f64).collect()).unwrap();
                let seed = r.random();
                check(&[tex], H, move |g, v| {
                    let c = g.constant(coords.clone());
                    let m = g.constant(mask.clone());
                    let y = g.bilinear_sample(v[0], c, m)?;
                    project(g, y, seed)
                })
            },
        },
        Case {
            name: "dft2",
            run: |r| {
                let x = away(&[2, 4, 6], r);
                let (s1, s2) = (r.random(), r.random());
                check(&[x], H, |g, v| {
                    let (re, im) = g.dft2(v[0])?;
                    let a = project(g, re, s1)?;
                    let b = project(g, im, s2)?;
                    g.add(a, b)
                })
            },
        },
        Case {
            name: "filter_valid",
            run: |r| {
                let x = away(&[2, 7, 6], r);
                let k = Arc::new(Tensor::randn(&[3, 3], 1.0, r));
                let seed = r.random();
                check(&[x], H, move |g, v| {
                    let y = g.filter_valid(v[0], k.clone())?;
                    project(g, y, seed)
                })
            },
        },
        Case { name: "shift_diff_rows", run: |r| unary(r, &[2, 4, 5], |g, a| g.shift_diff(a, Axis::Rows)) },
        Case { name: "shift_diff_cols", run: |r| unary(r, &[2, 4, 5], |g, a| g.shift_diff(a, Axis::Cols)) },
        Case {
            name: "linear",
            run: |r| {
                let (x, w, b) = (away(&[5], r), away(&[3, 5], r), away(&[3], r));
                let seed = r.random();
                check(&[x, w, b], H, |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    project(g, y, seed)
                })
            },
        },
        Case {
            name: "gather_mean",
            run: |r| {
                let t = away(&[5, 3], r);
                let seed = r.random();
                check(&[t], H, |g, v| {
                    let y = g.gather_mean(v[0], &[0, 3, 3, 4])?;
                    project(g, y, seed)
                })
            },
        },
        Case { name: "mean_spatial", run: |r| unary(r, &[3, 4, 5], |g, a| g.mean_spatial(a)) },
        Case {
            name: "loss_mse",
            run: |r| check(&image_pair(r, 8), H, |g, v| mse_loss(g, v[0], v[1])),
        },
        Case {
            name: "loss_ssim",
            run: |r| check(&image_pair(r, 13), H, |g, v| ssim_loss(g, v[0], v[1])),
        },
        Case {
            name: "loss_perceptual",
            run: |r| {
                let fx = FeatureExtractor::new(r.random());
                check(&image_pair(r, 8), H, move |g, v| perceptual_loss(g, v[0], v[1], &fx))
            },
        },
        Case {
            name: "loss_freq",
            run: |r| check(&image_pair(r, 8), H, |g, v| freq_loss(g, v[0], v[1])),
        },
        Case {
            name: "loss_tv",
            run: |r| check(&image_pair(r, 8)[..1], H, |g, v| tv_loss(g, v[0])),
        },
        Case {
            name: "loss_reg",
            run: |r| {
                let levels = [away(&[3, 4, 4], r), away(&[3, 2, 2], r)];
                check(&levels, H, |g, v| reg_loss(g, v))
            },
        },
    ]
}

/// Runs every case `TRIALS` times; returns `(name, worst relative error)`.
pub fn run_all() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|c| {
            let worst = (0..TRIALS)
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
                    (c.run)(&mut rng).unwrap_or_else(|e| panic!("{}: {e}", c.name)).rel_err
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Synthetic 16x16 view with a partially covered mask.
fn synthetic_view(rng: &mut ChaCha8Rng) -> (ViewInput, Tensor) {
    let (h, w) = (16, 16);
    let mut mask = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - 7.5, y as f64 - 7.5);
            if dx * dx + dy * dy < 40.0 {
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    let m = mask.data().to_vec();
    let masked = |t: Tensor, c: usize| {
        let mut t = t;
        for ch in 0..c {
            for p in 0..h * w {
                t.data_mut()[ch * h * w + p] *= m[p];
            }
        }
        t
    };
    let uv = masked(Tensor::uniform(&[2, h, w], 0.0, 1.0, rng), 2);
    let depth = masked(Tensor::uniform(&[1, h, w], 0.2, 0.8, rng), 1);
    let normal = masked(Tensor::uniform(&[3, h, w], -1.0, 1.0, rng), 3);
    let mut dirs = Tensor::randn(&[3, h, w], 1.0, rng);
    for p in 0..h * w {
        let n = (0..3).map(|c| dirs.data()[c * h * w + p].powi(2)).sum::<f64>().sqrt();
        for c in 0..3 {
            dirs.data_mut()[c * h * w + p] /= n;
        }
    }
    let input = ViewInput {
        maps: dnrselect::texture::ViewMaps { uv, mask, depth, normal },
        dirs,
    };
    (input, unit(&[3, h, w], rng))
}

/// Fine-stage loss of the full model against finite differences on a random
/// sample of parameter entries (three per tensor).
pub fn end_to_end(trial: u64, mode: AggregatorMode) -> Result<GradCheck, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
    let cfg = DnrConfig {
        channels: 12,
        levels: 2,
        tex_resolution: 8,
        widths: vec![6],
        init_std: 0.3,
        mode,
    };
    let mut model = DnrModel::new(&cfg, &mut rng)?;
    // zero biases put off-mask relu inputs exactly on the kink; move to a generic point
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let (input, gt) = synthetic_view(&mut rng);
    let fx = FeatureExtractor::new(trial);
    let weights = LossWeights::default();
    let eval = |model: &DnrModel| -> Result<(Graph, Var), DiffError> {
        let mut g = Graph::new();
        let f = model.forward(&mut g, &input)?;
        let gtv = g.constant(gt.clone());
        let levels = model.texture.vars(&mut g, &model.store);
        let l = step2_loss(&mut g, f.image, gtv, &levels, &weights, &fx)?;
        Ok((g, l.total))
    };
    let (g, l) = eval(&model)?;
    g.backward(l, &mut model.store)?;
    let value = |model: &DnrModel| -> Result<f64, DiffError> {
        let (g, l) = eval(model)?;
        Ok(g.value(l).item())
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for id in ids {
        let n = model.store.value(id).len();
        for _ in 0..3 {
            let i = rng.random_range(0..n);
            analytic.push(model.store.grad(id)[i]);
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + H;
            let up = value(&model)?;
            model.store.value_mut(id).data_mut()[i] = orig - H;
            let down = value(&model)?;
            model.store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    Ok(compare(&analytic, &numeric))
}
