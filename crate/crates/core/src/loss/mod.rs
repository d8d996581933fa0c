//! Training losses, their weighted sums and image-quality metrics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Axis, Conv2dSpec, DiffError, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rl: f64,
    pub dnr_c: f64,
    pub dnr_f: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub freq: f64,
    pub tv: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rl: 0.1,
            dnr_c: 1.0,
            dnr_f: 1.0,
            ssim: 0.1,
            perceptual: 0.1,
            freq: 0.01,
            tv: 0.001,
            reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DiffError> {
        let named = [
            ("rl", self.rl),
            ("dnr_c", self.dnr_c),
            ("dnr_f", self.dnr_f),
            ("ssim", self.ssim),
            ("perceptual", self.perceptual),
            ("freq", self.freq),
            ("tv", self.tv),
            ("reg", self.reg),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DiffError::InvalidArgument(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Step-2 weights in term order `(mse, ssim, perceptual, freq, tv, reg)`.
    pub fn step2(&self) -> [f64; 6] {
        [self.dnr_f, self.ssim, self.perceptual, self.freq, self.tv, self.reg]
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<(), DiffError> {
    if g.shape(a) != g.shape(b) {
        return Err(DiffError::ShapeMismatch {
            op,
            expected: g.shape(a).to_vec(),
            got: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

pub fn mse_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var, DiffError> {
    same_shape(g, pred, gt, "mse_loss")?;
    let d = g.sub(pred, gt)?;
    let s = g.square(d)?;
    g.mean(s)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized `11 x 11` Gaussian window with `sigma = 1.5`.
pub fn gaussian_window() -> Tensor {
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g1 {
        for b in &g1 {
            k.push(a * b);
        }
    }
    let total: f64 = k.iter().sum();
    Tensor::new(&[SSIM_WINDOW, SSIM_WINDOW], k.into_iter().map(|v| v / total).collect()).expect("square window")
}

/// Per-pixel SSIM over the valid window positions, `[C, H - 10, W - 10]`.
pub fn ssim_map(g: &mut Graph, x: Var, y: Var) -> Result<Var, DiffError> {
    same_shape(g, x, y, "ssim")?;
    let win = Arc::new(gaussian_window());
    let mx = g.filter_valid(x, win.clone())?;
    let my = g.filter_valid(y, win.clone())?;
    let xx = g.square(x)?;
    let yy = g.square(y)?;
    let xy = g.mul(x, y)?;
    let exx = g.filter_valid(xx, win.clone())?;
    let eyy = g.filter_valid(yy, win.clone())?;
    let exy = g.filter_valid(xy, win)?;
    let mx2 = g.square(mx)?;
    let my2 = g.square(my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;
    let a = g.scale(mxy, 2.0)?;
    let a = g.offset(a, SSIM_C1)?;
    let b = g.scale(cxy, 2.0)?;
    let b = g.offset(b, SSIM_C2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.offset(c, SSIM_C1)?;
    let d = g.add(vx, vy)?;
    let d = g.offset(d, SSIM_C2)?;
    let den = g.mul(c, d)?;
    g.div(num, den)
}

/// `1 - mean SSIM`.
pub fn ssim_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var, DiffError> {
    let m = ssim_map(g, pred, gt)?;
    let mean = g.mean(m)?;
    let neg = g.scale(mean, -1.0)?;
    g.offset(neg, 1.0)
}

/// Frozen three-stage convolutional feature pyramid standing in for a
/// pretrained classifier. Each stage is a 3x3 convolution with orthonormal
/// filter rows, relu and 2x average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub stages: Vec<Tensor>,
    pub stage_weights: Vec<f64>,
    pub seed: u64,
}

pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::with_capacity(FEATURE_WIDTHS.len());
        for &cout in &FEATURE_WIDTHS {
            let fan = cin * 9;
            let raw = Tensor::randn(&[cout, fan], 1.0, &mut rng);
            let rows = orthonormal_rows(raw.data(), cout, fan);
            stages.push(Tensor::new(&[cout, cin, 3, 3], rows).expect("consistent dims"));
            cin = cout;
        }
        let n = stages.len();
        FeatureExtractor {
            stages,
            stage_weights: vec![1.0 / n as f64; n],
            seed,
        }
    }

    /// Features after every stage.
    pub fn features(&self, g: &mut Graph, img: Var) -> Result<Vec<Var>, DiffError> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = img;
        for w in &self.stages {
            let co = w.shape()[0];
            let wv = g.constant(w.clone());
            let b = g.constant(Tensor::zeros(&[co]));
            let h = g.conv2d(cur, wv, b, Conv2dSpec::same(3))?;
            let h = g.relu(h)?;
            cur = g.avg_down2(h)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// Gram-Schmidt over the rows of a `rows x cols` matrix (`rows <= cols`).
fn orthonormal_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut v = data[r * cols..(r + 1) * cols].to_vec();
        for _ in 0..2 {
            for q in &out {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out.concat()
}

/// `sum_j w_j * mean |phi_j(pred) - phi_j(gt)|`. The extractor is constant,
/// so gradient reaches only the images.
pub fn perceptual_loss(g: &mut Graph, pred: Var, gt: Var, fx: &FeatureExtractor) -> Result<Var, DiffError> {
    same_shape(g, pred, gt, "perceptual_loss")?;
    let fp = fx.features(g, pred)?;
    let fg = fx.features(g, gt)?;
    let mut total: Option<Var> = None;
    for ((a, b), &w) in fp.into_iter().zip(fg).zip(&fx.stage_weights) {
        let d = g.sub(a, b)?;
        let d = g.abs(d)?;
        let m = g.mean(d)?;
        let m = g.scale(m, w)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    total.ok_or_else(|| DiffError::InvalidArgument("feature extractor without stages".into()))
}

/// `(sum |d re| + sum |d im|) / (C H W)` over the unnormalized per-channel 2D DFT.
pub fn freq_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var, DiffError> {
    same_shape(g, pred, gt, "freq_loss")?;
    let n = g.value(pred).len() as f64;
    let (pr, pi) = g.dft2(pred)?;
    let (gr, gi) = g.dft2(gt)?;
    let dr = g.sub(pr, gr)?;
    let di = g.sub(pi, gi)?;
    let ar = g.abs(dr)?;
    let ai = g.abs(di)?;
    let sr = g.sum(ar)?;
    let si = g.sum(ai)?;
    let s = g.add(sr, si)?;
    g.scale(s, 1.0 / n)
}

/// Anisotropic total variation: mean |horizontal difference| + mean |vertical difference|.
pub fn tv_loss(g: &mut Graph, pred: Var) -> Result<Var, DiffError> {
    let dx = g.shift_diff(pred, Axis::Cols)?;
    let dy = g.shift_diff(pred, Axis::Rows)?;
    let ax = g.abs(dx)?;
    let ay = g.abs(dy)?;
    let mx = g.mean(ax)?;
    let my = g.mean(ay)?;
    g.add(mx, my)
}

/// Mean of squared entries over every texture level together.
pub fn reg_loss(g: &mut Graph, levels: &[Var]) -> Result<Var, DiffError> {
    if levels.is_empty() {
        return Err(DiffError::InvalidArgument("no texture levels".into()));
    }
    let n: usize = levels.iter().map(|&v| g.value(v).len()).sum();
    let mut total: Option<Var> = None;
    for &l in levels {
        let s = g.square(l)?;
        let s = g.sum(s)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    g.scale(total.expect("non-empty"), 1.0 / n as f64)
}

/// `lambda_rl * L_rl + lambda_c * L_c`.
pub fn step1_loss(g: &mut Graph, rl: Var, dnr_c: Var, w: &LossWeights) -> Result<Var, DiffError> {
    let a = g.scale(rl, w.rl)?;
    let b = g.scale(dnr_c, w.dnr_c)?;
    g.add(a, b)
}

pub const STEP2_TERMS: [&str; 6] = ["mse", "ssim", "perceptual", "freq", "tv", "reg"];

pub struct Step2Loss {
    pub total: Var,
    /// Unweighted terms in [`STEP2_TERMS`] order.
    pub terms: [Var; 6],
}

/// Weighted sum of the six fine-stage terms.
pub fn step2_loss(
    g: &mut Graph,
    pred: Var,
    gt: Var,
    textures: &[Var],
    w: &LossWeights,
    fx: &FeatureExtractor,
) -> Result<Step2Loss, DiffError> {
    let terms = [
        mse_loss(g, pred, gt)?,
        ssim_loss(g, pred, gt)?,
        perceptual_loss(g, pred, gt, fx)?,
        freq_loss(g, pred, gt)?,
        tv_loss(g, pred)?,
        reg_loss(g, textures)?,
    ];
    let mut total: Option<Var> = None;
    for (&t, lambda) in terms.iter().zip(w.step2()) {
        let s = g.scale(t, lambda)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(Step2Loss {
        total: total.expect("six terms"),
        terms,
    })
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "mse needs equal shapes");
    let n = pred.len() as f64;
    pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

/// `10 log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> f64 {
    let m = mse(pred, gt);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

pub fn ssim_metric(pred: &Tensor, gt: &Tensor) -> Result<f64, DiffError> {
    let mut g = Graph::new();
    let a = g.constant(pred.clone());
    let b = g.constant(gt.clone());
    let m = ssim_map(&mut g, a, b)?;
    let mean = g.mean(m)?;
    Ok(g.value(mean).item())
}
