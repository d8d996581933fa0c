use crate::diff::{DiffError, Graph, Tensor, Var};
use crate::scene::{Camera, Vec3};

/// Real spherical harmonics up to degree 2, ordered
/// `(0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShBasis(pub [f64; 9]);

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C3: f64 = 0.315_391_565_252_520_05;
const C4: f64 = 0.546_274_215_296_039_6;

fn eval(x: f64, y: f64, z: f64) -> [f64; 9] {
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ]
}

pub fn sh_basis(dir: &Vec3) -> Result<ShBasis, DiffError> {
    if !((dir.norm() - 1.0).abs() <= 1e-6) {
        return Err(DiffError::InvalidArgument(format!("direction {dir:?} is not unit length")));
    }
    Ok(ShBasis(eval(dir.x, dir.y, dir.z)))
}

/// World-space unit ray directions through every pixel centre, `[3, H, W]`.
pub fn view_dir_map(camera: &Camera) -> Tensor {
    let k = camera.intrinsics;
    let n = k.width * k.height;
    let mut d = vec![0.0; 3 * n];
    for y in 0..k.height {
        for x in 0..k.width {
            let r = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                d[c * n + y * k.width + x] = r[c];
            }
        }
    }
    Tensor::new(&[3, k.height, k.width], d).expect("consistent dims")
}

/// Per-pixel SH values `[9, H, W]` from a `[3, H, W]` direction map.
pub fn sh_map(dirs: &Tensor) -> Result<Tensor, DiffError> {
    let (c, h, w) = dirs.chw()?;
    if c != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "sh_map",
            expected: vec![3, h, w],
            got: dirs.shape().to_vec(),
        });
    }
    let n = h * w;
    let src = dirs.data();
    let mut out = vec![0.0; 9 * n];
    for p in 0..n {
        let v = Vec3::new(src[p], src[n + p], src[2 * n + p]);
        let b = sh_basis(&v)?;
        for (k, val) in b.0.into_iter().enumerate() {
            out[k * n + p] = val;
        }
    }
    Tensor::new(&[9, h, w], out)
}

/// First channel modulated by the SH values.
pub const SH_FIRST_CHANNEL: usize = 3;

/// Multiplies channels 3..12 of `t [C, H, W]` by the per-pixel SH values in
/// `sh [9, H, W]`; the other channels pass through.
pub fn apply_view_dependence(g: &mut Graph, t: Var, sh: &Tensor) -> Result<Var, DiffError> {
    let s = g.shape(t).to_vec();
    let [c, h, w] = s[..] else {
        return Err(DiffError::RankMismatch {
            op: "apply_view_dependence",
            expected: 3,
            got: s.len(),
        });
    };
    if c < SH_FIRST_CHANNEL + 9 {
        return Err(DiffError::InvalidArgument(format!("view dependence needs at least 12 channels, got {c}")));
    }
    if sh.shape() != [9, h, w] {
        return Err(DiffError::ShapeMismatch {
            op: "apply_view_dependence",
            expected: vec![9, h, w],
            got: sh.shape().to_vec(),
        });
    }
    let n = h * w;
    let mut factor = vec![1.0; c * n];
    factor[SH_FIRST_CHANNEL * n..(SH_FIRST_CHANNEL + 9) * n].copy_from_slice(sh.data());
    let f = g.constant(Tensor::new(&[c, h, w], factor)?);
    g.mul(t, f)
}

/// A single basis broadcast over an `h x w` grid.
pub fn constant_sh_map(sh: &ShBasis, h: usize, w: usize) -> Tensor {
    let mut d = Vec::with_capacity(9 * h * w);
    for v in sh.0 {
        d.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(&[9, h, w], d).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_constants() {
        let b = sh_basis(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((b.0[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!((b.0[2] - (3.0 / (4.0 * std::f64::consts::PI)).sqrt()).abs() < 1e-15);
        assert_eq!((b.0[1], b.0[3]), (0.0, 0.0));
    }

    #[test]
    fn non_unit_rejected() {
        assert!(sh_basis(&Vec3::new(0.0, 0.0, 1.1)).is_err());
    }
}
