use rand::Rng;

use crate::diff::Tensor;
use crate::render::ViewInput;
use crate::texture::ViewMaps;

/// Element of the square's symmetry group: optional horizontal flip, then
/// `rot` quarter turns. A quarter turn moves pixel offset `(dx, dy)` to `(-dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|k| Dihedral {
            flip: k >= 4,
            rot: (k % 4) as u8,
        })
    }

    /// Uniform over all eight elements for square images, flips only otherwise.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        if square {
            let k = rng.random_range(0..8u8);
            Dihedral {
                flip: k >= 4,
                rot: k % 4,
            }
        } else {
            // a half turn keeps the shape
            let k = rng.random_range(0..4u8);
            Dihedral {
                flip: k & 1 == 1,
                rot: (k >> 1) * 2,
            }
        }
    }

    /// Maps an in-plane vector the way pixel offsets move.
    pub fn map_vector(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut x, mut y) = if self.flip { (-x, y) } else { (x, y) };
        for _ in 0..self.rot {
            (x, y) = (-y, x);
        }
        (x, y)
    }

    /// Source pixel for destination `(x, y)` in an image of (destination) size `w x h`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let (mut x, mut y, mut w, mut h) = (x, y, w, h);
        // undo the rotations one quarter turn at a time
        for _ in 0..self.rot {
            // forward turn: (sx, sy) -> (sh - 1 - sy, sx) with source dims (sw, sh) = (h, w)
            let (sw, sh) = (h, w);
            let (sx, sy) = (y, sh - 1 - x);
            (x, y, w, h) = (sx, sy, sw, sh);
        }
        if self.flip {
            x = w - 1 - x;
        }
        (x, y)
    }

    /// Spatially transforms a `[C, H, W]` tensor.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let (c, h, w) = t.chw().expect("planar tensor");
        let (oh, ow) = if self.rot % 2 == 1 { (w, h) } else { (h, w) };
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y, ow, oh);
                for ch in 0..c {
                    out[ch * oh * ow + y * ow + x] = src[ch * h * w + sy * w + sx];
                }
            }
        }
        Tensor::new(&[c, oh, ow], out).expect("same size")
    }

    /// Transforms every map and the ground truth together; camera-space
    /// normals have their in-plane components turned with the pixels.
    pub fn apply_sample(&self, input: &ViewInput, gt: &Tensor) -> (ViewInput, Tensor) {
        let maps = &input.maps;
        let mut normal = self.apply(&maps.normal);
        let n = normal.len() / 3;
        {
            let d = normal.data_mut();
            for p in 0..n {
                let (x, y) = self.map_vector(d[p], d[n + p]);
                d[p] = x;
                d[n + p] = y;
            }
        }
        let out = ViewInput {
            maps: ViewMaps {
                uv: self.apply(&maps.uv),
                mask: self.apply(&maps.mask),
                depth: self.apply(&maps.depth),
                normal,
            },
            dirs: self.apply(&input.dirs),
        };
        (out, self.apply(gt))
    }
}

/// Draws a random symmetry and applies it to the sample.
pub fn augment<R: Rng + ?Sized>(input: &ViewInput, gt: &Tensor, rng: &mut R) -> (ViewInput, Tensor, Dihedral) {
    let square = input.maps.height() == input.maps.width();
    let d = Dihedral::random(rng, square);
    let (i, g) = d.apply_sample(input, gt);
    (i, g, d)
}
