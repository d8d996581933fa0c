//! Independent reference implementations for the frequency, SSIM and raster code.

use std::f64::consts::TAU;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnrselect::diff::{Graph, Tensor};
use dnrselect::imaging::rasterize_gbuffer;
use dnrselect::loss::ssim_metric;
use dnrselect::scene::{Camera, Intrinsics, Triangle, TriangleMesh, Vec3};

pub const DFT_TOL: f64 = 1e-9;
pub const SSIM_TOL: f64 = 1e-9;
pub const DEPTH_REL_TOL: f64 = 1e-5;
pub const RASTER_SEEDS: u64 = 10;

/// Textbook per-channel 2D DFT, `O(H^2 W^2)`.
pub fn direct_dft(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.chw().unwrap();
    let (mut re, mut im) = (vec![0.0; c * h * w], vec![0.0; c * h * w]);
    for ch in 0..c {
        for k in 0..h {
            for l in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let a = -TAU * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                        let v = x.data()[ch * h * w + m * w + n];
                        sr += v * a.cos();
                        si += v * a.sin();
                    }
                }
                re[ch * h * w + k * w + l] = sr;
                im[ch * h * w + k * w + l] = si;
            }
        }
    }
    (re, im)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute deviation of `dft2` from the direct sum over a set of shapes.
pub fn dft_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for shape in [[1, 1, 1], [3, 8, 8], [2, 5, 7], [1, 16, 12], [2, 9, 1]] {
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let (re, im) = g.dft2(v).unwrap();
        let (dr, di) = direct_dft(&x);
        worst = worst.max(max_abs(g.value(re).data(), &dr)).max(max_abs(g.value(im).data(), &di));
    }
    worst
}

/// SSIM from explicit weighted window statistics with an independently built window.
pub fn direct_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let (c, h, w) = x.chw().unwrap();
    let r = 5usize;
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let (mut sum, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let px = |t: &Tensor, yy: usize, xx: usize| t.data()[ch * h * w + yy * w + xx];
        for oy in 0..h - 2 * r {
            for ox in 0..w - 2 * r {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / total;
                        mx += wt * px(x, oy + i, ox + j);
                        my += wt * px(y, oy + i, ox + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / total;
                        let (a, b) = (px(x, oy + i, ox + j) - mx, px(y, oy + i, ox + j) - my);
                        vx += wt * a * a;
                        vy += wt * b * b;
                        cxy += wt * a * b;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Worst deviation of `ssim_metric` from the windowed oracle on correlated image pairs.
pub fn ssim_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for shape in [[3, 11, 11], [3, 16, 16], [1, 20, 13]] {
        let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        // correlated second image so SSIM is far from zero
        let noise = Tensor::uniform(&shape, -0.2, 0.2, &mut rng);
        let y = Tensor::new(&shape, x.data().iter().zip(noise.data()).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect())
            .unwrap();
        worst = worst.max((ssim_metric(&x, &y).unwrap() - direct_ssim(&x, &y)).abs());
    }
    worst
}

fn identity_camera(size: usize, near: f64, far: f64) -> Camera {
    Camera::new(Matrix3::identity(), Vec3::zeros(), Intrinsics::square(size, 60.0, near, far)).unwrap()
}

/// Random camera-space triangles, some crossing the near plane.
pub fn random_mesh(rng: &mut ChaCha8Rng, n: usize) -> TriangleMesh {
    let mut mesh = TriangleMesh::empty();
    mesh.normals.push(Vec3::z());
    mesh.uvs.push([0.5, 0.5]);
    for t in 0..n {
        let centre = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.8..5.0));
        for _ in 0..3 {
            let off = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8));
            mesh.positions.push(centre + off);
        }
        mesh.triangles.push(Triangle {
            position: [3 * t, 3 * t + 1, 3 * t + 2],
            normal: [0; 3],
            uv: [0; 3],
        });
    }
    mesh
}

/// Nearest two-sided hit of the camera ray through the pixel centre, by
/// solving for the plane crossing and testing signed sub-areas.
pub fn ray_cast(mesh: &TriangleMesh, cam: &Camera, px: usize, py: usize) -> Option<f64> {
    let k = &cam.intrinsics;
    let d = Vec3::new((px as f64 + 0.5 - k.cx) / k.fx, (py as f64 + 0.5 - k.cy) / k.fy, 1.0);
    let mut best: Option<f64> = None;
    for t in &mesh.triangles {
        let [a, b, c] = t.position.map(|i| mesh.positions[i]);
        let n = (b - a).cross(&(c - a));
        let denom = n.dot(&d);
        if denom == 0.0 {
            continue;
        }
        let s = n.dot(&a) / denom;
        let p = d * s;
        let inside = [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(p - u)).dot(&n) >= 0.0);
        let z = p.z;
        if inside && z > k.near && z < k.far && best.is_none_or(|bz| z < bz) {
            best = Some(z);
        }
    }
    best
}

#[derive(Debug, Default)]
pub struct RasterReport {
    pub pixels: usize,
    pub covered: usize,
    /// Seeds whose mesh left the image empty.
    pub empty_seeds: Vec<u64>,
    pub coverage_mismatches: Vec<String>,
    pub worst_depth_rel: f64,
}

/// Rasterizer against the ray-cast oracle on random meshes of at most 50
/// triangles at 16, 24 and 32 pixels square.
pub fn raster_check() -> RasterReport {
    let mut rep = RasterReport::default();
    for seed in 0..RASTER_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = [16, 24, 32][seed as usize % 3];
        let tris = rng.random_range(1..=50);
        let mesh = random_mesh(&mut rng, tris);
        let cam = identity_camera(size, 0.5, 4.5);
        let gb = rasterize_gbuffer(&mesh, &cam);
        if gb.coverage() == 0 {
            rep.empty_seeds.push(seed);
        }
        for y in 0..size {
            for x in 0..size {
                rep.pixels += 1;
                let oracle = ray_cast(&mesh, &cam, x, y);
                if gb.covered(x, y) != oracle.is_some() {
                    rep.coverage_mismatches.push(format!("seed {seed} pixel ({x}, {y})"));
                }
                if let Some(z) = oracle {
                    rep.covered += 1;
                    rep.worst_depth_rel = rep.worst_depth_rel.max(((gb.depth.get(x, y, 0) - z) / z).abs());
                }
            }
        }
    }
    rep
}
