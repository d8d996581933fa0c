use super::Image;
use crate::scene::{Camera, TriangleMesh, Vec3};

/// Per-pixel geometry buffers for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    /// `(u, v)` texture coordinates; zero where uncovered.
    pub uv: Image,
    /// Camera-space forward distance; zero where uncovered.
    pub depth: Image,
    /// Camera-space unit normal encoded as `n * 0.5 + 0.5`; `0.5` where uncovered.
    pub normal: Image,
    /// 1 where a surface was hit, else 0.
    pub mask: Image,
    pub near: f64,
    pub far: f64,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize, near: f64, far: f64) -> Self {
        GBuffer {
            uv: Image::new(width, height, 2),
            depth: Image::new(width, height, 1),
            normal: Image::filled(width, height, 3, 0.5),
            mask: Image::new(width, height, 1),
            near,
            far,
        }
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.mask.get(x, y, 0) > 0.5
    }

    pub fn coverage(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    /// Decoded camera-space normal at a pixel.
    pub fn decoded_normal(&self, x: usize, y: usize) -> Vec3 {
        let e = self.normal.pixel(x, y);
        Vec3::new(e[0] * 2.0 - 1.0, e[1] * 2.0 - 1.0, e[2] * 2.0 - 1.0)
    }
}

#[derive(Clone, Copy)]
struct ClipVertex {
    pos: Vec3,
    bary: [f64; 3],
}

fn lerp_vertex(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        pos: a.pos + (b.pos - a.pos) * t,
        bary: [0, 1, 2].map(|k| a.bary[k] + (b.bary[k] - a.bary[k]) * t),
    }
}

/// Sutherland–Hodgman against the plane `z = near`, keeping `z >= near`.
fn clip_near(tri: [ClipVertex; 3], near: f64) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (&tri[i], &tri[(i + 1) % 3]);
        let (ina, inb) = (a.pos.z >= near, b.pos.z >= near);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            let t = (near - a.pos.z) / (b.pos.z - a.pos.z);
            let mut v = lerp_vertex(a, b, t);
            v.pos.z = near;
            out.push(v);
        }
    }
    out
}

/// Z-buffered rasterization at pixel centres with perspective-correct
/// attribute interpolation. The nearest surface inside `(near, far)` wins.
pub fn rasterize_gbuffer(mesh: &TriangleMesh, camera: &Camera) -> GBuffer {
    let k = camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut gb = GBuffer::empty(w, h, k.near, k.far);
    let mut zbuf = vec![f64::INFINITY; w * h];

    for tri in &mesh.triangles {
        let verts = [0, 1, 2].map(|i| ClipVertex {
            pos: camera.to_camera(&mesh.positions[tri.position[i]]),
            bary: {
                let mut b = [0.0; 3];
                b[i] = 1.0;
                b
            },
        });
        if verts.iter().all(|v| v.pos.z < k.near) || verts.iter().all(|v| v.pos.z >= k.far) {
            continue;
        }
        let poly = clip_near(verts, k.near);
        if poly.len() < 3 {
            continue;
        }
        let uvs = tri.uv.map(|i| mesh.uvs[i]);
        let normals = tri.normal.map(|i| mesh.normals[i]);
        let face_n = {
            let [a, b, c] = tri.position.map(|i| mesh.positions[i]);
            (b - a).cross(&(c - a)).try_normalize(1e-300).unwrap_or(Vec3::z())
        };
        for j in 1..poly.len() - 1 {
            let sub = [poly[0], poly[j], poly[j + 1]];
            raster_sub(&sub, camera, &uvs, &normals, &face_n, &mut gb, &mut zbuf);
        }
    }
    gb
}

fn raster_sub(
    sub: &[ClipVertex; 3],
    camera: &Camera,
    uvs: &[[f64; 2]; 3],
    normals: &[Vec3; 3],
    face_n: &Vec3,
    gb: &mut GBuffer,
    zbuf: &mut [f64],
) {
    let k = camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let scr: [(f64, f64); 3] = sub.map(|v| (k.fx * v.pos.x / v.pos.z + k.cx, k.fy * v.pos.y / v.pos.z + k.cy));
    let inv_z = sub.map(|v| 1.0 / v.pos.z);
    let edge = |a: (f64, f64), b: (f64, f64), px: f64, py: f64| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
    let area = edge(scr[0], scr[1], scr[2].0, scr[2].1);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let xmin = scr.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = scr.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = scr.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = scr.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    // pixel centres px + 0.5 inside [min, max]
    let x0 = (xmin - 0.5).ceil().max(0.0);
    let x1 = (xmax - 0.5).floor().min(w as f64 - 1.0);
    let y0 = (ymin - 0.5).ceil().max(0.0);
    let y1 = (ymax - 0.5).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let rot = camera.rotation;
    for py in y0 as usize..=y1 as usize {
        let cy = py as f64 + 0.5;
        for px in x0 as usize..=x1 as usize {
            let cx = px as f64 + 0.5;
            let l0 = edge(scr[1], scr[2], cx, cy) / area;
            let l1 = edge(scr[2], scr[0], cx, cy) / area;
            let l2 = edge(scr[0], scr[1], cx, cy) / area;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let iz = l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2];
            let z = 1.0 / iz;
            let pix = py * w + px;
            if !(z > k.near && z < k.far) || z >= zbuf[pix] {
                continue;
            }
            zbuf[pix] = z;
            // perspective-correct weights of the clipped vertices, then
            // barycentrics relative to the original triangle
            let pw = [l0 * inv_z[0] * z, l1 * inv_z[1] * z, l2 * inv_z[2] * z];
            let mut b = [0.0; 3];
            for (v, wt) in sub.iter().zip(pw) {
                for i in 0..3 {
                    b[i] += wt * v.bary[i];
                }
            }
            let u = (b[0] * uvs[0][0] + b[1] * uvs[1][0] + b[2] * uvs[2][0]).clamp(0.0, 1.0);
            let v = (b[0] * uvs[0][1] + b[1] * uvs[1][1] + b[2] * uvs[2][1]).clamp(0.0, 1.0);
            let n_world = (normals[0] * b[0] + normals[1] * b[1] + normals[2] * b[2])
                .try_normalize(1e-12)
                .unwrap_or(*face_n);
            let n_cam = rot * n_world;
            gb.uv.set(px, py, 0, u);
            gb.uv.set(px, py, 1, v);
            gb.depth.set(px, py, 0, z);
            for c in 0..3 {
                gb.normal.set(px, py, c, n_cam[c] * 0.5 + 0.5);
            }
            gb.mask.set(px, py, 0, 1.0);
        }
    }
}
