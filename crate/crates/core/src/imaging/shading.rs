use serde::{Deserialize, Serialize};

use super::{GBuffer, Image, ImagingError};
use crate::scene::{Camera, TriangleMesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingSetup {
    pub lights: Vec<PointLight>,
    pub ambient: [f64; 3],
    pub background: [f64; 3],
}

impl Default for LightingSetup {
    /// Key and fill light above the origin, white background.
    fn default() -> Self {
        LightingSetup {
            lights: vec![
                PointLight {
                    position: [2.5, 3.0, 2.0],
                    intensity: [0.75, 0.72, 0.68],
                },
                PointLight {
                    position: [-3.0, 1.0, -2.0],
                    intensity: [0.25, 0.27, 0.32],
                },
            ],
            ambient: [0.15, 0.15, 0.15],
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl LightingSetup {
    pub fn validate(&self) -> Result<(), ImagingError> {
        let ok = self
            .lights
            .iter()
            .flat_map(|l| l.intensity.iter().chain(&l.position))
            .chain(&self.ambient)
            .chain(&self.background)
            .all(|v| v.is_finite())
            && self.lights.iter().all(|l| l.intensity.iter().all(|&i| i >= 0.0))
            && self.ambient.iter().all(|&a| a >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(ImagingError::Shape("lighting values must be finite and intensities >= 0".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Mirror mixing weight in `[0, 1]`.
    pub specular: f64,
    pub max_bounces: u32,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            specular: 0.25,
            max_bounces: 2,
        }
    }
}

/// `albedo * (ambient + sum I * max(0, n.l))`, clamped to `[0, 1]`.
fn lambert(albedo: &[f64; 3], p: &Vec3, n: &Vec3, lighting: &LightingSetup, lit: impl Fn(usize) -> bool) -> [f64; 3] {
    let mut e = lighting.ambient;
    for (i, light) in lighting.lights.iter().enumerate() {
        let lp = Vec3::from(light.position);
        let Some(l) = (lp - p).try_normalize(1e-300) else { continue };
        let ndl = n.dot(&l);
        if ndl > 0.0 && lit(i) {
            for c in 0..3 {
                e[c] += light.intensity[c] * ndl;
            }
        }
    }
    [0, 1, 2].map(|c| (albedo[c] * e[c]).clamp(0.0, 1.0))
}

fn albedo_at(tex: &Image, u: f64, v: f64) -> [f64; 3] {
    let mut out = [1.0; 3];
    if tex.channels() == 1 {
        let mut g = [0.0];
        tex.sample_bilinear(u, v, &mut g);
        out = [g[0]; 3];
    } else {
        tex.sample_bilinear(u, v, &mut out);
    }
    out
}

/// Cheap preview render from G-buffer attributes alone: Lambert plus ambient,
/// no visibility. The camera is needed to lift pixels back to world space.
pub fn shade_rasterized(gbuffer: &GBuffer, albedo: &Image, lighting: &LightingSetup, camera: &Camera) -> Image {
    let (w, h) = (gbuffer.width(), gbuffer.height());
    let mut out = Image::new(w, h, 3);
    let rot_t = camera.rotation.transpose();
    for y in 0..h {
        for x in 0..w {
            let px = out.pixel_mut(x, y);
            if !gbuffer.covered(x, y) {
                px.copy_from_slice(&lighting.background);
                continue;
            }
            let p = camera.unproject(x as f64 + 0.5, y as f64 + 0.5, gbuffer.depth.get(x, y, 0));
            let n = (rot_t * gbuffer.decoded_normal(x, y)).normalize();
            let a = albedo_at(albedo, gbuffer.uv.get(x, y, 0), gbuffer.uv.get(x, y, 1));
            px.copy_from_slice(&lambert(&a, &p, &n, lighting, |_| true));
        }
    }
    out
}

struct Hit {
    t: f64,
    tri: usize,
    b1: f64,
    b2: f64,
}

/// Moller-Trumbore, both faces.
fn intersect(mesh: &TriangleMesh, tri: usize, o: &Vec3, d: &Vec3) -> Option<(f64, f64, f64)> {
    let [a, b, c] = mesh.triangles[tri].position.map(|i| mesh.positions[i]);
    let (e1, e2) = (b - a, c - a);
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(&q) * inv, u, v))
}

fn nearest_hit(mesh: &TriangleMesh, o: &Vec3, d: &Vec3, accept: impl Fn(f64) -> bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for tri in 0..mesh.triangles.len() {
        if let Some((t, b1, b2)) = intersect(mesh, tri, o, d) {
            if accept(t) && best.as_ref().is_none_or(|h| t < h.t) {
                best = Some(Hit { t, tri, b1, b2 });
            }
        }
    }
    best
}

fn occluded(mesh: &TriangleMesh, o: &Vec3, target: &Vec3) -> bool {
    let delta = target - o;
    let dist = delta.norm();
    let d = delta / dist;
    (0..mesh.triangles.len()).any(|tri| matches!(intersect(mesh, tri, o, &d), Some((t, _, _)) if t > 1e-9 && t < dist))
}

const SURFACE_EPS: f64 = 1e-7;

fn shade_hit(
    mesh: &TriangleMesh,
    hit: &Hit,
    o: &Vec3,
    d: &Vec3,
    lighting: &LightingSetup,
    material: &Material,
    bounces_left: u32,
) -> [f64; 3] {
    let tri = mesh.triangles[hit.tri];
    let w = [1.0 - hit.b1 - hit.b2, hit.b1, hit.b2];
    let p = o + d * hit.t;
    let n = (0..3)
        .map(|k| mesh.normals[tri.normal[k]] * w[k])
        .fold(Vec3::zeros(), |acc, v| acc + v);
    let n = n.try_normalize(1e-12).unwrap_or_else(|| {
        let [a, b, c] = tri.position.map(|i| mesh.positions[i]);
        (b - a).cross(&(c - a)).normalize()
    });
    let u = (0..3).map(|k| mesh.uvs[tri.uv[k]][0] * w[k]).sum::<f64>().clamp(0.0, 1.0);
    let v = (0..3).map(|k| mesh.uvs[tri.uv[k]][1] * w[k]).sum::<f64>().clamp(0.0, 1.0);
    let a = albedo_at(&mesh.albedo, u, v);
    // offset along the side of the surface facing the incoming ray
    let side = if n.dot(d) < 0.0 { n } else { -n };
    let origin = p + side * SURFACE_EPS;
    let local = lambert(&a, &p, &n, lighting, |i| {
        !occluded(mesh, &origin, &Vec3::from(lighting.lights[i].position))
    });
    if material.specular <= 0.0 || bounces_left == 0 {
        return local;
    }
    let r = d - side * (2.0 * d.dot(&side));
    let reflected = match nearest_hit(mesh, &origin, &r, |t| t > 1e-9) {
        Some(h) => shade_hit(mesh, &h, &origin, &r, lighting, material, bounces_left - 1),
        None => lighting.background,
    };
    let s = material.specular;
    [0, 1, 2].map(|c| (1.0 - s) * local[c] + s * reflected[c])
}

/// Whitted-style reference render: primary ray per pixel centre, hard
/// shadows from each point light and mirror bounces mixed by the specular
/// weight. Primary hits outside the `(near, far)` depth range are misses.
pub fn ray_trace(
    mesh: &TriangleMesh,
    camera: &Camera,
    lighting: &LightingSetup,
    material: &Material,
) -> Result<Image, ImagingError> {
    if material.max_bounces > 4 || !(0.0..=1.0).contains(&material.specular) {
        return Err(ImagingError::Shape(format!(
            "material needs specular in [0,1] and at most 4 bounces, got {material:?}"
        )));
    }
    let k = camera.intrinsics;
    let mut out = Image::new(k.width, k.height, 3);
    let eye = camera.eye();
    let forward = camera.rotation.row(2).transpose();
    for y in 0..k.height {
        for x in 0..k.width {
            let d = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let cos = d.dot(&forward);
            let hit = nearest_hit(mesh, &eye, &d, |t| {
                let z = t * cos;
                z > k.near && z < k.far
            });
            let rgb = match hit {
                Some(h) => shade_hit(mesh, &h, &eye, &d, lighting, material, material.max_bounces),
                None => lighting.background,
            };
            out.pixel_mut(x, y).copy_from_slice(&rgb);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::rasterize_gbuffer;
    use crate::scene::{make_toy_scene, Intrinsics, ToyScene};

    fn setup() -> (TriangleMesh, Camera) {
        let mesh = make_toy_scene(ToyScene::UvSphere {
            radius: 0.8,
            rings: 8,
            segments: 12,
        })
        .unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, -0.5, 3.0), Vec3::zeros(), Intrinsics::square(24, 45.0, 0.1, 10.0)).unwrap();
        (mesh, cam)
    }

    #[test]
    fn ambient_only_white_albedo() {
        let (mut mesh, cam) = setup();
        mesh.albedo = Image::filled(4, 4, 3, 1.0);
        let gb = rasterize_gbuffer(&mesh, &cam);
        let lighting = LightingSetup {
            lights: vec![],
            ambient: [1.0; 3],
            background: [0.0, 0.2, 0.4],
        };
        let img = shade_rasterized(&gb, &mesh.albedo, &lighting, &cam);
        for y in 0..24 {
            for x in 0..24 {
                let expect: &[f64] = if gb.covered(x, y) { &[1.0; 3] } else { &[0.0, 0.2, 0.4] };
                assert_eq!(img.pixel(x, y), expect);
            }
        }
    }

    #[test]
    fn unshadowed_convex_object_matches_preview() {
        // flat normals: a lit face never shadows itself
        let (_, cam) = setup();
        let mesh = make_toy_scene(ToyScene::TexturedCube { size: 1.2 }).unwrap();
        let lighting = LightingSetup::default();
        let material = Material {
            specular: 0.0,
            max_bounces: 0,
        };
        let gb = rasterize_gbuffer(&mesh, &cam);
        let a = shade_rasterized(&gb, &mesh.albedo, &lighting, &cam);
        let b = ray_trace(&mesh, &cam, &lighting, &material).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                for c in 0..3 {
                    assert!((a.get(x, y, c) - b.get(x, y, c)).abs() < 1e-6, "pixel {x},{y}: {:?} vs {:?} mask {}", a.pixel(x, y), b.pixel(x, y), gb.covered(x, y));
                }
            }
        }
    }

    #[test]
    fn camera_facing_away_sees_background() {
        let (mesh, _) = setup();
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 6.0), Intrinsics::square(8, 45.0, 0.1, 10.0)).unwrap();
        let img = ray_trace(&mesh, &cam, &LightingSetup::default(), &Material::default()).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_many_bounces_rejected() {
        let (mesh, cam) = setup();
        let m = Material {
            specular: 0.5,
            max_bounces: 5,
        };
        assert!(ray_trace(&mesh, &cam, &LightingSetup::default(), &m).is_err());
    }
}
