use serde::{Deserialize, Serialize};

use super::{SceneError, Vec3};
use crate::imaging::Image;

/// Indices into the position, normal and uv lists of a [`TriangleMesh`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triangle {
    pub position: [usize; 3],
    pub normal: [usize; 3],
    pub uv: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<Triangle>,
    pub albedo: Image,
}

impl TriangleMesh {
    pub fn empty() -> Self {
        TriangleMesh {
            positions: Vec::new(),
            normals: Vec::new(),
            uvs: Vec::new(),
            triangles: Vec::new(),
            albedo: Image::filled(1, 1, 3, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, t) in self.triangles.iter().enumerate() {
            let bad = t.position.iter().any(|&k| k >= self.positions.len())
                || t.normal.iter().any(|&k| k >= self.normals.len())
                || t.uv.iter().any(|&k| k >= self.uvs.len());
            if bad {
                return Err(SceneError::InvalidMesh(format!("triangle {i} index out of range")));
            }
        }
        if let Some(p) = self.positions.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::InvalidMesh(format!("non-finite position {p:?}")));
        }
        if let Some(uv) = self.uvs.iter().find(|uv| !uv.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(SceneError::InvalidMesh(format!("uv {uv:?} outside [0,1]")));
        }
        if let Some(n) = self.normals.iter().find(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(SceneError::InvalidMesh(format!("normal {n:?} is not unit length")));
        }
        if self.albedo.channels() != 3 {
            return Err(SceneError::InvalidMesh("albedo must have 3 channels".into()));
        }
        Ok(())
    }

    /// Number of distinct undirected edges over position indices.
    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                let p = t.position;
                [(p[0], p[1]), (p[1], p[2]), (p[2], p[0])]
            })
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// V − E + F over position connectivity.
    pub fn euler_characteristic(&self) -> i64 {
        self.positions.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }
}

/// Area-weighted per-vertex normals from face connectivity. Returns one
/// normal per position; isolated or degenerate vertices fall back to +y.
pub fn vertex_normals(positions: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let (a, b, c) = (positions[f[0]], positions[f[1]], positions[f[2]]);
        // cross product length is twice the area, so this is area weighting
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.try_normalize(1e-300).unwrap_or_else(|| Vec3::new(0.0, 1.0, 0.0)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyScene {
    TexturedCube { size: f64 },
    UvSphere { radius: f64, rings: usize, segments: usize },
    Torus { major: f64, minor: f64, rings: usize, segments: usize },
}

impl ToyScene {
    pub fn name(&self) -> &'static str {
        match self {
            ToyScene::TexturedCube { .. } => "textured_cube",
            ToyScene::UvSphere { .. } => "uv_sphere",
            ToyScene::Torus { .. } => "torus",
        }
    }

    /// Default parameters for a named primitive.
    pub fn from_name(name: &str) -> Result<Self, SceneError> {
        match name {
            "textured_cube" | "cube" => Ok(ToyScene::TexturedCube { size: 1.0 }),
            "uv_sphere" | "sphere" => Ok(ToyScene::UvSphere {
                radius: 0.8,
                rings: 16,
                segments: 24,
            }),
            "torus" => Ok(ToyScene::Torus {
                major: 0.7,
                minor: 0.3,
                rings: 24,
                segments: 16,
            }),
            other => Err(SceneError::InvalidParams(format!("unknown scene kind {other:?}"))),
        }
    }
}

/// Resolution of the procedural albedo texture.
pub const ALBEDO_RES: usize = 128;

pub fn make_toy_scene(kind: ToyScene) -> Result<TriangleMesh, SceneError> {
    let mesh = match kind {
        ToyScene::TexturedCube { size } => {
            positive(&[size])?;
            cube(size)
        }
        ToyScene::UvSphere { radius, rings, segments } => {
            positive(&[radius])?;
            if rings < 2 || segments < 3 {
                return Err(SceneError::InvalidParams("uv_sphere needs rings >= 2, segments >= 3".into()));
            }
            uv_sphere(radius, rings, segments)
        }
        ToyScene::Torus {
            major,
            minor,
            rings,
            segments,
        } => {
            positive(&[major, minor])?;
            if rings < 3 || segments < 3 || minor >= major {
                return Err(SceneError::InvalidParams(
                    "torus needs rings, segments >= 3 and minor < major".into(),
                ));
            }
            torus(major, minor, rings, segments)
        }
    };
    mesh.validate()?;
    Ok(mesh)
}

fn positive(vals: &[f64]) -> Result<(), SceneError> {
    if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(SceneError::InvalidParams(format!("parameters must be positive: {vals:?}")))
    }
}

/// Checkerboard modulated by a smooth colour gradient, in uv space.
pub fn procedural_albedo(res: usize, checks: usize) -> Image {
    let mut img = Image::new(res, res, 3);
    for y in 0..res {
        for x in 0..res {
            let u = (x as f64 + 0.5) / res as f64;
            let v = (y as f64 + 0.5) / res as f64;
            let cu = (u * checks as f64).floor() as usize;
            let cv = (v * checks as f64).floor() as usize;
            let check = if (cu + cv) % 2 == 0 { 1.0 } else { 0.55 };
            let rgb = [
                check * (0.35 + 0.6 * u),
                check * (0.3 + 0.6 * (1.0 - v)),
                check * (0.35 + 0.5 * (0.5 + 0.5 * (std::f64::consts::TAU * (u + v)).sin())),
            ];
            for (c, val) in rgb.into_iter().enumerate() {
                img.set(x, y, c, val.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn cube(size: f64) -> TriangleMesh {
    let h = 0.5 * size;
    let positions: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            )
        })
        .collect();
    // each face: outward normal and corners in counter-clockwise order seen from outside
    let faces: [(Vec3, [usize; 4]); 6] = [
        (Vec3::new(1.0, 0.0, 0.0), [1, 3, 7, 5]),
        (Vec3::new(-1.0, 0.0, 0.0), [0, 4, 6, 2]),
        (Vec3::new(0.0, 1.0, 0.0), [2, 6, 7, 3]),
        (Vec3::new(0.0, -1.0, 0.0), [0, 1, 5, 4]),
        (Vec3::new(0.0, 0.0, 1.0), [4, 5, 7, 6]),
        (Vec3::new(0.0, 0.0, -1.0), [0, 2, 3, 1]),
    ];
    // 3 x 2 atlas of cells with a small gutter so rectangles are disjoint
    let gutter = 0.02;
    let (cw, ch) = (1.0 / 3.0, 0.5);
    let mut normals = Vec::new();
    let mut uvs = Vec::new();
    let mut triangles = Vec::new();
    for (f, (n, quad)) in faces.iter().enumerate() {
        let (u0, v0) = ((f % 3) as f64 * cw + gutter, (f / 3) as f64 * ch + gutter);
        let (u1, v1) = (u0 + cw - 2.0 * gutter, v0 + ch - 2.0 * gutter);
        let base = uvs.len();
        uvs.extend_from_slice(&[[u0, v1], [u1, v1], [u1, v0], [u0, v0]]);
        normals.push(*n);
        let ni = normals.len() - 1;
        for tri in [[0, 1, 2], [0, 2, 3]] {
            triangles.push(Triangle {
                position: tri.map(|k| quad[k]),
                normal: [ni; 3],
                uv: tri.map(|k| base + k),
            });
        }
    }
    TriangleMesh {
        positions,
        normals,
        uvs,
        triangles,
        albedo: procedural_albedo(ALBEDO_RES, 4),
    }
}

fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    use std::f64::consts::{PI, TAU};
    // positions: north pole, (rings - 1) latitude circles, south pole
    let mut positions = vec![Vec3::new(0.0, radius, 0.0)];
    for r in 1..rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = TAU * s as f64 / segments as f64;
            positions.push(radius * Vec3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()));
        }
    }
    positions.push(Vec3::new(0.0, -radius, 0.0));
    let south = positions.len() - 1;
    let normals: Vec<Vec3> = positions.iter().map(|p| p.normalize()).collect();
    let ring_idx = |r: usize, s: usize| -> usize {
        match r {
            0 => 0,
            r if r == rings => south,
            r => 1 + (r - 1) * segments + s % segments,
        }
    };
    let uv_idx = |r: usize, s: usize| r * (segments + 1) + s;
    let uvs: Vec<[f64; 2]> = (0..=rings)
        .flat_map(|r| (0..=segments).map(move |s| [s as f64 / segments as f64, r as f64 / rings as f64]))
        .collect();
    let mut triangles = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = ((r, s), (r + 1, s), (r + 1, s + 1), (r, s + 1));
            let mut push = |t: [(usize, usize); 3]| {
                let position = t.map(|(r, s)| ring_idx(r, s));
                triangles.push(Triangle {
                    position,
                    normal: position,
                    uv: t.map(|(r, s)| uv_idx(r, s)),
                });
            };
            // pole quads collapse to a single triangle
            if r != 0 {
                push([a, b, d]);
            }
            if r != rings - 1 {
                push([b, c, d]);
            }
        }
    }
    TriangleMesh {
        positions,
        normals,
        uvs,
        triangles,
        albedo: procedural_albedo(ALBEDO_RES, 8),
    }
}

fn torus(major: f64, minor: f64, rings: usize, segments: usize) -> TriangleMesh {
    use std::f64::consts::TAU;
    let mut positions = Vec::with_capacity(rings * segments);
    let mut normals = Vec::with_capacity(rings * segments);
    for i in 0..rings {
        let a = TAU * i as f64 / rings as f64;
        let centre = Vec3::new(major * a.sin(), 0.0, major * a.cos());
        for j in 0..segments {
            let b = TAU * j as f64 / segments as f64;
            let n = Vec3::new(b.cos() * a.sin(), b.sin(), b.cos() * a.cos());
            positions.push(centre + minor * n);
            normals.push(n);
        }
    }
    let pidx = |i: usize, j: usize| (i % rings) * segments + j % segments;
    let uv_idx = |i: usize, j: usize| i * (segments + 1) + j;
    let uvs: Vec<[f64; 2]> = (0..=rings)
        .flat_map(|i| (0..=segments).map(move |j| [i as f64 / rings as f64, j as f64 / segments as f64]))
        .collect();
    let mut triangles = Vec::with_capacity(2 * rings * segments);
    for i in 0..rings {
        for j in 0..segments {
            let quad = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            for tri in [[0, 1, 2], [0, 2, 3]] {
                let t = tri.map(|k| quad[k]);
                let position = t.map(|(i, j)| pidx(i, j));
                triangles.push(Triangle {
                    position,
                    normal: position,
                    uv: t.map(|(i, j)| uv_idx(i, j)),
                });
            }
        }
    }
    TriangleMesh {
        positions,
        normals,
        uvs,
        triangles,
        albedo: procedural_albedo(ALBEDO_RES, 6),
    }
}
