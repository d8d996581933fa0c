//! Minimal ASCII Wavefront OBJ reader (`v`, `vt`, `vn`, `f`).

use std::path::Path;

use super::mesh::{procedural_albedo, vertex_normals, Triangle, TriangleMesh, ALBEDO_RES};
use super::{SceneError, Vec3};

pub fn load_obj(path: &Path) -> Result<TriangleMesh, SceneError> {
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text)
}

struct Corner {
    v: usize,
    vt: Option<usize>,
    vn: Option<usize>,
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, SceneError> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut normals = Vec::new();
    let mut faces: Vec<(usize, [Corner; 3])> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let err = |msg: String| SceneError::MalformedObj { line: lineno, msg };
        let floats = |it: std::str::SplitWhitespace<'_>, n: usize| -> Result<Vec<f64>, SceneError> {
            let vals: Vec<f64> = it
                .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() < n || vals.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("expected {n} finite numbers after {tag}")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let p = floats(it, 3)?;
                positions.push(Vec3::new(p[0], p[1], p[2]));
            }
            "vt" => {
                let t = floats(it, 2)?;
                if !(0.0..=1.0).contains(&t[0]) || !(0.0..=1.0).contains(&t[1]) {
                    return Err(err(format!("texture coordinate ({}, {}) outside [0,1]", t[0], t[1])));
                }
                uvs.push([t[0], t[1]]);
            }
            "vn" => {
                let n = floats(it, 3)?;
                let n = Vec3::new(n[0], n[1], n[2])
                    .try_normalize(1e-12)
                    .ok_or_else(|| err("zero-length normal".into()))?;
                normals.push(n);
            }
            "f" => {
                let corners: Vec<Corner> = it
                    .map(|c| parse_corner(c).ok_or_else(|| err(format!("bad face corner {c:?}"))))
                    .collect::<Result<_, _>>()?;
                if corners.len() < 3 {
                    return Err(err("face with fewer than 3 corners".into()));
                }
                // fan triangulation of polygons
                let mut corners = corners.into_iter();
                let first = corners.next().expect("len >= 3");
                let mut prev = corners.next().expect("len >= 3");
                for next in corners {
                    let tri = [
                        Corner {
                            v: first.v,
                            vt: first.vt,
                            vn: first.vn,
                        },
                        prev,
                        Corner {
                            v: next.v,
                            vt: next.vt,
                            vn: next.vn,
                        },
                    ];
                    faces.push((lineno, tri));
                    prev = next;
                }
            }
            // groups, objects, materials and smoothing are ignored
            "o" | "g" | "s" | "usemtl" | "mtllib" | "l" | "vp" => {}
            other => return Err(err(format!("unsupported record {other:?}"))),
        }
    }

    if uvs.is_empty() {
        return Err(SceneError::MissingUv);
    }
    let have_normals = !normals.is_empty();
    let mut triangles = Vec::with_capacity(faces.len());
    for (lineno, tri) in &faces {
        let err = |msg: String| SceneError::MalformedObj { line: *lineno, msg };
        let resolve = |i: usize, len: usize, what: &str| -> Result<usize, SceneError> {
            if i == 0 || i > len {
                Err(err(format!("{what} index {i} out of range 1..={len}")))
            } else {
                Ok(i - 1)
            }
        };
        let mut t = Triangle {
            position: [0; 3],
            normal: [0; 3],
            uv: [0; 3],
        };
        for (k, c) in tri.iter().enumerate() {
            t.position[k] = resolve(c.v, positions.len(), "vertex")?;
            let vt = c.vt.ok_or_else(|| err("face corner without texture coordinate".into()))?;
            t.uv[k] = resolve(vt, uvs.len(), "texture")?;
            t.normal[k] = match (have_normals, c.vn) {
                (true, Some(vn)) => resolve(vn, normals.len(), "normal")?,
                (true, None) => return Err(err("face corner without normal index".into())),
                (false, _) => t.position[k],
            };
        }
        triangles.push(t);
    }
    if !have_normals {
        let idx: Vec<[usize; 3]> = triangles.iter().map(|t| t.position).collect();
        normals = vertex_normals(&positions, &idx);
    }
    let mesh = TriangleMesh {
        positions,
        normals,
        uvs,
        triangles,
        albedo: procedural_albedo(ALBEDO_RES, 8),
    };
    mesh.validate()?;
    Ok(mesh)
}

fn parse_corner(s: &str) -> Option<Corner> {
    let mut parts = s.split('/');
    let v = parts.next()?.parse().ok()?;
    let vt = match parts.next() {
        None | Some("") => None,
        Some(t) => Some(t.parse().ok()?),
    };
    let vn = match parts.next() {
        None | Some("") => None,
        Some(n) => Some(n.parse().ok()?),
    };
    if parts.next().is_some() {
        return None;
    }
    Some(Corner { v, vt, vn })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvn 0 0 1\nvn 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/2 3/3/3\n";

    #[test]
    fn single_triangle() {
        let m = parse_obj(TRI).unwrap();
        assert_eq!(m.triangles.len(), 1);
        let t = m.triangles[0];
        assert_eq!((t.position, t.uv, t.normal), ([0, 1, 2], [0, 1, 2], [0, 1, 2]));
    }

    #[test]
    fn out_of_range_face_is_malformed() {
        let bad = TRI.replace("f 1/1/1 2/2/2 3/3/3", "f 1/1/1 2/2/2 4/3/3");
        match parse_obj(&bad) {
            Err(SceneError::MalformedObj { line, .. }) => assert_eq!(line, 10),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_reports_line_number() {
        let bad = "v 0 0 0\nv 1 x 0\n";
        assert!(matches!(parse_obj(bad), Err(SceneError::MalformedObj { line: 2, .. })));
    }

    #[test]
    fn missing_uvs_is_an_error() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        assert!(matches!(parse_obj(src), Err(SceneError::MissingUv)));
    }

    #[test]
    fn missing_normals_are_computed() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n";
        let m = parse_obj(src).unwrap();
        for n in &m.normals {
            assert!((n - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        }
    }
}
