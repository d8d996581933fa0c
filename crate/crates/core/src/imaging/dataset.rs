//! Multi-view dataset: per-view G-buffers, preview renders and ray-traced
//! references, plus the on-disk layout
//! `<root>/<scene>/<split>/<label>.{png,uv.pfm,depth.pfm,normal.pfm,rast.png,ray.png}`
//! with a `cameras.json` index next to the split directories.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rasterize_gbuffer, ray_trace, shade_rasterized, GBuffer, Image, ImagingError, LightingSetup, Material};
use crate::scene::{camera_ring, make_toy_scene, Camera, Intrinsics, ToyScene, TriangleMesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Probe => "probe",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Probe, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: ToyScene,
    /// Total number of generated views over all splits.
    pub views: usize,
    pub resolution: usize,
    pub fov_deg: f64,
    pub radius: f64,
    /// One camera ring per elevation; `views` must divide evenly.
    pub elevations_deg: Vec<f64>,
    pub near: f64,
    pub far: f64,
    /// Train / probe / test fractions.
    pub splits: [f64; 3],
    pub seed: u64,
    pub lighting: LightingSetup,
    pub material: Material,
}

impl DatasetSpec {
    pub fn new(scene: ToyScene, views: usize, resolution: usize) -> Self {
        DatasetSpec {
            scene,
            views,
            resolution,
            fov_deg: 40.0,
            radius: 3.2,
            elevations_deg: vec![15.0, 40.0],
            near: 0.1,
            far: 10.0,
            splits: [0.6, 0.2, 0.2],
            seed: 0,
            lighting: LightingSetup::default(),
            material: Material::default(),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::square(self.resolution, self.fov_deg, self.near, self.far)
    }

    /// View counts per split. Every split gets at least one view and the
    /// training pool at least two.
    pub fn split_counts(&self) -> Result<[usize; 3], ImagingError> {
        let n = self.views;
        let f = self.splits;
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ImagingError::Dataset(format!("split fractions {f:?} must be >= 0 and sum to 1")));
        }
        let probe = ((f[1] * n as f64).round() as usize).max(1);
        let test = ((f[2] * n as f64).round() as usize).max(1);
        if n < probe + test + 2 {
            return Err(ImagingError::Dataset(format!("{n} views cannot fill the splits {f:?}")));
        }
        Ok([n - probe - test, probe, test])
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        self.lighting.validate()?;
        self.split_counts()?;
        if self.resolution == 0 || self.elevations_deg.is_empty() || self.views % self.elevations_deg.len() != 0 {
            return Err(ImagingError::Dataset(format!(
                "{} views do not divide into {} elevation rings",
                self.views,
                self.elevations_deg.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ViewSample {
    pub label: String,
    pub camera: Camera,
    pub gbuffer: GBuffer,
    pub rasterized: Image,
    pub ray_traced: Image,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<ViewSample>,
    pub probe: Vec<ViewSample>,
    pub test: Vec<ViewSample>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    label: String,
    split: Split,
    world_to_camera: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct CameraIndex {
    spec: DatasetSpec,
    intrinsics: Intrinsics,
    views: Vec<CameraRecord>,
}

pub fn render_view(mesh: &TriangleMesh, camera: &Camera, label: &str, spec: &DatasetSpec) -> Result<ViewSample, ImagingError> {
    let gbuffer = rasterize_gbuffer(mesh, camera);
    let rasterized = shade_rasterized(&gbuffer, &mesh.albedo, &spec.lighting, camera);
    let ray_traced = ray_trace(mesh, camera, &spec.lighting, &spec.material)?;
    Ok(ViewSample {
        label: label.to_owned(),
        camera: camera.clone(),
        gbuffer,
        rasterized,
        ray_traced,
    })
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self, ImagingError> {
        spec.validate()?;
        let mesh = make_toy_scene(spec.scene).map_err(|e| ImagingError::Dataset(e.to_string()))?;
        let per_ring = spec.views / spec.elevations_deg.len();
        let pool = camera_ring(per_ring, spec.radius, &spec.elevations_deg, Vec3::zeros(), spec.intrinsics())
            .map_err(|e| ImagingError::Dataset(e.to_string()))?;
        let assignment = split_assignment(spec)?;
        let mut ds = Dataset {
            spec: spec.clone(),
            train: Vec::new(),
            probe: Vec::new(),
            test: Vec::new(),
        };
        for (i, split) in assignment.into_iter().enumerate() {
            let sample = render_view(&mesh, pool.camera(i), &pool.labels()[i], spec)?;
            ds.split_mut(split).push(sample);
        }
        Ok(ds)
    }

    pub fn split(&self, s: Split) -> &[ViewSample] {
        match s {
            Split::Train => &self.train,
            Split::Probe => &self.probe,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<ViewSample> {
        match s {
            Split::Train => &mut self.train,
            Split::Probe => &mut self.probe,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.probe.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mesh(&self) -> Result<TriangleMesh, ImagingError> {
        make_toy_scene(self.spec.scene).map_err(|e| ImagingError::Dataset(e.to_string()))
    }

    /// Directory holding `cameras.json` and the split folders.
    pub fn scene_dir(root: &Path, spec: &DatasetSpec) -> PathBuf {
        root.join(spec.scene.name())
    }

    /// Writes the dataset under `root/<scene>/` and returns that directory.
    pub fn write(&self, root: &Path) -> Result<PathBuf, ImagingError> {
        let dir = Self::scene_dir(root, &self.spec);
        let mut records = Vec::with_capacity(self.len());
        for split in Split::ALL {
            let sdir = dir.join(split.name());
            std::fs::create_dir_all(&sdir)?;
            for v in self.split(split) {
                write_view(&sdir, v)?;
                records.push(CameraRecord {
                    label: v.label.clone(),
                    split,
                    world_to_camera: v.camera.world_to_camera(),
                });
            }
        }
        let index = CameraIndex {
            spec: self.spec.clone(),
            intrinsics: self.spec.intrinsics(),
            views: records,
        };
        let json = serde_json::to_string_pretty(&index).map_err(|e| ImagingError::Dataset(e.to_string()))?;
        std::fs::write(dir.join("cameras.json"), json + "\n")?;
        Ok(dir)
    }

    /// Loads a dataset from a scene directory containing `cameras.json`.
    pub fn load(dir: &Path) -> Result<Self, ImagingError> {
        let text = std::fs::read_to_string(dir.join("cameras.json"))?;
        let index: CameraIndex =
            serde_json::from_str(&text).map_err(|e| ImagingError::Dataset(format!("cameras.json: {e}")))?;
        let mut ds = Dataset {
            spec: index.spec,
            train: Vec::new(),
            probe: Vec::new(),
            test: Vec::new(),
        };
        for rec in index.views {
            let camera = Camera::from_world_to_camera(&rec.world_to_camera, index.intrinsics)
                .map_err(|e| ImagingError::Dataset(format!("view {}: {e}", rec.label)))?;
            let v = read_view(&dir.join(rec.split.name()), &rec.label, camera)?;
            ds.split_mut(rec.split).push(v);
        }
        Ok(ds)
    }
}

/// Seeded shuffle of view indices into train / probe / test.
fn split_assignment(spec: &DatasetSpec) -> Result<Vec<Split>, ImagingError> {
    let counts = spec.split_counts()?;
    let mut order: Vec<usize> = (0..spec.views).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut out = vec![Split::Train; spec.views];
    for (k, &i) in order.iter().enumerate() {
        out[i] = if k < counts[0] {
            Split::Train
        } else if k < counts[0] + counts[1] {
            Split::Probe
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub const VIEW_FILES: [&str; 6] = ["png", "uv.pfm", "depth.pfm", "normal.pfm", "rast.png", "ray.png"];

fn write_view(dir: &Path, v: &ViewSample) -> Result<(), ImagingError> {
    let p = |ext: &str| dir.join(format!("{}.{ext}", v.label));
    let g = &v.gbuffer;
    g.mask.write_png(&p("png"))?;
    // third channel carries coverage so the map fits a 3-channel PFM
    let mut uvm = Image::new(g.width(), g.height(), 3);
    for y in 0..g.height() {
        for x in 0..g.width() {
            uvm.pixel_mut(x, y)
                .copy_from_slice(&[g.uv.get(x, y, 0), g.uv.get(x, y, 1), g.mask.get(x, y, 0)]);
        }
    }
    uvm.write_pfm(&p("uv.pfm"))?;
    g.depth.write_pfm(&p("depth.pfm"))?;
    g.normal.write_pfm(&p("normal.pfm"))?;
    v.rasterized.write_png(&p("rast.png"))?;
    v.ray_traced.write_png(&p("ray.png"))?;
    Ok(())
}

fn read_view(dir: &Path, label: &str, camera: Camera) -> Result<ViewSample, ImagingError> {
    let p = |ext: &str| dir.join(format!("{label}.{ext}"));
    let uvm = Image::read_pfm(&p("uv.pfm"))?;
    let depth = Image::read_pfm(&p("depth.pfm"))?;
    let normal = Image::read_pfm(&p("normal.pfm"))?;
    let rasterized = Image::read_png(&p("rast.png"))?;
    let ray_traced = Image::read_png(&p("ray.png"))?;
    let k = camera.intrinsics;
    for (name, img, ch) in [
        ("uv", &uvm, 3),
        ("depth", &depth, 1),
        ("normal", &normal, 3),
        ("rast", &rasterized, 3),
        ("ray", &ray_traced, 3),
    ] {
        if img.width() != k.width || img.height() != k.height || img.channels() != ch {
            return Err(ImagingError::Dataset(format!("{label}.{name}: unexpected dimensions")));
        }
    }
    let gbuffer = GBuffer {
        uv: uvm.select_channels(&[0, 1]),
        depth,
        normal,
        mask: uvm.select_channels(&[2]),
        near: k.near,
        far: k.far,
    };
    Ok(ViewSample {
        label: label.to_owned(),
        camera,
        gbuffer,
        rasterized,
        ray_traced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        let mut s = DatasetSpec::new(ToyScene::from_name("cube").unwrap(), 10, 16);
        s.splits = [0.6, 0.2, 0.2];
        s
    }

    #[test]
    fn split_sizes_and_disjoint_labels() {
        let ds = Dataset::generate(&small()).unwrap();
        assert_eq!((ds.train.len(), ds.probe.len(), ds.test.len()), (6, 2, 2));
        let mut labels: Vec<_> = Split::ALL.iter().flat_map(|&s| ds.split(s)).map(|v| v.label.clone()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn disk_round_trip_keeps_geometry() {
        let ds = Dataset::generate(&small()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = ds.write(tmp.path()).unwrap();
        let back = Dataset::load(&dir).unwrap();
        assert_eq!(back.spec, ds.spec);
        for s in Split::ALL {
            for (a, b) in ds.split(s).iter().zip(back.split(s)) {
                assert_eq!(a.label, b.label);
                assert_eq!(a.gbuffer.mask, b.gbuffer.mask);
                for (x, y) in a.gbuffer.depth.data().iter().zip(b.gbuffer.depth.data()) {
                    assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
                }
                assert!((a.camera.rotation - b.camera.rotation).abs().max() < 1e-15);
            }
        }
    }

    #[test]
    fn uneven_rings_rejected() {
        let mut s = small();
        s.views = 11;
        assert!(Dataset::generate(&s).is_err());
    }
}
