#![allow(dead_code)]

use dnrselect::imaging::{render_view, Dataset, DatasetSpec};
use dnrselect::render::DnrConfig;
use dnrselect::scene::{procedural_albedo, Camera, Intrinsics, ToyScene, Triangle, TriangleMesh, Vec3};
use dnrselect::select::QConfig;
use dnrselect::texture::AggregatorMode;
use dnrselect::train::{TrainConfig, TrainData, TrainView};

/// Cube dataset with `views` cameras at `res x res`.
pub fn cube_dataset(views: usize, res: usize) -> Dataset {
    let spec = DatasetSpec::new(ToyScene::from_name("cube").unwrap(), views, res);
    Dataset::generate(&spec).unwrap()
}

pub fn cube_data(views: usize, res: usize) -> TrainData {
    TrainData::from_dataset(&cube_dataset(views, res)).unwrap()
}

/// Tiny network and schedule for fast pipeline tests on 16x16 or 32x32 views.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        m: 3,
        epochs_step1: 3,
        epochs_step2: 2,
        inner_iters: 3,
        rl_updates: 2,
        target_refresh: 2,
        model: DnrConfig {
            channels: 12,
            levels: 2,
            tex_resolution: 16,
            widths: vec![8],
            init_std: 0.01,
            mode: AggregatorMode::Proposed,
        },
        q: QConfig {
            embed: 8,
            hidden: 8,
            gamma: 0.9,
            obs_size: 4,
        },
        ..TrainConfig::default()
    }
}

/// One upright textured triangle facing +z.
pub fn triangle_mesh() -> TriangleMesh {
    TriangleMesh {
        positions: vec![Vec3::new(-1.0, -0.8, 0.0), Vec3::new(1.0, -0.8, 0.0), Vec3::new(0.0, 1.0, 0.0)],
        normals: vec![Vec3::z()],
        uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]],
        triangles: vec![Triangle {
            position: [0, 1, 2],
            normal: [0, 0, 0],
            uv: [0, 1, 2],
        }],
        albedo: procedural_albedo(32, 4),
    }
}

/// Views of the triangle from a fan of cameras in front of it: 4 pool, 1 probe, 1 test.
pub fn triangle_data(res: usize) -> TrainData {
    let mesh = triangle_mesh();
    let spec = DatasetSpec::new(ToyScene::from_name("cube").unwrap(), 6, res);
    let intr = Intrinsics::square(res, 50.0, 0.1, 10.0);
    let mut views = Vec::new();
    for k in 0..6 {
        let a = (-40.0 + 16.0 * k as f64).to_radians();
        let eye = 3.0 * Vec3::new(a.sin(), 0.25, a.cos());
        let cam = Camera::look_at(eye, Vec3::zeros(), intr).unwrap();
        let s = render_view(&mesh, &cam, &format!("tri_{k}"), &spec).unwrap();
        views.push(TrainView::from_sample(&s).unwrap());
    }
    let test = views.split_off(5);
    let probe = views.split_off(4);
    TrainData::new(views, probe, test).unwrap()
}

pub mod grad_suite;
pub mod rl;
pub mod oracle;

/// Configuration used by the trend and ablation checks: 64x64 cube, 24-view pool.
pub fn acceptance_config(seed: u64, m: usize) -> TrainConfig {
    TrainConfig {
        seed,
        m,
        epochs_step1: 20,
        epochs_step2: 100,
        inner_iters: 10,
        model: DnrConfig {
            channels: 12,
            levels: 3,
            tex_resolution: 64,
            widths: vec![8, 16],
            ..DnrConfig::default()
        },
        q: QConfig {
            obs_size: 16,
            ..QConfig::default()
        },
        ..TrainConfig::default()
    }
}
