mod common;

use dnrselect::diff::Tensor;
use dnrselect::train::{
    checkpoint_from_bytes, evaluate, evaluate_with, load_checkpoint, run_pipeline, step1_train, step2_finetune,
    Dihedral, TrainConfig, TrainData, TrainError,
};

use common::{cube_data, tiny_config, triangle_data};

#[test]
fn augment_identity_and_involution() {
    let data = cube_data(12, 16);
    let v = &data.pool[0];
    let (i, g) = Dihedral::IDENTITY.apply_sample(&v.input, &v.rasterized);
    assert_eq!(i, v.input);
    assert_eq!(g, v.rasterized);
    let flip = Dihedral { flip: true, rot: 0 };
    let (i1, g1) = flip.apply_sample(&v.input, &v.rasterized);
    let (i2, g2) = flip.apply_sample(&i1, &g1);
    assert_eq!(i2, v.input);
    assert_eq!(g2, v.rasterized);
}

#[test]
fn flip_mirrors_every_map_and_negates_normal_x() {
    let data = cube_data(12, 16);
    let v = &data.pool[1];
    let flip = Dihedral { flip: true, rot: 0 };
    let (i, g) = flip.apply_sample(&v.input, &v.rasterized);
    let (h, w) = (16, 16);
    let at = |t: &Tensor, c: usize, x: usize, y: usize| t.data()[c * h * w + y * w + x];
    for y in 0..h {
        for x in 0..w {
            let sx = w - 1 - x;
            for c in 0..3 {
                assert_eq!(at(&g, c, x, y), at(&v.rasterized, c, sx, y));
                assert_eq!(at(&i.dirs, c, x, y), at(&v.input.dirs, c, sx, y));
            }
            for c in 0..2 {
                assert_eq!(at(&i.maps.uv, c, x, y), at(&v.input.maps.uv, c, sx, y));
            }
            assert_eq!(at(&i.maps.mask, 0, x, y), at(&v.input.maps.mask, 0, sx, y));
            assert_eq!(at(&i.maps.depth, 0, x, y), at(&v.input.maps.depth, 0, sx, y));
            assert_eq!(at(&i.maps.normal, 0, x, y), -at(&v.input.maps.normal, 0, sx, y));
            assert_eq!(at(&i.maps.normal, 1, x, y), at(&v.input.maps.normal, 1, sx, y));
            assert_eq!(at(&i.maps.normal, 2, x, y), at(&v.input.maps.normal, 2, sx, y));
        }
    }
}

#[test]
fn two_view_pool_selects_one() {
    let full = triangle_data(16);
    let data = TrainData::new(full.pool[..2].to_vec(), full.probe.clone(), full.test.clone()).unwrap();
    let cfg = TrainConfig { m: 1, ..tiny_config() };
    let r = step1_train(&data, &cfg).unwrap();
    assert_eq!(r.selected.len(), 1);
    assert!(r.selected[0] < 2);
}

#[test]
fn budget_must_be_below_pool() {
    let data = triangle_data(16);
    let cfg = TrainConfig { m: 4, ..tiny_config() };
    assert!(matches!(step1_train(&data, &cfg), Err(TrainError::Config(_))));
}

#[test]
fn coarse_loss_falls_on_single_triangle() {
    let data = triangle_data(16);
    let cfg = TrainConfig {
        m: 2,
        epochs_step1: 30,
        inner_iters: 5,
        lr_step1: 3e-3,
        ..tiny_config()
    };
    let r = step1_train(&data, &cfg).unwrap();
    let mean = |rows: &[dnrselect::train::Step1Row]| rows.iter().map(|r| r.dnr_c).sum::<f64>() / rows.len() as f64;
    let (first, last) = (mean(&r.rows[..10]), mean(&r.rows[20..]));
    assert!(last < first, "first 10 epochs {first}, last 10 {last}");
}

#[test]
fn identical_seeds_select_identical_views() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let a = step1_train(&data, &cfg).unwrap();
    let b = step1_train(&data, &cfg).unwrap();
    assert_eq!(a.selected, b.selected);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.model.store.digest(), b.model.store.digest());
}

#[test]
fn zero_rl_weight_matches_dnr_only_training() {
    let data = cube_data(12, 16);
    let mut with_rl = tiny_config();
    with_rl.weights.rl = 0.0;
    with_rl.rl_updates = 4;
    let dnr_only = TrainConfig {
        rl_updates: 0,
        ..tiny_config()
    };
    let a = step1_train(&data, &with_rl).unwrap();
    let b = step1_train(&data, &dnr_only).unwrap();
    assert_eq!(a.model.store.digest(), b.model.store.digest());
    assert_eq!(a.selected, b.selected);
}

#[test]
fn step2_zero_epochs_is_identity() {
    let data = cube_data(12, 16);
    let cfg = TrainConfig {
        epochs_step2: 0,
        ..tiny_config()
    };
    let coarse = step1_train(&data, &cfg).unwrap().checkpoint(&cfg);
    let (fine, rows) = step2_finetune(&coarse, &data, &cfg).unwrap();
    assert!(rows.is_empty());
    assert_eq!(fine.digest(), coarse.digest());
}

#[test]
fn step2_terms_sum_to_total_and_selector_is_frozen() {
    let data = cube_data(12, 16);
    let cfg = TrainConfig {
        epochs_step2: 3,
        ..tiny_config()
    };
    let coarse = step1_train(&data, &cfg).unwrap().checkpoint(&cfg);
    let (fine, rows) = step2_finetune(&coarse, &data, &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let sum: f64 = r.terms.iter().sum();
        assert!((sum - r.total).abs() < 1e-9, "{sum} vs {}", r.total);
    }
    let q_before = coarse.selector.as_ref().unwrap().store.digest();
    let q_after = fine.selector.as_ref().unwrap().store.digest();
    assert_eq!(q_before, q_after);
    assert_ne!(fine.model.store.digest(), coarse.model.store.digest());
    assert_eq!(fine.counters[1], 3);
}

#[test]
fn step2_rejects_unknown_views() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let mut coarse = step1_train(&data, &cfg).unwrap().checkpoint(&cfg);
    coarse.selected = vec![data.pool.len()];
    assert!(matches!(step2_finetune(&coarse, &data, &cfg), Err(TrainError::Data(_))));
    coarse.selected.clear();
    assert!(step2_finetune(&coarse, &data, &cfg).is_err());
}

#[test]
fn evaluating_ground_truth_gives_sentinels() {
    let data = cube_data(12, 16);
    let rows = evaluate_with(&data.test, |v| Ok(v.ray_traced.clone())).unwrap();
    assert_eq!(rows.len(), data.test.len());
    for r in rows {
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12, "{}", r.ssim);
    }
}

#[test]
fn run_metrics_are_consistent_and_repeatable() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let run = run_pipeline(&cfg, &data).unwrap();
    let log = &run.log;
    let mean = log.eval.iter().map(|r| r.psnr).sum::<f64>() / log.eval.len() as f64;
    assert!((log.mean_psnr() - mean).abs() < 1e-9);
    assert_eq!(log.selected.len(), cfg.m);
    assert_eq!(log.step1.len(), cfg.epochs_step1);
    assert_eq!(log.step2.len(), cfg.epochs_step2);
    let again = evaluate(&run.fine.model, &data.test).unwrap();
    assert_eq!(again, log.eval);

    assert_eq!(log.episodes.len(), cfg.epochs_step1 * cfg.m);
    for (ep, row) in log.step1.iter().enumerate() {
        let steps: Vec<_> = log.episodes.iter().filter(|e| e.episode == ep).collect();
        assert_eq!(steps.iter().map(|e| e.action).collect::<Vec<_>>(), row.selected);
        assert!((steps.iter().map(|e| e.reward).sum::<f64>() - row.reward_sum).abs() < 1e-12);
        assert!(steps[0].q_max.is_none() && steps[1..].iter().all(|e| e.q_max.is_some()));
    }
    let jsonl = log.jsonl();
    assert_eq!(jsonl.lines().filter(|l| l.contains("\"kind\":\"episode\"")).count(), log.episodes.len());
    assert!(jsonl.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let run = run_pipeline(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fine.ckpt");
    run.fine.save(&path).unwrap();
    let loaded = load_checkpoint(&path, Some(&cfg)).unwrap();
    assert!(!loaded.hash_mismatch);
    let ck = loaded.checkpoint;
    assert_eq!(ck.selected, run.fine.selected);
    assert_eq!(ck.counters, run.fine.counters);
    assert_eq!(ck.digest(), run.fine.digest());
    for v in &data.test {
        assert_eq!(ck.model.render(&v.input).unwrap(), run.fine.model.render(&v.input).unwrap());
    }
    let (a, b) = (ck.adam_model.unwrap(), run.fine.adam_model.clone().unwrap());
    assert_eq!(a.step_count(), b.step_count());
    assert!(a.moments().zip(b.moments()).all(|(x, y)| x.1 == y.1 && x.2 == y.2));
}

#[test]
fn altered_config_sets_mismatch_flag() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let ck = step1_train(&data, &cfg).unwrap().checkpoint(&cfg);
    let bytes = ck.to_bytes();
    let other = TrainConfig { seed: 99, ..cfg.clone() };
    assert!(checkpoint_from_bytes(&bytes, Some(&other)).unwrap().hash_mismatch);
    assert!(!checkpoint_from_bytes(&bytes, Some(&cfg)).unwrap().hash_mismatch);

    // stored hash no longer matching the stored config
    let mut ar = ck.to_archive();
    let mut h = ar.take("meta/config_hash").unwrap();
    h.data_mut()[0] = (h.data()[0] + 1.0) % 256.0;
    ar.push("meta/config_hash", h);
    assert!(checkpoint_from_bytes(&ar.to_bytes(), None).unwrap().hash_mismatch);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let bytes = step1_train(&data, &cfg).unwrap().checkpoint(&cfg).to_bytes();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        let err = checkpoint_from_bytes(&bytes[..cut], None).unwrap_err();
        assert!(matches!(err, TrainError::Checkpoint(_)), "cut {cut}: {err}");
    }
}

#[test]
fn run_artifacts_are_written() {
    let data = cube_data(12, 16);
    let cfg = tiny_config();
    let run = run_pipeline(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dnrselect::train::write_run(&run, &data, dir.path()).unwrap();
    for f in [
        "coarse.ckpt",
        "fine.ckpt",
        "step1.csv",
        "step2.csv",
        "eval.csv",
        "metrics.jsonl",
        "selected_views.json",
        "config.toml",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("selected_views.json")).unwrap()).unwrap();
    assert_eq!(sel.as_array().unwrap().len(), cfg.m);
}
