use std::fs;
use std::path::Path;

use proptest::prelude::*;

use xalign_core::error::Error;
use xalign_core::harness::gradcheck::{toy_model_config, toy_scene_spec};
use xalign_core::harness::qualitative::{
    decode_pnm, encode_pgm, encode_ppm, error_mask, fixed_mask, parse_labels, render_labels, side_by_side,
};
use xalign_core::harness::{
    compute_miou, grad_check, mean_noise, mean_split, run_backbone_sweep, run_condition_splits, run_noise_sweep,
    run_qualitative, write_if_changed, ExperimentConfig, ExperimentKind, MiouAccumulator,
};
use xalign_core::model::VariantKind;
use xalign_core::synthdata::Condition;
use xalign_core::xff::FuserKind;

#[test]
fn miou_of_identical_maps_is_one() {
    let gt = vec![1, 0, 1, 1, 0, 0, 1, 0];
    let probs: Vec<f32> = gt.iter().map(|&g| g as f32).collect();
    let r = compute_miou(&probs, &gt, 2, 0.5).unwrap();
    assert_eq!(r.per_class_iou, vec![1.0, 1.0]);
    assert_eq!(r.miou, 1.0);
}

#[test]
fn miou_of_disjoint_maps_is_zero() {
    let gt = vec![1, 0, 1, 0];
    let probs = vec![0.0, 1.0, 0.0, 1.0];
    assert_eq!(compute_miou(&probs, &gt, 1, 0.5).unwrap().miou, 0.0);
}

#[test]
fn miou_hand_computed_example() {
    // One class over four cells: prediction {0,1}, truth {1,2}.
    let r = compute_miou(&[0.9, 0.7, 0.2, 0.1], &[0, 1, 1, 0], 1, 0.5).unwrap();
    assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
    // Second class empty in both.
    let r = compute_miou(&[0.9, 0.7, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0], &[0, 1, 1, 0, 0, 0, 0, 0], 2, 0.5).unwrap();
    assert_eq!(r.per_class_iou[1], 1.0);
    assert!((r.miou - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn miou_rejects_mismatched_lengths() {
    assert!(compute_miou(&[0.5; 3], &[0; 4], 1, 0.5).is_err());
    assert!(compute_miou(&[0.5; 3], &[0; 3], 2, 0.5).is_err());
}

proptest! {
    #[test]
    fn accumulated_iou_pools_counts(
        a in prop::collection::vec((0.0f32..1.0, 0u8..2), 8),
        b in prop::collection::vec((0.0f32..1.0, 0u8..2), 8),
    ) {
        let mut acc = MiouAccumulator::new(2, 0.5);
        let split = |v: &[(f32, u8)]| (v.iter().map(|x| x.0).collect::<Vec<_>>(), v.iter().map(|x| x.1).collect::<Vec<_>>());
        let (pa, ga) = split(&a);
        let (pb, gb) = split(&b);
        acc.add(&pa, &ga).unwrap();
        acc.add(&pb, &gb).unwrap();
        let r = acc.report();
        for k in 0..2 {
            let cells = a[k * 4..(k + 1) * 4].iter().chain(&b[k * 4..(k + 1) * 4]);
            let (mut i, mut u) = (0, 0);
            for &(p, g) in cells {
                let (p, g) = (p >= 0.5, g != 0);
                i += (p && g) as u32;
                u += (p || g) as u32;
            }
            let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
            prop_assert_eq!(r.per_class_iou[k], want);
            prop_assert!((0.0..=1.0).contains(&r.per_class_iou[k]));
        }
        prop_assert_eq!(r.n_samples, 2);
    }

    #[test]
    fn label_rasters_round_trip(mask in prop::collection::vec(0u8..2, 4 * 3 * 5)) {
        let rgb = render_labels(&mask, 4, 3, 5).unwrap();
        prop_assert_eq!(parse_labels(&rgb, 4, 3, 5).unwrap(), mask);
        let bytes = encode_ppm(5, 3, &rgb);
        let (w, h, channels, data) = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        prop_assert_eq!((w, h, channels), (5, 3, 3));
        prop_assert_eq!(data, rgb);
    }
}

#[test]
fn masks_and_composites() {
    let gt = vec![1, 0, 0, 1];
    let err = error_mask(&[1, 1, 0, 1], &gt, 2).unwrap();
    assert_eq!(err, vec![false, true]);
    assert!(fixed_mask(&err, &err).iter().all(|&f| !f));
    assert_eq!(fixed_mask(&[true, true], &[false, true]), vec![true, false]);
    let (w, h, channels, data) = decode_pnm(&encode_pgm(2, 1, &[true, false]), Path::new("m.pgm")).unwrap();
    assert_eq!((w, h, channels, data), (2, 1, 1, vec![255, 0]));
    let (width, img) = side_by_side(&[vec![10; 12], vec![20; 12]], 2, 2);
    assert_eq!(width, 6);
    assert_eq!(img.len(), 6 * 2 * 3);
    assert!(decode_pnm(b"P6\n2 2\n255\n\x00", Path::new("short.ppm")).is_err());
}

#[test]
fn write_if_changed_skips_identical_content() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a/b.txt");
    assert!(write_if_changed(&p, b"x").unwrap());
    assert!(!write_if_changed(&p, b"x").unwrap());
    assert!(write_if_changed(&p, b"y").unwrap());
    assert_eq!(fs::read(&p).unwrap(), b"y");
}

#[test]
fn experiment_config_round_trips() {
    let mut c = ExperimentConfig::new(ExperimentKind::NoiseSweep);
    c.seeds = vec![4, 5];
    c.sigmas = vec![0.0, 0.2];
    c.autotune_share = Some(0.2);
    c.scene = toy_scene_spec();
    c.model = toy_model_config(VariantKind::All, FuserKind::Sdta);
    c.data_dir = Some("/tmp/somewhere".into());
    let back = ExperimentConfig::parse(&c.to_kv(), ExperimentKind::NoiseSweep).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.digest(), c.digest());
    let mut d = c.clone();
    d.epochs += 1;
    assert_ne!(d.digest(), c.digest());
}

#[test]
fn experiment_config_rejects_bad_input() {
    let kind = ExperimentKind::BackboneSweep;
    assert!(ExperimentConfig::parse("epochz=3\n", kind).is_err());
    assert!(ExperimentConfig::parse("scene.nope=1\n", kind).is_err());
    assert!(ExperimentConfig::parse("experiment=noise\n", kind).is_err());
    assert!(ExperimentConfig::parse("seeds=\n", kind).is_err());
    assert!(ExperimentConfig::parse("preset=cityscapes\n", kind).is_err());
    assert_eq!(ExperimentConfig::parse("", kind).unwrap(), ExperimentConfig::new(kind));
    assert!("nope".parse::<ExperimentKind>().is_err());
}

#[test]
fn grad_check_registry() {
    assert!(matches!(grad_check("matmul_of_doom", 0), Err(Error::UnknownOp(_))));
    let r = grad_check("softmax", 0).unwrap();
    assert!(r.passes(1e-3), "{r:?}");
}

fn tiny_experiment(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        variants: vec![VariantKind::Baseline, VariantKind::View],
        seeds: vec![0],
        sigmas: vec![0.0, 0.1],
        n_train: 4,
        n_val: 2,
        epochs: 1,
        batch_size: 2,
        qualitative_scenes: 2,
        scene: toy_scene_spec(),
        model: toy_model_config(VariantKind::Baseline, FuserKind::Conv),
        ..ExperimentConfig::new(kind)
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>, std::time::SystemTime)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = fs::metadata(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap(), meta.modified().unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn drivers_are_idempotent_and_share_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run_all = || {
        let rows = run_backbone_sweep(&tiny_experiment(ExperimentKind::BackboneSweep), out).unwrap();
        let noise = run_noise_sweep(&tiny_experiment(ExperimentKind::NoiseSweep), out).unwrap();
        let splits = run_condition_splits(&tiny_experiment(ExperimentKind::ConditionSplits), out).unwrap();
        let qual = run_qualitative(&tiny_experiment(ExperimentKind::Qualitative), out).unwrap();
        (rows, noise, splits, qual)
    };
    let first = run_all();
    let before = snapshot(out);
    let second = run_all();
    assert_eq!(first, second);
    assert_eq!(before, snapshot(out));

    let (rows, noise, splits, qual) = first;
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.miou.is_some_and(|m| (0.0..=1.0).contains(&m))));
    assert_eq!(noise.len(), 4);
    // Zero noise reproduces the clean evaluation of the same cell.
    for r in &rows {
        let clean = mean_noise(&noise, r.variant, 0.0);
        assert!((clean - r.miou.unwrap()).abs() < 1e-12);
    }
    assert_eq!(splits.len(), 2 * Condition::ALL.len());
    let clear = mean_split(&splits, Condition::Clear, VariantKind::View);
    assert!((clear - rows[1].miou.unwrap()).abs() < 1e-12);
    assert_eq!(qual.len(), 2 * 2);
    assert!(qual.iter().filter(|q| q.model == "baseline").all(|q| q.fixed_cells == 0));
    for f in ["backbones/backbones.csv", "noise/noise.md", "splits/splits.csv", "qualitative/scene_000/composite.ppm"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let cells = fs::read_dir(out.join("cells")).unwrap().count();
    assert_eq!(cells, 2);
}

#[test]
fn changed_training_config_is_refused_for_existing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(ExperimentKind::BackboneSweep);
    run_backbone_sweep(&ExperimentConfig { variants: vec![VariantKind::Baseline], ..cfg.clone() }, dir.path()).unwrap();
    let changed = ExperimentConfig {
        variants: vec![VariantKind::Baseline],
        base_lr: 2e-4,
        ..cfg
    };
    assert!(matches!(run_backbone_sweep(&changed, dir.path()), Err(Error::DigestMismatch { .. })));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_experiment(ExperimentKind::BackboneSweep);
    let serial = run_backbone_sweep(&ExperimentConfig { jobs: 1, ..cfg.clone() }, a.path()).unwrap();
    let parallel = run_backbone_sweep(&ExperimentConfig { jobs: 3, ..cfg.clone() }, b.path()).unwrap();
    assert_eq!(serial, parallel);
    let strip = |v: Vec<(String, Vec<u8>, std::time::SystemTime)>| {
        v.into_iter().filter(|f| !f.0.ends_with("config.txt")).map(|f| (f.0, f.1)).collect::<Vec<_>>()
    };
    assert_eq!(strip(snapshot(a.path())), strip(snapshot(b.path())));
}
