use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xalign_core::geometry::{camera_rotation, lift, point_cells, splat, view_transform, BevGrid, CameraModel, FrustumSpec};
use xalign_core::numcore::gradcheck::random_tensor;
use xalign_core::numcore::{check_gradients, DiffTensor, GradCheckOptions, Tape};

fn cam(yaw: f64) -> CameraModel {
    CameraModel::new(20.0, 20.0, 15.5, 7.5, camera_rotation(yaw, 0.2, 0.0), [0.0, 0.0, 1.6], 16, 32).unwrap()
}

fn grid() -> BevGrid {
    BevGrid::new(0.0, 16.0, -8.0, 8.0, 0.5).unwrap()
}

fn frustum() -> FrustumSpec {
    FrustumSpec::new(1.0, 12.0, 6, 4, 8).unwrap()
}

#[test]
fn saturated_depth_puts_all_mass_in_one_bin() {
    let fr = frustum();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_tensor(&[3, 4, 8], 1.0, &mut rng);
    let k = 4;
    let mut logits = vec![0.0; 6 * 32];
    logits[k * 32..(k + 1) * 32].fill(40.0);
    let mut tape = Tape::<f64>::new();
    let fv = tape.leaf(f.clone());
    let dv = tape.leaf(DiffTensor::from_f64(&[6, 4, 8], &logits).unwrap());
    let lifted = lift(&mut tape, fv, dv, &cam(0.0), &fr).unwrap();
    let out = tape.data(lifted.feat);
    for c in 0..3 {
        for p in 0..32 {
            let base = (c * 32 + p) * 6;
            let hit = out[base + k];
            assert!((hit - f.data()[c * 32 + p]).abs() <= 1e-9 * hit.abs().max(1.0));
            for d in (0..6).filter(|&d| d != k) {
                assert!(out[base + d].abs() <= 1e-4 * hit.abs());
            }
        }
    }
}

#[test]
fn lifted_mass_is_partitioned_over_depth() {
    let fr = frustum();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_tensor(&[3, 4, 8], 1.0, &mut rng);
    let d = random_tensor(&[6, 4, 8], 2.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let (fv, dv) = (tape.leaf(f.clone()), tape.leaf(d));
    let lifted = lift(&mut tape, fv, dv, &cam(0.0), &fr).unwrap();
    let w = tape.data(lifted.depth_weights);
    for p in 0..32 {
        let s: f64 = (0..6).map(|k| w[k * 32 + p]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let out = tape.data(lifted.feat);
    for p in 0..32 {
        let lifted_l1: f64 = (0..3).flat_map(|c| (0..6).map(move |k| (c, k))).map(|(c, k)| out[(c * 32 + p) * 6 + k].abs()).sum();
        let src_l1: f64 = (0..3).map(|c| f.data()[c * 32 + p].abs()).sum();
        assert!((lifted_l1 - src_l1).abs() <= 1e-5 * src_l1);
    }
}

#[test]
fn two_equal_bins_split_the_feature_in_half() {
    let fr = FrustumSpec::new(2.0, 4.0, 2, 1, 1).unwrap();
    let c = CameraModel::new(10.0, 10.0, 0.0, 0.0, camera_rotation(0.0, 0.0, 0.0), [0.0; 3], 1, 1).unwrap();
    let mut tape = Tape::<f64>::new();
    let fv = tape.leaf(DiffTensor::from_f64(&[2, 1, 1], &[3.0, -5.0]).unwrap());
    let dv = tape.leaf(DiffTensor::zeros(&[2, 1, 1]));
    let lifted = lift(&mut tape, fv, dv, &c, &fr).unwrap();
    assert_eq!(tape.data(lifted.feat), &[1.5, 1.5, -2.5, -2.5]);
    assert_eq!(lifted.xyz[0], [2.0, 0.0, 0.0]);
    assert_eq!(lifted.xyz[1], [4.0, 0.0, 0.0]);
}

#[test]
fn splat_of_single_point_lights_one_cell() {
    let g = grid();
    let mut tape = Tape::<f64>::new();
    let fv = tape.leaf(DiffTensor::from_f64(&[2, 1], &[0.7, -1.2]).unwrap());
    let cells = Arc::new(point_cells(&[[3.2, 1.1, 0.0]], &g));
    let out = tape.scatter_sum(fv, cells, g.rows, g.cols).unwrap();
    let v = tape.data(out);
    let (r, c) = g.cell_of(3.2, 1.1).unwrap();
    let n = g.cells();
    assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 2);
    assert_eq!(v[r * g.cols + c], 0.7);
    assert_eq!(v[n + r * g.cols + c], -1.2);
}

fn brute_force_conservation(n_points: usize, seed: u64) {
    let g = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xyz: Vec<[f64; 3]> = (0..n_points)
        .map(|_| [rng.random_range(0.0..15.999), rng.random_range(-7.999..7.999), rng.random_range(-1.0..2.0)])
        .collect();
    let feats: Vec<f64> = (0..2 * n_points).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let fv = tape.leaf(DiffTensor::from_f64(&[2, n_points], &feats).unwrap());
    let out = tape.scatter_sum(fv, Arc::new(point_cells(&xyz, &g)), g.rows, g.cols).unwrap();
    let v = tape.data(out);
    let mut expected = vec![0.0; 2 * g.cells()];
    for (i, p) in xyz.iter().enumerate() {
        let (r, c) = g.cell_of(p[0], p[1]).expect("in bounds");
        for ch in 0..2 {
            expected[ch * g.cells() + r * g.cols + c] += feats[ch * n_points + i];
        }
    }
    for (a, b) in v.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-9);
    }
    for ch in 0..2 {
        let total: f64 = v[ch * g.cells()..(ch + 1) * g.cells()].iter().sum();
        let src: f64 = feats[ch * n_points..(ch + 1) * n_points].iter().sum();
        assert!((total - src).abs() <= 1e-5 * src.abs().max(1.0));
    }
}

#[test]
fn splat_conserves_mass_against_brute_force() {
    brute_force_conservation(10_000, 3);
    brute_force_conservation(1, 4);
    brute_force_conservation(2, 5);
}

#[test]
fn single_camera_transform_is_lift_then_splat() {
    let (fr, g) = (frustum(), grid());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = random_tensor(&[3, 4, 8], 1.0, &mut rng);
    let d = random_tensor(&[6, 4, 8], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let (fv, dv) = (tape.leaf(f), tape.leaf(d));
    let vt = view_transform(&mut tape, &[fv], &[dv], &[cam(0.0)], &fr, &g).unwrap();
    let lifted = lift(&mut tape, fv, dv, &cam(0.0), &fr).unwrap();
    let direct = splat(&mut tape, &lifted, &g).unwrap();
    assert_eq!(tape.data(vt), tape.data(direct));
}

#[test]
fn disjoint_cameras_give_disjoint_union() {
    let (fr, g) = (frustum(), grid());
    let (left, right) = (cam(1.2), cam(-1.2));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fs = [random_tensor(&[3, 4, 8], 1.0, &mut rng), random_tensor(&[3, 4, 8], 1.0, &mut rng)];
    let ds = [random_tensor(&[6, 4, 8], 1.0, &mut rng), random_tensor(&[6, 4, 8], 1.0, &mut rng)];
    let mut tape = Tape::<f64>::new();
    let fv: Vec<_> = fs.iter().map(|t| tape.leaf(t.clone())).collect();
    let dv: Vec<_> = ds.iter().map(|t| tape.leaf(t.clone())).collect();
    let both = view_transform(&mut tape, &fv, &dv, &[left.clone(), right.clone()], &fr, &g).unwrap();
    let a = view_transform(&mut tape, &fv[..1], &dv[..1], &[left], &fr, &g).unwrap();
    let b = view_transform(&mut tape, &fv[1..], &dv[1..], &[right], &fr, &g).unwrap();
    let (a, b, both) = (tape.data(a), tape.data(b), tape.data(both));
    let overlap = a.iter().zip(b).filter(|(x, y)| **x != 0.0 && **y != 0.0).count();
    assert_eq!(overlap, 0, "footprints must be disjoint for this oracle");
    assert!(a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0));
    for i in 0..both.len() {
        let expected = if a[i] != 0.0 { a[i] } else { b[i] };
        assert_eq!(both[i], expected);
    }
}

#[test]
fn camera_count_mismatch_is_rejected() {
    let (fr, g) = (frustum(), grid());
    let mut tape = Tape::<f64>::new();
    let f = tape.leaf(DiffTensor::zeros(&[3, 4, 8]));
    let d = tape.leaf(DiffTensor::zeros(&[6, 4, 8]));
    assert!(view_transform(&mut tape, &[f], &[d], &[cam(0.0), cam(0.5)], &fr, &g).is_err());
    assert!(view_transform(&mut tape, &[f, f], &[d], &[cam(0.0), cam(0.5)], &fr, &g).is_err());
}

#[test]
fn view_transform_gradients_on_toy_instance() {
    let fr = FrustumSpec::new(1.0, 10.0, 4, 4, 4).unwrap();
    let c = CameraModel::new(8.0, 8.0, 7.5, 7.5, camera_rotation(0.0, 0.25, 0.0), [0.0, 0.0, 1.5], 16, 16).unwrap();
    let g = BevGrid::new(0.0, 12.0, -6.0, 6.0, 1.0).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let f = random_tensor(&[2, 4, 4], 1.0, &mut rng);
        let d = random_tensor(&[4, 4, 4], 1.0, &mut rng);
        let r = check_gradients(
            "view_transform",
            &[f, d],
            |t, v| view_transform(t, &[v[0]], &[v[1]], std::slice::from_ref(&c), &fr, &g),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
        assert!(r.checked == 32 + 64);
    }
}

#[test]
fn grid_shift_translates_raster() {
    let fr = frustum();
    let g = grid();
    let (dr, dc) = (3i64, -2i64);
    let shifted = g.shifted(dr, dc);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = random_tensor(&[2, 4, 8], 1.0, &mut rng);
    let d = random_tensor(&[6, 4, 8], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let (fv, dv) = (tape.leaf(f), tape.leaf(d));
    let a = view_transform(&mut tape, &[fv], &[dv], &[cam(0.1)], &fr, &g).unwrap();
    let b = view_transform(&mut tape, &[fv], &[dv], &[cam(0.1)], &fr, &shifted).unwrap();
    let (a, b) = (tape.data(a), tape.data(b));
    let (rows, cols) = (g.rows as i64, g.cols as i64);
    let mut compared = 0;
    for ch in 0..2 {
        for r in 0..rows {
            for c in 0..cols {
                let (r2, c2) = (r - dr, c - dc);
                if (0..rows).contains(&r2) && (0..cols).contains(&c2) {
                    let va = a[(ch * rows * cols + r * cols + c) as usize];
                    let vb = b[(ch * rows * cols + r2 * cols + c2) as usize];
                    assert!((va - vb).abs() <= 1e-9 * va.abs().max(1.0), "cell ({r},{c})");
                    compared += (va != 0.0) as usize;
                }
            }
        }
    }
    assert!(compared > 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn view_transform_is_linear_in_features(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let (fr, g) = (frustum(), grid());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = random_tensor(&[2, 4, 8], 1.0, &mut rng);
        let f2 = random_tensor(&[2, 4, 8], 1.0, &mut rng);
        let d = random_tensor(&[6, 4, 8], 1.5, &mut rng);
        let mix: Vec<f64> = f1.data().iter().zip(f2.data()).map(|(a, b)| alpha * a + beta * b).collect();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(d);
        let cams = [cam(0.3)];
        let v1 = tape.leaf(f1);
        let v2 = tape.leaf(f2);
        let vm = tape.leaf(DiffTensor::from_f64(&[2, 4, 8], &mix).unwrap());
        let t1 = view_transform(&mut tape, &[v1], &[dv], &cams, &fr, &g).unwrap();
        let t2 = view_transform(&mut tape, &[v2], &[dv], &cams, &fr, &g).unwrap();
        let tm = view_transform(&mut tape, &[vm], &[dv], &cams, &fr, &g).unwrap();
        let scale = tape.data(tm).iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for ((a, b), m) in tape.data(t1).iter().zip(tape.data(t2)).zip(tape.data(tm)) {
            prop_assert!((alpha * a + beta * b - m).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn splat_conserves_in_bounds_mass(n in 1usize..2000, seed in 0u64..1000) {
        brute_force_conservation(n, seed);
    }
}
