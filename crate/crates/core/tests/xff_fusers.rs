use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xalign_core::geometry::camera_rotation;
use xalign_core::numcore::gradcheck::random_tensor;
use xalign_core::numcore::params::normal;
use xalign_core::numcore::{check_gradients, DiffTensor, GradCheckOptions, ParamStore, Session, Tape};
use xalign_core::xff::{init_mhsa, mhsa, Fuser, FuserKind, FusionConfig, PoseVector};

const TOL: f64 = 1e-3;

fn toy_cfg(kind: FuserKind) -> FusionConfig {
    FusionConfig {
        kind,
        cam_channels: 3,
        lidar_channels: 2,
        embed_dim: 8,
        heads: 2,
        pose_hidden: 6,
        pose_grid: 3,
        mlp_ratio: 2,
        ..FusionConfig::default()
    }
}

fn pose() -> PoseVector {
    let r = camera_rotation(0.3, 0.2, 0.0);
    let mut v = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            v[i * 3 + j] = r[i][j];
        }
    }
    v[11] = 1.6;
    PoseVector::new(v).unwrap()
}

fn toy_fuser(kind: FuserKind, h: usize, w: usize, seed: u64) -> (Fuser, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let f = Fuser::init(toy_cfg(kind), "fuse", h, w, &mut store, &mut rng).unwrap();
    if kind == FuserKind::PoseDcn {
        // Non-zero offsets so the deformable path is actually exercised.
        let shape = store.get("fuse.offset.w").unwrap().shape().to_vec();
        *store.get_mut("fuse.offset.w").unwrap() = normal(&shape, 0.15, &mut rng).with_grad();
    }
    (f, store)
}

#[test]
fn deform_with_zero_offsets_is_conv() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, 3, 6, 7], 1.0, &mut rng).cast::<f32>();
        let w = random_tensor(&[4, 3, 3, 3], 0.5, &mut rng).cast::<f32>();
        let b = random_tensor(&[4], 0.5, &mut rng).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let off = tape.leaf(DiffTensor::zeros(&[2, 18, 6, 7]));
        let d = tape.deform_conv2d(xv, wv, Some(bv), off, None).unwrap();
        let c = tape.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
        for (a, b) in tape.data(d).iter().zip(tape.data(c)) {
            assert!((a - b).abs() <= 1e-5, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn unit_column_offset_shifts_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[1, 2, 7, 8], 1.0, &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
    let mut off = vec![0.0; 18 * 56];
    for t in 0..9 {
        off[(2 * t + 1) * 56..(2 * t + 2) * 56].fill(1.0);
    }
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w));
    let ov = tape.leaf(DiffTensor::from_f64(&[1, 18, 7, 8], &off).unwrap());
    let d = tape.deform_conv2d(xv, wv, None, ov, None).unwrap();
    let c = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let (d, c) = (tape.data(d), tape.data(c));
    for o in 0..3 {
        for y in 1..6 {
            for xx in 1..6 {
                let a = d[(o * 7 + y) * 8 + xx];
                let b = c[(o * 7 + y) * 8 + xx + 1];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn deform_gradients_including_offsets_and_mask() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let x = random_tensor(&[1, 2, 5, 6], 1.0, &mut rng);
        let w = random_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
        let offs: Vec<f64> = (0..18 * 30).map(|_| rng.random_range(-0.9..0.9)).collect();
        let off = DiffTensor::from_f64(&[1, 18, 5, 6], &offs).unwrap().with_grad();
        let masks: Vec<f64> = (0..9 * 30).map(|_| rng.random_range(0.1..1.0)).collect();
        let mask = DiffTensor::from_f64(&[1, 9, 5, 6], &masks).unwrap().with_grad();
        let b = random_tensor(&[3], 0.5, &mut rng);
        let r = check_gradients(
            "deform_conv2d",
            &[x.clone(), w.clone(), off.clone(), b],
            |t, v| t.deform_conv2d(v[0], v[1], Some(v[3]), v[2], None),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
        assert!(r.checked > 0 && r.skipped_nonsmooth * 10 < r.checked, "{r:?}");
        let r = check_gradients(
            "deform_conv2d_modulated",
            &[x, w, off, mask],
            |t, v| t.deform_conv2d(v[0], v[1], None, v[2], Some(v[3])),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn every_fuser_has_the_same_output_contract() {
    for kind in FuserKind::ALL {
        let (f, store) = toy_fuser(kind, 8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &store, true, 3);
        let cam = s.tape.leaf(random_tensor(&[2, 3, 8, 8], 1.0, &mut rng));
        let lidar = s.tape.leaf(random_tensor(&[2, 2, 8, 8], 1.0, &mut rng));
        let out = f.forward(&mut s, cam, lidar, &[pose(), pose()]).unwrap();
        assert_eq!(s.tape.shape(out.out), &[2, 8, 8, 8], "{kind}");
        let loss = s.tape.mean(out.out);
        let mut grads = s.tape.backward(loss).unwrap();
        for (name, g) in s.param_grads(&mut grads) {
            if let Some(g) = g {
                assert!(g.iter().all(|v| v.is_finite()), "{kind} {name}");
            }
        }
    }
}

#[test]
fn fusers_pass_end_to_end_gradient_checks() {
    for kind in FuserKind::ALL {
        for seed in 0..3 {
            let (f, store) = toy_fuser(kind, 8, 8, 40 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let cam = random_tensor(&[1, 3, 8, 8], 1.0, &mut rng);
            let lidar = random_tensor(&[1, 2, 8, 8], 1.0, &mut rng);
            let r = check_gradients(
                kind.as_str(),
                &[cam, lidar],
                |t, v| {
                    let mut s = Session::frozen(t, &store, true, 7);
                    Ok(f.forward(&mut s, v[0], v[1], &[pose()])?.out)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passes(TOL), "{r:?}");
            assert!(r.checked * 2 > 320, "{r:?}");
        }
    }
}

#[test]
fn eval_mode_is_deterministic() {
    for kind in FuserKind::ALL {
        let (f, store) = toy_fuser(kind, 8, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = random_tensor(&[2, 3, 8, 8], 1.0, &mut rng);
        let lidar = random_tensor(&[2, 2, 8, 8], 1.0, &mut rng);
        let run = |seed| {
            let mut tape = Tape::<f64>::new();
            let mut s = Session::new(&mut tape, &store, false, seed);
            let (c, l) = (s.tape.leaf(cam.clone()), s.tape.leaf(lidar.clone()));
            let out = f.forward(&mut s, c, l, &[pose(), pose()]).unwrap().out;
            s.tape.data(out).to_vec()
        };
        assert_eq!(run(1), run(2), "{kind}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for kind in [FuserKind::SelfAttn, FuserKind::Sdta] {
        let (f, store) = toy_fuser(kind, 8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &store, false, 0);
        let cam = s.tape.leaf(random_tensor(&[1, 3, 8, 8], 2.0, &mut rng));
        let lidar = s.tape.leaf(random_tensor(&[1, 2, 8, 8], 2.0, &mut rng));
        let out = f.forward(&mut s, cam, lidar, &[]).unwrap();
        assert_eq!(out.attention.len(), 2);
        for &a in &out.attention {
            let n = s.tape.shape(a)[1];
            for row in s.tape.data(a).chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let (f, store) = toy_fuser(FuserKind::SelfAttn, 3, 3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut tape = Tape::<f64>::new();
    let mut s = Session::new(&mut tape, &store, false, 0);
    let cam = s.tape.leaf(random_tensor(&[1, 3, 3, 3], 1.0, &mut rng));
    let lidar = s.tape.leaf(random_tensor(&[1, 2, 3, 3], 1.0, &mut rng));
    let out = f.forward(&mut s, cam, lidar, &[]).unwrap();
    assert_eq!(s.tape.shape(out.out), &[1, 8, 3, 3]);
    for &a in &out.attention {
        assert_eq!(s.tape.data(a), &[1.0]);
    }
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::<f64>::new();
    init_mhsa(&mut store, "a", 8, &mut rng).unwrap();
    let x = random_tensor(&[6, 8], 1.0, &mut rng);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let px: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect();
    let run = |t: DiffTensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &store, false, 0);
        let v = s.tape.leaf(t);
        let (o, _) = mhsa(&mut s, "a", v, 2).unwrap();
        s.tape.data(o).to_vec()
    };
    let base = run(x);
    let permuted = run(DiffTensor::from_f64(&[6, 8], &px).unwrap());
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((permuted[row * 8 + j] - base[src * 8 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn pose_dcn_emits_eighteen_offset_channels() {
    let (f, store) = toy_fuser(FuserKind::PoseDcn, 6, 7, 15);
    assert_eq!(store.get("fuse.offset.w").unwrap().shape()[0], 18);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut tape = Tape::<f64>::new();
    let mut s = Session::new(&mut tape, &store, false, 0);
    let cam = s.tape.leaf(random_tensor(&[1, 3, 6, 7], 1.0, &mut rng));
    let lidar = s.tape.leaf(random_tensor(&[1, 2, 6, 7], 1.0, &mut rng));
    let out = f.forward(&mut s, cam, lidar, &[pose()]).unwrap();
    assert_eq!(s.tape.shape(out.offsets.unwrap()), &[1, 18, 6, 7]);
    assert!(f.forward(&mut s, cam, lidar, &[]).is_err());
}

#[test]
fn full_width_conv_fuser_outputs_256_channels() {
    let cfg = FusionConfig::default();
    assert_eq!((cfg.embed_dim, cfg.heads, cfg.scales, cfg.offset_channels, cfg.dcn_k), (256, 8, 2, 18, 3));
    assert_eq!((cfg.patch_k, cfg.patch_stride, cfg.droppath), (3, 2, 0.1));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f32>::new();
    let f = Fuser::init(cfg, "fuse", 128, 128, &mut store, &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut s = Session::frozen(&mut tape, &store, false, 0);
    let cam = s.tape.constant(DiffTensor::full(&[1, 80, 128, 128], 0.5));
    let lidar = s.tape.constant(DiffTensor::full(&[1, 256, 128, 128], 0.25));
    let out = f.forward(&mut s, cam, lidar, &[]).unwrap();
    assert_eq!(s.tape.shape(out.out), &[1, 256, 128, 128]);
}

#[test]
fn config_invariants_are_enforced() {
    let mut c = FusionConfig::default();
    c.offset_channels = 16;
    assert!(c.validate().is_err());
    let mut c = FusionConfig::default();
    c.heads = 7;
    assert!(c.validate().is_err());
    let mut c = FusionConfig::default();
    c.droppath = 1.0;
    assert!(c.validate().is_err());
    assert!(PoseVector::new([1.0; 12]).is_err());
}
