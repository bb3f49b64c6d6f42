use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xalign_core::align::{pv_loss, xfa_loss, xsa_splat_loss, LossTerms, LossWeights, PerspectiveDecoder, XsaHead};
use xalign_core::geometry::{camera_rotation, view_transform, BevGrid, CameraModel, FrustumSpec};
use xalign_core::numcore::gradcheck::random_tensor;
use xalign_core::numcore::{check_gradients, DiffTensor, GradCheckOptions, ParamStore, Session, Tape, IGNORE_INDEX};

const TOL: f64 = 1e-3;

fn toy_geometry() -> (CameraModel, FrustumSpec, BevGrid) {
    let cam = CameraModel::new(8.0, 8.0, 7.5, 7.5, camera_rotation(0.0, 0.3, 0.0), [0.0, 0.0, 1.5], 16, 16).unwrap();
    let fr = FrustumSpec::new(1.0, 8.0, 3, 4, 4).unwrap();
    let grid = BevGrid::new(0.0, 8.0, -4.0, 4.0, 1.0).unwrap();
    (cam, fr, grid)
}

#[test]
fn xfa_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
        let b = random_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
        let r = check_gradients("xfa_loss", &[a, b], |t, v| xfa_loss(t, v[0], v[1], false), &GradCheckOptions::default()).unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn identical_features_contribute_the_published_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(a));
    let l = xfa_loss(&mut tape, av, bv, false).unwrap();
    let cos = tape.data(l)[0];
    assert!((cos - 1.0).abs() < 1e-12);
    assert!((LossWeights::nuscenes().xfa * cos + 0.002).abs() < 1e-12);
}

#[test]
fn xfa_step_increases_cosine() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let cam = random_tensor(&[1, 8, 4, 4], 1.0, &mut rng);
        let lidar = random_tensor(&[1, 8, 4, 4], 1.0, &mut rng);
        let cosine = |c: &DiffTensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let (a, b) = (tape.leaf(c.clone()), tape.constant(lidar.clone()));
            let l = xfa_loss(&mut tape, a, b, false).unwrap();
            tape.data(l)[0]
        };
        let before = cosine(&cam);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.leaf(cam.clone()), tape.constant(lidar.clone()));
        let l = xfa_loss(&mut tape, a, b, false).unwrap();
        let weighted = tape.scale(l, LossWeights::nuscenes().xfa);
        let g = tape.backward(weighted).unwrap();
        let lr = 50.0;
        let stepped: Vec<f64> = cam.data().iter().zip(g.get(a).unwrap()).map(|(x, d)| x - lr * d).collect();
        let after = cosine(&DiffTensor::from_f64(cam.shape(), &stepped).unwrap());
        assert!(after > before, "{before} -> {after}");
    }
}

#[test]
fn detached_lidar_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(random_tensor(&[2, 3, 3], 1.0, &mut rng));
    let b = tape.leaf(random_tensor(&[2, 3, 3], 1.0, &mut rng));
    let l = xfa_loss(&mut tape, a, b, true).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none());
}

#[test]
fn perspective_decoder_contract_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let dec = PerspectiveDecoder::init("pv", 3, 4, 5, &mut store, &mut rng).unwrap();
    let mut tape = Tape::<f64>::new();
    let mut s = Session::new(&mut tape, &store, true, 0);
    let x = s.tape.leaf(random_tensor(&[2, 3, 4, 6], 1.0, &mut rng));
    let y = dec.forward(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(y), &[2, 5, 4, 6]);
    let p = s.tape.softmax(y, 1).unwrap();
    let pd = s.tape.data(p);
    for b in 0..2 {
        for pos in 0..24 {
            let sum: f64 = (0..5).map(|k| pd[(b * 5 + k) * 24 + pos]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let x = random_tensor(&[2, 3, 3, 4], 1.0, &mut rng);
        let r = check_gradients(
            "perspective_decoder",
            &[x],
            |t, v| {
                let mut s = Session::frozen(t, &store, true, 0);
                dec.forward(&mut s, v[0])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn pv_loss_reference_values() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::<f64>::new();
    let mut s = Session::new(&mut tape, &store, false, 0);
    let labels = [0u8, 3, 1, 2, 2, 0];
    let mut sat = vec![-20.0; 4 * 6];
    for (pos, &l) in labels.iter().enumerate() {
        sat[l as usize * 6 + pos] = 20.0;
    }
    let sv = s.tape.leaf(DiffTensor::from_f64(&[1, 4, 2, 3], &sat).unwrap());
    let l = pv_loss(&mut s, sv, &labels).unwrap();
    assert!(s.tape.data(l)[0] < 1e-3);
    let uni = s.tape.leaf(DiffTensor::full(&[1, 4, 2, 3], 0.3));
    let l = pv_loss(&mut s, uni, &labels).unwrap();
    assert!((s.tape.data(l)[0] - 4f64.ln()).abs() < 1e-4);
    let l = pv_loss(&mut s, uni, &[IGNORE_INDEX; 6]).unwrap();
    assert_eq!(s.tape.data(l)[0], 0.0);
}

#[test]
fn xsa_gradients_on_two_class_toy() {
    let (cam, fr, grid) = toy_geometry();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let mut store = ParamStore::<f64>::new();
        let head = XsaHead::init("xsa", 2, 3, 2, &mut store, &mut rng).unwrap();
        let pv = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
        let depth = random_tensor(&[3, 4, 4], 1.0, &mut rng);
        let gt: Vec<f64> = (0..2 * 64).map(|i| ((i * 7 + seed as usize) % 5 == 0) as u8 as f64).collect();
        let r = check_gradients(
            "xsa_splat_loss",
            &[pv, depth],
            |t, v| {
                let mut s = Session::frozen(t, &store, true, 0);
                xsa_splat_loss(&mut s, &head, v[0], &[v[1]], std::slice::from_ref(&cam), &fr, &grid, &gt)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }
}

#[test]
fn xsa_rejects_mismatched_ground_truth() {
    let (cam, fr, grid) = toy_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let head = XsaHead::init("xsa", 2, 3, 2, &mut store, &mut rng).unwrap();
    let mut tape = Tape::<f64>::new();
    let mut s = Session::new(&mut tape, &store, true, 0);
    let pv = s.tape.leaf(random_tensor(&[1, 2, 4, 4], 1.0, &mut rng));
    let d = s.tape.leaf(random_tensor(&[3, 4, 4], 1.0, &mut rng));
    assert!(xsa_splat_loss(&mut s, &head, pv, &[d], &[cam], &fr, &grid, &[0.0; 100]).is_err());
}

#[test]
fn confident_correct_prediction_beats_uniform() {
    let (cam, fr, grid) = toy_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let head = XsaHead::init("xsa", 3, 3, 3, &mut store, &mut rng).unwrap();
    let eye: Vec<f64> = (0..9).map(|i| (i % 4 == 0) as u8 as f64).collect();
    *store.get_mut("xsa.in.w").unwrap() = DiffTensor::from_f64(&[3, 3, 1, 1], &eye).unwrap();
    *store.get_mut("xsa.out.w").unwrap() = DiffTensor::from_f64(&[3, 3, 1, 1], &eye).unwrap();
    *store.get_mut("xsa.out.b").unwrap() = DiffTensor::full(&[3], -2.0);
    let depth = random_tensor(&[3, 4, 4], 1.0, &mut rng);
    let class = 1;
    let mut sat = vec![-30.0; 3 * 16];
    sat[class * 16..(class + 1) * 16].fill(30.0);
    // GT: the class where splat mass lands, nothing else.
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(DiffTensor::full(&[1, 4, 4], 1.0));
    let d = tape.constant(depth.clone());
    let mass = view_transform(&mut tape, &[f], &[d], std::slice::from_ref(&cam), &fr, &grid).unwrap();
    let mut gt = vec![0.0; 3 * 64];
    for (i, &m) in tape.data(mass).iter().enumerate() {
        if m > 0.0 {
            gt[class * 64 + i] = 1.0;
        }
    }
    assert!(gt.iter().any(|&g| g == 1.0));
    let loss = |logits: Vec<f64>| {
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &store, false, 0);
        let pv = s.tape.leaf(DiffTensor::from_f64(&[1, 3, 4, 4], &logits).unwrap());
        let d = s.tape.constant(depth.clone());
        let l = xsa_splat_loss(&mut s, &head, pv, &[d], std::slice::from_ref(&cam), &fr, &grid, &gt).unwrap();
        s.tape.data(l)[0]
    };
    let confident = loss(sat);
    let uniform = loss(vec![0.0; 48]);
    assert!(confident < uniform, "{confident} vs {uniform}");
}

#[test]
fn shared_depth_feeds_both_paths() {
    let (cam, fr, grid) = toy_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let head = XsaHead::init("xsa", 2, 3, 2, &mut store, &mut rng).unwrap();
    let feats = random_tensor(&[3, 4, 4], 1.0, &mut rng);
    let pv = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
    let depth = random_tensor(&[3, 4, 4], 1.0, &mut rng);
    let run = |depth: DiffTensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &store, false, 0);
        let d = s.tape.leaf(depth);
        let f = s.tape.leaf(feats.clone());
        let p = s.tape.leaf(pv.clone());
        let feat_bev = view_transform(s.tape, &[f], &[d], std::slice::from_ref(&cam), &fr, &grid).unwrap();
        let xsa_bev = head.bev_logits(&mut s, p, &[d], std::slice::from_ref(&cam), &fr, &grid, 1).unwrap();
        (s.tape.data(feat_bev).to_vec(), s.tape.data(xsa_bev).to_vec())
    };
    let (fa, xa) = run(depth.clone());
    let mut bumped = depth.clone();
    bumped.data_mut()[5] += 0.5;
    let (fb, xb) = run(bumped);
    assert_ne!(fa, fb);
    assert_ne!(xa, xb);
}

#[test]
fn combined_loss_is_the_weighted_sum() {
    let mut tape = Tape::<f64>::new();
    let terms = LossTerms {
        main: Some(tape.leaf(DiffTensor::scalar(2.0).with_grad())),
        xfa: Some(tape.leaf(DiffTensor::scalar(1.0).with_grad())),
        pv: Some(tape.leaf(DiffTensor::scalar(3.0).with_grad())),
        sa_bev: Some(tape.leaf(DiffTensor::scalar(5.0).with_grad())),
    };
    let (total, b) = terms.combine(&mut tape, &LossWeights::nuscenes()).unwrap();
    assert!((tape.data(total)[0] - 2.798).abs() < 1e-12);
    assert_eq!(b.total, tape.data(total)[0]);
    let g = tape.backward(total).unwrap();
    assert_eq!(g.get(terms.xfa.unwrap()).unwrap(), &[-0.002]);
    assert_eq!(g.get(terms.sa_bev.unwrap()).unwrap(), &[0.1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn xfa_is_bounded_and_scale_invariant(seed in 0u64..10_000, alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[4, 3, 3], 1.0, &mut rng);
        let b = random_tensor(&[4, 3, 3], 1.0, &mut rng);
        let eval = |x: &DiffTensor<f64>, y: &DiffTensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
            let l = xfa_loss(&mut tape, xv, yv, false).unwrap();
            tape.data(l)[0]
        };
        let scale = |t: &DiffTensor<f64>, s: f64| DiffTensor::from_f64(t.shape(), &t.data().iter().map(|v| v * s).collect::<Vec<_>>()).unwrap();
        let base = eval(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((eval(&scale(&a, alpha), &scale(&b, beta)) - base).abs() < 1e-5);
    }

    #[test]
    fn total_is_linear_in_each_component(m in 0.0f64..10.0, x in -1.0f64..1.0, p in 0.0f64..10.0, s in 0.0f64..10.0, d in 0.0f64..5.0) {
        let w = LossWeights::nuscenes();
        let base = xalign_core::align::total_loss(m, x, p, s, &w).unwrap().total;
        let bumped = xalign_core::align::total_loss(m, x, p, s + d, &w).unwrap().total;
        prop_assert!((bumped - base - w.sa_bev * d).abs() < 1e-9);
        let bumped = xalign_core::align::total_loss(m + d, x, p, s, &w).unwrap().total;
        prop_assert!((bumped - base - w.main * d).abs() < 1e-9);
    }
}
