use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xalign_core::align::LossWeights;
use xalign_core::geometry::BevGrid;
use xalign_core::harness::gradcheck::{toy_model_config, toy_scene_spec};
use xalign_core::model::{
    encode_lidar, init_lidar_encoder, load_checkpoint, predict, save_checkpoint, train, BackboneConfig, BackboneKind,
    Checkpoint, Model, ModelConfig, TrainConfig, TrainSchedule, VariantKind,
};
use xalign_core::numcore::{check_gradients, DiffTensor, GradCheckOptions, ParamStore, Session, Tape};
use xalign_core::synthdata::{generate_scene, SceneSample, SceneSpec};
use xalign_core::xff::FuserKind;

fn toy_spec() -> SceneSpec {
    toy_scene_spec()
}

fn toy_cfg(variant: VariantKind, fuser: FuserKind) -> ModelConfig {
    toy_model_config(variant, fuser)
}

fn scenes(n: usize, spec: &SceneSpec) -> Vec<SceneSample> {
    (0..n as u64).map(|i| generate_scene(100 + i, spec).unwrap()).collect()
}

fn n_params(store: &ParamStore<f32>) -> usize {
    store.iter().map(|(_, v)| v.len()).sum()
}

#[test]
fn desk_scale_features_are_one_eighth_resolution() {
    let spec = SceneSpec::default();
    let data = scenes(1, &spec);
    let (m, store) = Model::init::<f32>(&ModelConfig::default(), &spec, 0).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, true, 0);
    let out = m.forward(&mut s, &[&data[0]], false).unwrap();
    assert_eq!(s.tape.shape(out.features), &[2, 64, 8, 22]);
    assert_eq!(s.tape.shape(out.depth_logits[0]), &[32, 8, 22]);
    assert_eq!(s.tape.shape(out.logits), &[1, 4, 64, 64]);
}

#[test]
fn indivisible_images_are_rejected() {
    let spec = SceneSpec {
        image_w: 170,
        ..SceneSpec::default()
    };
    assert!(Model::init::<f32>(&ModelConfig::default(), &spec, 0).is_err());
}

#[test]
fn backbone_capacity_is_monotone() {
    let spec = SceneSpec::default();
    let counts: Vec<usize> = BackboneKind::ALL
        .iter()
        .map(|&k| {
            let cfg = ModelConfig {
                backbone: BackboneConfig::preset(k),
                ..ModelConfig::default()
            };
            n_params(&Model::init::<f32>(&cfg, &spec, 0).unwrap().1)
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn gradient_reaches_the_first_convolution() {
    let spec = SceneSpec::default();
    let data = scenes(2, &spec);
    let (m, store) = Model::init::<f32>(&ModelConfig::default(), &spec, 1).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, true, 0);
    let out = m.forward(&mut s, &[&data[0], &data[1]], true).unwrap();
    let (loss, _) = out.terms.combine(s.tape, &LossWeights::nuscenes()).unwrap();
    let mut g = s.tape.backward(loss).unwrap();
    let grads = s.param_grads(&mut g);
    let first = grads["img.s0.b0.conv.w"].as_ref().unwrap();
    assert!(first.iter().any(|&v| v != 0.0));
}

fn lidar_setup() -> (BevGrid, ParamStore<f64>) {
    let grid = BevGrid::new(0.0, 4.0, -2.0, 2.0, 0.5).unwrap();
    let mut store = ParamStore::new();
    init_lidar_encoder(&mut store, "l", 8, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for b in ["l.mlp1.b", "l.mlp2.b"] {
        let n = store.get(b).unwrap().len();
        *store.get_mut(b).unwrap() = DiffTensor::full(&[n], 0.1);
    }
    (grid, store)
}

fn encode(store: &ParamStore<f64>, points: &[[f32; 4]], grid: &BevGrid) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut s = Session::frozen(&mut tape, store, false, 0);
    let v = encode_lidar(&mut s, "l", points, grid).unwrap();
    assert_eq!(s.tape.shape(v), &[5, 8, 8]);
    s.tape.data(v).to_vec()
}

#[test]
fn empty_cloud_encodes_to_zeros() {
    let (grid, store) = lidar_setup();
    assert!(encode(&store, &[], &grid).iter().all(|&v| v == 0.0));
    // Points outside the grid are dropped as well.
    assert!(encode(&store, &[[9.0, 0.0, 0.1, 0.5]], &grid).iter().all(|&v| v == 0.0));
}

#[test]
fn single_point_touches_exactly_one_cell() {
    let (grid, store) = lidar_setup();
    let out = encode(&store, &[[1.2, 0.3, 0.2, 0.6]], &grid);
    let cells: Vec<usize> = (0..64).filter(|&c| (0..5).any(|k| out[k * 64 + c] != 0.0)).collect();
    assert_eq!(cells, vec![grid.flat_cell_of(1.2, 0.3).unwrap()]);
}

#[test]
fn lidar_encoding_is_permutation_invariant() {
    let (grid, store) = lidar_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pts: Vec<[f32; 4]> = (0..300)
        .map(|_| [rng.random_range(0.0..4.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0), rng.random()])
        .collect();
    let a = encode(&store, &pts, &grid);
    pts.shuffle(&mut rng);
    let b = encode(&store, &pts, &grid);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
}

#[test]
fn baseline_has_no_auxiliary_terms() {
    let spec = toy_spec();
    let data = scenes(2, &spec);
    let (m, store) = Model::init::<f32>(&toy_cfg(VariantKind::Baseline, FuserKind::Conv), &spec, 0).unwrap();
    assert!(m.pv.is_none() && m.xsa.is_none());
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, true, 0);
    let out = m.forward(&mut s, &[&data[0], &data[1]], true).unwrap();
    let (_, b) = out.terms.combine(s.tape, &LossWeights::nuscenes()).unwrap();
    assert_eq!((b.xfa, b.pv, b.sa_bev), (0.0, 0.0, 0.0));
    assert!(b.main > 0.0);
}

#[test]
fn view_adds_no_inference_parameters() {
    let spec = SceneSpec::default();
    let count = |v| {
        let cfg = ModelConfig {
            variant: v,
            ..ModelConfig::default()
        };
        let store = Model::init::<f32>(&cfg, &spec, 0).unwrap().1;
        (Model::inference_param_count(&store), n_params(&store))
    };
    let (base, base_total) = count(VariantKind::Baseline);
    let (view, view_total) = count(VariantKind::View);
    assert_eq!(base, view);
    assert_eq!(base, base_total);
    assert!(view_total > view);
}

#[test]
fn every_all_variant_parameter_gets_a_finite_gradient() {
    let spec = toy_spec();
    let data = scenes(2, &spec);
    for fuser in [FuserKind::SelfAttn, FuserKind::Sdta, FuserKind::PoseDcn] {
        let (m, store) = Model::init::<f32>(&toy_cfg(VariantKind::All, fuser), &spec, 2).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, true, 0);
        let out = m.forward(&mut s, &[&data[0], &data[1]], true).unwrap();
        let (loss, _) = out.terms.combine(s.tape, &LossWeights::nuscenes()).unwrap();
        let mut g = s.tape.backward(loss).unwrap();
        for (name, grad) in s.param_grads(&mut g) {
            let grad = grad.unwrap_or_else(|| panic!("{fuser}: {name} has no gradient"));
            assert!(grad.iter().all(|v| v.is_finite()), "{fuser}: {name}");
        }
    }
}

#[test]
fn full_model_forward_passes_gradcheck() {
    let spec = toy_spec();
    let data = scenes(1, &spec);
    let batch = [&data[0]];
    let checked = ["lidar.mlp1.w", "dec.cls.w", "depth.w"];
    for seed in 0..3 {
        let (m, store) = Model::init::<f64>(&toy_cfg(VariantKind::View, FuserKind::Conv), &spec, seed).unwrap();
        let images = m.image_batch::<f64>(&batch).unwrap().with_grad();
        let mut inputs = vec![images];
        inputs.extend(checked.iter().map(|n| store.get(n).unwrap().clone().with_grad()));
        let r = check_gradients(
            "full_model",
            &inputs,
            |tape, vars| {
                let mut s = Session::frozen(tape, &store, true, 0);
                for (name, &v) in checked.iter().zip(&vars[1..]) {
                    s.bind(name, v)?;
                }
                let out = m.forward_images(&mut s, vars[0], &batch, true)?;
                Ok(out.terms.combine(s.tape, &LossWeights::nuscenes())?.0)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-3), "seed {seed}: {r:?}");
        assert!(r.checked > 100, "{r:?}");
    }
}

fn train_cfg(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule {
            epochs,
            batch_size,
            seed,
            ..TrainSchedule::default()
        },
        ..TrainConfig::default()
    }
}

/// Total loss over `data` in training mode with a fixed stochastic stream.
fn dataset_loss(m: &Model, store: &ParamStore<f32>, data: &[SceneSample]) -> f64 {
    data.iter()
        .map(|x| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, store, true, 7);
            let out = m.forward(&mut s, &[x], true).unwrap();
            out.terms.combine(s.tape, &LossWeights::nuscenes()).unwrap().1.total
        })
        .sum()
}

#[test]
fn one_epoch_reduces_the_loss() {
    let spec = toy_spec();
    let data = scenes(8, &spec);
    for seed in 0..3 {
        let (m, store) = Model::init::<f32>(&toy_cfg(VariantKind::View, FuserKind::Conv), &spec, seed).unwrap();
        let before = dataset_loss(&m, &store, &data);
        let out = train(&m, store, &data, None, &train_cfg(1, 1, seed)).unwrap();
        let after = dataset_loss(&m, &out.store, &data);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn training_is_bit_identical_for_equal_seeds() {
    let spec = toy_spec();
    let data = scenes(4, &spec);
    let cfg = toy_cfg(VariantKind::All, FuserKind::Sdta);
    let run = |seed| {
        let (m, store) = Model::init::<f32>(&cfg, &spec, seed).unwrap();
        let out = train(&m, store, &data, Some(&data[..2]), &train_cfg(2, 2, seed)).unwrap();
        let (steps, epochs) = (out.steps_csv(), out.epochs_csv());
        (out.store, steps, epochs)
    };
    let (a, b) = (run(3), run(3));
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    for ((ka, va), (kb, vb)) in a.0.iter().zip(b.0.iter()) {
        assert_eq!(ka, kb);
        assert!(va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{ka}");
    }
    assert_ne!(run(4).1, a.1);
}

#[test]
fn checkpoint_round_trip() {
    let spec = toy_spec();
    let data = scenes(3, &spec);
    let cfg = toy_cfg(VariantKind::All, FuserKind::PoseDcn);
    let (m, store) = Model::init::<f32>(&cfg, &spec, 5).unwrap();
    let store = train(&m, store, &data, None, &train_cfg(1, 3, 5)).unwrap().store;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint {
        model: cfg.clone(),
        spec: spec.clone(),
        store,
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model, cfg);
    assert_eq!(back.spec, spec);
    assert_eq!(back.digest(), ckpt.digest());
    assert_eq!(
        predict(&back.build().unwrap(), &back.store, &data).unwrap(),
        predict(&m, &ckpt.store, &data).unwrap()
    );
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    // A flipped byte inside the config text breaks the digest.
    let mut bytes = first.clone();
    let at = bytes.windows(8).position(|w| w == b"variant=").unwrap() + 8;
    bytes[at] ^= 0x20;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn autotuned_share_moves_toward_target() {
    let spec = toy_spec();
    let data = scenes(8, &spec);
    let (m, store) = Model::init::<f32>(&toy_cfg(VariantKind::View, FuserKind::Conv), &spec, 6).unwrap();
    let mut tc = train_cfg(6, 2, 6);
    tc.autotune_share = Some(0.2);
    let out = train(&m, store, &data, None, &tc).unwrap();
    let first = out.steps[0].sa_share;
    let last = out.epochs.last().unwrap().mean_sa_share;
    assert!((last - 0.2).abs() < (first - 0.2).abs(), "{first} -> {last}");
    assert!((last - 0.2).abs() < 0.05, "{last}");
    assert_ne!(out.weights.sa_bev, 0.1);
}
