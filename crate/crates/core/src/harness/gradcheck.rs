//! Named finite-difference checks covering every differentiable op family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{xfa_loss, xsa_splat_loss, LossWeights, XsaHead};
use crate::error::{Error, Result};
use crate::geometry::{camera_rotation, BevGrid, CameraModel, FrustumSpec};
use crate::model::{BackboneConfig, BackboneKind, Model, ModelConfig, VariantKind};
use crate::numcore::gradcheck::random_tensor;
use crate::numcore::params::normal;
use crate::numcore::{check_gradients, BnMode, DiffTensor, GradCheckOptions, GradCheckReport, ParamStore, Session, IGNORE_INDEX};
use crate::synthdata::{generate_scene, SceneSpec};
use crate::xff::{Fuser, FuserKind, FusionConfig, PoseVector};

pub const GRAD_CHECK_OPS: [&str; 14] = [
    "conv2d",
    "conv2d_transpose",
    "softmax",
    "bilinear_sample",
    "batchnorm2d",
    "cross_entropy",
    "deform_conv2d",
    "fuse_conv",
    "fuse_selfattn",
    "fuse_sdta",
    "fuse_posedcn",
    "xfa_loss",
    "xsa_splat_loss",
    "full_model",
];

/// Runs the named check on a seeded random instance.
pub fn grad_check(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(name.len() as u64));
    let opts = GradCheckOptions::default();
    match name {
        "conv2d" => {
            let x = random_tensor(&[2, 3, 6, 5], 1.0, &mut rng);
            let w = random_tensor(&[4, 3, 3, 3], 0.5, &mut rng);
            let b = random_tensor(&[4], 0.5, &mut rng);
            check_gradients(name, &[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &opts)
        }
        "conv2d_transpose" => {
            let x = random_tensor(&[3, 4, 4], 1.0, &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
            let b = random_tensor(&[2], 0.5, &mut rng);
            check_gradients(name, &[x, w, b], |t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 1), &opts)
        }
        "softmax" => {
            let x = random_tensor(&[3, 4, 5], 2.0, &mut rng);
            check_gradients(name, &[x], |t, v| t.softmax(v[0], 1), &opts)
        }
        "bilinear_sample" => {
            let f = random_tensor(&[2, 6, 7], 1.0, &mut rng);
            let coords: Vec<f64> = (0..10)
                .flat_map(|_| [rng.random_range(0.2..4.8), rng.random_range(0.2..5.8)])
                .collect();
            let c = DiffTensor::from_f64(&[10, 2], &coords)?.with_grad();
            check_gradients(name, &[f, c], |t, v| t.bilinear_sample(v[0], v[1]), &opts)
        }
        "batchnorm2d" => {
            let x = random_tensor(&[2, 3, 4, 4], 1.5, &mut rng);
            let g = random_tensor(&[3], 1.0, &mut rng);
            let b = random_tensor(&[3], 1.0, &mut rng);
            check_gradients(name, &[x, g, b], |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?.0), &opts)
        }
        "cross_entropy" => {
            let logits = random_tensor(&[2, 4, 3, 3], 1.5, &mut rng);
            let labels: Vec<u8> = (0..18)
                .map(|i| if i % 7 == 3 { IGNORE_INDEX } else { rng.random_range(0..4) })
                .collect();
            check_gradients(name, &[logits], |t, v| t.cross_entropy_batched(v[0], &labels), &opts)
        }
        "deform_conv2d" => {
            let x = random_tensor(&[1, 2, 5, 6], 1.0, &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
            let offs: Vec<f64> = (0..18 * 30).map(|_| rng.random_range(-0.9..0.9)).collect();
            let off = DiffTensor::from_f64(&[1, 18, 5, 6], &offs)?.with_grad();
            let masks: Vec<f64> = (0..9 * 30).map(|_| rng.random_range(0.1..1.0)).collect();
            let mask = DiffTensor::from_f64(&[1, 9, 5, 6], &masks)?.with_grad();
            check_gradients(name, &[x, w, off, mask], |t, v| t.deform_conv2d(v[0], v[1], None, v[2], Some(v[3])), &opts)
        }
        "fuse_conv" | "fuse_selfattn" | "fuse_sdta" | "fuse_posedcn" => {
            let kind: FuserKind = name["fuse_".len()..].parse()?;
            fuser_check(kind, &mut rng)
        }
        "xfa_loss" => {
            let a = random_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
            let b = random_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
            check_gradients(name, &[a, b], |t, v| xfa_loss(t, v[0], v[1], false), &opts)
        }
        "xsa_splat_loss" => {
            let cam = CameraModel::new(8.0, 8.0, 7.5, 7.5, camera_rotation(0.0, 0.3, 0.0), [0.0, 0.0, 1.5], 16, 16)?;
            let fr = FrustumSpec::new(1.0, 8.0, 3, 4, 4)?;
            let grid = BevGrid::new(0.0, 8.0, -4.0, 4.0, 1.0)?;
            let mut store = ParamStore::<f64>::new();
            let head = XsaHead::init("xsa", 2, 3, 2, &mut store, &mut rng)?;
            let pv = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
            let depth = random_tensor(&[3, 4, 4], 1.0, &mut rng);
            let gt: Vec<f64> = (0..2 * 64).map(|_| rng.random_bool(0.2) as u8 as f64).collect();
            check_gradients(
                name,
                &[pv, depth],
                |t, v| {
                    let mut s = Session::frozen(t, &store, true, 0);
                    xsa_splat_loss(&mut s, &head, v[0], &[v[1]], std::slice::from_ref(&cam), &fr, &grid, &gt)
                },
                &opts,
            )
        }
        "full_model" => full_model_check(seed),
        _ => Err(Error::UnknownOp(name.to_string())),
    }
}

fn fuser_check(kind: FuserKind, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = FusionConfig {
        kind,
        cam_channels: 3,
        lidar_channels: 2,
        embed_dim: 8,
        heads: 2,
        pose_hidden: 6,
        pose_grid: 3,
        mlp_ratio: 2,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let f = Fuser::init(cfg, "fuse", 8, 8, &mut store, rng)?;
    if kind == FuserKind::PoseDcn {
        let shape = store.get("fuse.offset.w").expect("pose fuser offsets").shape().to_vec();
        *store.get_mut("fuse.offset.w").expect("pose fuser offsets") = normal(&shape, 0.15, rng);
    }
    let r = camera_rotation(0.3, 0.2, 0.0);
    let mut v = [0.0; 12];
    for i in 0..3 {
        v[i * 3..i * 3 + 3].copy_from_slice(&r[i]);
    }
    v[9..].copy_from_slice(&[1.0, -0.5, 1.6]);
    let pose = PoseVector::new(v)?;
    let cam = random_tensor(&[1, 3, 8, 8], 1.0, rng);
    let lidar = random_tensor(&[1, 2, 8, 8], 1.0, rng);
    check_gradients(
        &format!("fuse_{kind}"),
        &[cam, lidar],
        |t, v| {
            let mut s = Session::frozen(t, &store, true, 7);
            Ok(f.forward(&mut s, v[0], v[1], &[pose])?.out)
        },
        &GradCheckOptions::default(),
    )
}

/// One-camera 16x32 scene on an 8x8 grid.
pub fn toy_scene_spec() -> SceneSpec {
    SceneSpec {
        n_cams: 1,
        image_h: 16,
        image_w: 32,
        focal: 16.0,
        grid: BevGrid::new(0.0, 8.0, -4.0, 4.0, 1.0).expect("valid toy grid"),
        lidar_beams: 6,
        lidar_azimuths: 12,
        ..SceneSpec::default()
    }
}

/// Few-channel model for [`toy_scene_spec`] scenes.
pub fn toy_model_config(variant: VariantKind, fuser: FuserKind) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            kind: BackboneKind::Tiny,
            widths: [2, 3, 4],
            depths: [1, 1, 1],
            out_channels: 4,
        },
        variant,
        fuser,
        depth_bins: 3,
        d_max: 10.0,
        bev_channels: 2,
        fused_channels: 4,
        decoder_hidden: 3,
        lidar_hidden: 3,
        pv_hidden: 3,
        xsa_channels: 2,
        heads: 2,
        droppath: 0.0,
        pose_hidden: 4,
        pose_grid: 2,
        ..ModelConfig::default()
    }
}

/// Total training loss of the aligned toy model with respect to the input
/// images and parameters of the LiDAR encoder, depth head and classifier.
fn full_model_check(seed: u64) -> Result<GradCheckReport> {
    let spec = toy_scene_spec();
    let sample = generate_scene(seed + 100, &spec)?;
    let batch = [&sample];
    let (m, store) = Model::init::<f64>(&toy_model_config(VariantKind::View, FuserKind::Conv), &spec, seed)?;
    let checked = ["lidar.mlp1.w", "dec.cls.w", "depth.w"];
    let mut inputs = vec![m.image_batch::<f64>(&batch)?.with_grad()];
    for n in checked {
        inputs.push(store.get(n).expect("toy parameter").clone().with_grad());
    }
    check_gradients(
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
}
