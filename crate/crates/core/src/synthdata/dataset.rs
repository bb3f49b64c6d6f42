//! On-disk datasets: `manifest.txt` plus one tensor record per sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{generate_scene_in, sample_seed, Condition, ObjectClass, SceneLayout, SceneObject, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraModel};
use crate::io::{hex, NamedTensor, TensorData, TensorRecord};
use crate::kv::{finish, parse_kv, take};
use crate::xff::PoseVector;

pub const SAMPLE_MAGIC: [u8; 8] = *b"XALNSMPL";
const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "xalign-dataset-1";

impl SceneSpec {
    pub fn from_kv(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut s = SceneSpec::default();
        macro_rules! field {
            ($($name:ident),*) => {
                $(if let Some(v) = take(map, stringify!($name))? { s.$name = v; })*
            };
        }
        field!(
            n_cams,
            image_h,
            image_w,
            focal,
            cam_height,
            cam_yaw_deg,
            cam_pitch_deg,
            jitter,
            min_objects,
            max_objects,
            lidar_beams,
            lidar_azimuths,
            lidar_height,
            lidar_range_noise,
            pv_stride,
            texture_noise
        );
        if let Some(g) = crate::kv::take_list::<f64>(map, "grid")? {
            let &[x0, x1, y0, y1, r] = g.as_slice() else {
                return Err(Error::Config("grid needs x_min,x_max,y_min,y_max,resolution".into()));
            };
            s.grid = BevGrid::new(x0, x1, y0, y1, r)?;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub condition: Condition,
    pub spec: SceneSpec,
    pub spec_digest: String,
    pub sample_seeds: Vec<u64>,
}

impl DatasetManifest {
    pub fn new(n: usize, seed: u64, spec: SceneSpec, condition: Condition) -> Self {
        Self {
            seed,
            condition,
            spec_digest: hex(&spec.digest()),
            spec,
            sample_seeds: (0..n).map(|i| sample_seed(seed, i)).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "format={FORMAT}\nseed={}\nn={}\ncondition={}\nspec_digest={}\n",
            self.seed,
            self.sample_seeds.len(),
            self.condition,
            self.spec_digest
        );
        for line in self.spec.to_kv().lines() {
            out.push_str(&format!("spec.{line}\n"));
        }
        for (i, s) in self.sample_seeds.iter().enumerate() {
            out.push_str(&format!("sample.{i}={s}\n"));
        }
        out
    }

    /// Digest of the full manifest text.
    pub fn digest(&self) -> String {
        hex(&crate::io::digest(&self.to_text()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        if take::<String>(&mut map, "format")?.as_deref() != Some(FORMAT) {
            return Err(Error::Config(format!("manifest is not {FORMAT}")));
        }
        let need = |k: &str| Error::Config(format!("manifest lacks `{k}`"));
        let seed = take(&mut map, "seed")?.ok_or_else(|| need("seed"))?;
        let n: usize = take(&mut map, "n")?.ok_or_else(|| need("n"))?;
        let condition = take(&mut map, "condition")?.ok_or_else(|| need("condition"))?;
        let spec_digest: String = take(&mut map, "spec_digest")?.ok_or_else(|| need("spec_digest"))?;
        let mut spec_map: BTreeMap<String, String> = BTreeMap::new();
        let keys: Vec<String> = map.keys().filter(|k| k.starts_with("spec.")).cloned().collect();
        for k in keys {
            let v = map.remove(&k).expect("key listed");
            spec_map.insert(k["spec.".len()..].to_string(), v);
        }
        let spec = SceneSpec::from_kv(&mut spec_map)?;
        finish(spec_map)?;
        let sample_seeds = (0..n)
            .map(|i| take(&mut map, &format!("sample.{i}"))?.ok_or_else(|| need(&format!("sample.{i}"))))
            .collect::<Result<Vec<u64>>>()?;
        finish(map)?;
        let found = hex(&spec.digest());
        if found != spec_digest {
            return Err(Error::DigestMismatch { expected: spec_digest, found });
        }
        Ok(Self {
            seed,
            condition,
            spec,
            spec_digest,
            sample_seeds,
        })
    }
}

fn camera_row(c: &CameraModel) -> Vec<f64> {
    let mut row = vec![c.fx, c.fy, c.cx, c.cy];
    row.extend(c.rotation.iter().flatten());
    row.extend(c.translation);
    row
}

fn camera_from_row(r: &[f64], h: usize, w: usize) -> Result<CameraModel> {
    let rot = [[r[4], r[5], r[6]], [r[7], r[8], r[9]], [r[10], r[11], r[12]]];
    CameraModel::new(r[0], r[1], r[2], r[3], rot, [r[13], r[14], r[15]], h, w)
}

pub(crate) fn sample_to_record(s: &SceneSample, digest: [u8; 32]) -> Result<TensorRecord> {
    let v = s.n_cams();
    let (k, rows, cols) = (ObjectClass::ALL.len(), s.bev_rows, s.bev_cols);
    let objects: Vec<f64> = s
        .layout
        .objects
        .iter()
        .flat_map(|o| {
            [o.class.index() as f64, o.center[0], o.center[1], o.length, o.width, o.height, o.yaw, o.color[0], o.color[1], o.color[2]]
        })
        .collect();
    Ok(TensorRecord {
        magic: SAMPLE_MAGIC,
        digest,
        tensors: vec![
            NamedTensor::new("seed", &[8], TensorData::U8(s.seed.to_le_bytes().to_vec()))?,
            NamedTensor::new("condition", &[1], TensorData::U8(vec![s.condition as u8]))?,
            NamedTensor::new("images", &[v, 3, s.image_h, s.image_w], TensorData::F32(s.images.clone()))?,
            NamedTensor::new("lidar", &[s.lidar.len(), 4], TensorData::F32(s.lidar.iter().flatten().copied().collect()))?,
            NamedTensor::new("bev_gt", &[k, rows, cols], TensorData::U8(s.bev_gt.clone()))?,
            NamedTensor::new("pv_labels", &[v, s.pv_h, s.pv_w], TensorData::U8(s.pv_labels.clone()))?,
            NamedTensor::new("cameras", &[v, 16], TensorData::F64(s.cameras.iter().flat_map(camera_row).collect()))?,
            NamedTensor::new("objects", &[s.layout.objects.len(), 10], TensorData::F64(objects))?,
        ],
    })
}

pub(crate) fn sample_from_record(rec: &TensorRecord, path: &Path) -> Result<SceneSample> {
    let bad = |d: &str| Error::Format {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let get = |name: &str| rec.get(name).ok_or_else(|| bad(&format!("missing tensor {name}")));
    let u8s = |name: &str| match &get(name)?.data {
        TensorData::U8(v) => Ok(v.clone()),
        _ => Err(bad(&format!("{name} must be u8"))),
    };
    let f32s = |name: &str| match &get(name)?.data {
        TensorData::F32(v) => Ok(v.clone()),
        _ => Err(bad(&format!("{name} must be f32"))),
    };
    let f64s = |name: &str| match &get(name)?.data {
        TensorData::F64(v) => Ok(v.clone()),
        _ => Err(bad(&format!("{name} must be f64"))),
    };
    let seed = u64::from_le_bytes(u8s("seed")?.try_into().map_err(|_| bad("seed must be 8 bytes"))?);
    let condition = *Condition::ALL
        .get(*u8s("condition")?.first().ok_or_else(|| bad("empty condition"))? as usize)
        .ok_or_else(|| bad("unknown condition"))?;
    let img_shape = get("images")?.shape.clone();
    let &[v, 3, h, w] = img_shape.as_slice() else {
        return Err(bad("images must be [V,3,H,W]"));
    };
    let pv_shape = get("pv_labels")?.shape.clone();
    let gt_shape = get("bev_gt")?.shape.clone();
    if gt_shape.len() != 3 {
        return Err(bad("bev_gt must be [K,rows,cols]"));
    }
    let cams = f64s("cameras")?;
    let cameras = cams.chunks_exact(16).map(|r| camera_from_row(r, h, w)).collect::<Result<Vec<_>>>()?;
    if cameras.len() != v || pv_shape.len() != 3 || pv_shape[0] != v {
        return Err(bad("camera/label counts do not match images"));
    }
    let objects = f64s("objects")?
        .chunks_exact(10)
        .map(|r| {
            Ok(SceneObject {
                class: ObjectClass::from_index(r[0] as usize).ok_or_else(|| bad("unknown object class"))?,
                center: [r[1], r[2]],
                length: r[3],
                width: r[4],
                height: r[5],
                yaw: r[6],
                color: [r[7], r[8], r[9]],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        seed,
        condition,
        pose: PoseVector::from_camera(&cameras[0]),
        cameras,
        images: f32s("images")?,
        image_h: h,
        image_w: w,
        lidar: f32s("lidar")?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        bev_gt: u8s("bev_gt")?,
        bev_rows: gt_shape[1],
        bev_cols: gt_shape[2],
        pv_labels: u8s("pv_labels")?,
        pv_h: pv_shape[1],
        pv_w: pv_shape[2],
        layout: SceneLayout { objects },
    })
}

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    fn sample_path(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("sample_{i:05}.bin"))
    }

    /// Writes `n` scenes; an existing identical dataset is left untouched.
    pub fn generate(dir: &Path, n: usize, seed: u64, spec: &SceneSpec, condition: Condition) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("dataset needs at least one sample".into()));
        }
        let manifest = DatasetManifest::new(n, seed, spec.clone(), condition);
        let text = manifest.to_text();
        let mpath = dir.join(MANIFEST);
        if fs::read_to_string(&mpath).ok().as_deref() == Some(text.as_str()) && (0..n).all(|i| Self::sample_path(dir, i).exists()) {
            return Ok(Self {
                dir: dir.to_path_buf(),
                manifest,
            });
        }
        fs::create_dir_all(dir)?;
        let digest = spec.digest();
        for (i, &s) in manifest.sample_seeds.iter().enumerate() {
            let sample = generate_scene_in(s, spec, condition)?;
            sample_to_record(&sample, digest)?.write(&Self::sample_path(dir, i))?;
        }
        fs::write(&mpath, text)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest::parse(&text)?,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    pub fn load(&self, i: usize) -> Result<SceneSample> {
        let path = Self::sample_path(&self.dir, i);
        let rec = TensorRecord::read(&path, &SAMPLE_MAGIC)?;
        let found = hex(&rec.digest);
        if found != self.manifest.spec_digest {
            return Err(Error::DigestMismatch {
                expected: self.manifest.spec_digest.clone(),
                found,
            });
        }
        sample_from_record(&rec, &path)
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
