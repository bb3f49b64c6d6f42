//! Resumable experiment drivers. Every trained cell lives in its own
//! directory keyed by a config digest; re-running with the same config
//! reuses finished cells and rewrites no file whose content is unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use super::config::{ExperimentConfig, ExperimentKind};
use super::metrics::MetricsReport;
use super::qualitative::{binarize, encode_pgm, encode_ppm, error_mask, fixed_mask, render_labels, side_by_side};
use crate::error::{Error, Result};
use crate::io::{digest, hex};
use crate::kv::{parse_kv, take};
use crate::model::{evaluate, load_checkpoint, predict, save_checkpoint, train, BackboneKind, Checkpoint, Model, VariantKind};
use crate::synthdata::{add_gaussian_noise, sample_seed, Condition, Dataset, NoiseSpec, SceneSample};

/// Writes `content` unless the file already holds exactly these bytes.
pub fn write_if_changed(path: &Path, content: &[u8]) -> Result<bool> {
    if fs::read(path).ok().as_deref() == Some(content) {
        return Ok(false);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub backbone: BackboneKind,
    pub variant: VariantKind,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}-{}-s{}", self.backbone, self.variant, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub digest: String,
    /// `None` when training diverged.
    pub report: Option<MetricsReport>,
    pub detail: String,
}

impl CellResult {
    pub fn miou(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.miou)
    }

    fn to_kv(&self) -> String {
        let mut out = format!("digest={}\nstatus={}\n", self.digest, if self.report.is_some() { "ok" } else { "failed" });
        if let Some(r) = &self.report {
            let per: Vec<String> = r.per_class_iou.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("miou={}\nper_class_iou={}\nn_samples={}\n", r.miou, per.join(","), r.n_samples));
        }
        if !self.detail.is_empty() {
            out.push_str(&format!("detail={}\n", self.detail.replace('\n', " ")));
        }
        out
    }

    fn parse(key: CellKey, text: &str) -> Result<Self> {
        let mut m = parse_kv(text)?;
        let digest: String = take(&mut m, "digest")?.ok_or_else(|| Error::Config("cell result without digest".into()))?;
        let status: String = take(&mut m, "status")?.unwrap_or_default();
        let report = match status.as_str() {
            "ok" => {
                let miou = take(&mut m, "miou")?.ok_or_else(|| Error::Config("cell result without miou".into()))?;
                let per_class_iou = crate::kv::take_list(&mut m, "per_class_iou")?.unwrap_or_default();
                let n_samples = take(&mut m, "n_samples")?.unwrap_or(0);
                Some(MetricsReport {
                    per_class_iou,
                    miou,
                    n_samples,
                })
            }
            "failed" => None,
            s => return Err(Error::Config(format!("unknown cell status {s:?}"))),
        };
        let detail = take(&mut m, "detail")?.unwrap_or_default();
        Ok(Self {
            key,
            digest,
            report,
            detail,
        })
    }
}

/// Datasets, loaded samples and trained cells of one output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub train_set: Dataset,
    pub val_sets: BTreeMap<&'static str, Dataset>,
    train_cache: Option<Vec<SceneSample>>,
    val_cache: BTreeMap<&'static str, Vec<SceneSample>>,
}

impl Workspace {
    /// Generates (or reuses) the train split and one validation split per
    /// condition; validation splits share scene seeds across conditions.
    pub fn open(cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.data_dir.clone().unwrap_or_else(|| out.join("data"));
        let train_set = Dataset::generate(&data.join("train"), cfg.n_train, cfg.train_seed, &cfg.scene, Condition::Clear)?;
        let mut conditions = vec![Condition::Clear];
        conditions.extend(cfg.conditions.iter().copied().filter(|&c| c != Condition::Clear));
        let mut val_sets = BTreeMap::new();
        for c in conditions {
            let ds = Dataset::generate(&data.join(format!("val-{c}")), cfg.n_val, cfg.val_seed, &cfg.scene, c)?;
            val_sets.insert(c.as_str(), ds);
        }
        Ok(Self {
            cfg: cfg.clone(),
            out: out.to_path_buf(),
            train_set,
            val_sets,
            train_cache: None,
            val_cache: BTreeMap::new(),
        })
    }

    fn train_samples(&mut self) -> Result<&[SceneSample]> {
        if self.train_cache.is_none() {
            self.train_cache = Some(self.train_set.load_all()?);
        }
        Ok(self.train_cache.as_deref().expect("just loaded"))
    }

    pub fn val_samples(&mut self, condition: Condition) -> Result<&[SceneSample]> {
        let key = condition.as_str();
        if !self.val_cache.contains_key(key) {
            let ds = self
                .val_sets
                .get(key)
                .ok_or_else(|| Error::Config(format!("no validation split for {condition}")))?;
            self.val_cache.insert(key, ds.load_all()?);
        }
        Ok(&self.val_cache[key])
    }

    pub fn cell_dir(&self, key: CellKey) -> PathBuf {
        self.out.join("cells").join(key.dir_name())
    }

    fn cell_config_text(&self, key: CellKey) -> Result<String> {
        let model = self.cfg.model_config(key.backbone, key.variant);
        let tc = self.cfg.train_config(key.seed)?;
        Ok(format!(
            "{}train.{}\ntrain_data={}\nval_data={}\n",
            Checkpoint::config_text(&model, &self.cfg.scene),
            tc.to_kv().trim_end().replace('\n', "\ntrain."),
            self.train_set.manifest.digest(),
            self.val_sets[Condition::Clear.as_str()].manifest.digest(),
        ))
    }

    fn existing(&self, key: CellKey) -> Result<(String, String, Option<CellResult>)> {
        let config_text = self.cell_config_text(key)?;
        let cell_digest = hex(&digest(&config_text));
        let Ok(text) = fs::read_to_string(self.cell_dir(key).join("result.txt")) else {
            return Ok((config_text, cell_digest, None));
        };
        let r = CellResult::parse(key, &text)?;
        if r.digest != cell_digest {
            return Err(Error::DigestMismatch {
                expected: cell_digest,
                found: r.digest,
            });
        }
        Ok((config_text, cell_digest, Some(r)))
    }

    /// Trains the cell unless a finished result with the same digest exists.
    pub fn train_cell(&mut self, key: CellKey) -> Result<CellResult> {
        Ok(self.train_cells(&[key])?.remove(0))
    }

    /// Trains every unfinished cell, up to `cfg.jobs` at a time, and returns
    /// results in the order of `keys`. Each cell is deterministic on its own,
    /// so the thread count does not affect any output.
    pub fn train_cells(&mut self, keys: &[CellKey]) -> Result<Vec<CellResult>> {
        let mut results = Vec::with_capacity(keys.len());
        let mut todo = Vec::new();
        for (i, &key) in keys.iter().enumerate() {
            let (text, cell_digest, r) = self.existing(key)?;
            if r.is_none() {
                todo.push((i, key, text, cell_digest));
            }
            results.push(r);
        }
        if !todo.is_empty() {
            let val = self.val_samples(Condition::Clear)?.to_vec();
            self.train_samples()?;
            let data = self.train_cache.as_deref().expect("just loaded");
            let jobs = self.cfg.effective_jobs().min(todo.len());
            let next = AtomicUsize::new(0);
            let ws = &*self;
            let done: Vec<Result<(usize, CellResult)>> = thread::scope(|scope| {
                let workers: Vec<_> = (0..jobs)
                    .map(|_| {
                        scope.spawn(|| {
                            let mut out = Vec::new();
                            loop {
                                let j = next.fetch_add(1, Ordering::Relaxed);
                                let Some((i, key, text, cell_digest)) = todo.get(j) else { break };
                                out.push(ws.train_fresh(*key, text, cell_digest, data, &val).map(|r| (*i, r)));
                            }
                            out
                        })
                    })
                    .collect();
                workers.into_iter().flat_map(|w| w.join().expect("training thread panicked")).collect()
            });
            for d in done {
                let (i, r) = d?;
                results[i] = Some(r);
            }
        }
        Ok(results.into_iter().map(|r| r.expect("every cell resolved")).collect())
    }

    fn train_fresh(&self, key: CellKey, config_text: &str, cell_digest: &str, data: &[SceneSample], val: &[SceneSample]) -> Result<CellResult> {
        let dir = self.cell_dir(key);
        fs::create_dir_all(&dir)?;
        write_if_changed(&dir.join("config.txt"), config_text.as_bytes())?;
        let model_cfg = self.cfg.model_config(key.backbone, key.variant);
        let tc = self.cfg.train_config(key.seed)?;
        let (model, store) = Model::init::<f32>(&model_cfg, &self.cfg.scene, key.seed)?;
        let result = match train(&model, store, data, Some(val), &tc) {
            Ok(out) => {
                write_if_changed(&dir.join("steps.csv"), out.steps_csv().as_bytes())?;
                write_if_changed(&dir.join("epochs.csv"), out.epochs_csv().as_bytes())?;
                let report = evaluate(&model, &out.store, val, self.cfg.threshold)?;
                let ckpt = Checkpoint {
                    model: model_cfg,
                    spec: self.cfg.scene.clone(),
                    store: out.store,
                };
                save_checkpoint(&dir.join("model.ckpt"), &ckpt)?;
                CellResult {
                    key,
                    digest: cell_digest.to_string(),
                    report: Some(report),
                    detail: String::new(),
                }
            }
            Err(e @ Error::Diverged { .. }) => CellResult {
                key,
                digest: cell_digest.to_string(),
                report: None,
                detail: e.to_string(),
            },
            Err(e) => return Err(e),
        };
        write_if_changed(&dir.join("result.txt"), result.to_kv().as_bytes())?;
        Ok(result)
    }

    /// Loads a finished cell's checkpoint, checking that it was built from
    /// this workspace's configuration.
    pub fn load_cell(&mut self, key: CellKey) -> Result<Option<(Model, Checkpoint)>> {
        let r = self.train_cell(key)?;
        if r.report.is_none() {
            return Ok(None);
        }
        let ckpt = load_checkpoint(&self.cell_dir(key).join("model.ckpt"))?;
        let expected = Checkpoint::config_digest(&self.cfg.model_config(key.backbone, key.variant), &self.cfg.scene);
        if ckpt.digest() != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: ckpt.digest(),
            });
        }
        Ok(Some((ckpt.build()?, ckpt)))
    }

    fn keys(&self, backbones: &[BackboneKind]) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for &backbone in backbones {
            for &variant in &self.cfg.variants {
                for &seed in &self.cfg.seeds {
                    keys.push(CellKey { backbone, variant, seed });
                }
            }
        }
        keys
    }
}

/// Validation samples with pixel noise of `sigma`; the noise stream of
/// sample `i` depends only on `(noise_seed, i)`, so every model sees the
/// same perturbation.
pub fn noisy_copy(samples: &[SceneSample], sigma: f64, noise_seed: u64) -> Result<Vec<SceneSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            s.images = add_gaussian_noise(&s.images, &NoiseSpec::new(sigma, sample_seed(noise_seed, i))?)?;
            Ok(s)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn write_report(ws: &Workspace, name: &str, csv: &str, md: &str) -> Result<()> {
    let dir = ws.out.join(ws.cfg.experiment.as_str());
    write_if_changed(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    write_if_changed(&dir.join(format!("{name}.md")), md.as_bytes())?;
    write_if_changed(&dir.join("config.txt"), ws.cfg.to_kv().as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneRow {
    pub backbone: BackboneKind,
    pub variant: VariantKind,
    pub seed: u64,
    pub miou: Option<f64>,
}

/// Trains every (backbone, variant, seed) cell and tabulates validation mIoU.
pub fn run_backbone_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BackboneRow>> {
    let mut ws = Workspace::open(cfg, out)?;
    let digest = cfg.digest();
    let mut rows = Vec::new();
    let keys = ws.keys(&cfg.backbones);
    for (key, r) in keys.iter().copied().zip(ws.train_cells(&keys)?) {
        rows.push(BackboneRow {
            backbone: key.backbone,
            variant: key.variant,
            seed: key.seed,
            miou: r.miou(),
        });
    }
    let mut csv = String::from("backbone,variant,seed,status,miou,config_digest\n");
    for r in &rows {
        let status = if r.miou.is_some() { "ok" } else { "failed" };
        csv.push_str(&format!("{},{},{},{status},{},{digest}\n", r.backbone, r.variant, r.seed, fmt_opt(r.miou)));
    }
    let mut md = format!("# Backbone sweep\n\nconfig digest `{digest}`\n\n| backbone | variant | mIoU (mean ± std) | runs |\n|---|---|---|---|\n");
    for &b in &cfg.backbones {
        for &v in &cfg.variants {
            let vals: Vec<f64> = rows.iter().filter(|r| r.backbone == b && r.variant == v).filter_map(|r| r.miou).collect();
            let (m, s) = mean_std(&vals);
            md.push_str(&format!("| {b} | {v} | {:.2} ± {:.2} | {} |\n", 100.0 * m, 100.0 * s, vals.len()));
        }
    }
    write_report(&ws, "backbones", &csv, &md)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub variant: VariantKind,
    pub seed: u64,
    pub sigma: f64,
    pub miou: f64,
}

/// Evaluates the cells of the first backbone under pixel noise of each sigma.
pub fn run_noise_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<NoiseRow>> {
    let mut ws = Workspace::open(cfg, out)?;
    let digest = cfg.digest();
    let clean = ws.val_samples(Condition::Clear)?.to_vec();
    let noisy: Vec<(f64, Vec<SceneSample>)> = cfg
        .sigmas
        .iter()
        .map(|&s| Ok((s, noisy_copy(&clean, s, cfg.noise_seed)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let keys = ws.keys(&cfg.backbones[..1]);
    ws.train_cells(&keys)?;
    for key in keys {
        let Some((model, ckpt)) = ws.load_cell(key)? else { continue };
        for (sigma, data) in &noisy {
            rows.push(NoiseRow {
                variant: key.variant,
                seed: key.seed,
                sigma: *sigma,
                miou: evaluate(&model, &ckpt.store, data, cfg.threshold)?.miou,
            });
        }
    }
    let mut csv = String::from("variant,seed,sigma,miou,config_digest\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.6},{digest}\n", r.variant, r.seed, r.sigma, r.miou));
    }
    let mut md = format!("# Noise sweep ({})\n\nconfig digest `{digest}`\n\n| variant |", cfg.backbones[0]);
    for s in &cfg.sigmas {
        md.push_str(&format!(" σ={s} |"));
    }
    md.push_str(" drop at max σ |\n|---|");
    md.push_str(&"---|".repeat(cfg.sigmas.len() + 1));
    md.push('\n');
    for &v in &cfg.variants {
        let means: Vec<f64> = cfg.sigmas.iter().map(|&s| mean_noise(&rows, v, s)).collect();
        md.push_str(&format!("| {v} |"));
        for m in &means {
            md.push_str(&format!(" {:.2} |", 100.0 * m));
        }
        let drop = means.first().zip(means.last()).map_or(0.0, |(a, b)| a - b);
        md.push_str(&format!(" {:.2} |\n", 100.0 * drop));
    }
    write_report(&ws, "noise", &csv, &md)?;
    Ok(rows)
}

/// Mean mIoU over seeds of `variant` at `sigma`.
pub fn mean_noise(rows: &[NoiseRow], variant: VariantKind, sigma: f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.variant == variant && r.sigma == sigma).map(|r| r.miou).collect();
    mean_std(&vals).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRow {
    pub condition: Condition,
    pub variant: VariantKind,
    pub seed: u64,
    pub miou: f64,
}

/// Evaluates the cells of the first backbone on each condition split.
pub fn run_condition_splits(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SplitRow>> {
    let mut ws = Workspace::open(cfg, out)?;
    let digest = cfg.digest();
    let mut rows = Vec::new();
    let keys = ws.keys(&cfg.backbones[..1]);
    ws.train_cells(&keys)?;
    for key in keys {
        let Some((model, ckpt)) = ws.load_cell(key)? else { continue };
        for &condition in &cfg.conditions {
            let data = ws.val_samples(condition)?;
            rows.push(SplitRow {
                condition,
                variant: key.variant,
                seed: key.seed,
                miou: evaluate(&model, &ckpt.store, data, cfg.threshold)?.miou,
            });
        }
    }
    let mut csv = String::from("condition,variant,seed,miou,config_digest\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.6},{digest}\n", r.condition, r.variant, r.seed, r.miou));
    }
    let mut md = format!("# Condition splits ({})\n\nconfig digest `{digest}`\n\n| condition |", cfg.backbones[0]);
    for v in &cfg.variants {
        md.push_str(&format!(" {v} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(cfg.variants.len()));
    md.push('\n');
    for &c in &cfg.conditions {
        md.push_str(&format!("| {c} |"));
        for &v in &cfg.variants {
            md.push_str(&format!(" {:.2} |", 100.0 * mean_split(&rows, c, v)));
        }
        md.push('\n');
    }
    write_report(&ws, "splits", &csv, &md)?;
    Ok(rows)
}

pub fn mean_split(rows: &[SplitRow], condition: Condition, variant: VariantKind) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.condition == condition && r.variant == variant)
        .map(|r| r.miou)
        .collect();
    mean_std(&vals).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualitativeRow {
    pub scene: usize,
    pub model: String,
    pub error_cells: usize,
    /// Cells the first model gets wrong and this one gets right.
    pub fixed_cells: usize,
}

/// Writes GT and per-model rasters for the first `n` samples, a side-by-side
/// composite, and masks of cells the first model errs on but later ones fix.
pub fn dump_qualitative(models: &[(String, Model, Checkpoint)], samples: &[SceneSample], n: usize, threshold: f64, out: &Path) -> Result<Vec<QualitativeRow>> {
    let samples = &samples[..n.min(samples.len())];
    let mut preds = Vec::with_capacity(models.len());
    for (_, m, ckpt) in models {
        if samples.iter().any(|s| (s.bev_rows, s.bev_cols) != (m.grid.rows, m.grid.cols)) {
            return Err(Error::Invalid("model grid differs from the samples".into()));
        }
        preds.push(predict(m, &ckpt.store, samples)?);
    }
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (k, r, c) = (s.bev_gt.len() / (s.bev_rows * s.bev_cols), s.bev_rows, s.bev_cols);
        let dir = out.join(format!("scene_{i:03}"));
        let gt_rgb = render_labels(&s.bev_gt, k, r, c)?;
        write_if_changed(&dir.join("gt.ppm"), &encode_ppm(c, r, &gt_rgb))?;
        let mut panels = vec![gt_rgb];
        let mut first_err: Option<Vec<bool>> = None;
        for ((name, _, _), p) in models.iter().zip(&preds) {
            let bin = binarize(&p[i], threshold);
            let rgb = render_labels(&bin, k, r, c)?;
            write_if_changed(&dir.join(format!("{name}.ppm")), &encode_ppm(c, r, &rgb))?;
            panels.push(rgb);
            let err = error_mask(&bin, &s.bev_gt, k)?;
            write_if_changed(&dir.join(format!("{name}_error.pgm")), &encode_pgm(c, r, &err))?;
            let fixed = match &first_err {
                None => 0,
                Some(reference) => {
                    let f = fixed_mask(reference, &err);
                    write_if_changed(&dir.join(format!("{name}_fixed.pgm")), &encode_pgm(c, r, &f))?;
                    f.iter().filter(|&&x| x).count()
                }
            };
            rows.push(QualitativeRow {
                scene: i,
                model: name.clone(),
                error_cells: err.iter().filter(|&&x| x).count(),
                fixed_cells: fixed,
            });
            first_err.get_or_insert(err);
        }
        let (w, composite) = side_by_side(&panels, c, r);
        write_if_changed(&dir.join("composite.ppm"), &encode_ppm(w, r, &composite))?;
    }
    let mut csv = String::from("scene,model,error_cells,fixed_cells\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.scene, r.model, r.error_cells, r.fixed_cells));
    }
    write_if_changed(&out.join("qualitative.csv"), csv.as_bytes())?;
    Ok(rows)
}

/// Qualitative dump for the first backbone and seed of every variant.
pub fn run_qualitative(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<QualitativeRow>> {
    let mut ws = Workspace::open(cfg, out)?;
    let keys: Vec<CellKey> = cfg
        .variants
        .iter()
        .map(|&variant| CellKey {
            backbone: cfg.backbones[0],
            variant,
            seed: cfg.seeds[0],
        })
        .collect();
    ws.train_cells(&keys)?;
    let mut models = Vec::new();
    for key in keys {
        let variant = key.variant;
        if let Some((m, ckpt)) = ws.load_cell(key)? {
            models.push((variant.to_string(), m, ckpt));
        }
    }
    let samples = ws.val_samples(Condition::Clear)?.to_vec();
    let dir = out.join(ExperimentKind::Qualitative.as_str());
    write_if_changed(&dir.join("config.txt"), cfg.to_kv().as_bytes())?;
    dump_qualitative(&models, &samples, cfg.qualitative_scenes, cfg.threshold, &dir)
}
