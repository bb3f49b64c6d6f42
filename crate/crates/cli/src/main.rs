use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xalign_core::align::LossWeights;
use xalign_core::harness::{
    dump_qualitative, grad_check, noisy_copy, run_backbone_sweep, run_condition_splits, run_noise_sweep, run_qualitative,
    write_if_changed, ExperimentConfig, ExperimentKind, GRAD_CHECK_OPS,
};
use xalign_core::kv::{finish, parse_kv};
use xalign_core::model::{
    evaluate, load_checkpoint, save_checkpoint, train, BackboneKind, Checkpoint, Model, ModelConfig,
    OptimizerKind, TrainConfig, TrainSchedule, VariantKind,
};
use xalign_core::synthdata::{Condition, Dataset, SceneSpec};
use xalign_core::xff::FuserKind;

#[derive(Parser)]
#[command(name = "xalign", version, about = "Camera-LiDAR BEV segmentation with cross-modal alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "clear")]
        condition: Condition,
        /// key=value scene overrides.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Train one model on a generated dataset.
    Train {
        #[arg(long, default_value = "view")]
        variant: VariantKind,
        #[arg(long, default_value = "conv")]
        fuser: FuserKind,
        #[arg(long, default_value = "tiny")]
        backbone: BackboneKind,
        #[arg(long, default_value = "nuscenes")]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        /// Validation set logged once per epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value = "adam")]
        optimizer: OptimizerKind,
        /// key=value model overrides; keys set here win over the flags above.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally under pixel noise.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 3000)]
        noise_seed: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Appends one CSV row (header written on creation).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an experiment protocol over a grid of cells.
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `jobs` from the config.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render ground truth and predictions of one or more checkpoints.
    Qualitative {
        #[arg(long = "ckpt", num_args = 1.., required_unless_present = "config")]
        ckpts: Vec<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Use the cells of an experiment config instead of explicit checkpoints.
        #[arg(long, conflicts_with_all = ["ckpts", "data"])]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over the registered ops.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Backbones,
    Noise,
    Splits,
}

fn read_kv_file(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_kv(&text)?)
}

fn gen_data(n: usize, seed: u64, out: &Path, condition: Condition, scene: Option<&Path>) -> Result<()> {
    let spec = match scene {
        Some(p) => {
            let mut map = read_kv_file(p)?;
            let spec = SceneSpec::from_kv(&mut map)?;
            finish(map)?;
            spec
        }
        None => SceneSpec::default(),
    };
    let ds = Dataset::generate(out, n, seed, &spec, condition)?;
    println!("{} scenes ({condition}) in {}, manifest {}", ds.len(), out.display(), ds.manifest.digest());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    variant: VariantKind,
    fuser: FuserKind,
    backbone: BackboneKind,
    preset: &str,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer: OptimizerKind,
    model_file: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::open(data)?;
    let spec = ds.spec().clone();
    let mut map = match model_file {
        Some(p) => read_kv_file(p)?,
        None => Default::default(),
    };
    map.entry("variant".into()).or_insert(variant.to_string());
    map.entry("fuser".into()).or_insert(fuser.to_string());
    map.entry("backbone".into()).or_insert(backbone.to_string());
    let model_cfg = ModelConfig::from_kv(&mut map)?;
    finish(map)?;
    let tc = TrainConfig {
        schedule: TrainSchedule {
            epochs,
            base_lr: lr,
            batch_size,
            seed,
            ..TrainSchedule::default()
        },
        weights: LossWeights::preset(preset)?,
        optimizer,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let val_samples = match val {
        Some(p) => {
            let v = Dataset::open(p)?;
            ensure!(v.manifest.spec_digest == ds.manifest.spec_digest, "validation scenes use a different scene spec");
            Some(v.load_all()?)
        }
        None => None,
    };
    let samples = ds.load_all()?;
    let (model, store) = Model::init::<f32>(&model_cfg, &spec, seed)?;
    let outcome = train(&model, store, &samples, val_samples.as_deref(), &tc)?;
    fs::create_dir_all(out)?;
    let config = format!(
        "{}{}train_data={}\n",
        Checkpoint::config_text(&model_cfg, &spec),
        tc.to_kv().lines().map(|l| format!("train.{l}\n")).collect::<String>(),
        ds.manifest.digest()
    );
    write_if_changed(&out.join("config.txt"), config.as_bytes())?;
    write_if_changed(&out.join("steps.csv"), outcome.steps_csv().as_bytes())?;
    write_if_changed(&out.join("epochs.csv"), outcome.epochs_csv().as_bytes())?;
    let ckpt = Checkpoint {
        model: model_cfg,
        spec,
        store: outcome.store,
    };
    save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    if let Some(last) = outcome.epochs.last() {
        println!("epoch {} mean loss {:.6} val miou {}", last.epoch, last.mean_total, fmt_opt(last.val_miou));
    }
    println!("checkpoint {} (config {})", out.join("model.ckpt").display(), ckpt.digest());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn open_matching(ckpt: &Checkpoint, data: &Path) -> Result<Dataset> {
    let ds = Dataset::open(data)?;
    let want = xalign_core::io::hex(&ckpt.spec.digest());
    ensure!(
        ds.manifest.spec_digest == want,
        "dataset {} was generated with scene spec {}, checkpoint expects {want}",
        data.display(),
        ds.manifest.spec_digest
    );
    Ok(ds)
}

fn eval_cmd(ckpt_path: &Path, data: &Path, sigma: f64, noise_seed: u64, threshold: f64, report: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.build()?;
    let ds = open_matching(&ckpt, data)?;
    let samples = noisy_copy(&ds.load_all()?, sigma, noise_seed)?;
    let r = evaluate(&model, &ckpt.store, &samples, threshold)?;
    let per: Vec<String> = r.per_class_iou.iter().map(|v| format!("{v:.6}")).collect();
    println!("miou {:.4} per-class [{}] on {} scenes, sigma {sigma}", r.miou, per.join(", "), r.n_samples);
    if let Some(path) = report {
        let mut text = fs::read_to_string(path).unwrap_or_default();
        if text.is_empty() {
            let cols: Vec<String> = (0..r.per_class_iou.len()).map(|k| format!("iou_{k}")).collect();
            text.push_str(&format!("checkpoint,config_digest,data_digest,sigma,noise_seed,threshold,miou,{}\n", cols.join(",")));
        }
        text.push_str(&format!(
            "{},{},{},{sigma},{noise_seed},{threshold},{:.6},{}\n",
            ckpt_path.display(),
            ckpt.digest(),
            ds.manifest.digest(),
            r.miou,
            per.join(",")
        ));
        write_if_changed(path, text.as_bytes())?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>, kind: ExperimentKind, jobs: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?, kind)?,
        None => ExperimentConfig::new(kind),
    };
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn sweep_cmd(kind: SweepKind, config: Option<&Path>, out: &Path, jobs: Option<usize>) -> Result<()> {
    let experiment = match kind {
        SweepKind::Backbones => ExperimentKind::BackboneSweep,
        SweepKind::Noise => ExperimentKind::NoiseSweep,
        SweepKind::Splits => ExperimentKind::ConditionSplits,
    };
    let cfg = load_config(config, experiment, jobs)?;
    match kind {
        SweepKind::Backbones => {
            run_backbone_sweep(&cfg, out)?;
        }
        SweepKind::Noise => {
            run_noise_sweep(&cfg, out)?;
        }
        SweepKind::Splits => {
            run_condition_splits(&cfg, out)?;
        }
    }
    let name = experiment.as_str();
    print!("{}", fs::read_to_string(out.join(name).join(format!("{name}.md")))?);
    Ok(())
}

fn qualitative_cmd(ckpts: &[PathBuf], data: Option<&Path>, out: &Path, n: usize, threshold: f64, config: Option<&Path>) -> Result<()> {
    let rows = if let Some(c) = config {
        let mut cfg = load_config(Some(c), ExperimentKind::Qualitative, None)?;
        cfg.qualitative_scenes = n;
        cfg.threshold = threshold;
        run_qualitative(&cfg, out)?
    } else {
        let data = data.context("--data is required with --ckpt")?;
        let mut models = Vec::new();
        let mut samples = None;
        for p in ckpts {
            let ckpt = load_checkpoint(p)?;
            let ds = open_matching(&ckpt, data)?;
            if samples.is_none() {
                samples = Some(ds.load_all()?);
            }
            let name = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let name = if models.iter().any(|(m, _, _): &(String, _, _)| *m == name) { format!("{name}{}", models.len()) } else { name };
            models.push((name, ckpt.build()?, ckpt));
        }
        let samples = samples.context("no checkpoints given")?;
        dump_qualitative(&models, &samples, n, threshold, out)?
    };
    for r in &rows {
        println!("scene {} {}: {} error cells, {} fixed", r.scene, r.model, r.error_cells, r.fixed_cells);
    }
    Ok(())
}

fn gradcheck_cmd(op: Option<&str>, seeds: u64, tol: f64) -> Result<bool> {
    let ops: Vec<&str> = match op {
        Some(o) => vec![o],
        None => GRAD_CHECK_OPS.to_vec(),
    };
    let mut ok = true;
    for name in ops {
        for seed in 0..seeds {
            let r = grad_check(name, seed)?;
            let pass = r.passes(tol);
            ok &= pass;
            println!(
                "{} {name} seed {seed}: max rel error {:.3e} over {} elements ({} nonsmooth skipped)",
                if pass { "PASS" } else { "FAIL" },
                r.max_rel_error,
                r.checked,
                r.skipped_nonsmooth
            );
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            condition,
            scene,
        } => gen_data(n, seed, &out, condition, scene.as_deref())?,
        Command::Train {
            variant,
            fuser,
            backbone,
            preset,
            data,
            val,
            out,
            seed,
            epochs,
            batch_size,
            lr,
            optimizer,
            model,
        } => train_cmd(
            variant,
            fuser,
            backbone,
            &preset,
            &data,
            val.as_deref(),
            &out,
            seed,
            epochs,
            batch_size,
            lr,
            optimizer,
            model.as_deref(),
        )?,
        Command::Eval {
            ckpt,
            data,
            sigma,
            noise_seed,
            threshold,
            report,
        } => eval_cmd(&ckpt, &data, sigma, noise_seed, threshold, report.as_deref())?,
        Command::Sweep { kind, config, out, jobs } => sweep_cmd(kind, config.as_deref(), &out, jobs)?,
        Command::Qualitative {
            ckpts,
            data,
            out,
            n,
            threshold,
            config,
        } => qualitative_cmd(&ckpts, data.as_deref(), &out, n, threshold, config.as_deref())?,
        Command::Gradcheck { op, seeds, tol } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            return gradcheck_cmd(op.as_deref(), seeds, tol);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
