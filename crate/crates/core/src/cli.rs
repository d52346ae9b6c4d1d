//! `funcorr` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::synth::{gen_synthetic_with, ANNOTATIONS_FILE, FEWSHOT_FILE};
use crate::dataset::{load_annotations_with, DatasetIndex, LoadOptions};
use crate::error::{Error, Result};
use crate::evaluation::{
    dense_match, eval_benchmark, fewshot_features, match_keypoints, run_fewshot, trunk_descriptor, FewshotTable,
    PckReport,
};
use crate::gating::GatingVariant;
use crate::image::RgbImage;
use crate::model::Model;
use crate::objective::loss_grad_check;
use crate::objective::LossConfig;
use crate::overlay;
use crate::par::{self, Execution};
use crate::tensor::gradcheck::{grad_check, standard_cases, TOLERANCE};
use crate::training::{self, load_checkpoint, load_checkpoint_as, save_outcome, trunk_cache};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "funcorr", version, about = "Task-conditioned features for functional keypoint correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory or annotation file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output path (directory for gen-synth).
    #[arg(long, global = true, visible_alias = "report")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<GatingVariant>,
    /// PCK threshold in pixels.
    #[arg(long = "pck-thresh", global = true)]
    pck_thresh: Option<f64>,
    /// Comma-separated shot counts, e.g. `1,2,5`.
    #[arg(long, global = true, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dense matching for `match`.
    #[arg(long, global = true)]
    dense: bool,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// L2-normalise feature cells in the loss and in matching.
    #[arg(long, global = true)]
    normalize: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic keypoint world.
    GenSynth,
    /// Train a model and write a checkpoint plus loss history.
    Train,
    /// PCK on the seeded test-split benchmark.
    EvalPck,
    /// Match one image pair and draw the result.
    Match {
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        task: String,
        /// Source cell spacing for dense matching.
        #[arg(long, default_value_t = 1)]
        step: usize,
    },
    /// Few-shot linear probe on held-out families.
    EvalFewshot,
    /// Compare analytic and numeric gradients of every op and the loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print the merged run configuration.
    DumpConfig,
}

/// Runs one invocation and returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn merged_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(v) = cli.variant {
        cfg.train.variant = v;
    }
    if let Some(t) = cli.pck_thresh {
        cfg.eval.threshold = t;
    }
    if let Some(s) = &cli.shots {
        cfg.fewshot.shots = s.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(t) = cli.temperature {
        cfg.train.temperature = t;
    }
    if cli.normalize {
        cfg.train.normalize = true;
        cfg.eval.normalize = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = merged_config(&cli)?;
    let exec = if cfg.threads == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    par::with_threads(cfg.threads, || dispatch(&cli, &cfg, exec))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn annotations_path(data: &Path, file: &str) -> PathBuf {
    if data.is_dir() {
        data.join(file)
    } else {
        data.to_path_buf()
    }
}

fn load_index(data: &Path) -> Result<DatasetIndex> {
    Ok(load_annotations_with(&annotations_path(data, ANNOTATIONS_FILE), &LoadOptions::default())?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// The checkpoint's model, or an untrained one when no checkpoint is given.
/// Gating overrides in the annotation file are applied. Returns whether
/// cells are normalised for matching.
fn load_model(cli: &Cli, cfg: &RunConfig, index: &DatasetIndex) -> Result<(Model, bool)> {
    let (mut model, normalize) = match &cli.ckpt {
        Some(p) => {
            let ckpt = match cli.variant {
                Some(v) => load_checkpoint_as(p, v)?,
                None => load_checkpoint(p)?,
            };
            let normalize = cfg.eval.normalize || ckpt.meta.train.normalize;
            (ckpt.model()?, normalize)
        }
        None => {
            let spec = training::model_spec(index, &cfg.train, &cfg.trunk, cfg.modnet.as_ref());
            (Model::init(spec)?, cfg.eval.normalize)
        }
    };
    model.apply_overrides(&index.file.gating_overrides)?;
    Ok((model, normalize))
}

fn dispatch(cli: &Cli, cfg: &RunConfig, exec: Execution) -> Result<()> {
    match &cli.command {
        Command::GenSynth => {
            let out = need(&cli.out, "out")?;
            let idx = gen_synthetic_with(&cfg.synth, out, exec)?;
            println!(
                "wrote {} images and {} annotations to {}",
                idx.images().len(),
                idx.annotations().len(),
                out.display()
            );
        }
        Command::Train => {
            let index = load_index(need(&cli.data, "data")?)?;
            let out = need(&cli.out, "out")?;
            let spec = training::model_spec(&index, &cfg.train, &cfg.trunk, cfg.modnet.as_ref());
            let outcome = training::train(&index, spec, &cfg.train, exec)?;
            save_outcome(&outcome, out)?;
            println!(
                "trained {} for {} steps, final loss {:.4}; wrote {}",
                cfg.train.variant.as_str(),
                outcome.losses.len(),
                outcome.checkpoint.meta.final_loss,
                out.display()
            );
        }
        Command::EvalPck => {
            let index = load_index(need(&cli.data, "data")?)?;
            let (model, normalize) = load_model(cli, cfg, &index)?;
            let eval = crate::evaluation::EvalConfig { normalize, ..cfg.eval.clone() };
            let report = eval_benchmark(&index, &model, &eval, exec)?;
            print_pck(&report);
            if let Some(out) = &cli.out {
                report.save(out)?;
            }
        }
        Command::Match {
            source,
            target,
            task,
            step,
        } => {
            let index = load_index(need(&cli.data, "data")?)?;
            let (model, normalize) = load_model(cli, cfg, &index)?;
            match_pair(cli, &index, &model, normalize, source, target, task, *step)?;
        }
        Command::EvalFewshot => {
            let data = need(&cli.data, "data")?;
            let index = load_annotations_with(&annotations_path(data, FEWSHOT_FILE), &LoadOptions::default())?;
            let ckpt = load_checkpoint(need(&cli.ckpt, "ckpt")?)?;
            let model = ckpt.model()?;
            let trunk = trunk_cache(model.trunk(), &index, exec)?;
            let functional = par::try_map(exec, &trunk, |r| fewshot_features(&model, r))?;
            let raw: Vec<Vec<f32>> = trunk.iter().map(trunk_descriptor).collect();
            let labels: Vec<String> = index.images().iter().map(|i| i.category.clone()).collect();
            let f = &cfg.fewshot;
            let tables = FewshotReport {
                functional: run_fewshot(&functional, &labels, &f.shots, &f.seeds, &f.probe)?,
                trunk: run_fewshot(&raw, &labels, &f.shots, &f.seeds, &f.probe)?,
            };
            println!("shots  functional  trunk");
            for (k, v) in &tables.functional.means {
                println!("{k:>5}  {v:>10.2}  {:>5.2}", tables.trunk.means[k]);
            }
            if let Some(out) = &cli.out {
                write_text(out, &json(&tables))?;
            }
        }
        Command::GradCheck { seeds } => grad_check_all(cli, cfg.train.seed, *seeds)?,
        Command::DumpConfig => match &cli.out {
            Some(out) => write_text(out, &cfg.to_json())?,
            None => print!("{}", cfg.to_json()),
        },
    }
    Ok(())
}

#[derive(Serialize)]
struct FewshotReport {
    functional: FewshotTable,
    trunk: FewshotTable,
}

fn print_pck(r: &PckReport) {
    for (t, c) in &r.per_task {
        println!("{t:<16} {:>6.2}  ({}/{})", c.pck, c.correct, c.total);
    }
    println!(
        "{:<16} {:>6.2}  ({}/{}) at {} px",
        "overall", r.overall.pck, r.overall.correct, r.overall.total, r.threshold
    );
    for s in &r.skipped {
        println!("skipped: {s}");
    }
}

#[allow(clippy::too_many_arguments)]
fn match_pair(
    cli: &Cli,
    index: &DatasetIndex,
    model: &Model,
    normalize: bool,
    source: &str,
    target: &str,
    task: &str,
    step: usize,
) -> Result<()> {
    let t = model.task_index(task)?;
    let features = |id: &str| -> Result<(RgbImage, crate::trunk::FeatureMap)> {
        let rec = index.image(id).ok_or_else(|| Error::Vocabulary {
            kind: "image",
            name: id.to_string(),
        })?;
        let img = RgbImage::load_png(&index.image_path(rec))?;
        if (img.width, img.height) != (rec.width, rec.height) {
            return Err(Error::contract(format!(
                "{id}: image is {}x{}, annotation says {}x{}",
                img.width, img.height, rec.width, rec.height
            )));
        }
        let f = model.features_from_trunk(&model.trunk().forward(&img.to_tensor())?, t)?;
        Ok((img, if normalize { f.l2_normalized() } else { f }))
    };
    let (src_img, fs) = features(source)?;
    let (tgt_img, ft) = features(target)?;
    let kps_of = |id: &str| {
        index
            .annotations()
            .iter()
            .find(|a| a.image_id == id && a.task == task)
            .map(|a| a.keypoints.clone())
    };
    let picture = if cli.dense {
        let pairs = dense_match(&fs, &ft, step)?;
        for (a, b) in &pairs {
            println!("({}, {}) -> ({}, {})", a.row, a.col, b.row, b.col);
        }
        overlay::dense_overlay(&src_img, &tgt_img, &pairs, fs.stride, ft.stride)
    } else {
        let kps = kps_of(source).ok_or_else(|| {
            Error::contract(format!("image `{source}` has no `{task}` annotation; use --dense"))
        })?;
        let gts = kps_of(target).unwrap_or_default();
        let m = match_keypoints(&fs, &ft, &kps)?;
        for (k, r) in m.roles.iter().enumerate() {
            println!(
                "role {k}: ({:.1}, {:.1}) -> ({:.1}, {:.1}) score {:.4}",
                r.source.x, r.source.y, r.predicted.x, r.predicted.y, r.score
            );
        }
        overlay::pair_overlay(&src_img, &tgt_img, &m, &kps, &gts)
    };
    if let Some(out) = &cli.out {
        picture.save_png(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradRow {
    op: String,
    seeds: u64,
    max_rel_error: f64,
    passed: bool,
}

fn grad_check_all(cli: &Cli, base: u64, seeds: u64) -> Result<()> {
    let mut rows = Vec::new();
    for (op, shapes) in standard_cases() {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(grad_check(&op, &shapes, base.wrapping_add(s))?.max_rel_error);
        }
        rows.push(GradRow {
            op: format!("{} {:?}", op.name(), shapes),
            seeds,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    for normalize in [false, true] {
        let cfg = LossConfig {
            normalize,
            temperature: 0.5,
            symmetric: normalize,
        };
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(loss_grad_check(base.wrapping_add(s), cfg)?);
        }
        rows.push(GradRow {
            op: format!("contrastive_loss normalize={normalize}"),
            seeds,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    for r in &rows {
        println!("{} {:<48} {:.3e}", if r.passed { "ok  " } else { "FAIL" }, r.op, r.max_rel_error);
    }
    if let Some(out) = &cli.out {
        write_text(out, &json(&rows))?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::Numeric {
            op: format!("{failed} gradient check(s)"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_validation_error() {
        assert_eq!(run_command(["funcorr", "train", "--bogus"]), EXIT_INVALID);
        assert_eq!(run_command(["funcorr"]), EXIT_INVALID);
    }

    #[test]
    fn missing_dataset_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let code = run_command([
            "funcorr".into(),
            "train".into(),
            "--data".into(),
            missing.into_os_string(),
            "--out".into(),
            dir.path().join("m.ckpt").into_os_string(),
        ]);
        assert_eq!(code, EXIT_IO);
    }

    #[test]
    fn dump_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let code = run_command(["funcorr", "dump-config", "--seed", "9", "--normalize", "--shots", "1,3", "--out", &s(&a)]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(run_command(["funcorr", "dump-config", "--config", &s(&a), "--out", &s(&b)]), EXIT_OK);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let c = RunConfig::load(&a).unwrap();
        assert_eq!((c.train.seed, c.train.normalize, c.fewshot.shots.clone()), (9, true, vec![1, 3]));
    }

    #[test]
    fn bad_config_value_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"steps": 0}}"#).unwrap();
        assert_eq!(run_command(["funcorr", "dump-config", "--config", p.to_str().unwrap()]), EXIT_INVALID);
    }
}
