//! Command implementations and the run-directory conventions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use voxdet_core::classify::{train_probe, ClassifyError, ClassifySample};
use voxdet_core::config::{ConfigError, RunConfig};
use voxdet_core::detect::{
    evaluate_detection, train_detection, DetectError, DetectionModel, LabeledSample,
};
use voxdet_core::geometry::report_to_json;
use voxdet_core::logs;
use voxdet_core::manifest::{DatasetManifest, CATEGORY_NAMES, NUM_CATEGORIES};
use voxdet_core::mim::{pretrain, psnr, MimError};
use voxdet_core::networks::{global_avg_pool, ClassificationHead, UNet3d};
use voxdet_core::phantom::make_dataset;
use voxdet_core::rvol::{self, RvolRecord, VoxelDType};
use voxdet_core::volume::{preprocess_labeled, preprocess_unlabeled, Volume};
use voxdet_tensor::no_grad;
use voxdet_tensor::rng::Rng;

use crate::ConfigArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MimError> for CliError {
    fn from(e: MimError) -> Self {
        match e {
            MimError::Config(_) | MimError::Dimension(_) | MimError::PsnrDomain(_) => {
                CliError::Config(e.to_string())
            }
            MimError::Data(ref m) if m.contains("non-finite") => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Config(_) => CliError::Config(e.to_string()),
            DetectError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Config(_) | ClassifyError::DegenerateClass(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Resolve the run config and the output directory for a command.
fn resolve(
    args: &ConfigArgs,
    out_required: bool,
) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let body = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {path}: {e}")))?,
        None => "{}".to_string(),
    };
    let mut cfg = RunConfig::resolve(&body, &args.overrides)?;
    if let Some(threads) = args.threads {
        cfg.threads = Some(threads);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .map(PathBuf::from);
    if out_required && out.is_none() {
        return Err(CliError::Config(
            "an output directory is required (--out, VOXDET_OUT_DIR, or out_dir in the config)"
                .into(),
        ));
    }
    if let Some(o) = &out {
        cfg.out_dir = Some(o.display().to_string());
    }
    Ok((cfg, out))
}

fn write_run_files(
    out: &Path,
    cfg: &RunConfig,
    manifest: serde_json::Value,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.json"), cfg.to_pretty_json())?;
    let mut body =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    body.push('\n');
    fs::write(out.join("run_manifest.json"), body)?;
    Ok(())
}

pub fn cmd_phantom(args: &ConfigArgs) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, true)?;
    let out = out.expect("required");
    fs::create_dir_all(&out)?;
    let manifest = make_dataset(&cfg.phantom, &out).map_err(|e| match e {
        voxdet_core::phantom::PhantomError::InvalidSpec(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    })?;
    write_run_files(
        &out,
        &cfg,
        json!({
            "command": "phantom",
            "outputs": {
                "manifest": "manifest.json",
                "volumes": manifest.all_paths().count(),
            },
        }),
    )?;
    println!(
        "wrote {} volumes under {}",
        manifest.all_paths().count(),
        out.display()
    );
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<(DatasetManifest, PathBuf), CliError> {
    let path = dir.join("manifest.json");
    let manifest = DatasetManifest::load(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((manifest, path))
}

pub fn cmd_preprocess(args: &ConfigArgs, input: &str) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, true)?;
    let out = out.expect("required");
    let input_dir = PathBuf::from(input);
    let (manifest, manifest_path) = load_manifest(&input_dir)?;
    fs::create_dir_all(&out)?;
    let mut warned = 0usize;
    for rel in manifest.all_paths() {
        let src = manifest.resolve(&manifest_path, rel);
        let rec = rvol::read(&src, 1.0, -1024.0)
            .map_err(|e| CliError::Data(format!("{}: {e}", src.display())))?;
        let new = match &rec.mask {
            Some(mask) => {
                let o = preprocess_labeled(&rec.volume, mask, &cfg.preprocess)
                    .map_err(|e| CliError::Data(format!("{rel}: {e}")))?;
                for w in &o.warnings {
                    eprintln!("warning: {rel}: {w}");
                    warned += 1;
                }
                RvolRecord {
                    volume: o.volume,
                    mask: Some(o.mask),
                    boxes: o.boxes.iter().map(|(b, _)| *b).collect(),
                }
            }
            None => RvolRecord {
                volume: preprocess_unlabeled(&rec.volume, &cfg.preprocess)
                    .map_err(|e| CliError::Data(format!("{rel}: {e}")))?,
                mask: None,
                boxes: Vec::new(),
            },
        };
        let dst = out.join(rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        rvol::write(&dst, &new, VoxelDType::F64)
            .map_err(|e| CliError::Data(format!("{}: {e}", dst.display())))?;
    }
    manifest
        .save(&out.join("manifest.json"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_run_files(
        &out,
        &cfg,
        json!({
            "command": "preprocess",
            "inputs": { "dataset": input },
            "outputs": { "manifest": "manifest.json" },
            "warnings": warned,
        }),
    )?;
    println!(
        "preprocessed {} volumes into {}",
        manifest.all_paths().count(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(args: &ConfigArgs, data: &str) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, true)?;
    let out = out.expect("required");
    let (manifest, manifest_path) = load_manifest(&PathBuf::from(data))?;
    let result = pretrain(
        &manifest,
        &manifest_path,
        &cfg.pretrain,
        cfg.precision.dtype(),
        &out,
    )?;
    fs::write(
        out.join("pretrain_log.csv"),
        logs::pretrain_csv(&result.log),
    )?;
    let last = result.log.last().expect("rows");
    let mean_per_patch = result.log.iter().skip(1).map(|r| r.eval_psnr).sum::<f64>()
        / result.log.len().saturating_sub(1).max(1) as f64;
    let summary = json!({
        "command": "pretrain",
        "inputs": { "dataset": data },
        "outputs": {
            "checkpoint": "encoder.vxt",
            "log": "pretrain_log.csv",
        },
        "eval": {
            "first_masked_mse": result.eval_mse_first,
            "final_masked_mse": result.eval_mse_last,
            "final_psnr_db": last.eval_psnr,
            // Which averaging convention the eval_psnr column uses.
            "psnr_convention": "psnr_of_mean_mse",
            "mean_per_epoch_psnr_db": mean_per_patch,
            "paper_formula_check_db": psnr(0.01194, 1.0).map_err(|e| CliError::Config(e.to_string()))?,
        },
    });
    write_run_files(&out, &cfg, summary)?;
    println!(
        "pretrained {} epochs: masked MSE {:.6} -> {:.6}",
        cfg.pretrain.epochs, result.eval_mse_first, result.eval_mse_last
    );
    Ok(())
}

fn load_labeled(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    rels: &[String],
) -> Result<Vec<LabeledSample>, CliError> {
    rels.iter()
        .map(|rel| {
            let p = manifest.resolve(manifest_path, rel);
            let rec = rvol::read(&p, 1.0, -1024.0)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            LabeledSample::from_record(&rec).map_err(|e| CliError::Data(format!("{rel}: {e}")))
        })
        .collect()
}

fn load_volumes(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    rels: &[String],
) -> Result<Vec<Volume>, CliError> {
    rels.iter()
        .map(|rel| {
            let p = manifest.resolve(manifest_path, rel);
            let rec = rvol::read(&p, 1.0, -1024.0)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            rec.volume
                .mark_normalized()
                .map_err(|e| CliError::Data(format!("{rel}: {e} (run preprocess first)")))
        })
        .collect()
}

fn split_rels<'m>(manifest: &'m DatasetManifest, split: &str) -> Result<&'m [String], CliError> {
    match split {
        "labeled" | "train" => Ok(&manifest.labeled),
        "val" => Ok(&manifest.val),
        "test" => Ok(&manifest.test),
        other => Err(CliError::Config(format!(
            "unknown split {other:?}; expected labeled|val|test"
        ))),
    }
}

pub fn cmd_train_detect(
    args: &ConfigArgs,
    data: &str,
    encoder: Option<&str>,
    val_split: &str,
) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, true)?;
    let out = out.expect("required");
    let (manifest, manifest_path) = load_manifest(&PathBuf::from(data))?;
    let labeled = load_labeled(&manifest, &manifest_path, &manifest.labeled)?;
    let unlabeled = load_volumes(&manifest, &manifest_path, &manifest.unlabeled)?;
    let val = load_labeled(&manifest, &manifest_path, split_rels(&manifest, val_split)?)?;
    let result = train_detection(
        &labeled,
        &unlabeled,
        &val,
        &cfg.detect,
        cfg.precision.dtype(),
        encoder.map(Path::new),
        &out,
    )?;
    fs::write(out.join("detect_log.csv"), logs::detect_csv(&result.log))?;
    write_run_files(
        &out,
        &cfg,
        json!({
            "command": "train-detect",
            "inputs": { "dataset": data, "encoder": encoder, "val_split": val_split },
            "outputs": {
                "log": "detect_log.csv",
                "best_checkpoint": "best.vxt",
                "last_checkpoint": "last.vxt",
            },
            "best": { "epoch": result.best_epoch, "val_map_0.50": result.best_map50 },
        }),
    )?;
    println!(
        "trained {} epochs; best mAP@0.50 {:.4} at epoch {}",
        cfg.detect.schedule.total_epochs, result.best_map50, result.best_epoch
    );
    Ok(())
}

pub fn cmd_train_classify(args: &ConfigArgs, data: &str, encoder: &str) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, true)?;
    let out = out.expect("required");
    let (manifest, manifest_path) = load_manifest(&PathBuf::from(data))?;
    let load_split =
        |rels: &[String]| -> Result<Vec<ClassifySample>, CliError> {
            rels.iter()
                .map(|rel| {
                    let p = manifest.resolve(&manifest_path, rel);
                    let rec = rvol::read(&p, 1.0, -1024.0)
                        .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                    let volume = rec.volume.mark_normalized().map_err(|e| {
                        CliError::Data(format!("{rel}: {e} (run preprocess first)"))
                    })?;
                    let labels = *manifest.labels.get(rel).ok_or_else(|| {
                        CliError::Data(format!("manifest has no labels for {rel}"))
                    })?;
                    Ok(ClassifySample { volume, labels })
                })
                .collect()
        };
    // Classification labels are cheap; train on everything that is not
    // held out for validation or testing.
    let mut train = load_split(&manifest.labeled)?;
    train.extend(load_split(&manifest.unlabeled)?);
    let val = load_split(&manifest.val)?;

    let mut rng = Rng::derived(cfg.probe.seed, "probe-encoder", &[]);
    let net = UNet3d::new(cfg.pretrain.unet, cfg.precision.dtype(), &mut rng);
    voxdet_tensor::checkpoint::load_into(Path::new(encoder), &net.named_params())
        .map_err(|e| CliError::Data(format!("{encoder}: {e}")))?;

    let result = train_probe(&train, &val, &net, &cfg.probe, &out)?;
    fs::write(out.join("classify_log.csv"), logs::probe_csv(&result.log))?;
    write_run_files(
        &out,
        &cfg,
        json!({
            "command": "train-classify",
            "inputs": { "dataset": data, "encoder": encoder },
            "outputs": { "log": "classify_log.csv", "head_checkpoint": "head.vxt" },
            "best": { "epoch": result.best_epoch, "val_mean_acc": result.best_val_acc },
            "pos_weights": result.pos_weights,
        }),
    )?;
    println!(
        "probe best val accuracy {:.4} at epoch {}",
        result.best_val_acc, result.best_epoch
    );
    Ok(())
}

fn read_run_config(run: &Path) -> Result<RunConfig, CliError> {
    let p = run.join("resolved_config.json");
    let body =
        fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    Ok(RunConfig::resolve(&body, &[])?)
}

pub fn cmd_eval(
    args: &ConfigArgs,
    data: &str,
    run: &str,
    task: &str,
    split: &str,
) -> Result<(), CliError> {
    let (_cli_cfg, _) = resolve(args, false)?;
    let run_dir = PathBuf::from(run);
    let cfg = read_run_config(&run_dir)?;
    let (manifest, manifest_path) = load_manifest(&PathBuf::from(data))?;
    let rels = split_rels(&manifest, split)?;
    match task {
        "detect" => {
            let samples = load_labeled(&manifest, &manifest_path, rels)?;
            let model = DetectionModel::new(
                cfg.detect.unet,
                cfg.detect.decoder.clone(),
                cfg.detect.num_tokens,
                cfg.precision.dtype(),
                cfg.detect.seed,
            );
            model
                .load_all(&run_dir.join("best.vxt"))
                .map_err(CliError::from)?;
            let report = evaluate_detection(&model, &samples, cfg.detect.seed)?;
            let mut body = serde_json::to_string_pretty(&json!({
                "task": "detect",
                "split": split,
                "report": report_to_json(&report),
            }))
            .map_err(|e| CliError::Data(e.to_string()))?;
            body.push('\n');
            let out_path = run_dir.join(format!("eval_{split}_report.json"));
            fs::write(&out_path, body)?;
            write_plot_csv(&run_dir, "detect_log.csv", "val_map_0.50")?;
            println!(
                "mAP@0.50 on {split}: {:.4} ({} detections / {} ground truths)",
                report.map[2], report.num_detections, report.num_ground_truths
            );
        }
        "classify" => {
            let run_manifest: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(run_dir.join("run_manifest.json"))
                    .map_err(|e| CliError::Data(e.to_string()))?,
            )
            .map_err(|e| CliError::Data(e.to_string()))?;
            let encoder_path = run_manifest["inputs"]["encoder"]
                .as_str()
                .ok_or_else(|| CliError::Data("run manifest has no encoder path".into()))?
                .to_string();
            let mut rng = Rng::derived(cfg.probe.seed, "probe-encoder", &[]);
            let net = UNet3d::new(cfg.pretrain.unet, cfg.precision.dtype(), &mut rng);
            voxdet_tensor::checkpoint::load_into(Path::new(&encoder_path), &net.named_params())
                .map_err(|e| CliError::Data(format!("{encoder_path}: {e}")))?;
            let mut head_rng = Rng::derived(cfg.probe.seed, "probe-init", &[]);
            let head = ClassificationHead::new(
                cfg.pretrain.unet.bottleneck_channels,
                cfg.probe.head_hidden,
                NUM_CATEGORIES,
                cfg.precision.dtype(),
                &mut head_rng,
            );
            let mut head_params = Vec::new();
            head.collect("head", &mut head_params);
            voxdet_tensor::checkpoint::load_into(&run_dir.join("head.vxt"), &head_params)
                .map_err(|e| CliError::Data(e.to_string()))?;

            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for rel in rels {
                let p = manifest.resolve(&manifest_path, rel);
                let rec = rvol::read(&p, 1.0, -1024.0)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let vol = rec
                    .volume
                    .mark_normalized()
                    .map_err(|e| CliError::Data(format!("{rel}: {e}")))?;
                let grid = net.encoder_only(&vol, true).map_err(DetectError::from)?;
                let pooled = global_avg_pool(&grid).map_err(|e| CliError::Data(e.to_string()))?;
                let c = pooled.numel();
                let feats = pooled
                    .reshape(&[1, c])
                    .map_err(|e| CliError::Data(e.to_string()))?;
                let logits = no_grad(|| head.forward(&feats, false, 0))
                    .map_err(|e| CliError::Data(e.to_string()))?;
                let mut row = [0.0; NUM_CATEGORIES];
                for (i, z) in logits.to_vec().iter().enumerate() {
                    row[i] = 1.0 / (1.0 + (-z).exp());
                }
                scores.push(row);
                labels.push(
                    *manifest.labels.get(rel).ok_or_else(|| {
                        CliError::Data(format!("manifest has no labels for {rel}"))
                    })?,
                );
            }
            let report = voxdet_core::classify::eval_classification(&scores, &labels, 0.5)?;
            let per_category: BTreeMap<&str, serde_json::Value> = CATEGORY_NAMES
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    (
                        *name,
                        json!({ "accuracy": report.accuracy[i], "auc": report.auc[i] }),
                    )
                })
                .collect();
            let mut body = serde_json::to_string_pretty(&json!({
                "task": "classify",
                "split": split,
                "mean_accuracy": report.mean_accuracy,
                "mean_auc": report.mean_auc,
                "threshold": report.threshold,
                "samples": report.samples,
                "per_category": per_category,
            }))
            .map_err(|e| CliError::Data(e.to_string()))?;
            body.push('\n');
            fs::write(run_dir.join(format!("eval_{split}_report.json")), body)?;
            write_plot_csv(&run_dir, "classify_log.csv", "val_mean_acc")?;
            println!(
                "mean accuracy on {split}: {:.4} over {} samples",
                report.mean_accuracy, report.samples
            );
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown task {other:?}; expected detect|classify"
            )))
        }
    }
    Ok(())
}

fn write_plot_csv(run_dir: &Path, log_name: &str, column: &str) -> Result<(), CliError> {
    let log_path = run_dir.join(log_name);
    if !log_path.exists() {
        return Ok(());
    }
    let body = fs::read_to_string(&log_path)?;
    let Some(points) = logs::csv_column(&body, column) else {
        return Ok(());
    };
    let mut out = format!("epoch,{column}\n");
    for (e, v) in points {
        out.push_str(&format!("{e},{v}\n"));
    }
    fs::write(run_dir.join(format!("plot_{column}.csv")), out)?;
    Ok(())
}

pub fn cmd_report(run: &str, metric: Option<&str>) -> Result<(), CliError> {
    let run_dir = PathBuf::from(run);
    let known = [
        ("detect_log.csv", "val_map_0.50"),
        ("pretrain_log.csv", "eval_psnr"),
        ("classify_log.csv", "val_mean_acc"),
    ];
    let mut summary = BTreeMap::new();
    let mut found = false;
    for (log_name, default_metric) in known {
        let path = run_dir.join(log_name);
        if !path.exists() {
            continue;
        }
        found = true;
        let column = metric.unwrap_or(default_metric);
        let body = fs::read_to_string(&path)?;
        let points = logs::csv_column(&body, column)
            .ok_or_else(|| CliError::Config(format!("{log_name} has no column {column:?}")))?;
        write_plot_csv(&run_dir, log_name, column)?;
        let finite: Vec<(u64, f64)> = points
            .iter()
            .copied()
            .filter(|(_, v)| v.is_finite())
            .collect();
        let best = finite
            .iter()
            .copied()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
        summary.insert(
            log_name.to_string(),
            json!({
                "metric": column,
                "epochs": points.len(),
                "final": finite.last().map(|(_, v)| *v),
                "best": best.map(|(e, v)| json!({ "epoch": e, "value": v })),
                "plot": format!("plot_{column}.csv"),
            }),
        );
    }
    if !found {
        return Err(CliError::Data(format!(
            "{run} contains no known metric log"
        )));
    }
    let mut body = serde_json::to_string_pretty(&json!({ "runs": summary }))
        .map_err(|e| CliError::Data(e.to_string()))?;
    body.push('\n');
    fs::write(run_dir.join("report_summary.json"), body)?;
    println!("wrote report_summary.json in {run}");
    Ok(())
}
