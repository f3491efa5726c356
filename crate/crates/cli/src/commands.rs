use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use semenet::evaluation::{analyze_distribution, argmax};
use semenet::explain::{grad_cam, overlay, region_mass, RegionAudit};
use semenet::imageproc::io::{load_gray, save_png_gray, save_png_rgb};
use semenet::imageproc::{apply_mask, GrayImage};
use semenet::nn::{build_model, images_to_batch, preset_sized, unet_predict_mask, Init, Model, Task};
use semenet::pipeline::experiments::{evaluate_classifier, mask_dataset, run_ablation, segmentation_iou};
use semenet::pipeline::{
    cascade_predict, generate_synthetic, Cascade, CascadeConfig, Manifest, Record, RunDir, Split, SyntheticSpec,
};
use semenet::tensor::gradcheck::{gradient_check, OpId};
use semenet::training::fit::fit_with;
use semenet::training::{load_checkpoint, save_checkpoint, Checkpoint, Dataset};

use crate::config::{self, required, GroupBy};
use crate::{Args, CliError};

type Result<T, E = CliError> = std::result::Result<T, E>;

struct Run {
    dir: RunDir,
    command: &'static str,
    started: Instant,
}

impl Run {
    fn open<C: Serialize>(a: &Args, command: &'static str, cfg: &C) -> Result<Self> {
        let mut dir = RunDir::create(&a.run_dir)?;
        dir.write_json("config.json", cfg)?;
        dir.log(&json!({ "event": "start", "command": command }))?;
        Ok(Run { dir, command, started: Instant::now() })
    }

    fn elapsed_ms(&self) -> u128 {
        self.started.elapsed().as_millis()
    }

    fn finish(mut self) -> Result<()> {
        let ms = self.elapsed_ms();
        self.dir.log(&json!({ "event": "done", "command": self.command, "elapsed_ms": ms }))?;
        let root = self.dir.root().to_path_buf();
        let files = self.dir.finish()?;
        println!("{}: {} outputs under {}", self.command, files.len(), root.display());
        Ok(())
    }

    /// Writes the manifest with every path made absolute.
    fn write_manifest(&mut self, m: &Manifest) -> Result<()> {
        let records = m
            .records
            .iter()
            .map(|r| {
                let p = std::path::absolute(m.resolve(&r.path))?;
                Ok(Record { path: p.to_string_lossy().into_owned(), ..r.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let abs = Manifest::new(self.dir.root(), records)?;
        self.dir.write_text("manifest.csv", &abs.to_csv()?)?;
        Ok(())
    }
}

fn load_manifest(path: &Option<PathBuf>) -> Result<Manifest> {
    let p = required(path, "manifest")?;
    Manifest::load(p).map_err(|e| CliError::Validation(format!("manifest {}: {e}", p.display())))
}

fn existing(p: &Path) -> Result<&Path> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::Validation(format!("no such file: {}", p.display())))
    }
}

fn checkpoint_path(a: &Args) -> Result<&Path> {
    existing(a.checkpoint.as_deref().ok_or_else(|| CliError::Validation("--checkpoint is required".into()))?)
}

fn image_path(a: &Args) -> Result<&Path> {
    existing(a.image.as_deref().ok_or_else(|| CliError::Validation("--image is required".into()))?)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn mask_model(path: &Option<PathBuf>) -> Result<Option<Model<f32>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let m: Model<f32> = load_checkpoint(existing(p)?)?.best_model()?;
            if m.task() != Task::Segment {
                return Err(CliError::Validation(format!("{} is not a segmentation checkpoint", p.display())));
            }
            Ok(Some(m))
        }
    }
}

pub fn gen_data(a: &Args) -> Result<()> {
    let mut spec: SyntheticSpec = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut run = Run::open(a, "gen-data", &spec)?;
    let out = run.dir.path("data")?;
    let m = generate_synthetic(&spec, &out)?;
    for rel in ["data/manifest.csv", "data/spec.json", "data/images", "data/masks"] {
        run.dir.record(rel)?;
    }
    let records = m.records.iter().map(|r| Record { path: format!("data/{}", r.path), ..r.clone() }).collect();
    let top = Manifest::new(run.dir.root(), records)?;
    run.dir.write_text("manifest.csv", &top.to_csv()?)?;
    run.dir.log(&json!({ "event": "generated", "images": m.records.len(), "classes": m.class_names() }))?;
    run.finish()
}

pub fn ingest(a: &Args) -> Result<()> {
    let mut cfg: config::IngestConfig = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.skip_bad |= a.skip_bad;
    let root = required(&cfg.root, "root")?.clone();
    let ratios = cfg.ratios.unwrap_or([0.8, 0.1, 0.1]);
    let mut run = Run::open(a, "ingest", &cfg)?;
    let (m, bad) = semenet::pipeline::ingest(&root, cfg.skip_bad)?;
    let m = semenet::pipeline::split(&m, ratios, cfg.seed)?;
    run.write_manifest(&m)?;
    run.dir.write_json("metrics/bad_files.json", &bad)?;
    for b in &bad {
        eprintln!("skipped {}: {}", b.path, b.reason);
    }
    let counts: Vec<usize> = Split::ALL.iter().map(|s| m.records_in(*s).count()).collect();
    run.dir.log(&json!({ "event": "ingested", "records": m.records.len(), "splits": counts, "skipped": bad.len() }))?;
    run.finish()
}

fn require_masks(d: &Dataset, what: &str) -> Result<()> {
    match d.samples.iter().find(|s| s.mask.is_none()) {
        Some(s) => Err(CliError::Validation(format!("{what} image '{}' has no ground-truth mask", s.id))),
        None => Ok(()),
    }
}

pub fn train(a: &Args, segment: bool) -> Result<()> {
    let command = if segment { "segment-train" } else { "train" };
    let mut cfg: config::TrainCommandConfig = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let classes = if segment { vec!["lung".to_string()] } else { manifest.class_names() };
    let mut train = manifest.load_split(Split::Train)?;
    let mut val = manifest.load_split(Split::Validation)?;
    let model_cfg = match (&cfg.model, &cfg.preset) {
        (Some(_), Some(_)) => return Err(CliError::Validation("set either 'preset' or 'model', not both".into())),
        (Some(m), None) => m.clone(),
        (None, p) => {
            let name = p.as_deref().unwrap_or(if segment { "unet-toy" } else { "mini-seme" });
            let size = match (cfg.input_size, train.samples.first()) {
                (Some(s), _) => s,
                (None, Some(s)) => s.image.width(),
                (None, None) => return Err(CliError::Validation("the training split is empty".into())),
            };
            preset_sized(name, if segment { 1 } else { classes.len() }, size)?
        }
    };
    let want = if segment { Task::Segment } else { Task::Classify };
    if model_cfg.task != want || (!segment && model_cfg.num_classes != classes.len()) {
        return Err(CliError::Validation(format!(
            "{command} needs a {want:?} model with {} outputs; the configured model is {:?} with {}",
            classes.len(),
            model_cfg.task,
            model_cfg.num_classes
        )));
    }

    let mut run = Run::open(a, command, &cfg)?;
    run.write_manifest(&manifest)?;
    if segment {
        require_masks(&train, "training")?;
        require_masks(&val, "validation")?;
    }
    if let Some(m) = mask_model(&cfg.mask_model)? {
        let masked = mask_dataset(&train, &m, cfg.train.mask_threshold)?;
        train = if cfg.union_masked { train.union(&masked)? } else { masked };
        val = mask_dataset(&val, &m, cfg.train.mask_threshold)?;
    }

    let (mut model, state) = match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(existing(p)?)?;
            if ck.model != model_cfg || ck.class_names != classes {
                return Err(CliError::Validation(format!("checkpoint {} does not match the configured model", p.display())));
            }
            let model: Model<f32> = ck.model()?;
            let state = ck
                .train_state(&model)?
                .ok_or_else(|| CliError::Validation(format!("checkpoint {} carries no training state", p.display())))?;
            (model, Some(state))
        }
        None => (build_model::<f32>(&model_cfg, Init::HeUniform, cfg.train.seed)?, None),
    };
    if let Some(s) = &state {
        for r in &s.history {
            run.dir.append_jsonl("metrics/history.jsonl", r)?;
        }
    }
    let ckpt = run.dir.record("checkpoints/last.ckpt")?;
    let started = run.started;
    let dir = &mut run.dir;
    let final_state = fit_with(&mut model, &train, &val, &cfg.train, state, |rec, m, st| {
        dir.append_jsonl("metrics/history.jsonl", rec)?;
        dir.log(&json!({ "event": "epoch", "epoch": rec.epoch, "elapsed_ms": started.elapsed().as_millis() }))?;
        save_checkpoint(&ckpt, &Checkpoint::from_training(m, &classes, &cfg.train, st))
    })?;
    let best = final_state.best.as_ref().map(|b| json!({ "epoch": b.epoch, "score": b.score }));
    run.dir.write_json(
        "metrics/summary.json",
        &json!({ "epochs": final_state.epoch, "steps": final_state.step, "best": best, "last": final_state.history.last() }),
    )?;
    run.finish()
}

pub fn eval(a: &Args) -> Result<()> {
    let cfg: config::EvalConfig = config::load(a.config.as_deref())?;
    let split = a.split.unwrap_or(Split::Test);
    let ck = load_checkpoint(checkpoint_path(a)?)?;
    let model: Model<f32> = ck.best_model()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let mut run = Run::open(a, "eval", &cfg)?;
    run.write_manifest(&manifest)?;
    let mut data = manifest.load_split(split)?;
    if data.is_empty() {
        return Err(CliError::Validation(format!("the {split} split is empty")));
    }
    if model.task() == Task::Segment {
        let iou = segmentation_iou(&model, &data, cfg.mask_threshold, true)?;
        run.dir.write_json("metrics/segmentation.json", &json!({ "split": split, "images": data.len(), "mean_iou": iou }))?;
        return run.finish();
    }
    if data.class_names != ck.class_names {
        return Err(CliError::Validation(format!(
            "manifest classes {:?} differ from the checkpoint's {:?}",
            data.class_names, ck.class_names
        )));
    }
    if let Some(m) = mask_model(&cfg.mask_model)? {
        data = mask_dataset(&data, &m, cfg.mask_threshold)?;
    }
    let report = evaluate_classifier(&model, &data, cfg.batch_size)?;
    run.dir.write_text("metrics/metrics.json", &(report.to_json() + "\n"))?;
    run.dir.write_text("metrics/confusion.csv", &report.confusion.to_csv())?;
    run.dir.write_text("metrics/roc.csv", &report.roc_csv())?;
    println!("{split}: accuracy {:.4} macro-F1 {:.4}", report.accuracy, report.macro_f1);
    run.finish()
}

pub fn segment(a: &Args) -> Result<()> {
    let cfg: config::SegmentConfig = config::load(a.config.as_deref())?;
    let ck = load_checkpoint(checkpoint_path(a)?)?;
    let model: Model<f32> = ck.best_model()?;
    if model.task() != Task::Segment {
        return Err(CliError::Validation("segment needs a segmentation checkpoint".into()));
    }
    let mut run = Run::open(a, "segment", &cfg)?;
    if let Some(p) = &a.image {
        let img = load_gray(existing(p)?)?;
        let mask = unet_predict_mask(&model, &img, cfg.threshold, cfg.postprocess)?;
        let stem = file_stem(p);
        save_png_gray(&mask.to_gray(), &run.dir.record(&format!("masks/{stem}_mask.png"))?)?;
        save_png_gray(&apply_mask(&img, &mask)?, &run.dir.record(&format!("masks/{stem}_masked.png"))?)?;
        run.dir.write_json("metrics/segment.json", &json!({ "image": p, "foreground_pixels": mask.count() }))?;
    } else {
        let split = a.split.ok_or_else(|| CliError::Validation("segment needs --image or --split".into()))?;
        let manifest = load_manifest(&cfg.manifest)?;
        run.write_manifest(&manifest)?;
        let data = manifest.load_split(split)?;
        require_masks(&data, "scored")?;
        let iou = segmentation_iou(&model, &data, cfg.threshold, cfg.postprocess)?;
        run.dir.write_json("metrics/segmentation.json", &json!({ "split": split, "images": data.len(), "mean_iou": iou }))?;
        println!("{split}: mean IoU {iou:.4}");
    }
    run.finish()
}

pub fn explain(a: &Args) -> Result<()> {
    let cfg: config::ExplainConfig = config::load(a.config.as_deref())?;
    let ck = load_checkpoint(checkpoint_path(a)?)?;
    let model: Model<f32> = ck.best_model()?;
    let path = image_path(a)?;
    let mut img = load_gray(path)?;
    if let Some(c) = a.class {
        if c >= model.num_classes() {
            return Err(CliError::Validation(format!("--class {c} out of range for {} classes", model.num_classes())));
        }
    }
    let mut run = Run::open(a, "explain", &cfg)?;
    if let Some(m) = mask_model(&cfg.mask_model)? {
        img = apply_mask(&img, &unet_predict_mask(&m, &img, cfg.mask_threshold, true)?)?;
    }
    let batch = images_to_batch::<f32>(std::slice::from_ref(&img), model.input_shape())?;
    let probs: Vec<f64> = model.predict_proba(&batch)?.data().iter().map(|&v| v as f64).collect();
    let predicted = argmax(&probs);
    let class = a.class.unwrap_or(predicted);
    let cam = grad_cam(&model, &batch, class, cfg.layer.as_deref())?;
    let mass = region_mass(&cam.heatmap, cfg.region)?;
    let stem = file_stem(path);
    save_png_gray(&cam.heatmap.to_gray(), &run.dir.record(&format!("heatmaps/{stem}_class{class}.png"))?)?;
    save_png_rgb(&overlay(&img, &cam.heatmap, cfg.alpha)?, &run.dir.record(&format!("heatmaps/{stem}_class{class}_overlay.png"))?)?;
    let audit = RegionAudit { image: path.to_string_lossy().into_owned(), class, layer: cam.layer.clone(), region: cfg.region, mass };
    run.dir.append_jsonl("metrics/region_mass.jsonl", &audit)?;
    let label = ck.class_names.get(class).cloned().unwrap_or_default();
    run.dir.log(&json!({ "event": "explained", "class": class, "label": label, "predicted": predicted, "probabilities": probs }))?;
    println!("class {class} ({label}) on layer {}: region mass {mass:.4}", cam.layer);
    run.finish()
}

pub fn cascade(a: &Args) -> Result<()> {
    let cfg: config::CascadeCommandConfig = config::load(a.config.as_deref())?;
    let cc = CascadeConfig {
        stage1: existing(required(&cfg.stage1, "stage1")?)?.to_path_buf(),
        stage2: existing(required(&cfg.stage2, "stage2")?)?.to_path_buf(),
        mask_model: cfg.mask_model.clone(),
        mask_threshold: cfg.mask_threshold,
        route_label: cfg.route_label.clone(),
    };
    let cascade = Cascade::load(&cc)?;
    let mut run = Run::open(a, "cascade", &cfg)?;
    if let Some(p) = &a.image {
        let r = cascade_predict(&cascade, &load_gray(existing(p)?)?)?;
        println!("{}: {}", p.display(), r.final_label);
        run.dir.write_json("metrics/cascade.json", &json!({ "image": p, "result": r }))?;
        return run.finish();
    }
    let split = a.split.ok_or_else(|| CliError::Validation("cascade needs --image or --split".into()))?;
    let manifest = load_manifest(&cfg.manifest)?;
    run.write_manifest(&manifest)?;
    let leaves = cascade.leaf_labels();
    let (mut n, mut correct, mut routed) = (0usize, 0usize, 0usize);
    for r in manifest.records_in(split) {
        if !leaves.contains(&r.label) {
            return Err(CliError::Validation(format!("label '{}' is not a cascade leaf ({})", r.label, leaves.join(", "))));
        }
        let res = cascade_predict(&cascade, &load_gray(&manifest.resolve(&r.path))?)?;
        n += 1;
        correct += usize::from(res.final_label == r.label);
        routed += usize::from(res.stage2.is_some());
        run.dir.append_jsonl("metrics/cascade.jsonl", &json!({ "image": r.path, "truth": r.label, "result": res }))?;
    }
    if n == 0 {
        return Err(CliError::Validation(format!("the {split} split is empty")));
    }
    let accuracy = correct as f64 / n as f64;
    run.dir.write_json(
        "metrics/cascade_summary.json",
        &json!({ "split": split, "images": n, "accuracy": accuracy, "routed_to_stage2": routed, "leaf_labels": leaves }),
    )?;
    println!("{split}: cascade accuracy {accuracy:.4} over {n} images");
    run.finish()
}

pub fn gradcheck(a: &Args) -> Result<()> {
    let mut cfg: config::GradcheckConfig = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ops = if cfg.ops.is_empty() {
        OpId::ALL.to_vec()
    } else {
        cfg.ops.iter().map(|n| OpId::from_name(n)).collect::<semenet::Result<Vec<_>>>()?
    };
    let mut run = Run::open(a, "gradcheck", &cfg)?;
    let frozen: Vec<&str> = cfg.frozen.iter().map(String::as_str).collect();
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for op in ops {
        let r = gradient_check(op, cfg.trials, cfg.seed, &frozen)?;
        println!("{:<24} {} max rel err {:.3e}", op.name(), if r.passed() { "ok  " } else { "FAIL" }, r.max_rel_error());
        if !r.passed() {
            failed.push(op.name());
        }
        reports.push(r);
    }
    run.dir.write_json("metrics/gradcheck.json", &json!({ "passed": failed.is_empty(), "reports": reports }))?;
    run.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn analyze_dist(a: &Args) -> Result<()> {
    let mut cfg: config::DistConfig = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = load_manifest(&cfg.manifest)?;
    let mut run = Run::open(a, "analyze-dist", &cfg)?;
    run.write_manifest(&manifest)?;
    let mut images: Vec<GrayImage> = Vec::new();
    let mut groups = Vec::new();
    for r in manifest.records.iter().filter(|r| a.split.is_none() || r.split == a.split) {
        images.push(load_gray(&manifest.resolve(&r.path))?);
        groups.push(match cfg.group_by {
            GroupBy::Label => r.label.clone(),
            GroupBy::Split => r.split.map_or_else(|| "unassigned".to_string(), |s| s.to_string()),
        });
    }
    let report = analyze_distribution(&images, &groups, cfg.k, cfg.hash_side, cfg.seed)?;
    run.dir.write_json("metrics/distribution.json", &report)?;
    run.dir.write_text("metrics/distribution_points.csv", &report.points_csv())?;
    run.finish()
}

pub fn ablate(a: &Args) -> Result<()> {
    let mut cfg: config::AblateConfig = config::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.ablation.train.seed = s;
    }
    cfg.ablation.train.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let mut run = Run::open(a, "ablate", &cfg)?;
    run.write_manifest(&manifest)?;
    let [train, val, test] = Split::ALL.map(|s| manifest.load_split(s));
    let rows = run_ablation(&train?, &val?, &test?, &cfg.ablation)?;
    let mut csv = String::from("variant,input_size,parameters,test_accuracy,macro_f1,macro_auc,best_epoch\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant,
            r.input_size,
            r.parameters,
            r.test_accuracy,
            r.macro_f1,
            r.macro_auc.map_or(String::new(), |v| v.to_string()),
            r.best_epoch
        ));
        println!("{:<16} {:>3}px accuracy {:.4}", r.variant, r.input_size, r.test_accuracy);
    }
    run.dir.write_json("metrics/ablation.json", &rows)?;
    run.dir.write_text("metrics/ablation.csv", &csv)?;
    run.finish()
}
