use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bifuser::config::RunConfig;
use bifuser::eval::{count_flops, export_attention, r_rule};
use bifuser::imaging::{generate_synthetic, load_unannotated, save_vessel, split_four_to_one, CanonicalSample, Manifest, ManifestRow, Preprocessor};
use bifuser::model::{fit, Checkpoint, ModelConfig};
use bifuser::BiFuser32;

use crate::{parse_split, Common, Invalid};

/// Resolves the run configuration: preset, then `--config`, then flags.
fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &common.preset {
        overrides.push(("preset".to_string(), p.clone()));
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(m) = common.input_mode {
        overrides.push(("model.input_mode".into(), m.to_string()));
    }
    if let Some(r) = common.reduce_recover {
        overrides.push(("model.reduce_recover".into(), r.to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    Ok(RunConfig::resolve("paper-512", common.config.as_deref(), &overrides)?)
}

fn run_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("resolved.cfg"), cfg.to_kv())?;
    Ok(())
}

fn load_split(manifest: &Manifest, split: Option<bifuser::imaging::Split>, pre: &Preprocessor) -> Result<Vec<CanonicalSample>> {
    let indices: Vec<usize> = match split {
        Some(s) => manifest.indices(s),
        None => (0..manifest.len()).collect(),
    };
    indices
        .into_iter()
        .map(|i| {
            let raw = manifest.sample(i)?;
            let mut s = pre.run(&raw).with_context(|| format!("preprocessing {}", manifest.id(i)))?;
            s.id = manifest.id(i);
            Ok(s)
        })
        .collect()
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.manifest.clone().ok_or_else(|| Invalid("no manifest given; pass --manifest or set data.manifest".into()).into())
}

fn load_checkpoint(common: &Common, path: &Path) -> Result<BiFuser32> {
    let loaded = Checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let mut model = loaded.model;
    if let Some(r) = common.reduce_recover {
        if model.config.bti.iter().any(|b| b.strategy != r) {
            return Err(Invalid(format!(
                "checkpoint was trained with a different reduce/recover strategy than {r}; train with --reduce-recover {r}"
            ))
            .into());
        }
    }
    if let Some(m) = common.input_mode {
        if m.satellite_channels() != model.config.input_mode.satellite_channels() {
            return Err(Invalid(format!(
                "checkpoint satellite stream expects {} channels but {m} feeds {}",
                model.config.input_mode.satellite_channels(),
                m.satellite_channels()
            ))
            .into());
        }
        model.config.input_mode = m;
    }
    Ok(model)
}

pub fn synth(common: &Common, count: Option<usize>, size: Option<usize>) -> Result<()> {
    let cfg = resolve(common, &[("data.synth_count", count.map(|c| c.to_string())), ("data.synth_size", size.map(|s| s.to_string()))])?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/synth"));
    if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() && !common.force {
        return Err(Invalid(format!("refusing to write into non-empty {}; pass --force", dir.display())).into());
    }
    let synth = cfg.synthetic_config();
    synth.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("vessels"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let ids: Vec<String> = (0..cfg.synth_count).map(|i| format!("synth_{i:04}")).collect();
    let splits = split_four_to_one(&ids.iter().map(String::as_str).collect::<Vec<_>>());
    let mut rows = Vec::with_capacity(ids.len());
    for (id, split) in ids.iter().zip(splits) {
        let (raw, _) = generate_synthetic(&synth, &mut rng)?;
        let image_path = format!("images/{id}.png");
        let vessel_path = format!("vessels/{id}.png");
        raw.fundus.save(dir.join(&image_path)).with_context(|| format!("writing {image_path}"))?;
        save_vessel(raw.vessel.as_ref().expect("generator draws vessels"), &dir.join(&vessel_path))?;
        rows.push(ManifestRow {
            image_path,
            vessel_path,
            fovea_x: raw.annotation.fovea.x,
            fovea_y: raw.annotation.fovea.y,
            od_radius_px: raw.annotation.od_radius,
            split: split.to_string(),
        });
    }
    Manifest::write(&dir.join("manifest.csv"), &rows)?;
    write_resolved(&dir, &cfg)?;
    println!("wrote {} samples to {}", rows.len(), dir.display());
    Ok(())
}

pub fn train(common: &Common, manifest: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common, &[("data.manifest", manifest.map(|p| p.display().to_string()))])?;
    let dir = run_dir(common, "train")?;
    let ckpt = dir.join("model.ckpt");
    if ckpt.exists() && !common.force {
        return Err(Invalid(format!("{} exists; pass --force to overwrite", ckpt.display())).into());
    }
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    cfg.train.validate()?;
    let manifest = Manifest::load(&manifest_path(&cfg)?)?;
    let pre = Preprocessor::new(model_cfg.size).with_mask_radius(model_cfg.mask_radius);
    let mut samples = load_split(&manifest, Some(bifuser::imaging::Split::Train), &pre)?;
    if cfg.holdout >= samples.len() {
        return Err(Invalid(format!("holdout {} leaves no training samples out of {}", cfg.holdout, samples.len())).into());
    }
    let val = samples.split_off(samples.len() - cfg.holdout);
    write_resolved(&dir, &cfg)?;
    let mut model = BiFuser32::new(model_cfg, cfg.seed())?;
    let report = fit(&mut model, &samples, &val, &cfg.train, Some(&ckpt))?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["epoch", "steps", "lr", "train_loss", "val_error_px", "seconds"])?;
    for e in &report.epochs {
        let val = e.val_error_px.map_or(String::new(), |v| v.to_string());
        w.write_record([e.epoch.to_string(), e.steps.to_string(), e.lr.to_string(), e.train_loss.to_string(), val, e.seconds.to_string()])?;
    }
    w.flush()?;
    std::fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    let train_error = bifuser::model::mean_error(&model, &samples, cfg.train.batch_size, cfg.train.threshold)?;
    println!(
        "trained {} steps; best epoch {}; training-set error {train_error:.3}px; checkpoint {}",
        report.losses.len(),
        report.best_epoch,
        ckpt.display()
    );
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, manifest: Option<PathBuf>, split: &str) -> Result<()> {
    let cfg = resolve(common, &[("data.manifest", manifest.map(|p| p.display().to_string()))])?;
    let split = parse_split(split)?;
    let model = load_checkpoint(common, checkpoint)?;
    let dir = run_dir(common, "eval")?;
    let manifest = Manifest::load(&manifest_path(&cfg)?)?;
    let pre = Preprocessor::new(model.config.size).with_mask_radius(model.config.mask_radius);
    let samples = load_split(&manifest, split, &pre)?;
    if samples.is_empty() {
        return Err(Invalid("the selected split is empty".into()).into());
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&CanonicalSample> = chunk.iter().collect();
        preds.extend(model.predict(&refs, cfg.train.threshold)?.into_iter().map(|r| r.original));
    }
    let gts: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let report = r_rule(&preds, &gts)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("distances.csv"), &ids, &preds, &gts)?;
    write_resolved(&dir, &cfg)?;
    let a = report.accuracies;
    println!(
        "{} samples ({}): 1/4R {:.2}%  1/2R {:.2}%  1R {:.2}%  2R {:.2}%  mean error {:.3}px",
        samples.len(),
        model.config.input_mode,
        a[0],
        a[1],
        a[2],
        a[3],
        report.mean_error_px
    );
    Ok(())
}

pub fn predict(common: &Common, checkpoint: &Path, image: &Path, vessel: Option<&Path>) -> Result<()> {
    let cfg = resolve(common, &[])?;
    let model = load_checkpoint(common, checkpoint)?;
    let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let raw = load_unannotated(&id, image, vessel)?;
    let sample = Preprocessor::new(model.config.size).run(&raw)?;
    let result = model.predict(&[&sample], cfg.train.threshold)?.remove(0);
    let json = serde_json::json!({ "id": id, "result": result });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{id}_prediction.json")), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

pub fn flops(common: &Common) -> Result<()> {
    let cfg = resolve(common, &[])?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let f = count_flops(&model_cfg);
    print!("{}", f.table());
    println!("{:<24}{:>12.4} GFLOPs ({} FLOPs)", "attention n^2 d term", f.attention_term() as f64 / 1e9, f.attention_term());
    if model_cfg == ModelConfig::paper(512) {
        println!("{}", f.published_comparison());
    }
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("flops.json"), serde_json::to_string_pretty(&f)?)?;
        write_resolved(dir, &cfg)?;
    }
    Ok(())
}

pub fn viz(common: &Common, checkpoint: &Path, manifest: Option<PathBuf>, sample: Option<&str>) -> Result<()> {
    let cfg = resolve(common, &[("data.manifest", manifest.map(|p| p.display().to_string()))])?;
    let model = load_checkpoint(common, checkpoint)?;
    let dir = run_dir(common, "viz")?;
    let manifest = Manifest::load(&manifest_path(&cfg)?)?;
    let index = match sample {
        Some(id) => (0..manifest.len()).find(|&i| manifest.id(i) == id).ok_or_else(|| Invalid(format!("no sample {id:?} in the manifest")))?,
        None if manifest.is_empty() => return Err(Invalid("manifest is empty".into()).into()),
        None => 0,
    };
    let pre = Preprocessor::new(model.config.size).with_mask_radius(model.config.mask_radius);
    let s = pre.run(&manifest.sample(index)?)?;
    let (_, attention) = model.infer(&[&s])?;
    let id = manifest.id(index);
    let files = export_attention(&attention, 0, &s.fundus, &id, &dir)?;
    write_resolved(&dir, &cfg)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
