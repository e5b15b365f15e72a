use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use petduet::blob;
use petduet::config::ModelConfig;
use petduet::data_synth::{dataset_dirs, generate_dataset, load_dataset, verify_dataset, Dataset, SceneSpec};
use petduet::detector::{load_checkpoint, save_checkpoint, Model};
use petduet::evalproto::{
    eval_text, eval_visual_g, eval_visual_i, extract_global_prompts, GlobalPrompts, Protocol, ProtocolConfig,
};
use petduet::training::{
    pretrain_text_route, run_ablation_grid, run_schedule, write_ablation_csv, FreezeSpec, RunLedger, TrainConfig,
    TrainData, TrainState, Variant,
};

use crate::{AblateArgs, Corpus, EvalArgs, ExtractArgs, Freeze, GenDataArgs, InitConfigArgs, PlotArgs, ReproduceArgs, TrainArgs};

/// Bad invocation; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            model: ModelConfig::preset(name).map_err(|e| usage(e.to_string()))?,
            train: TrainConfig::preset(name).map_err(|e| usage(e.to_string()))?,
        })
    }

    fn resolve(config: &Option<PathBuf>, preset: &str) -> Result<Self> {
        match config {
            Some(p) => blob::read_json(p).with_context(|| format!("reading run config {}", p.display())),
            None => Self::preset(preset),
        }
    }
}

/// Advisory lock on an output directory, released on drop.
pub struct OutLock(PathBuf);

impl OutLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(".petduet.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .with_context(|| format!("{} is locked by another command (remove {} if stale)", dir.display(), p.display()))?;
        Ok(OutLock(p))
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn data_root(arg: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = arg {
        return Ok(p.clone());
    }
    match std::env::var_os("PETDUET_CACHE") {
        Some(c) => Ok(PathBuf::from(c).join("data")),
        None => Err(usage("no --data given and PETDUET_CACHE is unset")),
    }
}

fn load_root(root: &Path) -> Result<Vec<(PathBuf, String, Dataset)>> {
    let dirs = dataset_dirs(root).with_context(|| format!("listing datasets under {}", root.display()))?;
    if dirs.is_empty() {
        bail!("no datasets under {}", root.display());
    }
    dirs.into_iter()
        .map(|d| {
            let (m, ds) = load_dataset(&d)?;
            verify_dataset(&d, &m)?;
            Ok((d, m.content_hash(), ds))
        })
        .collect()
}

fn load_model(ckpt: &Path) -> Result<Model<f32>> {
    let ck = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(ck.into_model()?)
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let specs: Vec<SceneSpec> = match &a.spec {
        Some(p) => blob::read_json(p).with_context(|| format!("reading {}", p.display()))?,
        None => match a.corpus {
            Corpus::Pairs => SceneSpec::confusable_pair(a.image_size),
            Corpus::Distinct => SceneSpec::default_pair(a.image_size),
            Corpus::Wide => SceneSpec::wide_pair(a.image_size),
        },
    };
    for s in &specs {
        s.validate().map_err(|e| usage(format!("invalid scene spec {}: {e}", s.name)))?;
    }
    if a.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    let _lock = OutLock::acquire(&a.out)?;
    for s in &specs {
        let dir = a.out.join(&s.name);
        refuse_existing(&dir.join("manifest.json"), a.force)?;
        let m = generate_dataset(s, a.images, a.seed, &dir)?;
        log::info!("{}: {} images, content {}", s.name, m.n_images, &m.content_hash()[..12]);
    }
    Ok(())
}

pub fn init_config(a: &InitConfigArgs) -> Result<()> {
    refuse_existing(&a.out, a.force)?;
    blob::write_json(&a.out, &RunConfig::preset(&a.preset)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunManifest {
    run_id: String,
    config_hash: String,
    train_config_hash: String,
    datasets: BTreeMap<String, String>,
    checkpoint: String,
    checkpoint_sha256: String,
    pretrained_sha256: Option<String>,
    steps: usize,
    started_unix: u64,
    finished_unix: u64,
}

pub fn train(a: &TrainArgs, text_only: bool) -> Result<()> {
    let mut rc = RunConfig::resolve(&a.config, &a.preset)?;
    if let Some(s) = a.seed {
        rc.model.seed = s;
        rc.train.seed = s;
    }
    if let Some(n) = a.steps {
        rc.train.max_steps = Some(n);
    }
    if let Some(v) = a.variant {
        rc.train.variant = v;
    }
    rc.train.freeze_spec = match (a.freeze, &a.pretrained) {
        (Freeze::Auto, Some(_)) => FreezeSpec::Paper,
        (Freeze::Auto, None) => rc.train.freeze_spec,
        (Freeze::None, _) => FreezeSpec::None,
        (Freeze::Paper, _) => FreezeSpec::Paper,
    };
    rc.model.validate().map_err(|e| usage(e.to_string()))?;
    rc.train.validate().map_err(|e| usage(e.to_string()))?;
    let root = data_root(&a.data)?;
    let final_ckpt = a.out.join("model.bin");
    refuse_existing(&final_ckpt, a.force || a.resume.is_some())?;
    let _lock = OutLock::acquire(&a.out)?;
    let started = unix_now();
    let loaded = load_root(&root)?;
    let data = TrainData::new(loaded.iter().map(|(_, _, d)| d.split(false)).collect())?;
    let mut state = match &a.resume {
        Some(ck) => {
            let st = TrainState::<f32>::resume(ck, &rc.train)?;
            if st.model.cfg.hash() != rc.model.hash() {
                bail!("resume checkpoint was written for a different model configuration");
            }
            st
        }
        None => {
            let mut model = Model::<f32>::new(rc.model.clone())?;
            if let Some(p) = &a.pretrained {
                load_checkpoint(p)
                    .with_context(|| format!("loading {}", p.display()))?
                    .load_into(&mut model)?;
            }
            TrainState::new(model, &rc.train)
        }
    };
    blob::write_json(&a.out.join("run_config.json"), &rc)?;
    if text_only {
        pretrain_text_route(&mut state, &data, &rc.train, Some(&a.out))?;
    } else {
        run_schedule(&mut state, &data, &rc.train, Some(&a.out))?;
    }
    if let Some((first, last)) = state.ledger.loss_trend() {
        log::info!("median loss first tenth {first:.4}, last tenth {last:.4}");
    }
    let meta = serde_json::json!({ "step": state.step, "variant": rc.train.variant, "text_only": text_only });
    let sha = save_checkpoint(&final_ckpt, &state.model, &state.opt.export(&state.model), meta)?;
    state.ledger.write(&a.out.join("ledger.csv"), &a.out.join("ledger.jsonl"))?;
    let datasets: BTreeMap<String, String> =
        loaded.iter().map(|(_, h, d)| (d.spec.name.clone(), h.clone())).collect();
    let ds_hashes: Vec<&str> = datasets.values().map(String::as_str).collect();
    let mut parts = vec![rc.model.hash(), rc.train.hash()];
    parts.extend(ds_hashes.iter().map(|s| s.to_string()));
    let manifest = RunManifest {
        run_id: short_hash(&parts.iter().map(String::as_str).collect::<Vec<_>>()),
        config_hash: rc.model.hash(),
        train_config_hash: rc.train.hash(),
        datasets,
        checkpoint: final_ckpt.display().to_string(),
        checkpoint_sha256: sha,
        pretrained_sha256: a.pretrained.as_deref().map(blob::sha256_file).transpose()?,
        steps: state.step,
        started_unix: started,
        finished_unix: unix_now(),
    };
    blob::write_json(&a.out.join("run_manifest.json"), &manifest)?;
    log::info!("wrote {} (run {})", final_ckpt.display(), manifest.run_id);
    Ok(())
}

pub fn extract_prompts(a: &ExtractArgs) -> Result<()> {
    if a.per_category == 0 {
        return Err(usage("--per-category must be at least 1"));
    }
    refuse_existing(&a.out, a.force)?;
    let model = load_model(&a.ckpt)?;
    let (_, ds) = load_dataset(&a.dataset)?;
    let cfg = ProtocolConfig {
        visual_g_images_per_category: a.per_category,
        ..ProtocolConfig::new(Protocol::VisualG, a.seed)
    };
    let gp = extract_global_prompts(&model, &ds.split(false), &cfg)?;
    for c in &gp.missing {
        log::warn!("category {c} has no training image; listed as missing");
    }
    gp.save(&a.out)?;
    log::info!("wrote {} prompts to {}", gp.prompts.len(), a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let (_, ds) = load_dataset(&a.dataset)?;
    let val = ds.split(true);
    let report_path = a.out.join(format!("{}-{}.json", a.protocol, ds.spec.name));
    refuse_existing(&report_path, a.force)?;
    let _lock = OutLock::acquire(&a.out)?;
    let cfg = ProtocolConfig::new(a.protocol, a.seed);
    let t = Instant::now();
    let report = match a.protocol {
        Protocol::VisualI => eval_visual_i(&model, &val, &cfg)?,
        Protocol::Text => eval_text(&model, &val, &cfg)?,
        Protocol::VisualG => {
            let p = a.prompts.as_ref().ok_or_else(|| usage("visual-g needs --prompts"))?;
            let gp = GlobalPrompts::load(p)?;
            eval_visual_g(&model, &val, &gp, &cfg)?
        }
    };
    let wall = t.elapsed().as_secs_f64();
    let run_id = match &a.run_id {
        Some(r) => r.clone(),
        None => blob::sha256_file(&a.ckpt)?[..12].to_string(),
    };
    report.write_json(&report_path)?;
    report.append_csv(&a.out.join("metrics.csv"), &run_id, (!a.deterministic).then_some(wall))?;
    log::info!("{} on {}: AP {:.4} AP50 {:.4}", a.protocol, ds.spec.name, report.ap, report.ap50);
    Ok(())
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    if a.ledger.is_none() && a.ablation.is_none() {
        return Err(usage("give --ledger and/or --ablation"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(p) = &a.ledger {
        let ledger = RunLedger::read_jsonl(p)?;
        if ledger.entries.is_empty() {
            log::warn!("ledger {} is empty; nothing to plot", p.display());
        } else {
            fs::write(a.out.join("loss.svg"), crate::plot::loss_curve(&ledger))?;
        }
    }
    if let Some(p) = &a.ablation {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows = crate::plot::parse_ablation(&text)?;
        if rows.is_empty() {
            log::warn!("ablation table {} is empty; nothing to plot", p.display());
        } else {
            fs::write(a.out.join("ablation.svg"), crate::plot::ablation_bars(&rows))?;
        }
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let rc = RunConfig::resolve(&a.config, &a.preset)?;
    let root = data_root(&a.data)?;
    let out_csv = a.out.join("ablation.csv");
    refuse_existing(&out_csv, a.force)?;
    let _lock = OutLock::acquire(&a.out)?;
    let loaded = load_root(&root)?;
    let train: Vec<Dataset> = loaded.iter().map(|(_, _, d)| d.split(false)).collect();
    let val: Vec<Dataset> = loaded.iter().map(|(_, _, d)| d.split(true)).collect();
    let start = a.pretrained.as_deref().map(load_model).transpose()?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let tc = TrainConfig {
            seed,
            max_steps: a.steps.or(rc.train.max_steps),
            freeze_spec: if start.is_some() { FreezeSpec::Paper } else { rc.train.freeze_spec },
            ..rc.train.clone()
        };
        let mc = match &start {
            Some(m) => m.cfg.clone(),
            None => ModelConfig { seed, ..rc.model.clone() },
        };
        rows.extend(run_ablation_grid(&mc, start.as_ref(), &train, &val, &tc, &Variant::ALL)?);
        write_ablation_csv(&out_csv, &rows)?;
    }
    log::info!("wrote {}", out_csv.display());
    Ok(())
}

pub fn reproduce(a: &ReproduceArgs) -> Result<()> {
    let out = &a.out;
    let data = out.join("data");
    gen_data(&GenDataArgs {
        spec: None,
        corpus: a.corpus,
        out: data.clone(),
        seed: a.seed,
        images: a.images,
        image_size: 64,
        force: a.force,
    })?;
    let base = |dir: &str, pretrained: Option<PathBuf>, steps: Option<usize>| TrainArgs {
        config: None,
        preset: "desk-scale".into(),
        data: Some(data.clone()),
        out: out.join(dir),
        pretrained,
        resume: None,
        variant: Some(Variant::Full),
        freeze: Freeze::Auto,
        seed: Some(a.seed),
        steps,
        force: a.force,
    };
    train(&base("pretrain", None, Some(a.pretrain_steps)), true)?;
    let pre = out.join("pretrain").join("model.bin");
    train(&base("train", Some(pre), a.steps), false)?;
    let ckpt = out.join("train").join("model.bin");
    let eval_dir = out.join("eval");
    if a.force {
        let _ = fs::remove_file(eval_dir.join("metrics.csv"));
    }
    let run_id = blob::sha256_file(&ckpt)?[..12].to_string();
    for dir in dataset_dirs(&data)? {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let prompts = out.join("prompts").join(format!("{name}.bin"));
        extract_prompts(&ExtractArgs {
            ckpt: ckpt.clone(),
            dataset: dir.clone(),
            out: prompts.clone(),
            per_category: 16,
            seed: a.seed,
            force: a.force,
        })?;
        for protocol in [Protocol::VisualI, Protocol::VisualG, Protocol::Text] {
            eval(&EvalArgs {
                ckpt: ckpt.clone(),
                dataset: dir.clone(),
                protocol,
                prompts: Some(prompts.clone()),
                seed: a.seed,
                out: eval_dir.clone(),
                run_id: Some(run_id.clone()),
                deterministic: true,
                force: a.force,
            })?;
        }
    }
    plot(&PlotArgs {
        ledger: Some(out.join("train").join("ledger.jsonl")),
        ablation: None,
        out: out.join("plots"),
    })?;
    log::info!("metrics in {}", eval_dir.join("metrics.csv").display());
    Ok(())
}
