use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ncadapt::adapt::{self, predict_head, select_head, NcadaptModel, NqmRule, ParamFilter};
use ncadapt::autodiff::Rng;
use ncadapt::config::RunConfig;
use ncadapt::data::{load_domain, read_rti, write_domain, write_rti, DomainData};
use ncadapt::metrics::{
    build_dice_matrix, emit_report, fixed_json, DiceMatrix, InferenceMode, TestSet, Timings, TransferReport,
};
use ncadapt::nca::ArchConfig;
use ncadapt::persist::{load_checkpoint, save_checkpoint, Checkpoint};
use ncadapt::train::{continue_stage, train_baseline, EwcState, StageResult, Task};
use ncadapt::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::ConfigArgs;

const TIMINGS_FILE: &str = "timings.json";
const INFER_STREAM: u64 = 0x1AFE;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(data) = &args.data {
        cfg.data_dir = data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, domain: &str) -> Result<DomainData> {
    load_domain(&cfg.data_dir.join(domain))
}

fn write_timings(dir: &Path, timings: &Timings) -> Result<()> {
    let path = dir.join(TIMINGS_FILE);
    fs::write(&path, fixed_json(&serde_json::to_value(timings)?)).map_err(|e| Error::Io { path, source: e })
}

fn read_timings(dir: &Path) -> Timings {
    fs::read_to_string(dir.join(TIMINGS_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn save_stage(out: &Path, cfg: &RunConfig, model: NcadaptModel, result: StageResult, ewc: Vec<EwcState>) -> Result<()> {
    let seconds = result.report.wall_seconds;
    let ckpt = Checkpoint {
        stage: model.domains().len(),
        model,
        config_hash: cfg.hash(),
        optimizer: Some(result.optimizer),
        ewc,
        report: Some(result.report),
    };
    save_checkpoint(out, &ckpt)?;
    write_timings(out, &Timings::from([("train_seconds".to_string(), seconds)]))?;
    let r = ckpt.report.as_ref().expect("just set");
    println!(
        "stage {} ({}) -> {}: final loss {:.6}, trainable {}, stored {}",
        r.stage,
        r.label,
        out.display(),
        r.final_loss,
        r.trainable_params,
        r.stored_params
    );
    Ok(())
}

pub fn gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    for spec in cfg.domains() {
        let m = write_domain(&cfg.data_dir, &spec, cfg.data.test_fraction, cfg.data.split_seed)?;
        println!(
            "{}: {} cases ({} train, {} test) at {:?}",
            spec.name,
            m.cases.len(),
            m.split.train.len(),
            m.split.test.len(),
            spec.resolution
        );
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, domain: &str, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let data = load_data(&cfg, domain)?;
    let train_cfg = cfg.train_config();
    let mut model = NcadaptModel::new(cfg.arch.clone(), cfg.policy, cfg.perception_scope, cfg.seed)?;
    let mut ewc = Vec::new();
    let task = Task {
        label: domain,
        train: &data.train,
    };
    let result = continue_stage(&mut model, task, &train_cfg, cfg.policy, &mut ewc)?;
    save_stage(out, &cfg, model, result, ewc)
}

pub fn adapt(args: &ConfigArgs, from: &Path, domain: &str, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let prev = load_checkpoint(from)?;
    let mut model = prev.model;
    if prev.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was trained under config {}, the current config hashes to {}",
            from.display(),
            prev.config_hash,
            cfg.hash()
        )));
    }
    let data = load_data(&cfg, domain)?;
    let before = model.digests();
    let mut ewc = prev.ewc;
    let task = Task {
        label: domain,
        train: &data.train,
    };
    let policy = model.policy();
    let result = continue_stage(&mut model, task, &cfg.train_config(), policy, &mut ewc)?;

    // Tensors that were not trainable in this stage must be byte-identical.
    let trainable: BTreeMap<&str, bool> = model.params().iter().map(|p| (p.name.as_str(), p.trainable)).collect();
    let after = model.digests();
    let mut checked = 0;
    for (name, digest) in &before {
        if trainable.get(name.as_str()) == Some(&false) {
            checked += 1;
            if after.get(name) != Some(digest) {
                return Err(Error::Data(format!("hash audit failed: frozen tensor '{name}' changed")));
            }
        }
    }
    println!("hash audit: {checked} frozen tensors unchanged");
    save_stage(out, &cfg, model, result, ewc)
}

pub fn baseline(args: &ConfigArgs, domain: &str, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let data = load_data(&cfg, domain)?;
    let task = Task {
        label: domain,
        train: &data.train,
    };
    let (model, result) = train_baseline(task, &cfg.arch, &cfg.train_config())?;
    save_stage(out, &cfg, model, result, Vec::new())
}

/// Output of `eval`, input of `report`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOutput {
    pub config_hash: String,
    pub mode: InferenceMode,
    pub trainable_params: Vec<usize>,
    pub stored_params: Vec<usize>,
    pub timings: Timings,
    pub matrix: DiceMatrix,
}

fn load_all(dirs: &[PathBuf], hash: &str) -> Result<Vec<Checkpoint>> {
    dirs.iter()
        .map(|d| {
            let c = load_checkpoint(d)?;
            if c.config_hash != hash {
                return Err(Error::Config(format!("{} was trained under a different config", d.display())));
            }
            Ok(c)
        })
        .collect()
}

pub fn eval(
    args: &ConfigArgs,
    stages: &[PathBuf],
    baselines: &[PathBuf],
    domains: &[String],
    mode: Option<InferenceMode>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    // The hash is taken before the mode override: how a model is evaluated
    // is not part of how it was trained.
    let hash = cfg.hash();
    if let Some(m) = mode {
        cfg.inference_mode = m;
    }
    if stages.len() != domains.len() || baselines.len() != domains.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stages and {} baselines for {} domains",
            stages.len(),
            baselines.len(),
            domains.len()
        )));
    }
    let stage_ckpts = load_all(stages, &hash)?;
    let base_ckpts = load_all(baselines, &hash)?;
    for (i, c) in stage_ckpts.iter().enumerate() {
        if c.stage != i + 1 {
            return Err(Error::InvalidArgument(format!("{} holds stage {}, expected {}", stages[i].display(), c.stage, i + 1)));
        }
    }
    let data: Vec<DomainData> = domains.iter().map(|d| load_data(&cfg, d)).collect::<Result<_>>()?;
    let tests: Vec<TestSet> = domains
        .iter()
        .zip(&data)
        .map(|(label, d)| TestSet { label, cases: &d.test })
        .collect();
    let start = Instant::now();
    let models: Vec<NcadaptModel> = stage_ckpts.iter().map(|c| c.model.clone()).collect();
    let refs: Vec<NcadaptModel> = base_ckpts.iter().map(|c| c.model.clone()).collect();
    let matrix = build_dice_matrix(&models, &refs, &tests, &cfg.eval_config())?;
    let mut timings = Timings::new();
    for (i, d) in stages.iter().enumerate() {
        if let Some(s) = read_timings(d).get("train_seconds") {
            timings.insert(format!("stage{}_train_seconds", i + 1), *s);
        }
    }
    for (i, d) in baselines.iter().enumerate() {
        if let Some(s) = read_timings(d).get("train_seconds") {
            timings.insert(format!("baseline{}_train_seconds", i + 1), *s);
        }
    }
    timings.insert("eval_seconds".into(), start.elapsed().as_secs_f64());
    let output = EvalOutput {
        config_hash: hash,
        mode: cfg.inference_mode,
        trainable_params: stage_ckpts
            .iter()
            .map(|c| c.report.as_ref().map_or(0, |r| r.trainable_params))
            .collect(),
        stored_params: stage_ckpts
            .iter()
            .map(|c| c.model.count_params(ParamFilter::All))
            .collect(),
        timings,
        matrix,
    };
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(out, text).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for (i, row) in output.matrix.d.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|x| format!("{:.4}", x)).collect();
        println!("stage{}: {}", i + 1, cells.join(" "));
    }
    let b: Vec<String> = output.matrix.b.iter().map(|x| format!("{:.4}", x)).collect();
    println!("baseline: {}", b.join(" "));
    Ok(())
}

pub fn report(args: &ConfigArgs, eval: &Path, out: &Path) -> Result<()> {
    let _cfg = load_config(args)?;
    let text = fs::read_to_string(eval).map_err(|e| Error::Io {
        path: eval.to_path_buf(),
        source: e,
    })?;
    let ev: EvalOutput = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: eval.to_path_buf(),
        reason: e.to_string(),
    })?;
    let report = TransferReport::new(&ev.matrix, ev.trainable_params, ev.stored_params, ev.config_hash)?;
    let written = emit_report(out, &report, Some(&ev.timings))?;
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "dice {:.2} ± {:.2}, bwt {} ± {}, fwt {} ± {}",
        report.final_dice_mean,
        report.final_dice_sd,
        show(report.bwt_mean),
        show(report.bwt_sd),
        show(report.fwt_mean),
        show(report.fwt_sd)
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn infer(
    checkpoint: &Path,
    image: &Path,
    domain: &str,
    samples: usize,
    rule: NqmRule,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let img = read_rti(image)?;
    let rng = Rng::new(seed, INFER_STREAM);
    let (chosen, mask, scores) = if domain.eq_ignore_ascii_case("auto") {
        let c = select_head(&model, &img, samples, &rng, rule)?;
        (c.domain, c.prediction, c.scores)
    } else {
        let d: usize = domain
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("--domain must be 'auto' or a domain id, got '{domain}'")))?;
        let p = predict_head(&model, &img, d, samples, &rng)?;
        let nqm = p.nqm;
        (d, p.mask, vec![(d, nqm)])
    };
    let label = &model.domains()[chosen - 1].label;
    let foreground = mask.data().iter().filter(|&&v| v > 0.5).count();
    let scores: BTreeMap<String, Option<f64>> = scores
        .iter()
        .map(|&(d, s)| (d.to_string(), s.is_finite().then_some(s)))
        .collect();
    println!(
        "{}",
        serde_json::json!({"domain": chosen, "label": label, "foreground": foreground, "nqm": scores})
    );
    if let Some(path) = out {
        write_rti(path, &mask)?;
    }
    Ok(())
}

pub fn param_audit(arch: &str) -> Result<()> {
    let arch = match arch.to_ascii_lowercase().as_str() {
        "default2d" | "2d" => ArchConfig::default_2d(),
        "default3d" | "3d" => ArchConfig::default_3d(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: PathBuf::from(path),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?
        }
    };
    let mut mismatch = false;
    for row in adapt::param_audit(&arch)? {
        match row.reference {
            Some(r) => {
                let ok = r == row.count;
                mismatch |= !ok;
                println!("{}={}\treference={}\t{}", row.name, row.count, r, if ok { "ok" } else { "MISMATCH" });
            }
            None => println!("{}={}", row.name, row.count),
        }
    }
    if mismatch {
        return Err(Error::Data("parameter counts differ from the reference values".into()));
    }
    Ok(())
}
