//! Subcommand implementations. Paths and results go to stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use spoofqa_core::backend::{
    open_backend, BackendDescriptor, BackendError, DetectorBackend, Endpoint, HealthStatus, RemoteClient,
};
use spoofqa_core::corpus::{
    build_balanced_subset, gen_synthetic_corpus, load_manifest, sample_balanced, ArtifactFamily, CorpusError,
    Split, SynthConfig,
};
use spoofqa_core::eval::{
    read_report_json, render_table, render_table_csv, run_predictions, summarize, write_predictions_csv,
    write_report_json, EvalError, EvalReport,
};
use spoofqa_core::lora::{attach_lora, LoraConfig, LoraError};
use spoofqa_core::model::checkpoint::{load_model, save_adapters, save_model, CheckpointError};
use spoofqa_core::model::{ModelConfig, MultimodalModel};
use spoofqa_core::promptkit::{render_prompt, TemplateId};
use spoofqa_core::train::{finetune, pretrain_format, PretrainConfig, TrainConfig, TrainError};

use crate::config::render_run_config;
use crate::{
    BackendArgs, BridgeHealthArgs, BuildSubsetsArgs, Command, EvalArgs, FinetuneArgs, GenCorpusArgs,
    InitModelArgs, ReportArgs, EXIT_BACKEND, EXIT_CONFIG, EXIT_DEGRADED, EXIT_INSUFFICIENT, EXIT_IO,
};

const EXIT_FAILURE: u8 = 1;

#[derive(Debug)]
pub struct CliErr {
    pub code: u8,
    pub msg: String,
}

impl CliErr {
    fn new(code: u8, msg: impl ToString) -> Self {
        Self {
            code,
            msg: msg.to_string(),
        }
    }

    fn config(msg: impl ToString) -> Self {
        Self::new(EXIT_CONFIG, msg)
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<CorpusError> for CliErr {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::InsufficientSpoof { .. } | CorpusError::EmptyClass { .. } => EXIT_INSUFFICIENT,
            CorpusError::Io(_) | CorpusError::Write(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e)
    }
}

impl From<CheckpointError> for CliErr {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e)
    }
}

impl From<BackendError> for CliErr {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Checkpoint(c) => c.into(),
            e => Self::new(EXIT_BACKEND, e),
        }
    }
}

impl From<EvalError> for CliErr {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::UndefinedMetric { .. } => EXIT_DEGRADED,
            EvalError::Io { .. } | EvalError::Csv { .. } => EXIT_IO,
            EvalError::Generation { .. } => EXIT_BACKEND,
            EvalError::Model(_) => EXIT_CONFIG,
        };
        Self::new(code, e)
    }
}

impl From<TrainError> for CliErr {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) | TrainError::Data(_) => EXIT_CONFIG,
            TrainError::Io { .. } => EXIT_IO,
            TrainError::Checkpoint(c) => return c.into(),
            _ => EXIT_FAILURE,
        };
        Self::new(code, e)
    }
}

impl From<LoraError> for CliErr {
    fn from(e: LoraError) -> Self {
        Self::config(e)
    }
}

pub fn run(command: Command, flags: &[String]) -> Result<(), CliErr> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a, flags),
        Command::BuildSubsets(a) => build_subsets(a, flags),
        Command::InitModel(a) => init_model(a, flags),
        Command::Zeroshot(a) => {
            if a.backend.adapter.is_some() {
                return Err(CliErr::config("zeroshot evaluates a base model; use eval for adapters"));
            }
            evaluate(a, "zeroshot", flags)
        }
        Command::Eval(a) => evaluate(a, "eval", flags),
        Command::Finetune(a) => run_finetune(a, flags),
        Command::Report(a) => report(a),
        Command::BridgeHealth(a) => bridge_health(a),
    }
}

fn prepare_out(out: &Path, command: &str, flags: &[String]) -> Result<(), CliErr> {
    fs::create_dir_all(out).map_err(|e| CliErr::io(out, e))?;
    let path = out.join("run_config.txt");
    fs::write(&path, render_run_config(command, flags)).map_err(|e| CliErr::io(&path, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliErr> {
    fs::write(path, text).map_err(|e| CliErr::io(path, e))
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliErr>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| CliErr::config(format!("--{what}: {e}"))))
        .collect()
}

fn parse_one<T: FromStr>(s: &str, what: &str) -> Result<T, CliErr>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| CliErr::config(format!("--{what}: {e}")))
}

fn gen_corpus(a: GenCorpusArgs, flags: &[String]) -> Result<(), CliErr> {
    let cfg = SynthConfig {
        n_bonafide: a.bonafide,
        n_spoof: a.spoof,
        duration_s: a.duration,
        artifact_families: parse_list::<ArtifactFamily>(&a.families, "families")?,
        seed: a.seed,
        split: parse_one(&a.split, "split")?,
    };
    cfg.validate()?;
    prepare_out(&a.out, "gen-corpus", flags)?;
    let m = gen_synthetic_corpus(&cfg, &a.out)?;
    let path = m.source.clone().unwrap_or_else(|| a.out.join("manifest.tsv"));
    log::info!("wrote {} utterances", m.len());
    println!("{}", path.display());
    Ok(())
}

fn build_subsets(a: BuildSubsetsArgs, flags: &[String]) -> Result<(), CliErr> {
    let splits = parse_list::<Split>(&a.splits, "splits")?;
    if splits.is_empty() {
        return Err(CliErr::config("--splits is empty"));
    }
    let manifest = load_manifest(&a.manifest)?;
    prepare_out(&a.out, "build-subsets", flags)?;
    for split in splits {
        if manifest.split(split).next().is_none() {
            log::warn!("split {split} has no utterances; skipped");
            continue;
        }
        let subset = build_balanced_subset(&manifest, split, a.seed)?;
        let subset_path = a.out.join(format!("{split}.subset"));
        subset.save(&subset_path)?;
        let mut materialized = subset.materialize(&manifest)?;
        let tsv_path = a.out.join(format!("{split}.tsv"));
        materialized.save(&tsv_path)?;
        log::info!(
            "{split}: {} bonafide + {} spoof",
            materialized.count(spoofqa_core::Label::Bonafide),
            materialized.count(spoofqa_core::Label::Spoof)
        );
        println!("{}", subset_path.display());
        println!("{}", tsv_path.display());
    }
    Ok(())
}

fn init_model(a: InitModelArgs, flags: &[String]) -> Result<(), CliErr> {
    let cfg = ModelConfig {
        d_model: a.d_model,
        n_enc_layers: a.enc_layers,
        n_dec_layers: a.dec_layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        adapter_stride: a.adapter_stride,
        ..ModelConfig::default()
    };
    cfg.validate().map_err(CliErr::config)?;
    let corpus = match (&a.corpus, a.pretrain_steps) {
        (_, 0) => None,
        (Some(p), _) => Some(load_manifest(p)?),
        (None, _) => return Err(CliErr::config("--corpus is required when --pretrain-steps > 0")),
    };
    prepare_out(&a.out, "init-model", flags)?;
    let mut model = MultimodalModel::init(cfg, a.seed).map_err(CliErr::config)?;
    if let Some(corpus) = corpus {
        let pcfg = PretrainConfig {
            steps: a.pretrain_steps,
            lr: a.pretrain_lr,
            seed: a.seed,
            ..PretrainConfig::default()
        };
        let (m, losses) = pretrain_format(model, &corpus, &pcfg)?;
        model = m;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            log::info!("format pretraining loss {first:.4} -> {last:.4}");
        }
    }
    let path = a.out.join("base.ckpt");
    save_model(&model, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn open(b: &BackendArgs) -> Result<Box<dyn DetectorBackend>, CliErr> {
    let desc = match (&b.endpoint, &b.model) {
        (Some(ep), _) => BackendDescriptor::Remote {
            endpoint: parse_one(ep, "endpoint")?,
            timeout_s: timeout(b.timeout)?,
            model: b.model_name.clone().unwrap_or_else(|| ep.clone()),
        },
        (None, Some(m)) => BackendDescriptor::Local {
            checkpoint: m.clone(),
            adapter: b.adapter.clone(),
        },
        (None, None) => return Err(CliErr::config("one of --model or --endpoint is required")),
    };
    Ok(open_backend(&desc)?)
}

fn timeout(t: f64) -> Result<f64, CliErr> {
    if t.is_finite() && t > 0.0 {
        Ok(t)
    } else {
        Err(CliErr::config(format!("--timeout must be positive, got {t}")))
    }
}

fn evaluate(a: EvalArgs, command: &str, flags: &[String]) -> Result<(), CliErr> {
    let mode: TemplateId = parse_one(&a.prompt, "prompt")?;
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(n) = a.sample {
        let seed = a.seed.ok_or_else(|| CliErr::config("--sample requires --seed"))?;
        manifest = sample_balanced(&manifest, n, seed)?;
    }
    if manifest.is_empty() {
        return Err(CliErr::config(format!("{} has no utterances", a.manifest.display())));
    }
    prepare_out(&a.out, command, flags)?;
    let backend = open(&a.backend)?;
    let name = match (&a.backend.model_name, &a.backend.adapter) {
        (Some(n), _) => n.clone(),
        (None, Some(ad)) => ad.display().to_string(),
        (None, None) => backend.name(),
    };
    let preds = run_predictions(backend.as_ref(), &manifest, mode, a.constrained);
    let pred_path = a.out.join("predictions.csv");
    write_predictions_csv(&preds, &pred_path)?;
    println!("{}", pred_path.display());

    let errors = preds.iter().filter(|p| p.error.is_some()).count();
    if errors == preds.len() {
        return Err(CliErr::new(
            EXIT_BACKEND,
            format!("backend {name} failed on every request ({errors})"),
        ));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut undefined = Vec::new();
    for t in mode.expand() {
        let subset: Vec<_> = preds.iter().filter(|p| p.template == t).cloned().collect();
        match summarize(&name, t.as_str(), &subset) {
            Ok(r) => reports.push(r),
            Err(e @ EvalError::UndefinedMetric { .. }) => undefined.push(format!("{t}: {e}")),
            Err(e) => return Err(e.into()),
        }
    }
    let summary_path = a.out.join("summary.json");
    write_report_json(&reports, &summary_path)?;
    let table = render_table(&reports);
    write_file(&a.out.join("table.txt"), &table)?;
    write_file(&a.out.join("table.csv"), &render_table_csv(&reports))?;
    println!("{}", summary_path.display());
    for r in &reports {
        println!(
            "{}\t{}\taccuracy={:.4}\tmacro_f1={:.4}\texcluded={}/{}",
            r.model, r.prompt, r.accuracy, r.macro_f1, r.n_excluded, r.n_total
        );
    }
    if !undefined.is_empty() {
        return Err(CliErr::new(EXIT_DEGRADED, undefined.join("; ")));
    }
    if let Some(r) = reports.iter().find(|r| r.degraded) {
        return Err(CliErr::new(
            EXIT_DEGRADED,
            format!(
                "degraded run: {} of {} {} requests failed",
                r.n_errors, r.n_total, r.prompt
            ),
        ));
    }
    Ok(())
}

fn run_finetune(a: FinetuneArgs, flags: &[String]) -> Result<(), CliErr> {
    let prompt_mode: TemplateId = parse_one(&a.prompt_mode, "prompt-mode")?;
    if prompt_mode == TemplateId::P2 {
        return Err(CliErr::config("--prompt-mode must be p1, p3 or multi"));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        prompt_mode,
        seed: a.seed,
        grad_clip: a.grad_clip,
        full_finetune: a.full_finetune,
        dev_constrained: a.dev_constrained,
    };
    cfg.validate()?;
    let train = load_manifest(&a.train)?;
    let dev = a.dev.as_ref().map(load_manifest).transpose()?;
    let mut base = load_model(&a.model)?;
    if !a.full_finetune {
        let targets: Vec<String> = a.targets.split(',').map(|s| s.trim().to_string()).collect();
        let lora = LoraConfig {
            rank: a.rank,
            alpha: a.alpha,
            dropout_p: a.lora_dropout,
            include_encoder: a.lora_encoder,
            ..LoraConfig::default()
        }
        .with_targets(&targets)?;
        base = attach_lora(base, lora, a.seed)?;
    }
    prepare_out(&a.out, "finetune", flags)?;
    let outcome = finetune(base, &train, dev.as_ref(), &cfg, Some(&a.out))?;
    let final_path: PathBuf = if a.full_finetune {
        let p = a.out.join("model.ckpt");
        save_model(&outcome.model, &p)?;
        p
    } else {
        let p = a.out.join("adapter.ckpt");
        save_adapters(&outcome.model, &p)?;
        p
    };
    if let Some(last) = outcome.history.records.last() {
        log::info!("final epoch {} loss {:.4}", last.epoch, last.loss);
    }
    println!("{}", final_path.display());
    println!("{}", a.out.join("history.csv").display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), CliErr> {
    let csv = match a.format.as_str() {
        "text" => false,
        "csv" => true,
        f => return Err(CliErr::config(format!("--format must be text or csv, got {f:?}"))),
    };
    let mut reports = Vec::new();
    for p in &a.inputs {
        reports.extend(read_report_json(p)?);
    }
    let text = render_table(&reports);
    let table_csv = render_table_csv(&reports);
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| CliErr::io(out, e))?;
        write_file(&out.join("table.txt"), &text)?;
        write_file(&out.join("table.csv"), &table_csv)?;
    }
    print!("{}", if csv { table_csv } else { text });
    Ok(())
}

fn bridge_health(a: BridgeHealthArgs) -> Result<(), CliErr> {
    let endpoint: Endpoint = parse_one(&a.endpoint, "endpoint")?;
    let secs = timeout(a.timeout)?;
    let health = match RemoteClient::connect(&endpoint, Duration::from_secs_f64(secs)) {
        Ok(mut client) => {
            client = client.with_name(&a.endpoint);
            if let Some(wav) = a.probe_wav {
                client = client.with_probe(wav, render_prompt(TemplateId::P1)[0].to_string());
            }
            client.healthcheck()
        }
        Err(e) => spoofqa_core::backend::Health {
            status: HealthStatus::Down,
            model: a.endpoint.clone(),
            detail: e.to_string(),
        },
    };
    println!(
        "{}",
        serde_json::to_string(&health).map_err(|e| CliErr::new(EXIT_FAILURE, e))?
    );
    match health.status {
        HealthStatus::Ready => Ok(()),
        HealthStatus::Degraded => Err(CliErr::new(EXIT_DEGRADED, format!("bridge degraded: {}", health.detail))),
        HealthStatus::Down => Err(CliErr::new(EXIT_BACKEND, format!("bridge down: {}", health.detail))),
    }
}
