//! The four subcommands as library functions, so tests can drive them
//! without spawning processes.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use unisearch_core::corpus::Split;
use unisearch_core::eval::{ReportRow, VariantTables};
use unisearch_core::train::{prepare_split, run_stage, trace_to_csv, TraceRow};
use unisearch_core::{
    generate_corpus, load_checkpoint, run_ablation, save_checkpoint, AblationReport, CorpusManifest, Dataset,
    ModelBundle, ModelConfig, StageConfig, Variant, Vocab,
};

use crate::config::RunConfig;

const LOCK: &str = ".lock";
const VOCAB: &str = "vocab.tsv";

/// Exclusive ownership of a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "run directory {} is locked by another command (delete {} if it is stale)",
                dir.display(),
                path.display()
            )
        })?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<CorpusManifest> {
    let dir = out.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let _lock = RunLock::acquire(&dir)?;
    generate_corpus(&cfg.corpus, &dir).with_context(|| format!("generating corpus in {}", dir.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    ensure!(
        dir.join("manifest.json").is_file(),
        "no corpus at {} (run gen-data first)",
        dir.display()
    );
    Dataset::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn model_config(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    match m.vocab_size {
        0 => m.vocab_size = ds.vocab.len(),
        n if n != ds.vocab.len() => bail!("model.vocab_size is {n} but the corpus vocabulary has {}", ds.vocab.len()),
        _ => {}
    }
    m.validate()?;
    Ok(m)
}

/// Loads a checkpoint and refuses it unless its vocabulary file matches the
/// corpus vocabulary exactly.
pub fn load_checked(ckpt: &Path, vocab: &Vocab) -> Result<ModelBundle<f32>> {
    let text = fs::read_to_string(ckpt.join(VOCAB))
        .with_context(|| format!("checkpoint {} has no {VOCAB}", ckpt.display()))?;
    let ck_vocab = Vocab::read_tsv(text.as_bytes())?;
    ensure!(
        &ck_vocab == vocab,
        "vocabulary mismatch: checkpoint {} has {} words, corpus has {}",
        ckpt.display(),
        ck_vocab.len(),
        vocab.len()
    );
    let (bundle, _) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(bundle)
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub bundle: ModelBundle<f32>,
    pub trace: Vec<TraceRow>,
}

fn required_stage(s: &StageConfig) -> u8 {
    match s.stage {
        3 if !s.fused_queries => 1,
        n => n.saturating_sub(1),
    }
}

/// `train --stage N`: default input is `<out_dir>/stage{N-1}/checkpoint`
/// and the output run directory is `<out_dir>/stage{N}`.
pub fn train(cfg: &RunConfig, stage: u8, init: Option<&Path>, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let s = cfg.stage(stage)?.clone();
    let run_dir = run_dir.map_or_else(|| cfg.out_dir.join(format!("stage{stage}")), Path::to_path_buf);
    let default_init;
    let init = match init {
        Some(p) => Some(p),
        None if stage > 1 => {
            default_init = cfg.out_dir.join(format!("stage{}", required_stage(&s))).join("checkpoint");
            Some(default_init.as_path())
        }
        None => None,
    };
    train_with(cfg, &s, init, &run_dir)
}

/// Runs one stage into `run_dir`: resolved config first, then checkpoint,
/// vocabulary and loss trace.
pub fn train_with(cfg: &RunConfig, s: &StageConfig, init: Option<&Path>, run_dir: &Path) -> Result<TrainOutcome> {
    let _lock = RunLock::acquire(run_dir)?;
    cfg.write_resolved(run_dir)?;
    fs::write(run_dir.join("stage.json"), serde_json::to_string_pretty(s)? + "\n")?;

    let required = required_stage(s);
    let ckpt_dir = run_dir.join("checkpoint");
    if let Some(p) = init {
        ensure!(
            p.join("manifest.json").is_file(),
            "stage {required} checkpoint required (none at {})",
            p.display()
        );
        ensure!(
            fs::canonicalize(p).ok() != fs::canonicalize(&ckpt_dir).ok(),
            "refusing to overwrite the input checkpoint {}",
            p.display()
        );
    }
    let ds = load_dataset(&cfg.data_dir())?;
    let model = model_config(cfg, &ds)?;
    let bundle = match init {
        Some(p) => {
            let b = load_checked(p, &ds.vocab)?;
            ensure!(b.config == model, "checkpoint {} was trained with a different model config", p.display());
            b
        }
        None if required == 0 => ModelBundle::new(&model, cfg.seed)?,
        None => bail!("stage {required} checkpoint required"),
    };
    let data = prepare_split(&ds, Split::Train, &model)?;
    let out = run_stage(bundle, &data, s)?;

    save_checkpoint(&out.bundle, Some(&out.optim), &ckpt_dir)?;
    fs::write(ckpt_dir.join(VOCAB), ds.vocab.to_tsv())?;
    fs::write(run_dir.join("loss.csv"), trace_to_csv(&out.trace))?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        checkpoint: ckpt_dir,
        bundle: out.bundle,
        trace: out.trace,
    })
}

pub fn write_report(report: &AblationReport, tables: &[VariantTables], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.render_table())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    for t in tables {
        t.save(&out.join("tables").join(&t.name))?;
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub k: usize,
    pub split: Split,
    pub name: Option<&'a str>,
    pub out: Option<&'a Path>,
}

/// Single-variant report. Queries go through the NLU path when the
/// checkpoint has a trained NLU module.
pub fn eval(a: &EvalArgs<'_>) -> Result<AblationReport> {
    let ds = load_dataset(a.data)?;
    let bundle = load_checked(a.ckpt, &ds.vocab)?;
    let split = prepare_split(&ds, a.split, &bundle.config)?;
    let default_name;
    let name = match a.name {
        Some(n) => n,
        None => {
            default_name = variant_name(a.ckpt);
            &default_name
        }
    };
    let variant = Variant {
        name: name.to_string(),
        bundle: &bundle,
        fused_queries: bundle.uses_nlu(),
        has_nlu: bundle.uses_nlu(),
    };
    let (report, tables) = run_ablation(&split, &[variant], a.k)?;
    let out = a.out.map_or_else(|| a.ckpt.parent().unwrap_or(a.ckpt).join("eval"), Path::to_path_buf);
    let _lock = RunLock::acquire(&out)?;
    write_report(&report, &tables, &out)?;
    Ok(report)
}

/// `runs/x/stage1/checkpoint` → `stage1`.
fn variant_name(ckpt: &Path) -> String {
    let dir = if ckpt.file_name().is_some_and(|n| n == "checkpoint") { ckpt.parent() } else { Some(ckpt) };
    dir.and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub struct AblationOutcome {
    pub root: PathBuf,
    pub per_seed: Vec<(u64, AblationReport)>,
    /// Cell-wise mean over seeds.
    pub combined: AblationReport,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed{seed}"))
}

/// Reuses the corpus when its manifest records the same corpus config.
fn ensure_corpus(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.data_dir();
    if let Ok(text) = fs::read_to_string(dir.join("manifest.json")) {
        if let Ok(m) = serde_json::from_str::<CorpusManifest>(&text) {
            if m.config == cfg.corpus {
                return Ok(());
            }
        }
    }
    gen_data(cfg, None)?;
    Ok(())
}

/// Trains every recipe for every seed, evaluates all variants of a seed
/// together and writes per-seed plus seed-averaged reports under
/// `<out_dir>/ablation`.
pub fn ablate(cfg: &RunConfig) -> Result<AblationOutcome> {
    ensure!(!cfg.ablation.variants.is_empty(), "ablation needs at least one variant");
    ensure!(!cfg.ablation.seeds.is_empty(), "ablation needs at least one seed");
    let root = cfg.out_dir.join("ablation");
    let _lock = RunLock::acquire(&root)?;
    cfg.write_resolved(&root)?;
    ensure_corpus(cfg)?;

    let mut per_seed = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let mut scfg = cfg.clone();
        scfg.set_seed(seed);
        let dir = seed_dir(&root, seed);
        let mut bundles: Vec<(String, ModelBundle<f32>)> = Vec::new();
        for r in &cfg.ablation.variants {
            let s = scfg.recipe_stage(r)?;
            let init = r.init.as_ref().map(|n| dir.join(n).join("checkpoint"));
            eprintln!("seed {seed}: training {} (stage {})", r.name, r.stage);
            let out = train_with(&scfg, &s, init.as_deref(), &dir.join(&r.name))
                .with_context(|| format!("variant {} (seed {seed})", r.name))?;
            bundles.push((r.name.clone(), out.bundle));
        }
        let ds = load_dataset(&cfg.data_dir())?;
        let split = prepare_split(&ds, cfg.eval.split, &bundles[0].1.config)?;
        let variants: Vec<Variant<'_>> = bundles
            .iter()
            .map(|(name, b)| Variant {
                name: name.clone(),
                bundle: b,
                fused_queries: b.uses_nlu(),
                has_nlu: b.uses_nlu(),
            })
            .collect();
        let (report, tables) = run_ablation(&split, &variants, cfg.eval.k)?;
        write_report(&report, &tables, &dir)?;
        per_seed.push((seed, report));
    }
    let combined = average_reports(&per_seed.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    write_report(&combined, &[], &root)?;
    Ok(AblationOutcome { root, per_seed, combined })
}

/// Cell-wise mean of reports with identical row layouts.
pub fn average_reports(reports: &[AblationReport]) -> Result<AblationReport> {
    let first = reports.first().context("no reports to average")?;
    let key = |r: &ReportRow| (r.variant.clone(), r.language.clone(), r.task.clone(), r.metric.clone());
    let mut sums: BTreeMap<_, f64> = BTreeMap::new();
    for rep in reports {
        ensure!(rep.k == first.k && rep.rows.len() == first.rows.len(), "reports have different layouts");
        for r in &rep.rows {
            *sums.entry(key(r)).or_default() += r.value;
        }
    }
    let n = reports.len() as f64;
    let rows = first
        .rows
        .iter()
        .map(|r| ReportRow {
            value: sums[&key(r)] / n,
            ..r.clone()
        })
        .collect();
    Ok(AblationReport { k: first.k, rows })
}
