use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tristream::analysis::{embed_dataset, knn_retrieve, probe, recall_at_k, EmbeddingIndex, ProbeHead, ProbeReport, ProbeTarget, RetrievalTarget};
use tristream::io::{read_dataset, write_dataset, Manifest, ManifestEntry, Split};
use tristream::structure::element_symbol;
use tristream::synth::{pair_potential_dataset, retrieval_corpus, PairPotential};
use tristream::theory::run_suite;
use tristream::train::{finetune, pretrain_from, Checkpoint, ForceMode, Metrics};
use tristream::{AtomicStructure, Model, Stream};

use crate::config::{with_steps, RunConfig};
use crate::{Command, HeadArg, ModeArg, SuiteArg, Synthetic};

/// Runs one command; `Ok(false)` means the command ran but a check failed.
pub fn run(command: Command, mut cfg: RunConfig) -> Result<bool> {
    let threads = cfg.threads();
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            warn!("worker pool already initialized: {e}");
        }
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let name = match &command {
        Command::Ingest(_) => "ingest",
        Command::Pretrain(a) => {
            cfg.pretrain.optimizer = with_steps(cfg.pretrain.optimizer.clone(), a.steps);
            "pretrain"
        }
        Command::Finetune(a) => {
            cfg.finetune.optimizer = with_steps(cfg.finetune.optimizer.clone(), a.steps);
            if let Some(m) = a.mode {
                cfg.finetune.mode = match m {
                    ModeArg::Conservative => ForceMode::Conservative,
                    ModeArg::Direct => ForceMode::Direct,
                };
            }
            "finetune"
        }
        Command::Embed(_) => "embed",
        Command::Retrieve(_) => "retrieve",
        Command::Probe(a) => {
            cfg.probe.shuffle_labels |= a.shuffle;
            "probe"
        }
        Command::Verify(a) => {
            if let Some(t) = a.trials {
                cfg.suite.trials = t;
            }
            "verify"
        }
        Command::Report(_) => "report",
    };
    echo_config(&cfg, name, &command)?;
    match command {
        Command::Ingest(a) => ingest(&cfg, &a).map(|_| true),
        Command::Pretrain(a) => run_pretrain(&cfg, &a).map(|_| true),
        Command::Finetune(a) => run_finetune(&cfg, &a).map(|_| true),
        Command::Embed(a) => embed(&cfg, &a).map(|_| true),
        Command::Retrieve(a) => retrieve(&cfg, &a).map(|_| true),
        Command::Probe(a) => run_probe(&cfg, &a).map(|_| true),
        Command::Verify(a) => verify(&cfg, &a),
        Command::Report(a) => report(&cfg, &a).map(|_| true),
    }
}

fn echo_config(cfg: &RunConfig, name: &str, command: &Command) -> Result<()> {
    let text = format!("# command: {command:?}\n{}", cfg.to_toml()?);
    let path = cfg.out.join(format!("{name}.config.toml"));
    fs::write(&path, &text)?;
    info!("effective configuration ({}):\n{text}", path.display());
    Ok(())
}

fn need<'a>(flag: Option<&'a PathBuf>, fallback: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    flag.or(fallback)
        .map(PathBuf::as_path)
        .ok_or_else(|| anyhow!("no {what} given (flag or [data] entry)"))
}

/// Reads an extended-XYZ file, or one split of a JSON manifest.
fn load_structures(path: &Path, split: Split) -> Result<Vec<AtomicStructure>> {
    let data = if path.extension().is_some_and(|e| e == "json") {
        let m = Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
        m.load_split(path.parent().unwrap_or(Path::new(".")), split)?
    } else {
        read_dataset(path).with_context(|| format!("reading {}", path.display()))?
    };
    info!("{}: {} structures", path.display(), data.len());
    Ok(data)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ck.model.config != cfg.model {
                warn!("using the model configuration stored in {}", p.display());
            }
            Ok(ck.model)
        }
        None => Ok(Model::new(cfg.model.clone(), cfg.seed)?),
    }
}

fn ingest(cfg: &RunConfig, a: &crate::IngestArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::new();
    for p in &a.inputs {
        data.extend(load_structures(p, Split::Train)?);
    }
    match a.synthetic {
        Some(Synthetic::Pair) => data.extend(pair_potential_dataset(&mut rng, a.count, &PairPotential::default())),
        Some(Synthetic::Retrieval) => data.extend(retrieval_corpus(&mut rng, a.count)),
        None => {}
    }
    if data.is_empty() {
        bail!("nothing to ingest: give input files or --synthetic");
    }
    if !(a.val_fraction >= 0.0 && a.test_fraction >= 0.0 && a.val_fraction + a.test_fraction < 1.0) {
        bail!("split fractions must be non-negative and sum below 1");
    }
    for (i, s) in data.iter().enumerate() {
        s.validate().with_context(|| format!("structure {i}"))?;
    }
    data.shuffle(&mut rng);
    let n = data.len();
    let n_test = (a.test_fraction * n as f64).round() as usize;
    let n_val = (a.val_fraction * n as f64).round() as usize;
    let test = data.split_off(n - n_test);
    let val = data.split_off(data.len() - n_val);
    let mut files = Vec::new();
    for (split, part, file) in [(Split::Train, &data, "train.extxyz"), (Split::Val, &val, "val.extxyz"), (Split::Test, &test, "test.extxyz")] {
        write_dataset(part, cfg.out.join(file))?;
        files.push(ManifestEntry { path: PathBuf::from(file), split });
    }
    Manifest { version: Manifest::VERSION, files, labels: Default::default() }.save(cfg.out.join("manifest.json"))?;

    let all: Vec<&AtomicStructure> = data.iter().chain(&val).chain(&test).collect();
    let atoms: usize = all.iter().map(|s| s.len()).sum();
    let mut elements: Vec<u8> = all.iter().flat_map(|s| s.species.iter().copied()).collect();
    elements.sort_unstable();
    elements.dedup();
    let mut keys: Vec<&str> = all.iter().flat_map(|s| s.labels.0.keys().map(String::as_str)).collect();
    keys.sort_unstable();
    keys.dedup();
    println!("structures\t{n}\ntrain\t{}\nval\t{}\ntest\t{}\natoms\t{atoms}", data.len(), val.len(), test.len());
    println!("elements\t{}", elements.iter().filter_map(|&z| element_symbol(z)).collect::<Vec<_>>().join(" "));
    println!("labels\t{}", keys.join(" "));
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, a: &crate::PretrainArgs) -> Result<()> {
    let path = need(a.data.as_ref(), cfg.data.pretrain.as_ref(), "pretraining data")?;
    let data = load_structures(path, Split::Train)?;
    let start = match &a.init {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Checkpoint::from_model(Model::new(cfg.model.clone(), cfg.seed)?),
    };
    let outcome = pretrain_from(start, &data, &cfg.pretrain)?;
    let ck = cfg.out.join("pretrain.ckpt");
    outcome.checkpoint.save(&ck)?;
    fs::write(cfg.out.join("pretrain_log.csv"), outcome.csv())?;
    if let Some(last) = outcome.log.last() {
        info!("step {} loss {:.6}", last.step, last.loss.total);
    }
    println!("{}", ck.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FinetuneSummary {
    mode: ForceMode,
    steps: usize,
    train: usize,
    initial: Metrics,
    metrics: Metrics,
}

fn run_finetune(cfg: &RunConfig, a: &crate::FinetuneArgs) -> Result<()> {
    let train_path = need(a.train.as_ref(), cfg.data.train.as_ref(), "training data")?;
    let train = load_structures(train_path, Split::Train)?;
    let held_out = match a.held_out.as_ref().or(cfg.data.held_out.as_ref()) {
        Some(p) => load_structures(p, Split::Val)?,
        None if train_path.extension().is_some_and(|e| e == "json") => load_structures(train_path, Split::Val)?,
        None => bail!("no held-out data given"),
    };
    let model = load_model(cfg, a.checkpoint.as_deref().or(cfg.data.checkpoint.as_deref()))?;
    let outcome = finetune(model, &train, &held_out, &cfg.finetune)?;
    outcome.checkpoint.save(cfg.out.join("finetune.ckpt"))?;
    fs::write(cfg.out.join("finetune_log.csv"), outcome.csv())?;
    let summary = FinetuneSummary {
        mode: cfg.finetune.mode,
        steps: cfg.finetune.optimizer.steps,
        train: train.len(),
        initial: outcome.initial,
        metrics: outcome.metrics,
    };
    fs::write(cfg.out.join("finetune_metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "energy MAE {:.3} meV/atom (from {:.3}), force MAE {:.3} meV/Å (from {:.3}) on {} structures",
        summary.metrics.energy_mae, summary.initial.energy_mae, summary.metrics.force_mae, summary.initial.force_mae, summary.metrics.structures
    );
    Ok(())
}

fn embed(cfg: &RunConfig, a: &crate::EmbedArgs) -> Result<()> {
    let path = need(a.data.as_ref(), cfg.data.embed.as_ref(), "data to embed")?;
    let data = load_structures(path, Split::Train)?;
    let ck = a.checkpoint.as_deref().or(cfg.data.checkpoint.as_deref());
    if ck.is_none() {
        warn!("no checkpoint given; embedding with a freshly initialized model");
    }
    let model = load_model(cfg, ck)?;
    let index = embed_dataset(&model, &data)?;
    let out = cfg.out.join("index.tsi");
    index.save(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn parse_stream(s: &str) -> Result<Stream> {
    Stream::parse(s).ok_or_else(|| anyhow!("unknown stream `{s}` (comp, struct, int, joint)"))
}

fn load_index(cfg: &RunConfig, flag: Option<&PathBuf>) -> Result<EmbeddingIndex> {
    let path = need(flag, cfg.data.index.as_ref(), "embedding index")?;
    EmbeddingIndex::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn retrieve(cfg: &RunConfig, a: &crate::RetrieveArgs) -> Result<()> {
    let index = load_index(cfg, a.index.as_ref())?;
    let stream = parse_stream(&a.stream)?;
    if a.query.is_none() && a.recall.is_none() {
        bail!("give --query and/or --recall");
    }
    if let Some(q) = a.query {
        let hits = knn_retrieve(&index, q, stream, a.k)?;
        println!("rank\tid\tcosine\telements\tspace_group");
        for (r, (id, sim)) in hits.iter().enumerate() {
            let l = &index.labels[*id];
            let elements: Vec<&str> = l.element_set.iter().filter_map(|&z| element_symbol(z)).collect();
            let sg = l.space_group.map_or("-".to_string(), |v| v.to_string());
            println!("{}\t{id}\t{sim:.6}\t{}\t{sg}", r + 1, elements.join("-"));
        }
    }
    if let Some(t) = &a.recall {
        let target = RetrievalTarget::parse(t).ok_or_else(|| anyhow!("unknown retrieval target `{t}` (element_set, space_group)"))?;
        let r = recall_at_k(&index, stream, target, a.k)?;
        println!("recall@{}\t{:.4}\tevaluated\t{}\tskipped\t{}", a.k, r.recall, r.evaluated, r.skipped);
    }
    Ok(())
}

fn run_probe(cfg: &RunConfig, a: &crate::ProbeArgs) -> Result<()> {
    let index = load_index(cfg, a.index.as_ref())?;
    let stream = parse_stream(&a.stream)?;
    let target = ProbeTarget::parse(&a.target).ok_or_else(|| anyhow!("unknown probe target `{}`", a.target))?;
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        bail!("--test-fraction must lie in (0, 1)");
    }
    let mut ids: Vec<usize> = (0..index.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((a.test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len().saturating_sub(1));
    let (test, train) = ids.split_at(n_test);
    let head = match a.head {
        HeadArg::Linear => ProbeHead::Linear,
        HeadArg::Mlp => ProbeHead::Mlp,
    };
    let report = probe(&index, stream, target, head, train, test, &cfg.probe)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(cfg.out.join("probe.json"), &json)?;
    match &report {
        ProbeReport::Classification { accuracy, majority_baseline, chance, .. } => {
            println!("accuracy\t{accuracy:.4}\tmajority\t{majority_baseline:.4}\tchance\t{chance:.4}")
        }
        ProbeReport::Regression { mae, mean_baseline, target_scale } => {
            println!("mae\t{mae:.6}\tmean_baseline\t{mean_baseline:.6}\ttarget_scale\t{target_scale:.6}")
        }
    }
    Ok(())
}

fn verify(cfg: &RunConfig, a: &crate::VerifyArgs) -> Result<bool> {
    match a.suite {
        SuiteArg::Theory => {
            let report = run_suite(&cfg.suite)?;
            let lines = report.to_json_lines();
            fs::write(cfg.out.join("verify_theory.jsonl"), &lines)?;
            print!("{lines}");
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                info!("all {} checks passed", report.checks.len());
            } else {
                eprintln!("{} of {} checks failed: {}", failed.len(), report.checks.len(), failed.join(", "));
            }
            Ok(failed.is_empty())
        }
    }
}

/// Last row and first row of a CSV log as column → value maps.
fn csv_ends(text: &str) -> Option<(Vec<String>, Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect()).collect();
    Some((header, rows.first()?.clone(), rows.last()?.clone()))
}

fn report(cfg: &RunConfig, a: &crate::ReportArgs) -> Result<()> {
    let dir = a.logs.clone().unwrap_or_else(|| cfg.out.clone());
    let mut runs: Vec<PathBuf> = vec![dir.clone()];
    if let Ok(entries) = fs::read_dir(&dir) {
        let mut subs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subs.sort();
        runs.extend(subs);
    }
    let label = |p: &Path| if p == dir { ".".to_string() } else { p.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()) };

    let mut out = String::new();
    let mut ft = Vec::new();
    let mut pt = Vec::new();
    for r in &runs {
        if let Ok(text) = fs::read_to_string(r.join("finetune_metrics.json")) {
            let s: FinetuneSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", r.join("finetune_metrics.json").display()))?;
            ft.push((label(r), s));
        }
        if let Ok(text) = fs::read_to_string(r.join("pretrain_log.csv")) {
            if let Some(ends) = csv_ends(&text) {
                pt.push((label(r), ends));
            }
        }
    }
    if ft.is_empty() && pt.is_empty() {
        bail!("no finetune_metrics.json or pretrain_log.csv under {}", dir.display());
    }
    if !ft.is_empty() {
        writeln!(out, "## Fine-tuning (held-out)\n")?;
        writeln!(out, "| run | mode | steps | train | Energy MAE (meV/atom) | Force MAE (meV/Å) | initial Energy MAE | initial Force MAE |")?;
        writeln!(out, "|---|---|---|---|---|---|---|---|")?;
        for (name, s) in &ft {
            let mode = match s.mode {
                ForceMode::Conservative => "conservative",
                ForceMode::Direct => "direct",
            };
            writeln!(
                out,
                "| {name} | {mode} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                s.steps, s.train, s.metrics.energy_mae, s.metrics.force_mae, s.initial.energy_mae, s.initial.force_mae
            )?;
        }
        writeln!(out)?;
    }
    if !pt.is_empty() {
        writeln!(out, "## Pretraining loss (first → last logged step)\n")?;
        let header = &pt[0].1 .0;
        let terms: Vec<usize> = (0..header.len()).filter(|&i| header[i] != "step" && header[i] != "lr").collect();
        write!(out, "| run | steps |")?;
        for &i in &terms {
            write!(out, " {} |", header[i])?;
        }
        writeln!(out)?;
        writeln!(out, "|---|---|{}", "---|".repeat(terms.len()))?;
        for (name, (h, first, last)) in &pt {
            write!(out, "| {name} | {} |", last.first().copied().unwrap_or(0.0))?;
            for &i in &terms {
                if i < h.len() {
                    write!(out, " {:.4} → {:.4} |", first[i], last[i])?;
                }
            }
            writeln!(out)?;
        }
    }
    fs::write(cfg.out.join("report.md"), &out)?;
    print!("{out}");
    Ok(())
}
