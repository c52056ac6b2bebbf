use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use region_distill::bench::{bench_k_sweep, bench_modes, peak_rss_kib, BenchReport, BenchSetup, SweepOptions};
use region_distill::config::{RunConfig, SEED_ENV};
use region_distill::ril::{LabelMode, RilTable};
use region_distill::selftest;
use region_distill::student::{Checkpoint, CheckpointMeta, StudentState};
use region_distill::teacher::{build_ril, DatasetSpec, TeacherOracle};
use region_distill::trainer::{cross_eval, evaluate, train, write_trace_csv, EvalSplit};
use region_distill::Error;

#[derive(Debug, Parser)]
#[command(name = "region-distill", version, about = "Region soft-label cache and dual-prompt student training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON object of dotted configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.alpha=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample crops, label them with the teacher and write a RIL table.
    BuildRil {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        crops: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        mode: Option<LabelMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train prompt contexts from a RIL table.
    Train {
        #[arg(long)]
        ril: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss trace (CSV).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Base-to-novel evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Base/novel classes, e.g. `0-5/6-7`. Defaults to the training split.
        #[arg(long)]
        split: Option<EvalSplit>,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Zero-shot accuracy on another generator sharing the pattern universe.
    CrossEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Foreign dataset spec.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cached-vs-online timing and the top-K sweep.
    Bench {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long)]
        cost_multiplier: Option<usize>,
        /// Dataset spec; the built-in default is used when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Concurrent readers in the latency trials.
        #[arg(long)]
        readers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print a table's header and records.
    Inspect {
        path: PathBuf,
        /// Records to print.
        #[arg(long, default_value_t = 3)]
        records: u64,
        /// Print only the SHA-256 of the canonical table contents.
        #[arg(long)]
        digest: bool,
    },
    /// Run the built-in gradient and oracle checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Modes,
    Ksweep,
    All,
}

fn resolve(cfg: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    let mut overrides = extra;
    overrides.extend(cfg.overrides.iter().cloned());
    Ok(RunConfig::resolve(env.as_deref(), cfg.config.as_deref(), &overrides)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildRil { dataset, crops, topk, mode, seed, out, cfg } => {
            let mut extra = Vec::new();
            if let Some(m) = crops {
                extra.push(format!("ril.crops={m}"));
            }
            if let Some(k) = topk {
                extra.push(format!("ril.topk={k}"));
            }
            if let Some(m) = mode {
                extra.push(format!("ril.mode={m}"));
            }
            if let Some(s) = seed {
                extra.push(format!("ril.seed={s}"));
            }
            // flags beat --set, so they go last
            let mut c = resolve(&cfg, Vec::new())?;
            for e in extra {
                c.apply_assignment(&e)?;
            }
            let spec = DatasetSpec::load(&dataset)?;
            let teacher = TeacherOracle::new(&spec, c.teacher)?;
            let data = spec.generate()?;
            let summary = build_ril(&data, &teacher, c.ril.crops, c.ril.topk, c.ril.mode, c.ril.seed, &out)?;
            print_json(&json!({ "summary": summary, "config": c.to_json() }))
        }
        Command::Train { ril, dataset, out, trace, cfg } => {
            let c = resolve(&cfg, Vec::new())?;
            let spec = DatasetSpec::load(&dataset)?;
            let teacher = TeacherOracle::new(&spec, c.teacher)?;
            let table = RilTable::open(&ril)?;
            let student = StudentState::from_teacher(&teacher, &c.student, c.train.seed)?;
            let outcome = train(student, &spec.generate()?, &table, &c.train_config())?;
            let meta = CheckpointMeta {
                student: c.student,
                dataset: spec,
                teacher: c.teacher,
                config: c.to_json(),
            };
            let sha256 = outcome.state.save_checkpoint(&out, &meta)?;
            if let Some(t) = trace {
                write_trace_csv(&t, &outcome.epochs)?;
            }
            let last = outcome.epochs.last().context("training ran no epochs")?;
            print_json(&json!({
                "checkpoint": out,
                "sha256": sha256,
                "steps": outcome.steps.len(),
                "final_epoch": last,
                "config": c.to_json(),
            }))
        }
        Command::Eval { checkpoint, dataset, split, report, cfg } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (student, _) = ck.restore()?;
            let c = resolve(&cfg, Vec::new())?;
            let spec = DatasetSpec::load(&dataset)?;
            let trained = &ck.header.meta.dataset;
            if spec.pattern_seed != trained.pattern_seed
                || spec.first_class != trained.first_class
                || spec.class_count != trained.class_count
            {
                return Err(Error::config("evaluation dataset must share the checkpoint's classes; use cross-eval otherwise").into());
            }
            let teacher = TeacherOracle::new(&spec, ck.header.meta.teacher)?;
            let split = match split {
                Some(s) => s,
                None => checkpoint_split(&ck)?,
            };
            let r = evaluate(&student, &teacher, &spec, &split, &c.eval)?;
            let doc = json!({
                "report": r,
                "split": split.to_string(),
                "checkpoint_sha256": ck.sha256,
                "config": c.to_json(),
            });
            if let Some(p) = report {
                write_json(&p, &doc)?;
            }
            print_json(&doc)?;
            println!("base      novel     HM        rejection  low-info crops");
            println!(
                "{:<9.4} {:<9.4} {:<9.4} {:<10.4} {}",
                r.base_accuracy, r.novel_accuracy, r.hm, r.rejection, r.low_info_crops
            );
            Ok(())
        }
        Command::CrossEval { checkpoint, dataset, report } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (student, teacher) = ck.restore()?;
            let foreign = DatasetSpec::load(&dataset)?;
            let split = checkpoint_split(&ck)?;
            let accuracy = cross_eval(&student, &teacher, &ck.header.meta.dataset, &split, &foreign)?;
            let doc = json!({ "accuracy": accuracy, "foreign": foreign, "checkpoint_sha256": ck.sha256 });
            if let Some(p) = report {
                write_json(&p, &doc)?;
            }
            print_json(&doc)
        }
        Command::Bench { suite, cost_multiplier, dataset, readers, out, cfg } => {
            let mut c = resolve(&cfg, Vec::new())?;
            if let Some(m) = cost_multiplier {
                c.apply_assignment(&format!("bench.cost_multiplier={m}"))?;
            }
            if let Some(r) = readers {
                c.apply_assignment(&format!("bench.readers={r}"))?;
            }
            let spec = match dataset {
                Some(p) => DatasetSpec::load(p)?,
                None => DatasetSpec::default(),
            };
            let setup = BenchSetup {
                dataset: spec,
                teacher: c.teacher,
                student: c.student,
                train: c.train_config(),
                eval: c.eval,
                crops_per_image: c.ril.crops,
                ril_seed: c.ril.seed,
            };
            let parent = match out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let scratch = tempfile::Builder::new()
                .prefix(".bench-")
                .tempdir_in(&parent)
                .map_err(|e| Error::io(&parent, e))?;
            let modes = match suite {
                Suite::Modes | Suite::All => Some(bench_modes(&setup, c.bench.cost_multiplier, scratch.path())?),
                Suite::Ksweep => None,
            };
            let ksweep = match suite {
                Suite::Ksweep | Suite::All => {
                    let options = SweepOptions {
                        mode: if c.ril.mode == LabelMode::Full { LabelMode::Mr } else { c.ril.mode },
                        reads: c.bench.reads,
                        repetitions: c.bench.repetitions,
                        readers: c.bench.readers,
                    };
                    Some(bench_k_sweep(&setup, &c.sweep_ks()?, &options, scratch.path())?)
                }
                Suite::Modes => None,
            };
            let report = BenchReport {
                modes,
                ksweep,
                peak_rss_kib: peak_rss_kib(),
            };
            let table = report.to_table();
            write_json(&out, &json!({ "report": report, "table": table, "config": c.to_json() }))?;
            print!("{table}");
            Ok(())
        }
        Command::Inspect { path, records, digest } => {
            let table = RilTable::open(&path)?;
            if digest {
                println!("{}", table.digest()?);
                return Ok(());
            }
            let shown: Vec<Value> = (0..records.min(table.len()))
                .map(|i| table.read_record(i).map(|r| json!(r)))
                .collect::<region_distill::Result<_>>()?;
            // a full scan surfaces corruption anywhere in the file
            let digest = table.digest()?;
            print_json(&json!({
                "header": table.header(),
                "file_bytes": table.file_len(),
                "record_bytes": table.header().record_size(),
                "digest": digest,
                "records": shown,
            }))
        }
        Command::Selftest => {
            let r = selftest::run();
            for c in &r.checks {
                println!("{} {:<36} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} passed, {} failed", r.passed, r.failed);
            if r.failed > 0 {
                bail!(Error::Correctness(format!("{} self-test check(s) failed", r.failed)));
            }
            Ok(())
        }
    }
}

fn checkpoint_split(ck: &Checkpoint) -> Result<EvalSplit> {
    let raw = ck
        .header
        .meta
        .config
        .get("train.split")
        .and_then(Value::as_str)
        .context("checkpoint does not record a split; pass --split")?;
    Ok(raw.parse()?)
}
