//! Cached-vs-online training cost and the top-K storage/latency sweep.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ril::{LabelMode, RilTable};
use crate::student::{CheckpointMeta, StudentConfig, StudentState};
use crate::teacher::{build_ril, DatasetSpec, TeacherConfig, TeacherOracle};
use crate::trainer::{evaluate, train, EvalConfig, LabelSource, OnlineTeacher, TrainConfig, TrainOutcome};

/// min / median / max / mean of repeated measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub repetitions: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        Self {
            repetitions: n,
            min: s.first().copied().unwrap_or(0.0),
            median,
            max: s.last().copied().unwrap_or(0.0),
            mean: if n == 0 { 0.0 } else { s.iter().sum::<f64>() / n as f64 },
        }
    }
}

/// Everything a benchmark run needs besides its own knobs.
#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub dataset: DatasetSpec,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub crops_per_image: usize,
    pub ril_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModesReport {
    pub note: String,
    pub cost_multiplier: usize,
    pub label_mode: LabelMode,
    pub epochs: usize,
    pub build_seconds: f64,
    pub cached_epoch_seconds: Timing,
    pub online_epoch_seconds: Timing,
    /// online / cached mean epoch time.
    pub speedup: f64,
    pub cached_checkpoint: String,
    pub online_checkpoint: String,
    pub identical_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KPoint {
    pub k: usize,
    pub record_bytes: u64,
    pub file_bytes: u64,
    pub build_seconds: f64,
    /// Mean latency of one random read, per repetition, in microseconds.
    pub read_latency_us: Timing,
    pub base_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepReport {
    pub mode: LabelMode,
    pub reads_per_trial: usize,
    pub readers: usize,
    pub points: Vec<KPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub modes: Option<ModesReport>,
    pub ksweep: Option<KSweepReport>,
    /// Peak resident set size of this process (`VmHWM`); stands in for
    /// accelerator memory, which is not measured.
    pub peak_rss_kib: Option<u64>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.modes {
            out.push_str(&format!("{}\n", m.note));
            out.push_str("mode     epoch_s(min/median/max)           \n");
            for (name, t) in [("cached", &m.cached_epoch_seconds), ("online", &m.online_epoch_seconds)] {
                out.push_str(&format!("{name:<8} {:.4}/{:.4}/{:.4}\n", t.min, t.median, t.max));
            }
            out.push_str(&format!(
                "speedup {:.2}x at cost multiplier {}; offline build {:.3}s; checkpoints identical: {}\n",
                m.speedup, m.cost_multiplier, m.build_seconds, m.identical_checkpoints
            ));
        }
        if let Some(k) = &self.ksweep {
            out.push_str(&format!(
                "\nK sweep ({} mode, {} random reads per trial, {} reader(s))\n",
                k.mode, k.reads_per_trial, k.readers
            ));
            out.push_str("    K  record_B     file_B  read_us(min/median/max)  base_acc\n");
            for p in &k.points {
                out.push_str(&format!(
                    "{:>5} {:>9} {:>10}  {:>6.2}/{:>6.2}/{:>6.2}     {:.3}\n",
                    p.k,
                    p.record_bytes,
                    p.file_bytes,
                    p.read_latency_us.min,
                    p.read_latency_us.median,
                    p.read_latency_us.max,
                    p.base_accuracy
                ));
            }
        }
        if let Some(rss) = self.peak_rss_kib {
            out.push_str(&format!("\npeak resident memory {rss} KiB (process, not accelerator)\n"));
        }
        out
    }
}

pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

fn run_training(setup: &BenchSetup, teacher: &TeacherOracle, labels: &dyn LabelSource) -> Result<TrainOutcome> {
    let dataset = setup.dataset.generate()?;
    let student = StudentState::from_teacher(teacher, &setup.student, setup.train.seed)?;
    train(student, &dataset, labels, &setup.train)
}

fn checkpoint_hash(setup: &BenchSetup, state: &StudentState) -> Result<String> {
    use sha2::{Digest, Sha256};
    let meta = CheckpointMeta {
        student: setup.student,
        dataset: setup.dataset.clone(),
        teacher: setup.teacher,
        config: serde_json::Value::Null,
    };
    Ok(hex::encode(Sha256::digest(state.checkpoint_bytes(&meta)?)))
}

/// Trains twice with identical seeds and batches: once reading a FULL-mode
/// table, once recomputing every label with a teacher whose cost is
/// inflated by `cost_multiplier`. Diverging checkpoints abort the run.
pub fn bench_modes(setup: &BenchSetup, cost_multiplier: usize, scratch: &Path) -> Result<ModesReport> {
    if cost_multiplier == 0 {
        return Err(Error::config("teacher cost multiplier must be at least 1"));
    }
    let teacher = TeacherOracle::new(&setup.dataset, setup.teacher)?.with_cost_multiplier(cost_multiplier);
    let dataset = setup.dataset.generate()?;
    let path = scratch.join("bench-modes.ril");
    let mode = LabelMode::Full;
    let built = build_ril(&dataset, &teacher, setup.crops_per_image, 0, mode, setup.ril_seed, &path)?;
    let table = RilTable::open(&path)?;
    let online = OnlineTeacher::new(&dataset, &teacher, setup.crops_per_image, 0, mode, setup.ril_seed)?;

    let cached = run_training(setup, &teacher, &table)?;
    let live = run_training(setup, &teacher, &online)?;
    let cached_checkpoint = checkpoint_hash(setup, &cached.state)?;
    let online_checkpoint = checkpoint_hash(setup, &live.state)?;
    if cached_checkpoint != online_checkpoint {
        return Err(Error::Correctness(format!(
            "cached and online training diverged in FULL mode ({cached_checkpoint} vs {online_checkpoint})"
        )));
    }
    let times = |o: &TrainOutcome| o.epochs.iter().map(|e| e.epoch_seconds).collect::<Vec<_>>();
    let cached_epoch_seconds = Timing::from_samples(&times(&cached));
    let online_epoch_seconds = Timing::from_samples(&times(&live));
    Ok(ModesReport {
        note: format!(
            "relative cost only: the online teacher repeats its embedding {cost_multiplier}x to emulate a larger model"
        ),
        cost_multiplier,
        label_mode: mode,
        epochs: setup.train.epochs,
        build_seconds: built.wall_seconds,
        speedup: online_epoch_seconds.mean / cached_epoch_seconds.mean,
        cached_epoch_seconds,
        online_epoch_seconds,
        identical_checkpoints: true,
        cached_checkpoint,
        online_checkpoint,
    })
}

/// Mean per-read latency in microseconds of `reads` seeded random reads,
/// split across `readers` threads.
pub fn read_latency_us(table: &RilTable, reads: usize, readers: usize, seed: u64) -> Result<f64> {
    let n = table.len();
    if n == 0 || reads == 0 {
        return Err(Error::config("latency trial needs records and reads"));
    }
    let readers = readers.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<u64> = (0..reads).map(|_| rng.gen_range(0..n)).collect();
    let per = indices.len().div_ceil(readers);
    let start = Instant::now();
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || -> Result<()> {
                    for &i in chunk {
                        std::hint::black_box(table.read_record(i)?);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("reader thread panicked")?;
        }
        Ok(())
    })?;
    Ok(start.elapsed().as_secs_f64() * 1e6 / reads as f64)
}

pub struct SweepOptions {
    pub mode: LabelMode,
    pub reads: usize,
    pub repetitions: usize,
    pub readers: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            mode: LabelMode::Mr,
            reads: 500,
            repetitions: 3,
            readers: 1,
        }
    }
}

/// For each K: build a table, time random reads, record its size, train
/// briefly from it and report the base accuracy.
pub fn bench_k_sweep(setup: &BenchSetup, ks: &[usize], options: &SweepOptions, scratch: &Path) -> Result<KSweepReport> {
    if options.mode == LabelMode::Full {
        return Err(Error::config("the K sweep needs a sparsified mode (ms or mr)"));
    }
    let c = setup.dataset.class_count;
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k >= c) {
        return Err(Error::config(format!("K = {k} outside 1..{c}")));
    }
    let teacher = TeacherOracle::new(&setup.dataset, setup.teacher)?;
    let dataset = setup.dataset.generate()?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let path = scratch.join(format!("bench-k{k}.ril"));
        let built = build_ril(&dataset, &teacher, setup.crops_per_image, k, options.mode, setup.ril_seed, &path)?;
        let table = RilTable::open(&path)?;
        let samples = (0..options.repetitions.max(1))
            .map(|rep| read_latency_us(&table, options.reads, options.readers, 0xBE7C + rep as u64))
            .collect::<Result<Vec<_>>>()?;
        let trained = run_training(setup, &teacher, &table)?;
        let report = evaluate(&trained.state, &teacher, &setup.dataset, &setup.train.split, &setup.eval)?;
        points.push(KPoint {
            k,
            record_bytes: table.header().record_size(),
            file_bytes: built.file_bytes,
            build_seconds: built.wall_seconds,
            read_latency_us: Timing::from_samples(&samples),
            base_accuracy: report.base_accuracy,
        });
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(KSweepReport {
        mode: options.mode,
        reads_per_trial: options.reads,
        readers: options.readers.max(1),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> BenchSetup {
        BenchSetup {
            dataset: DatasetSpec { image_count: 16, ..DatasetSpec::default() },
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            train: TrainConfig { epochs: 2, shots: 2, ..TrainConfig::default() },
            eval: EvalConfig::default(),
            crops_per_image: 8,
            ril_seed: 1,
        }
    }

    #[test]
    fn timing_summary() {
        let t = Timing::from_samples(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!((t.min, t.median, t.max, t.mean), (1.0, 2.5, 10.0, 4.0));
        assert_eq!(Timing::from_samples(&[5.0]).median, 5.0);
    }

    #[test]
    fn modes_produce_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let r = bench_modes(&setup(), 2, dir.path()).unwrap();
        assert!(r.identical_checkpoints);
        assert_eq!(r.cached_checkpoint, r.online_checkpoint);
        assert!(r.cached_epoch_seconds.min > 0.0 && r.online_epoch_seconds.min > 0.0);
        assert!(bench_modes(&setup(), 0, dir.path()).is_err());
    }

    #[test]
    fn sweep_sizes_grow_with_k() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SweepOptions { reads: 50, readers: 2, ..SweepOptions::default() };
        let r = bench_k_sweep(&setup(), &[1, 3, 7], &opts, dir.path()).unwrap();
        let sizes: Vec<u64> = r.points.iter().map(|p| p.file_bytes).collect();
        assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
        assert!(r.points.iter().all(|p| p.read_latency_us.min > 0.0));
        assert!(bench_k_sweep(&setup(), &[8], &opts, dir.path()).is_err());
        let report = BenchReport { modes: None, ksweep: Some(r), peak_rss_kib: peak_rss_kib() };
        assert!(report.to_table().contains("K sweep"));
    }
}
