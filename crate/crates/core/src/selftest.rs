//! Quick built-in checks: gradient fidelity, sparsification oracles, hand
//! values and storage round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{record_terms, BatchItem, LossConfig, LossTerms};
use crate::numerics::{check_gradients, Distribution, Matrix, Tape, Var};
use crate::ril::{densify, info_weight, sparsify_mr, sparsify_ms, write_table, LabelMode, RilHeader, RilRecord, RilTable};
use crate::student::{DualEncoder, StudentState};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestReport {
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckResult {
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, c: usize) -> Distribution {
    let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
    Distribution::from_weights(w).expect("positive weights")
}

fn brute_ms(p: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let kept: f64 = order[..k].iter().map(|&i| p[i]).sum();
    let tail = (1.0 - kept) / (p.len() - k) as f64;
    let mut out = vec![tail; p.len()];
    order[..k].iter().for_each(|&i| out[i] = p[i]);
    out
}

fn brute_mr(p: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let kept: f64 = order[..k].iter().map(|&i| p[i]).sum();
    let mut out = vec![0.0; p.len()];
    order[..k].iter().for_each(|&i| out[i] = p[i] / kept);
    out
}

fn sparsification() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for c in [5usize, 20] {
        for k in [1, c / 2, c - 1] {
            for _ in 0..100 {
                let p = random_distribution(&mut rng, c);
                let ms = densify(&sparsify_ms(&p, k).map_err(|e| e.to_string())?);
                let mr = densify(&sparsify_mr(&p, k).map_err(|e| e.to_string())?);
                for (got, want) in [(ms.probs(), brute_ms(p.probs(), k)), (mr.probs(), brute_mr(p.probs(), k))] {
                    for (a, b) in got.iter().zip(&want) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e}"))
    }
}

fn weights() -> std::result::Result<String, String> {
    let u = info_weight(&Distribution::uniform(10));
    let o = info_weight(&Distribution::one_hot(10, 3));
    let h = info_weight(&Distribution::new(vec![0.5, 0.5, 0.0, 0.0]).map_err(|e| e.to_string())?);
    if u <= 1e-5 && o >= 1.0 - 1e-5 && (h - 0.5).abs() <= 1e-4 {
        Ok(format!("w(U)={u:.1e} w(onehot)={o:.6} w(half)={h:.6}"))
    } else {
        Err(format!("w(U)={u} w(onehot)={o} w(half)={h}"))
    }
}

fn small_instance(seed: u64) -> (StudentState, Vec<BatchItem>) {
    let (c, d, l, n) = (3, 6, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.gen_range(-1.0..1.0);
    let tokens: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| u()).collect()).collect();
    let pos: Vec<f64> = (0..l * d).map(|_| 0.5 * u()).collect();
    let neg: Vec<f64> = (0..l * d).map(|_| 0.5 * u()).collect();
    let state = StudentState::from_parts(
        DualEncoder::random(5, d, seed + 1),
        Matrix::from_rows(&tokens).expect("rows"),
        pos,
        neg,
        l,
        0.5,
    )
    .expect("consistent instance");
    let batch = (0..n)
        .map(|i| {
            let t = random_distribution(&mut rng, c).into_vec();
            BatchItem {
                feature: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: t,
                weight: rng.gen_range(0.0..1.0),
                pseudo_label: i % c,
            }
        })
        .collect();
    (state, batch)
}

fn gradients(pick: fn(&LossTerms) -> Var) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (s, batch) = small_instance(seed);
        let cfg = LossConfig::default();
        let gc = check_gradients(
            |tape: &mut Tape, theta| pick(&record_terms(tape, &s, theta, &batch, &cfg).expect("valid batch")),
            &s.params(),
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(gc.max_rel_error);
    }
    if worst <= 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

fn round_trip() -> std::result::Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("selftest.ril");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<RilRecord> = (0..200)
        .map(|i| {
            let p = random_distribution(&mut rng, 8);
            let crop = crate::ril::CropBox {
                x: 0.1,
                y: 0.2,
                w: 0.5,
                h: 0.25,
            };
            RilRecord::from_teacher(i, crop, crate::ril::AugmentTag::HFlip, &p, LabelMode::Ms, 3).expect("valid")
        })
        .collect();
    let header = RilHeader {
        mode: LabelMode::Ms,
        class_count: 8,
        top_k: 3,
        crops_per_image: 1,
        record_count: records.len() as u64,
    };
    write_table(&path, &header, &records).map_err(|e| e.to_string())?;
    let table = RilTable::open(&path).map_err(|e| e.to_string())?;
    for (i, r) in records.iter().enumerate() {
        if &table.read_record(i as u64).map_err(|e| e.to_string())? != r {
            return Err(format!("record {i} differs after reading back"));
        }
    }
    Ok(format!("{} records", records.len()))
}

/// Runs every built-in check.
pub fn run() -> SelfTestReport {
    let checks = vec![
        check("sparsification matches brute force", sparsification),
        check("information weight endpoints", weights),
        check("gradient L_pos", || gradients(|t| t.pos)),
        check("gradient L_neg", || gradients(|t| t.neg)),
        check("gradient L_diff1", || gradients(|t| t.diff1)),
        check("gradient L_diff2", || gradients(|t| t.diff2)),
        check("gradient L_total", || gradients(|t| t.total)),
        check("table round trip", round_trip),
    ];
    let passed = checks.iter().filter(|c| c.passed).count();
    SelfTestReport {
        passed,
        failed: checks.len() - passed,
        checks,
    }
}
