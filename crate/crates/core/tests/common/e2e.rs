//! Desk-scale regression: corpus → two trained models → attack grid → report.

use std::path::Path;
use std::time::{Duration, Instant};

use fda_core::corpus::{generate, split_of, Split};
use fda_core::eval::{run_experiment, Defense, ExperimentOutput, ExperimentPlan, RunConfig};
use fda_core::vlm::{train, Direction, TrainConfig};
use fda_core::{Model, ModelConfig};

use super::{err, Outcome};

pub const SEED: u64 = 42;
pub const N: usize = 128;
pub const FDA_PLACEMENT: &str = "L0-1,H0-3";
pub const BUDGET: Duration = Duration::from_secs(600);

/// Trains both models and runs PGD, APGD and MAPGD at 2/255 and 4/255.
pub fn run(out_dir: &Path) -> Result<ExperimentOutput, String> {
    let items = generate(SEED, N, 0.25).map_err(err)?;
    let train_items = split_of(&items, Split::Train);
    let test_items = split_of(&items, Split::Test);
    let tc = TrainConfig {
        seed: SEED,
        ..TrainConfig::default()
    };
    let trained = |placement: &str| -> Result<Model, String> {
        let mut m = Model::new(ModelConfig {
            placement: placement.parse().map_err(err)?,
            seed: SEED,
            ..ModelConfig::default()
        })
        .map_err(err)?;
        train(&mut m, &train_items, &tc).map_err(err)?;
        Ok(m)
    };
    let rc = RunConfig {
        seed: SEED,
        ..RunConfig::default()
    };
    let mut plan = ExperimentPlan::new(Defense::new("no-defense", trained("none")?), test_items, rc.attack_configs());
    plan.defenses.push(Defense::new(format!("fda {FDA_PLACEMENT}"), trained(FDA_PLACEMENT)?));
    plan.seed = SEED;
    plan.out_dir = Some(out_dir.to_path_buf());
    run_experiment(&plan).map_err(err)
}

/// Runs the regression twice on one thread and checks time, determinism
/// and clean accuracy.
pub fn check(out_root: &Path) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    let t0 = Instant::now();
    let first = pool.install(|| run(&out_root.join("run1")))?;
    let elapsed = t0.elapsed();
    let second = pool.install(|| run(&out_root.join("run2")))?;
    if elapsed > BUDGET {
        return Err(format!("single run took {elapsed:.1?} (> {BUDGET:?})"));
    }
    if first.report != second.report || first.table != second.table {
        return Err("reports differ between runs".into());
    }
    let files_equal = ["report.json", "table.csv"].iter().all(|f| {
        std::fs::read(out_root.join("run1").join(f)).ok() == std::fs::read(out_root.join("run2").join(f)).ok()
    });
    if !files_equal {
        return Err("report files differ between runs".into());
    }
    let test_n = first.records.first().map_or(0, |_| (N as f64 * 0.25).round() as usize);
    let chance = 100.0 / test_n as f64;
    let mut lines = Vec::new();
    for leg in ["no-defense".to_string(), format!("fda {FDA_PLACEMENT}")] {
        for task in Direction::BOTH {
            let r1 = first
                .records
                .iter()
                .find(|r| r.defense == leg && r.task == task)
                .map(|r| r.clean_r_at[&1].0)
                .ok_or_else(|| format!("no record for {leg} {task}"))?;
            if r1 < 5.0 * chance {
                return Err(format!("{leg} clean {task} R@1 {r1:.2} < 5× chance ({:.3})", 5.0 * chance));
            }
            lines.push(format!("{leg} {task} R@1 {r1:.2}"));
        }
    }
    let deltas: Vec<f64> = first
        .records
        .iter()
        .filter(|r| r.defense != "no-defense")
        .filter_map(|r| r.delta_asr.map(|p| p.0))
        .collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    Ok(format!(
        "run {elapsed:.1?} (1 thread), reports byte-identical; {}; mean FDA Δ_ASR {mean_delta:.2}% (observation only)",
        lines.join(", ")
    ))
}
