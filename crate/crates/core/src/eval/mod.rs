//! Attack-success metrics, experiment orchestration, reports and
//! attention heatmaps.

mod config;
mod experiment;
mod heatmap;

pub use config::{FlatConfig, RunConfig, CONFIG_KEYS};
pub use experiment::{run_experiment, Defense, ExperimentOutput, ExperimentPlan, REPORT_FILE, TABLE_FILE};
pub use heatmap::{dump_attention_heatmap, heatmap_matrix, HeatmapStage, HeatmapSummary};

use std::collections::BTreeMap;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::attacks::AttackMode;
use crate::error::{Error, Result};
use crate::vlm::Direction;

/// Default recall / hit-rate cut-offs.
pub const DEFAULT_KS: [usize; 2] = [1, 5];

/// Targeted hit rate: percentage of 1-based target ranks within `k`.
pub fn asr_targeted(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidIndex(format!("rank {r} is not 1-based")));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

fn check_percent(v: f64, what: &str) -> Result<()> {
    if (0.0..=100.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Range(format!("{what} {v} outside [0, 100]")))
    }
}

/// Drop in recall caused by an untargeted attack, in percentage points,
/// floored at 0.
pub fn asr_untargeted(clean: f64, adversarial: f64) -> Result<f64> {
    check_percent(clean, "clean recall")?;
    check_percent(adversarial, "adversarial recall")?;
    if adversarial > clean {
        log::warn!("adversarial recall {adversarial} exceeds clean recall {clean}; ASR floored at 0");
        return Ok(0.0);
    }
    Ok(clean - adversarial)
}

/// Relative ASR reduction of a defended model against the baseline, in
/// percent. Positive means the defense helped.
pub fn delta_asr(asr_baseline: f64, asr_method: f64) -> Result<f64> {
    if asr_baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((asr_baseline - asr_method) / asr_baseline * 100.0)
}

/// A percentage carried as the raw value plus a two-decimal rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pct(pub f64);

impl Pct {
    pub fn formatted(self) -> String {
        format!("{:.2}", self.0)
    }
}

impl Serialize for Pct {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Pct", 2)?;
        st.serialize_field("raw", &self.0)?;
        st.serialize_field("formatted", &self.formatted())?;
        st.end()
    }
}

/// Metrics of one (task, defense, attack, ε) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: Direction,
    pub defense: String,
    pub attack: String,
    pub mode: AttackMode,
    pub epsilon: f64,
    pub epsilon_label: String,
    pub clean_r_at: BTreeMap<usize, Pct>,
    /// recall on the attacked gallery/queries
    pub adv_r_at: BTreeMap<usize, Pct>,
    pub asr_at: BTreeMap<usize, Pct>,
    pub asr_avg: Pct,
    /// untargeted only: `100 − adversarial recall`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_complement_at: Option<BTreeMap<usize, Pct>>,
    /// against the plan's baseline leg; `None` when undefined
    pub delta_asr: Option<Pct>,
    pub baseline: String,
}

impl MetricRecord {
    /// Whether two records carry the same numbers, ignoring the defense
    /// label.
    pub fn same_metrics(&self, other: &MetricRecord) -> bool {
        let strip = |r: &MetricRecord| MetricRecord {
            defense: String::new(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Mean of the values.
pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
