//! Attack × defense grids over a paired test collection.
//!
//! Every image is attacked once per (defense, attack, ε, mode). For targeted
//! attacks image `i` is pushed toward caption `(i + 1) mod n`; the score
//! matrix of the attacked images against all captions then yields both
//! retrieval directions: caption `i + 1` querying the image gallery (T2IR)
//! and attacked image `i` querying the caption gallery (I2TR).

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{asr_targeted, asr_untargeted, delta_asr, mean, MetricRecord, Pct};
use crate::attacks::{attack_batch, circular_shift_targets, format_epsilon, AttackConfig, AttackMode};
use crate::corpus::CorpusItem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textproc::{FunctionWordDictionary, TokenSequence};
use crate::vlm::{rank_descending, rank_of, recall_at_k, score_matrix, Direction, Model, ModelConfig};

pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.csv";

/// A labelled model under evaluation.
#[derive(Debug, Clone)]
pub struct Defense {
    pub label: String,
    pub model: Model,
}

impl Defense {
    pub fn new(label: impl Into<String>, model: Model) -> Self {
        Self {
            label: label.into(),
            model,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    /// no-defense leg; Δ_ASR is measured against it
    pub baseline: Defense,
    pub defenses: Vec<Defense>,
    /// paired images and captions to attack, usually the test split
    pub items: Vec<CorpusItem>,
    pub attacks: Vec<AttackConfig>,
    pub ks: Vec<usize>,
    /// base seed of every attack; item `i` uses `seed + i`
    pub seed: u64,
    /// attacker-side dictionary for MAPGD
    pub attacker_dictionary: FunctionWordDictionary,
    /// where `report.json` and `table.csv` go; nothing is written if unset
    pub out_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(baseline: Defense, items: Vec<CorpusItem>, attacks: Vec<AttackConfig>) -> Self {
        Self {
            baseline,
            defenses: Vec::new(),
            items,
            attacks,
            ks: super::DEFAULT_KS.to_vec(),
            seed: 0,
            attacker_dictionary: FunctionWordDictionary::builtin(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.len() < 2 {
            return Err(Error::SingletonBatch);
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig(format!("k set {:?}", self.ks)));
        }
        if self.attacks.is_empty() {
            return Err(Error::InvalidConfig("no attacks configured".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        let mut labels = vec![&self.baseline.label];
        for d in &self.defenses {
            if labels.contains(&&d.label) {
                return Err(Error::InvalidConfig(format!("duplicate defense label `{}`", d.label)));
            }
            labels.push(&d.label);
        }
        Ok(())
    }

    /// SHA-256 over everything that determines the report.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Leg<'a> {
            label: &'a str,
            config: &'a ModelConfig,
            params: String,
        }
        #[derive(Serialize)]
        struct Item<'a> {
            id: u64,
            caption: &'a str,
            image: String,
        }
        #[derive(Serialize)]
        struct Descriptor<'a> {
            seed: u64,
            ks: &'a [usize],
            attacks: &'a [AttackConfig],
            dictionary: Vec<&'a str>,
            legs: Vec<Leg<'a>>,
            items: Vec<Item<'a>>,
        }
        let legs = std::iter::once(&self.baseline)
            .chain(&self.defenses)
            .map(|d| Leg {
                label: &d.label,
                config: d.model.config(),
                params: {
                    let mut h = Sha256::new();
                    for (name, t) in d.model.params().iter() {
                        h.update(name.as_bytes());
                        hash_tensor(&mut h, t);
                    }
                    hex::encode(h.finalize())
                },
            })
            .collect();
        let items = self
            .items
            .iter()
            .map(|it| Item {
                id: it.id,
                caption: &it.caption,
                image: {
                    let mut h = Sha256::new();
                    hash_tensor(&mut h, &it.image);
                    hex::encode(h.finalize())
                },
            })
            .collect();
        let d = Descriptor {
            seed: self.seed,
            ks: &self.ks,
            attacks: &self.attacks,
            dictionary: self.attacker_dictionary.iter().collect(),
            legs,
            items,
        };
        let json = serde_json::to_vec(&d).expect("descriptor serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for &s in t.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<MetricRecord>,
    /// JSON report text
    pub report: String,
    /// CSV table text
    pub table: String,
}

#[derive(Serialize)]
struct Meta<'a> {
    seed: u64,
    config_hash: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    ks: &'a [usize],
    items: usize,
    baseline: &'a str,
    defenses: Vec<&'a str>,
}

#[derive(Serialize)]
struct Report<'a> {
    meta: Meta<'a>,
    records: &'a [MetricRecord],
}

/// Runs every (defense, attack) leg, baseline first, and returns the
/// records with the rendered report and table. When `out_dir` is set both
/// files are written; if a leg fails, the records gathered so far are
/// written with `"status": "failed"` and the error is returned.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    plan.validate()?;
    let hash = plan.config_hash();
    let mut records = Vec::new();
    let outcome = collect_records(plan, &mut records);
    let error = outcome.as_ref().err().map(ToString::to_string);
    let report = render_report(plan, &hash, &records, error.clone())?;
    let table = render_table(&records, &plan.ks)?;
    if let Some(dir) = &plan.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), &report)?;
        fs::write(dir.join(TABLE_FILE), &table)?;
    }
    outcome?;
    Ok(ExperimentOutput { records, report, table })
}

fn collect_records(plan: &ExperimentPlan, records: &mut Vec<MetricRecord>) -> Result<()> {
    let images: Vec<Tensor> = plan.items.iter().map(|it| it.image.clone()).collect();
    let mut baseline_avg: BTreeMap<(Direction, String, AttackMode, u64), f64> = BTreeMap::new();
    let legs = std::iter::once(&plan.baseline).chain(&plan.defenses);
    for (leg_idx, leg) in legs.enumerate() {
        let is_baseline = leg_idx == 0;
        let model = &leg.model;
        let captions: Vec<TokenSequence> = plan
            .items
            .iter()
            .map(|it| it.sequence(model.config().max_len))
            .collect::<Result<_>>()?;
        let clean = score_matrix(model, &images, &captions)?;
        let clean_r: BTreeMap<Direction, BTreeMap<usize, Pct>> = Direction::BOTH
            .iter()
            .map(|&d| (d, plan.ks.iter().map(|&k| (k, Pct(recall_at_k(&clean, d, k)))).collect()))
            .collect();
        for atk in &plan.attacks {
            let cfg = AttackConfig {
                seed: plan.seed,
                ..atk.clone()
            };
            log::info!("{}: {} {:?}", leg.label, cfg.label(), cfg.mode);
            let shifted = match cfg.mode {
                AttackMode::Targeted => Some(circular_shift_targets(&captions)?.targets),
                AttackMode::Untargeted => None,
            };
            let results = attack_batch(
                model,
                &images,
                &captions,
                shifted.as_deref(),
                &plan.attacker_dictionary,
                &cfg,
            )?;
            let adv_images: Vec<Tensor> = results.into_iter().map(|r| r.adv_image).collect();
            let adv = score_matrix(model, &adv_images, &captions)?;
            for task in Direction::BOTH {
                let mut rec = cell_record(plan, &clean_r[&task], &adv, task, &cfg)?;
                rec.defense = leg.label.clone();
                rec.baseline = plan.baseline.label.clone();
                let key = (task, cfg.family.to_string(), cfg.mode, cfg.epsilon.to_bits());
                if is_baseline {
                    baseline_avg.insert(key.clone(), rec.asr_avg.0);
                }
                rec.delta_asr = baseline_avg
                    .get(&key)
                    .and_then(|&b| delta_asr(b, rec.asr_avg.0).ok())
                    .map(Pct);
                records.push(rec);
            }
        }
    }
    Ok(())
}

/// Target ranks of the shifted pairs in one direction.
fn target_ranks(adv: &[Vec<f64>], task: Direction) -> Vec<usize> {
    let n = adv.len();
    (0..n)
        .map(|i| {
            let t = (i + 1) % n;
            let (scores, item): (Vec<f64>, usize) = match task {
                Direction::T2I => (adv.iter().map(|row| row[t]).collect(), i),
                Direction::I2T => (adv[i].clone(), t),
            };
            rank_of(&rank_descending(&scores), item).expect("item is in the gallery")
        })
        .collect()
}

fn cell_record(
    plan: &ExperimentPlan,
    clean_r: &BTreeMap<usize, Pct>,
    adv: &[Vec<f64>],
    task: Direction,
    cfg: &AttackConfig,
) -> Result<MetricRecord> {
    let adv_r: BTreeMap<usize, Pct> = plan.ks.iter().map(|&k| (k, Pct(recall_at_k(adv, task, k)))).collect();
    let (asr_at, complement) = match cfg.mode {
        AttackMode::Targeted => {
            let ranks = target_ranks(adv, task);
            let asr = plan
                .ks
                .iter()
                .map(|&k| Ok((k, Pct(asr_targeted(&ranks, k)?))))
                .collect::<Result<BTreeMap<_, _>>>()?;
            (asr, None)
        }
        AttackMode::Untargeted => {
            let asr = plan
                .ks
                .iter()
                .map(|&k| Ok((k, Pct(asr_untargeted(clean_r[&k].0, adv_r[&k].0)?))))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let comp = adv_r.iter().map(|(&k, p)| (k, Pct(100.0 - p.0))).collect();
            (asr, Some(comp))
        }
    };
    let asr_avg = Pct(mean(asr_at.values().map(|p| p.0)));
    Ok(MetricRecord {
        task,
        defense: String::new(),
        attack: cfg.family.to_string(),
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        epsilon_label: format_epsilon(cfg.epsilon),
        clean_r_at: clean_r.clone(),
        adv_r_at: adv_r,
        asr_at,
        asr_avg,
        asr_complement_at: complement,
        delta_asr: None,
        baseline: String::new(),
    })
}

fn render_report(plan: &ExperimentPlan, hash: &str, records: &[MetricRecord], error: Option<String>) -> Result<String> {
    let report = Report {
        meta: Meta {
            seed: plan.seed,
            config_hash: hash,
            status: if error.is_some() { "failed" } else { "complete" },
            error,
            ks: &plan.ks,
            items: plan.items.len(),
            baseline: &plan.baseline.label,
            defenses: plan.defenses.iter().map(|d| d.label.as_str()).collect(),
        },
        records,
    };
    let mut s = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One row per record: task, defense, attack, ε, then clean R@k, ASR@k,
/// the ASR average and Δ_ASR, all with two decimals. Fields such as
/// `fda L0,Hall` are quoted.
fn render_table(records: &[MetricRecord], ks: &[usize]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<String> = ["task", "defense", "mode", "attack", "epsilon"].map(String::from).to_vec();
    header.extend(ks.iter().map(|k| format!("clean_r@{k}")));
    header.extend(ks.iter().map(|k| format!("asr@{k}")));
    header.extend(["asr_avg".to_string(), "delta_asr".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mode = match r.mode {
            AttackMode::Targeted => "targeted",
            AttackMode::Untargeted => "untargeted",
        };
        let mut row = vec![
            r.task.to_string(),
            r.defense.clone(),
            mode.to_string(),
            r.attack.clone(),
            r.epsilon_label.clone(),
        ];
        row.extend(ks.iter().map(|k| r.clean_r_at[k].formatted()));
        row.extend(ks.iter().map(|k| r.asr_at[k].formatted()));
        row.push(r.asr_avg.formatted());
        row.push(r.delta_asr.map_or_else(|| "null".to_string(), Pct::formatted));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;
    use crate::fda::GateMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut m = Model::new(ModelConfig {
            width: 16,
            heads: 2,
            head_dim: 8,
            mlp_hidden: 16,
            text_layers: 1,
            fusion_layers: 2,
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        m.set_param("head.w", Tensor::randn(&[16, 1], 1.0, &mut rng)).unwrap();
        m
    }

    fn plan(attacks: Vec<AttackConfig>) -> ExperimentPlan {
        let items = generate(11, 6, 0.0).unwrap();
        ExperimentPlan::new(Defense::new("none", model()), items, attacks)
    }

    #[test]
    fn zero_budget_attack_reports_clean_hit_rates() {
        let mut untargeted = AttackConfig::pgd(0.0);
        untargeted.mode = AttackMode::Untargeted;
        untargeted.steps = 2;
        let mut targeted = untargeted.clone();
        targeted.mode = AttackMode::Targeted;
        let p = plan(vec![targeted, untargeted]);
        let out = run_experiment(&p).unwrap();
        assert_eq!(out.records.len(), 4);
        let clean = score_matrix(
            &p.baseline.model,
            &p.items.iter().map(|i| i.image.clone()).collect::<Vec<_>>(),
            &p.items.iter().map(|i| i.sequence(16).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        for r in &out.records {
            match r.mode {
                AttackMode::Untargeted => assert!(r.asr_at.values().all(|p| p.0 == 0.0)),
                AttackMode::Targeted => {
                    let ranks = target_ranks(&clean, r.task);
                    for (&k, p) in &r.asr_at {
                        assert_eq!(p.0, asr_targeted(&ranks, k).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn reports_are_reproducible_and_written() {
        let mut a = AttackConfig::pgd(2.0 / 255.0);
        a.steps = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan(vec![a]);
        p.defenses.push(Defense::new(
            "fda-off",
            p.baseline
                .model
                .with_placement("Lall,Hall".parse().unwrap(), GateMode::Fixed(0.0))
                .unwrap(),
        ));
        p.out_dir = Some(dir.path().to_path_buf());
        let first = run_experiment(&p).unwrap();
        let second = run_experiment(&p).unwrap();
        assert_eq!(first.report, second.report);
        assert_eq!(fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(), first.report);
        assert!(first.table.starts_with("task,defense,mode,attack,epsilon,clean_r@1,clean_r@5,asr@1,asr@5"));
        assert_eq!(first.table.lines().count(), 5);
        let (base, off) = first.records.split_at(2);
        for (b, o) in base.iter().zip(off) {
            assert!(b.same_metrics(o), "{b:?} vs {o:?}");
        }
    }

    #[test]
    fn failure_flushes_partial_report() {
        let mut a = AttackConfig::pgd(2.0 / 255.0);
        a.steps = 1;
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan(vec![a]);
        p.items[0].image = Tensor::full(&[32, 32, 3], 2.0);
        p.out_dir = Some(dir.path().to_path_buf());
        assert!(run_experiment(&p).is_err());
        let report = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(report.contains("\"status\": \"failed\""));
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(vec![AttackConfig::pgd(0.0)]);
        p.ks = vec![0];
        assert!(p.validate().is_err());
        let mut p = plan(vec![]);
        assert!(p.validate().is_err());
        p.attacks = vec![AttackConfig::pgd(0.0)];
        p.items.truncate(1);
        assert!(matches!(p.validate(), Err(Error::SingletonBatch)));
    }
}
