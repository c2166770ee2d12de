//! Save/load and parse/print identities.

use fda_core::corpus::{generate, load_corpus, save_corpus, ImageStorage};
use fda_core::vlm::{load_checkpoint, save_checkpoint};
use fda_core::{EncoderSite, GateMode, PlacementSpec};

use super::{err, fda_fixture_model, Outcome};

/// Row labels of the layer/head ablation tables, plus the site variants.
pub const TABLE_LABELS: &[&str] = &[
    "L0,H0",
    "L0,H0-1",
    "L0,H0-3",
    "L0,H0-5",
    "L0,H0-11",
    "L0,Hall",
    "L1,H0-5",
    "L1,Hall",
    "L0-1,H0-5",
    "L0-1,Hall",
    "L0-2,H0-5",
    "L0-5,H0-5",
    "Lall,H0",
    "Lall,H0-5",
    "Lall,Hall",
];

pub fn check() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;

    let mut models = 0;
    for (placement, gate) in [("none", GateMode::Learnable), ("L0-1,H0-3", GateMode::Learnable), ("Lall,Hall", GateMode::Fixed(0.25))] {
        let mut m = fda_fixture_model(placement, 11);
        if gate != GateMode::Learnable {
            m = m.with_placement(placement.parse().map_err(err)?, gate).map_err(err)?;
        }
        let path = dir.path().join(format!("m{models}.fdackpt"));
        save_checkpoint(&m, &path).map_err(err)?;
        let back = load_checkpoint(&path).map_err(err)?;
        if back.params() != m.params() || back.config() != m.config() {
            return Err(format!("checkpoint `{placement}` did not round-trip bitwise"));
        }
        let dict_a: Vec<&str> = m.dictionary().iter().collect();
        let dict_b: Vec<&str> = back.dictionary().iter().collect();
        if dict_a != dict_b {
            return Err("checkpoint dictionary changed".into());
        }
        // saving the reloaded model reproduces the file byte for byte
        let again = dir.path().join(format!("m{models}b.fdackpt"));
        save_checkpoint(&back, &again).map_err(err)?;
        if std::fs::read(&path).map_err(err)? != std::fs::read(&again).map_err(err)? {
            return Err("checkpoint bytes changed on re-save".into());
        }
        models += 1;
    }

    let items = generate(8, 12, 0.25).map_err(err)?;
    for storage in [ImageStorage::Inline, ImageStorage::Files] {
        let path = dir.path().join(format!("corpus_{storage:?}.jsonl"));
        save_corpus(&items, &path, storage).map_err(err)?;
        let back = load_corpus(&path).map_err(err)?;
        if back.len() != items.len() {
            return Err(format!("{storage:?} corpus: {} of {} items", back.len(), items.len()));
        }
        for (a, b) in items.iter().zip(&back) {
            if a.id != b.id || a.caption != b.caption || a.pos_tags != b.pos_tags || a.split != b.split || !a.image.bit_eq(&b.image) {
                return Err(format!("{storage:?} corpus item {} changed", a.id));
            }
        }
    }

    for label in TABLE_LABELS {
        let p: PlacementSpec = label.parse().map_err(err)?;
        if p.to_string() != *label {
            return Err(format!("`{label}` printed as `{p}`"));
        }
        for site in [EncoderSite::Fusion, EncoderSite::Text, EncoderSite::Both] {
            let q = p.clone().with_site(site);
            let json = serde_json::to_string(&q).map_err(err)?;
            let back: PlacementSpec = serde_json::from_str(&json).map_err(err)?;
            if back != q {
                return Err(format!("`{label}` ({site:?}) changed through serde"));
            }
        }
    }
    Ok(format!(
        "{models} checkpoints bitwise, corpus inline + files bitwise, {} placement labels parse∘print = id",
        TABLE_LABELS.len()
    ))
}
