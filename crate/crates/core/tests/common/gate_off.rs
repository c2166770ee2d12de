//! Zero gates reproduce the model without de-attention.

use fda_core::attacks::AttackConfig;
use fda_core::eval::{run_experiment, Defense, ExperimentPlan};
use fda_core::vlm::{retrieve, score_matrix, Direction};
use fda_core::{EncoderSite, GateMode, ModelConfig, PlacementSpec, Tensor};

use super::{err, fixture_items, random_head_model, Outcome};

pub const PLACEMENTS: [&str; 5] = ["Lall,Hall", "L0,H1", "L1,H0-3", "L0-1,H0-5", "L0,Hall"];
pub const SITES: [EncoderSite; 3] = [EncoderSite::Fusion, EncoderSite::Text, EncoderSite::Both];
pub const TOL: f64 = 1e-9;

pub fn check() -> Outcome {
    let base = random_head_model(
        ModelConfig {
            seed: 21,
            ..ModelConfig::default()
        },
        21,
    );
    let items = fixture_items();
    let images: Vec<Tensor> = items.iter().map(|it| it.image.clone()).collect();
    let captions: Vec<_> = items
        .iter()
        .map(|it| it.sequence(base.config().max_len))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let plain = score_matrix(&base, &images, &captions).map_err(err)?;
    let plain_ranks: Vec<_> = Direction::BOTH
        .iter()
        .map(|&d| retrieve(&base, &images, &captions, d))
        .collect::<Result<_, _>>()
        .map_err(err)?;

    let mut worst: f64 = 0.0;
    let mut variants = 0;
    for spec in PLACEMENTS {
        for site in SITES {
            let p: PlacementSpec = spec.parse::<PlacementSpec>().map_err(err)?.with_site(site);
            let off = base.with_placement(p, GateMode::Fixed(0.0)).map_err(err)?;
            let m = score_matrix(&off, &images, &captions).map_err(err)?;
            for (ra, rb) in plain.iter().zip(&m) {
                for (a, b) in ra.iter().zip(rb) {
                    worst = worst.max((a - b).abs());
                }
            }
            if !(worst <= TOL) {
                return Err(format!("{spec} on {site:?}: score differs by {worst:.2e}"));
            }
            for (d, want) in Direction::BOTH.iter().zip(&plain_ranks) {
                if &retrieve(&off, &images, &captions, *d).map_err(err)? != want {
                    return Err(format!("{spec} on {site:?}: {d} ranking changed"));
                }
            }
            variants += 1;
        }
    }

    // the whole experiment pipeline, one gate-off leg per site
    let mut plan = ExperimentPlan::new(
        Defense::new("no-defense", base.clone()),
        items,
        vec![AttackConfig::pgd(2.0 / 255.0)],
    );
    plan.seed = 3;
    for site in SITES {
        let p = "Lall,Hall".parse::<PlacementSpec>().map_err(err)?.with_site(site);
        plan.defenses.push(Defense::new(
            format!("fda-off-{site:?}"),
            base.with_placement(p, GateMode::Fixed(0.0)).map_err(err)?,
        ));
    }
    let out = run_experiment(&plan).map_err(err)?;
    let per_leg = out.records.len() / 4;
    let (baseline, rest) = out.records.split_at(per_leg);
    for leg in rest.chunks(per_leg) {
        for (a, b) in baseline.iter().zip(leg) {
            if !a.same_metrics(b) {
                return Err(format!("experiment record for {} differs: {a:?} vs {b:?}", b.defense));
            }
        }
    }
    Ok(format!(
        "{variants} placement×site variants: scores within {worst:.1e}, rankings equal; experiment records identical"
    ))
}
