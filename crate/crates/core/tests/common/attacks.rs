//! Projection, zero-budget and masked-attack contracts.

use fda_core::attacks::{attack, attack_with_hook, AttackConfig, AttackFamily, AttackMode};
use fda_core::{FunctionWordDictionary, Tensor};

use super::{err, fda_fixture_model, fixture_items, Outcome};

pub const EPSILONS: [f64; 3] = [0.0, 2.0 / 255.0, 4.0 / 255.0];

fn config(family: AttackFamily, eps: f64, seed: u64) -> AttackConfig {
    AttackConfig {
        random_start: true,
        seed,
        ..AttackConfig::for_family(family, eps)
    }
}

pub fn check() -> Outcome {
    let model = fda_fixture_model("L0-1,H0-3", 5);
    let items = fixture_items();
    let seqs: Vec<_> = items
        .iter()
        .map(|it| it.sequence(model.config().max_len))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let dict = FunctionWordDictionary::builtin();
    let n = items.len();
    let mut iterates = 0usize;
    for family in AttackFamily::ALL {
        for eps in EPSILONS {
            for i in 0..n {
                let mut cfg = config(family, eps, 40 + i as u64);
                if i % 4 == 3 {
                    cfg.mode = AttackMode::Untargeted;
                }
                let target = (cfg.mode == AttackMode::Targeted).then(|| &seqs[(i + 1) % n]);
                let x0 = &items[i].image;
                let mut violation: Option<String> = None;
                let mut hook = |x: &Tensor| {
                    iterates += 1;
                    if violation.is_some() {
                        return;
                    }
                    for (j, (a, b)) in x.data().iter().zip(x0.data()).enumerate() {
                        if !((a - b).abs() <= eps && (0.0..=1.0).contains(a)) {
                            violation = Some(format!("pixel {j}: {a} vs clean {b}"));
                            return;
                        }
                    }
                    if eps == 0.0 && !x.bit_eq(x0) {
                        violation = Some("iterate moved under a zero budget".into());
                    }
                };
                let res = attack_with_hook(&model, x0, &seqs[i], target, &dict, &cfg, &mut hook).map_err(err)?;
                if let Some(v) = violation {
                    return Err(format!("{family} ε={eps:.5} item {i}: {v}"));
                }
                if eps == 0.0 && !res.adv_image.bit_eq(x0) {
                    return Err(format!("{family} ε=0 item {i}: result differs from the clean image"));
                }
                for (a, b) in res.adv_image.data().iter().zip(x0.data()) {
                    if !((a - b).abs() <= eps && (0.0..=1.0).contains(a)) {
                        return Err(format!("{family} ε={eps:.5} item {i}: result outside the ball"));
                    }
                }
            }
        }
    }
    // MAPGD with nothing to mask is APGD
    let empty = FunctionWordDictionary::empty();
    for eps in [2.0 / 255.0, 4.0 / 255.0] {
        for i in (0..n).step_by(3) {
            let target = Some(&seqs[(i + 1) % n]);
            let a = attack(&model, &items[i].image, &seqs[i], target, &empty, &config(AttackFamily::Apgd, eps, 9)).map_err(err)?;
            let m = attack(&model, &items[i].image, &seqs[i], target, &empty, &config(AttackFamily::Mapgd, eps, 9)).map_err(err)?;
            let same_trace = a.loss_trace.len() == m.loss_trace.len()
                && a.loss_trace.iter().zip(&m.loss_trace).all(|(x, y)| x.to_bits() == y.to_bits());
            if !a.adv_image.bit_eq(&m.adv_image) || !same_trace {
                return Err(format!("MAPGD with an empty dictionary differs from APGD (item {i}, ε={eps:.5})"));
            }
        }
    }
    Ok(format!(
        "{n} items × 3 families × 3 budgets, {iterates} iterates inside the ball; ε=0 bitwise clean; empty-dictionary MAPGD ≡ APGD"
    ))
}
