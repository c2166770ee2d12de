//! Checks shared by the integration suites and the acceptance runner.
//! Each `check_*` returns `Ok(detail)` or `Err(reason)`.
#![allow(dead_code)]
// `!(x <= tol)` is deliberate: NaN must fail the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod attacks;
pub mod e2e;
pub mod gate_off;
pub mod gradients;
pub mod metrics;
pub mod oracle;
pub mod roundtrip;
pub mod softmax;

use fda_core::corpus::{generate, CorpusItem};
use fda_core::{GateMode, Model, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fails with `msg` unless `cond`.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    // an exactly-zero true gradient leaves only rounding noise on both
    // sides, so the denominator is floored
    diff / scale.max(GRAD_SCALE_FLOOR)
}

/// Untrained model whose readout is random, so scores and pixel gradients
/// are informative.
pub fn random_head_model(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(config).expect("valid config");
    let width = m.config().width;
    let mut r = rng(seed ^ 0x5eed);
    m.set_param("head.w", Tensor::randn(&[width, 1], 1.0, &mut r)).unwrap();
    m.set_param("head.b", Tensor::randn(&[1, 1], 0.1, &mut r)).unwrap();
    m
}

/// The 8-head model with FDA on `placement` and learnable gates drawn at
/// random, readout randomized.
pub fn fda_fixture_model(placement: &str, seed: u64) -> Model {
    let mut m = random_head_model(
        ModelConfig {
            placement: placement.parse().unwrap(),
            gate_mode: GateMode::Learnable,
            seed,
            ..ModelConfig::default()
        },
        seed,
    );
    let mut r = rng(seed ^ 0x9a7e);
    let gates: Vec<String> = m
        .params()
        .names()
        .iter()
        .filter(|n| n.starts_with("gate."))
        .map(|n| n.to_string())
        .collect();
    for g in gates {
        m.set_param(&g, Tensor::randn(&[1], 1.0, &mut r)).unwrap();
    }
    m
}

/// The 16-item fixture corpus used by the contract suites.
pub fn fixture_items() -> Vec<CorpusItem> {
    generate(16, 16, 0.0).expect("fixture corpus")
}
