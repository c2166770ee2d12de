//! Metric arithmetic against hand-computed values.

use fda_core::eval::{asr_targeted, asr_untargeted, delta_asr};

use super::{err, Outcome};

/// (target ranks, k, ASR@k) worked out by hand.
const TARGETED: [(&[usize], usize, f64); 10] = [
    (&[1, 1, 1, 2, 3, 4, 5, 6, 7, 8], 1, 30.0),
    (&[1, 1, 1, 2, 3, 4, 5, 6, 7, 8], 5, 70.0),
    (&[6, 7, 9, 12], 5, 0.0),
    (&[3, 1, 2], 3, 100.0),
    (&[2, 2, 2, 2], 1, 0.0),
    (&[1, 9], 1, 50.0),
    (&[5, 6, 5, 6, 1, 1, 2, 30], 5, 62.5),
    (&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16], 5, 31.25),
    (&[4, 4, 4, 4, 4], 4, 100.0),
    (&[10, 1, 10, 1, 10, 1, 10, 1, 10, 1, 10, 1, 10, 1, 10, 1, 10, 1, 10, 1], 1, 50.0),
];

/// (clean ranks, adversarial ranks, k, ASR = R@k drop) worked out by hand.
const UNTARGETED: [(&[usize], &[usize], usize, f64); 10] = [
    (&[1, 1, 1, 1], &[1, 3, 3, 3], 1, 75.0),
    (&[1, 1, 1, 1], &[1, 1, 1, 1], 1, 0.0),
    (&[1, 2, 1, 2], &[1, 1, 1, 1], 1, 0.0),
    (&[1, 1, 2, 9, 1, 1, 1, 4], &[7, 7, 7, 7, 7, 1, 1, 7], 1, 37.5),
    (&[1, 1, 2, 9, 1, 1, 1, 4], &[7, 7, 7, 7, 7, 1, 1, 7], 5, 62.5),
    (&[1, 1], &[2, 2], 1, 100.0),
    (&[3, 3, 3, 3, 3], &[3, 3, 6, 6, 6], 5, 60.0),
    (&[1, 6, 1, 6], &[6, 6, 1, 1], 1, 0.0),
    (&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1], &[1, 2, 1, 2, 1, 2, 1, 2, 1, 1], 1, 40.0),
    (&[1, 2, 3, 4, 5, 6, 7, 8], &[2, 3, 4, 5, 6, 7, 8, 9], 4, 12.5),
];

pub fn check() -> Outcome {
    let d = delta_asr(14.68, 12.44).map_err(err)?;
    if !((d - 15.26).abs() <= 0.01) {
        return Err(format!("delta_asr(14.68, 12.44) = {d}"));
    }
    for (i, (ranks, k, want)) in TARGETED.iter().enumerate() {
        let got = asr_targeted(ranks, *k).map_err(err)?;
        if got != *want {
            return Err(format!("targeted set {i}: {got} != {want}"));
        }
    }
    for (i, (clean, adv, k, want)) in UNTARGETED.iter().enumerate() {
        // recall of the paired item is the hit rate of its rank
        let c = asr_targeted(clean, *k).map_err(err)?;
        let a = asr_targeted(adv, *k).map_err(err)?;
        let got = asr_untargeted(c, a).map_err(err)?;
        if got != *want {
            return Err(format!("untargeted set {i}: {got} != {want}"));
        }
    }
    Ok(format!("delta_asr(14.68, 12.44) = {d:.4}; 10 targeted and 10 untargeted rank sets exact"))
}
