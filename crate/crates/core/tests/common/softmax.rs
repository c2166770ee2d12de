//! Row/column stochasticity of every attention softmax.

use fda_core::fda::{head_maps, AttentionWeights, HeadLayout, MASKED_SCORE};
use fda_core::tensor::Tape;
use fda_core::Tensor;
use rand::Rng;

use super::{err, rng, Outcome};

pub const TOL: f64 = 1e-6;

fn row_sums(t: &Tensor) -> Vec<f64> {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).iter().sum()).collect()
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2().unwrap();
    (0..c).map(|j| (0..r).map(|i| t.at(i, j)).sum()).collect()
}

fn all_one(sums: &[f64]) -> Option<f64> {
    sums.iter().map(|s| (s - 1.0).abs()).find(|d| !(*d <= TOL))
}

pub fn check(shapes: usize) -> Outcome {
    let mut r = rng(3);
    for case in 0..shapes {
        let heads = r.random_range(1..=4);
        let head_dim = r.random_range(1..=6);
        let layout = HeadLayout { heads, head_dim };
        let d = layout.width();
        let n_t = r.random_range(1..=8);
        let n_v = r.random_range(1..=10);
        let scale = r.random_range(0.1..20.0);

        // raw softmax along both axes, with large logits
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[n_t, n_v], scale, &mut r));
        let p1 = tape.softmax(x, 1).map_err(err)?;
        let p0 = tape.softmax(x, 0).map_err(err)?;
        if let Some(e) = all_one(&row_sums(tape.value(p1))) {
            return Err(format!("case {case}: softmax rows off by {e:.2e}"));
        }
        if let Some(e) = all_one(&col_sums(tape.value(p0))) {
            return Err(format!("case {case}: softmax columns off by {e:.2e}"));
        }

        // masked keys, as in text self-attention (the first key always kept)
        let mask: Vec<bool> = (0..n_t * n_v).map(|i| i % n_v != 0 && r.random_bool(0.5)).collect();
        let masked = tape.masked_fill(x, &mask, MASKED_SCORE).map_err(err)?;
        let pm = tape.softmax(masked, 1).map_err(err)?;
        if let Some(e) = all_one(&row_sums(tape.value(pm))) {
            return Err(format!("case {case}: masked softmax rows off by {e:.2e}"));
        }

        // attention and both distraction maps of a random head
        let w = AttentionWeights::random(d, &mut r).bind(&mut tape, false);
        let ft = tape.constant(Tensor::randn(&[n_t, d], scale, &mut r));
        let ftf = tape.constant(Tensor::randn(&[n_t, d], scale, &mut r));
        let fv = tape.constant(Tensor::randn(&[n_v, d], scale, &mut r));
        let head = r.random_range(0..heads);
        let maps = head_maps(&mut tape, ft, ftf, fv, &w, layout, head).map_err(err)?;
        if let Some(e) = all_one(&row_sums(&maps.original)) {
            return Err(format!("case {case}: attention rows off by {e:.2e}"));
        }
        if let Some(e) = all_one(&row_sums(&maps.distraction_text)) {
            return Err(format!("case {case}: visual-axis distraction rows off by {e:.2e}"));
        }
        if let Some(e) = all_one(&col_sums(&maps.distraction_visual)) {
            return Err(format!("case {case}: text-axis distraction columns off by {e:.2e}"));
        }
    }
    Ok(format!("{shapes} random shapes: plain, masked, attention and dual-axis distraction softmaxes"))
}
