//! Straight-loop reference for plain and de-attended multi-head attention.

use fda_core::fda::{
    fda_multihead, multihead_attention, AttentionInputs, AttentionWeights, FdaSite, Gate, GateTable, HeadLayout,
    MinMode,
};
use fda_core::tensor::Tape;
use fda_core::{PlacementSpec, Tensor};
use rand::Rng;

use super::{err, rng, Outcome};

pub const TOL: f64 = 1e-6;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// `x·W + b` with explicit loops.
fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut acc = b[j];
                    for (k, xv) in row.iter().enumerate() {
                        acc += xv * w[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Head-`h` scores `q·kᵀ/√d`.
fn scores(q: &Mat, k: &Mat, h: usize, dh: usize) -> Mat {
    q.iter()
        .map(|qi| {
            k.iter()
                .map(|kj| {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += qi[c] * kj[c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Softmax of every row.
fn softmax_rows(s: &Mat) -> Mat {
    s.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Softmax of every column.
fn softmax_cols(s: &Mat) -> Mat {
    let (r, c) = (s.len(), s[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for j in 0..c {
        let m = (0..r).map(|i| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..r).map(|i| (s[i][j] - m).exp()).sum();
        for i in 0..r {
            out[i][j] = (s[i][j] - m).exp() / z;
        }
    }
    out
}

/// `p · v[:, head columns]`.
fn weighted(p: &Mat, v: &Mat, h: usize, dh: usize) -> Mat {
    p.iter()
        .map(|pi| {
            (h * dh..(h + 1) * dh)
                .map(|c| pi.iter().zip(v).map(|(a, vr)| a * vr[c]).sum())
                .collect()
        })
        .collect()
}

struct Weights {
    wq: Mat,
    bq: Vec<f64>,
    wk: Mat,
    bk: Vec<f64>,
    wv: Mat,
    bv: Vec<f64>,
    wo: Mat,
    bo: Vec<f64>,
}

/// Reference output. `gates[h]` is `Some(g)` on de-attended heads.
fn reference(ft: &Mat, ftf: &Mat, fv: &Mat, w: &Weights, layout: HeadLayout, gates: &[Option<f64>], mode: MinMode) -> Mat {
    let dh = layout.head_dim;
    let q = affine(ft, &w.wq, &w.bq);
    let qf = affine(ftf, &w.wq, &w.bq);
    let k = affine(fv, &w.wk, &w.bk);
    let v = affine(fv, &w.wv, &w.bv);
    let mut cat = vec![Vec::new(); ft.len()];
    for h in 0..layout.heads {
        let att = weighted(&softmax_rows(&scores(&q, &k, h, dh)), &v, h, dh);
        let out = match gates[h] {
            None => att,
            Some(g) => {
                let sf = scores(&qf, &k, h, dh);
                let at = weighted(&softmax_rows(&sf), &v, h, dh);
                let av = weighted(&softmax_cols(&sf), &v, h, dh);
                let mut rows = Vec::new();
                for i in 0..att.len() {
                    let a: Vec<f64> = (0..dh).map(|c| att[i][c] - g * at[i][c]).collect();
                    let b: Vec<f64> = (0..dh).map(|c| att[i][c] - g * av[i][c]).collect();
                    rows.push(match mode {
                        MinMode::Elementwise => a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect(),
                        MinMode::RowBranch => {
                            if a.iter().sum::<f64>() <= b.iter().sum::<f64>() {
                                a
                            } else {
                                b
                            }
                        }
                    });
                }
                rows
            }
        };
        for (i, row) in out.into_iter().enumerate() {
            cat[i].extend(row);
        }
    }
    affine(&cat, &w.wo, &w.bo)
}

fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((t.at(i, j) - v).abs());
        }
    }
    worst
}

/// 4 text tokens × 6 visual tokens, random layouts, placements and gates.
pub fn check(seeds: std::ops::Range<u64>) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let mut r = rng(1000 + seed);
        let layout = HeadLayout {
            heads: r.random_range(1..=4),
            head_dim: r.random_range(1..=4),
        };
        let d = layout.width();
        let mut w = AttentionWeights::random(d, &mut r);
        for b in [&mut w.bq, &mut w.bk, &mut w.bv, &mut w.bo] {
            *b = Tensor::randn(&[1, d], 0.5, &mut r);
        }
        let ft = Tensor::randn(&[4, d], 1.0, &mut r);
        let ftf = Tensor::randn(&[4, d], 1.0, &mut r);
        let fv = Tensor::randn(&[6, d], 1.0, &mut r);
        let heads: Vec<usize> = (0..layout.heads).filter(|_| r.random_bool(0.6)).collect();
        let spec = if heads.is_empty() {
            "L0,H0".to_string()
        } else {
            // contiguous range covering the chosen heads
            format!("L0,H{}-{}", heads[0], heads[heads.len() - 1])
        };
        let placement: PlacementSpec = spec.parse().map_err(err)?;
        let mut gates = GateTable::new();
        let mut ref_gates = vec![None; layout.heads];
        for (l, h) in placement.resolve(1, layout.heads) {
            let g = r.random_range(0.0..=1.0);
            gates.insert((l, h), Gate::Fixed(g));
            ref_gates[h] = Some(g);
        }
        let ww = Weights {
            wq: to_mat(&w.wq),
            bq: w.bq.data().to_vec(),
            wk: to_mat(&w.wk),
            bk: w.bk.data().to_vec(),
            wv: to_mat(&w.wv),
            bv: w.bv.data().to_vec(),
            wo: to_mat(&w.wo),
            bo: w.bo.data().to_vec(),
        };
        let (mt, mtf, mv) = (to_mat(&ft), to_mat(&ftf), to_mat(&fv));

        let mut tape = Tape::new();
        let wv = w.bind(&mut tape, false);
        let (vt, vtf, vv) = (tape.constant(ft), tape.constant(ftf), tape.constant(fv));
        let plain = multihead_attention(&mut tape, vt, vv, &wv, layout, None).map_err(err)?;
        let e = max_diff(tape.value(plain), &reference(&mt, &mtf, &mv, &ww, layout, &vec![None; layout.heads], MinMode::Elementwise));
        if !(e <= TOL) {
            return Err(format!("plain path seed {seed}: max |Δ| {e:.2e}"));
        }
        worst = worst.max(e);
        for mode in [MinMode::Elementwise, MinMode::RowBranch] {
            let site = FdaSite {
                placement: &placement,
                gates: &gates,
                layer: 0,
                depth: 1,
                min_mode: mode,
            };
            let out = fda_multihead(&mut tape, AttentionInputs::fusion(vt, vtf, vv), &wv, layout, Some(site)).map_err(err)?;
            let e = max_diff(tape.value(out), &reference(&mt, &mtf, &mv, &ww, layout, &ref_gates, mode));
            if !(e <= TOL) {
                return Err(format!("FDA path ({mode:?}, {spec}) seed {seed}: max |Δ| {e:.2e}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!(
        "{} seeds, plain + FDA (elementwise and row-branch), worst max |Δ| {worst:.2e}",
        seeds.end - seeds.start
    ))
}
