//! Central finite differences against the tape.

use fda_core::fda::{fda_multihead, AttentionInputs, AttentionWeights, FdaSite, Gate, GateTable, HeadLayout, MinMode};
use fda_core::tensor::Tape;
use fda_core::{PlacementSpec, Tensor, Var};
use rand::Rng;

use super::{err, rel_error, rng, Outcome};

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
const KINK_TOL: f64 = 1e-3;
const MAX_REDRAWS: usize = 8;

type OpFn = dyn Fn(&mut Tape, &[Var]) -> fda_core::Result<Var>;

/// Largest relative error over the inputs of `f`, using the readout
/// `Σ f(x) ⊙ R` with a fixed random `R`.
pub fn op_gradient_error(inputs: &[Tensor], f: &OpFn, seed: u64) -> Result<f64, String> {
    let readout = |tape: &mut Tape, vars: &[Var], weights: Option<&Tensor>| -> fda_core::Result<(Var, Tensor)> {
        let out = f(tape, vars)?;
        let shape = tape.shape(out).to_vec();
        let r = match weights {
            Some(w) => w.clone(),
            None => Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc)),
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        Ok((tape.sum(prod)?, r))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let (loss, r) = readout(&mut tape, &vars, None).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;

    let eval = |xs: &[Tensor]| -> Result<f64, String> {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let (l, _) = readout(&mut t, &v, Some(&r)).map_err(err)?;
        t.value(l).item().map_err(err)
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).ok_or("input received no gradient")?.data().to_vec();
        let mut numeric = Vec::with_capacity(x.numel());
        let mut xs = inputs.to_vec();
        for j in 0..x.numel() {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + H;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - H;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Values bounded away from 0 so that kinks are not straddled.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, r);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Box<OpFn>,
}

fn cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut m = |rows: usize, cols: usize| Tensor::randn(&[rows, cols], 1.0, &mut r);
    let (a34, b34, c34, a42, row, x35) = (m(3, 4), m(3, 4), m(3, 4), m(4, 2), m(1, 4), m(3, 5));
    let mut r = rng(seed ^ 1);
    let gap = away_from_zero(&[3, 4], &mut r);
    let kinked = away_from_zero(&[3, 4], &mut r);
    let s1 = Tensor::randn(&[1], 1.0, &mut r);
    let big = Tensor::randn(&[4, 6], 2.0, &mut r);
    let idx: Vec<usize> = (0..10).map(|_| r.random_range(0..12)).collect();
    let mask: Vec<bool> = (0..12).map(|_| r.random_bool(0.4)).collect();
    let take: Vec<bool> = (0..3).map(|_| r.random_bool(0.5)).collect();
    let a_plus_gap = Tensor::new(&[3, 4], a34.data().iter().zip(gap.data()).map(|(a, g)| a + g).collect()).unwrap();

    let case = |name, inputs: Vec<Tensor>, f: Box<OpFn>| OpCase { name, inputs, f };
    vec![
        case("matmul", vec![a34.clone(), a42], Box::new(|t, v| t.matmul(v[0], v[1]))),
        case("add", vec![a34.clone(), b34.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", vec![a34.clone(), b34.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", vec![a34.clone(), b34.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        case("elementwise_min", vec![a34.clone(), a_plus_gap], Box::new(|t, v| t.elementwise_min(v[0], v[1]))),
        case("add_row", vec![a34.clone(), row], Box::new(|t, v| t.add_row(v[0], v[1]))),
        case("scale", vec![a34.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        case("scale_by", vec![a34.clone(), s1], Box::new(|t, v| t.scale_by(v[0], v[1]))),
        case(
            "row_select",
            vec![a34.clone(), b34.clone()],
            Box::new(move |t, v| t.row_select(v[0], v[1], take.clone())),
        ),
        case("transpose", vec![x35.clone()], Box::new(|t, v| t.transpose(v[0]))),
        case("concat_rows", vec![a34.clone(), b34.clone(), c34.clone()], Box::new(|t, v| t.concat(v, 0))),
        case("concat_cols", vec![a34.clone(), x35.clone()], Box::new(|t, v| t.concat(v, 1))),
        case(
            "masked_fill",
            vec![a34.clone()],
            Box::new(move |t, v| t.masked_fill(v[0], &mask, -3.0)),
        ),
        case("slice_rows", vec![x35.clone()], Box::new(|t, v| t.slice(v[0], 0, 1, 2))),
        case("slice_cols", vec![x35.clone()], Box::new(|t, v| t.slice(v[0], 1, 2, 3))),
        case("sum", vec![a34.clone()], Box::new(|t, v| t.sum(v[0]))),
        case("mean", vec![a34.clone()], Box::new(|t, v| t.mean(v[0]))),
        case("softmax_rows", vec![big.clone()], Box::new(|t, v| t.softmax(v[0], 1))),
        case("softmax_cols", vec![big.clone()], Box::new(|t, v| t.softmax(v[0], 0))),
        case("relu", vec![kinked], Box::new(|t, v| t.relu(v[0]))),
        case("sigmoid", vec![big.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        case("softplus", vec![big.clone()], Box::new(|t, v| t.softplus(v[0]))),
        case("layer_norm", vec![big], Box::new(|t, v| t.layer_norm(v[0], 1e-5))),
        case(
            "gather",
            vec![a34],
            Box::new(move |t, v| t.gather(v[0], idx.clone(), &[2, 5])),
        ),
    ]
}

/// `fda_multihead` with learnable gates, differentiated with respect to
/// all features, weights and raw gates at once.
fn fda_multihead_case(seed: u64, min_mode: MinMode) -> OpCase {
    let layout = HeadLayout { heads: 2, head_dim: 3 };
    let d = layout.width();
    let mut r = rng(seed ^ 7);
    let mut w = AttentionWeights::random(d, &mut r);
    for b in [&mut w.bq, &mut w.bk, &mut w.bv, &mut w.bo] {
        *b = Tensor::randn(&[1, d], 0.3, &mut r);
    }
    let mut inputs = vec![
        Tensor::randn(&[4, d], 1.0, &mut r),
        Tensor::randn(&[4, d], 1.0, &mut r),
        Tensor::randn(&[5, d], 1.0, &mut r),
        Tensor::randn(&[1], 1.0, &mut r),
    ];
    inputs.extend([w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo]);
    let f = move |t: &mut Tape, v: &[Var]| {
        let placement: PlacementSpec = "L0,H1".parse().unwrap();
        let mut gates = GateTable::new();
        gates.insert((0, 1), Gate::Learned(v[3]));
        let w = AttentionWeights {
            wq: v[4],
            bq: v[5],
            wk: v[6],
            bk: v[7],
            wv: v[8],
            bv: v[9],
            wo: v[10],
            bo: v[11],
        };
        let site = FdaSite {
            placement: &placement,
            gates: &gates,
            layer: 0,
            depth: 1,
            min_mode,
        };
        fda_multihead(t, AttentionInputs::fusion(v[0], v[1], v[2]), &w, layout, Some(site))
    };
    OpCase {
        name: match min_mode {
            MinMode::Elementwise => "fda_multihead",
            MinMode::RowBranch => "fda_multihead_row_branch",
        },
        inputs,
        f: Box::new(f),
    }
}

/// Every tape op plus the composite attention block, over `seeds`.
pub fn check_ops(seeds: std::ops::Range<u64>) -> Outcome {
    let mut worst = (0.0, "");
    let mut n = 0;
    for seed in seeds.clone() {
        let mut all = cases(seed);
        all.push(fda_multihead_case(seed, MinMode::Elementwise));
        all.push(fda_multihead_case(seed, MinMode::RowBranch));
        for c in &all {
            let e = op_gradient_error(&c.inputs, c.f.as_ref(), seed)?;
            if !(e <= OP_TOL) {
                return Err(format!("{} seed {seed}: relative error {e:.2e} > {OP_TOL:.0e}", c.name));
            }
            if e > worst.0 {
                worst = (e, c.name);
            }
            n += 1;
        }
    }
    Ok(format!(
        "{n} op checks over {} seeds, worst {:.2e} ({})",
        seeds.end - seeds.start,
        worst.0,
        worst.1
    ))
}

/// Pixel gradient of the score against central differences on a sample of
/// pixels and along random directions.
pub fn check_pixel_gradient(seeds: std::ops::Range<u64>) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let placement = if seed % 2 == 0 { "Lall,Hall" } else { "L0-1,H0-3" };
        let mut m = super::fda_fixture_model(placement, seed);
        if seed % 3 == 0 {
            let p: PlacementSpec = placement.parse().unwrap();
            m = m.with_placement(p.with_site(fda_core::EncoderSite::Both), fda_core::GateMode::Fixed(0.6)).map_err(err)?;
        }
        let items = fda_core::corpus::generate(100 + seed, 1, 0.0).map_err(err)?;
        let seq = items[0].sequence(16).map_err(err)?;
        let mut r = rng(seed ^ 0x77);
        // keep pixels away from the box edges so ±h stays valid
        let img = Tensor::rand_uniform(&[32, 32, 3], 0.05, 0.95, &mut r);
        let text = m.text_features(&seq).map_err(err)?;
        let (_, g) = m.score_with_pixel_grad(&img, &text).map_err(err)?;
        let score_at = |x: &Tensor| m.score_features(&m.encode_image(x).map_err(err)?, &text).map_err(err);

        let coords: Vec<usize> = (0..24).map(|_| r.random_range(0..img.numel())).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &coords {
            let mut x = img.clone();
            x.data_mut()[j] += H;
            let up = score_at(&x)?;
            x.data_mut()[j] -= 2.0 * H;
            let down = score_at(&x)?;
            analytic.push(g.data()[j]);
            numeric.push((up - down) / (2.0 * H));
        }
        let centre = score_at(&img)?;
        let mut directions = 0;
        let mut redrawn = 0;
        while directions < 4 {
            let u = Tensor::randn(img.shape(), 1.0, &mut r);
            let step = |s: f64| {
                let mut x = img.clone();
                for (v, d) in x.data_mut().iter_mut().zip(u.data()) {
                    *v += s * d;
                }
                x
            };
            let up = score_at(&step(H))?;
            let down = score_at(&step(-H))?;
            // a direction moves every pixel, so it can cross a tie of the
            // elementwise min inside ±h; the one-sided slopes expose that
            let (fwd, bwd) = ((up - centre) / H, (centre - down) / H);
            if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                redrawn += 1;
                if redrawn > MAX_REDRAWS {
                    return Err(format!("pixel gradient seed {seed}: every direction crosses a kink"));
                }
                continue;
            }
            analytic.push(g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum());
            numeric.push((up - down) / (2.0 * H));
            directions += 1;
        }
        let e = rel_error(&analytic, &numeric);
        if !(e <= E2E_TOL) {
            return Err(format!("pixel gradient seed {seed}: relative error {e:.2e} > {E2E_TOL:.0e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!(
        "pixel gradient over {} seeds (24 pixels + 4 directions each), worst {worst:.2e}",
        seeds.end - seeds.start
    ))
}
