//! Multi-head cross-attention and function-word de-attention.
//!
//! For a placed head the function-word queries are scored against the same
//! keys as the main path. The scores are softmaxed along the key axis
//! (per query token) and along the query axis (per key token); both
//! probability maps are applied to the values, scaled by the head's gate,
//! and subtracted from the ordinary attention output. The elementwise
//! minimum of the two differences replaces that head's output before the
//! heads are concatenated and projected.

mod placement;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use placement::{EncoderSite, IndexSet, PlacementSpec};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Score assigned to masked-out keys before the softmax.
pub const MASKED_SCORE: f64 = -1e30;

/// Query/key/value/output projections of one attention block. Head `h`
/// owns columns `h·head_dim .. (h+1)·head_dim` of the q/k/v projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            wq: f("wq", &self.wq),
            bq: f("bq", &self.bq),
            wk: f("wk", &self.wk),
            bk: f("bk", &self.bk),
            wv: f("wv", &self.wv),
            bv: f("bv", &self.bv),
            wo: f("wo", &self.wo),
            bo: f("bo", &self.bo),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<AttentionWeights<U>> {
        Ok(AttentionWeights {
            wq: f("wq", &self.wq)?,
            bq: f("bq", &self.bq)?,
            wk: f("wk", &self.wk)?,
            bk: f("bk", &self.bk)?,
            wv: f("wv", &self.wv)?,
            bv: f("bv", &self.bv)?,
            wo: f("wo", &self.wo)?,
            bo: f("bo", &self.bo)?,
        })
    }
}

impl AttentionWeights<Tensor> {
    /// Gaussian weights scaled by `1/√width`, zero biases.
    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mut w = || Tensor::randn(&[width, width], std, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let b = || Tensor::zeros(&[1, width]);
        Self {
            wq,
            bq: b(),
            wk,
            bk: b(),
            wv,
            bv: b(),
            wo,
            bo: b(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionWeights<Var> {
        self.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// Head count and per-head width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn width(self) -> usize {
        self.heads * self.head_dim
    }
}

/// How a gate value is produced.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum GateMode {
    /// `g = logistic(raw)`, `raw` trained with the model.
    #[default]
    Learnable,
    /// constant `g ∈ [0, 1]`
    Fixed(f64),
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learnable" {
            return Ok(GateMode::Learnable);
        }
        let v = s
            .strip_prefix("fixed:")
            .unwrap_or(s)
            .parse::<f64>()
            .map_err(|_| Error::parse(s, "expected `learnable` or `fixed:<g>`"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("fixed gate {v} outside [0, 1]")));
        }
        Ok(GateMode::Fixed(v))
    }
}

/// One head's gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParam {
    pub raw: f64,
    pub mode: GateMode,
}

impl GateParam {
    pub fn effective(&self) -> f64 {
        match self.mode {
            GateMode::Learnable => crate::tensor::logistic(self.raw),
            GateMode::Fixed(g) => g,
        }
    }
}

/// Gate as seen by a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gate {
    Fixed(f64),
    /// Raw pre-logistic scalar on the tape.
    Learned(Var),
}

/// Gates keyed by `(layer, head)`.
pub type GateTable = BTreeMap<(usize, usize), Gate>;

/// How the two gated differences are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMode {
    /// per-feature minimum
    #[default]
    Elementwise,
    /// whole row of the branch with the smaller row sum
    RowBranch,
}

impl FromStr for MinMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "elementwise" => Ok(MinMode::Elementwise),
            "row_branch" | "row" => Ok(MinMode::RowBranch),
            _ => Err(Error::parse(s, "expected elementwise or row_branch")),
        }
    }
}

/// `x·W + b`
pub fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn check_width(tape: &Tape, x: Var, layout: HeadLayout, what: &str) -> Result<()> {
    let (_, d) = tape.value(x).dims2()?;
    if d != layout.width() {
        return Err(Error::shape(format!(
            "{what} width {d} does not match {} heads × {}",
            layout.heads, layout.head_dim
        )));
    }
    Ok(())
}

fn head_slice(tape: &mut Tape, x: Var, layout: HeadLayout, head: usize) -> Result<Var> {
    if head >= layout.heads {
        return Err(Error::InvalidIndex(format!(
            "head {head} of {}",
            layout.heads
        )));
    }
    tape.slice(x, 1, head * layout.head_dim, layout.head_dim)
}

/// `q·kᵀ/√d_k` with masked keys pushed to [`MASKED_SCORE`].
fn scaled_scores(
    tape: &mut Tape,
    q: Var,
    k: Var,
    head_dim: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (head_dim as f64).sqrt())?;
    match key_mask {
        Some(mask) if !mask.iter().all(|&b| b) => {
            let (rows, cols) = tape.value(s).dims2()?;
            if mask.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    got: mask.len(),
                });
            }
            let fill: Vec<bool> = (0..rows * cols).map(|i| !mask[i % cols]).collect();
            tape.masked_fill(s, &fill, MASKED_SCORE)
        }
        _ => Ok(s),
    }
}

/// Single-head attention output `softmax(QKᵀ/√d_k)·V` for `head`.
pub fn cross_attention(
    tape: &mut Tape,
    f_t: Var,
    f_v: Var,
    w: &AttentionWeights<Var>,
    layout: HeadLayout,
    head: usize,
) -> Result<Var> {
    check_width(tape, f_t, layout, "text features")?;
    check_width(tape, f_v, layout, "visual features")?;
    let q = project(tape, f_t, w.wq, w.bq)?;
    let k = project(tape, f_v, w.wk, w.bk)?;
    let v = project(tape, f_v, w.wv, w.bv)?;
    let (q, k, v) = (
        head_slice(tape, q, layout, head)?,
        head_slice(tape, k, layout, head)?,
        head_slice(tape, v, layout, head)?,
    );
    let s = scaled_scores(tape, q, k, layout.head_dim, None)?;
    let p = tape.softmax(s, 1)?;
    tape.matmul(p, v)
}

/// Pre-softmax scores of the function-word queries against the keys.
pub fn fda_scores(
    tape: &mut Tape,
    f_tf: Var,
    f_v: Var,
    w: &AttentionWeights<Var>,
    layout: HeadLayout,
    head: usize,
) -> Result<Var> {
    check_width(tape, f_tf, layout, "function-word features")?;
    check_width(tape, f_v, layout, "visual features")?;
    let q = project(tape, f_tf, w.wq, w.bq)?;
    let k = project(tape, f_v, w.wk, w.bk)?;
    let q = head_slice(tape, q, layout, head)?;
    let k = head_slice(tape, k, layout, head)?;
    scaled_scores(tape, q, k, layout.head_dim, None)
}

/// Distraction maps from scores `S` (text rows × visual columns): softmax
/// over the visual axis and over the text axis, each applied to `v_proj`.
pub fn fda_distractions(tape: &mut Tape, s: Var, v_proj: Var) -> Result<(Var, Var)> {
    let (_, n_v) = tape.value(s).dims2()?;
    let (n_v2, _) = tape.value(v_proj).dims2()?;
    if n_v != n_v2 {
        return Err(Error::shape(format!(
            "scores have {n_v} visual columns, values have {n_v2} rows"
        )));
    }
    let p_text = tape.softmax(s, 1)?;
    let p_vis = tape.softmax(s, 0)?;
    let att_t = tape.matmul(p_text, v_proj)?;
    let att_v = tape.matmul(p_vis, v_proj)?;
    Ok((att_t, att_v))
}

fn gate_value(tape: &mut Tape, gate: Gate) -> Result<GateApplied> {
    Ok(match gate {
        Gate::Fixed(g) => GateApplied::Fixed(g),
        Gate::Learned(raw) => GateApplied::Var(tape.sigmoid(raw)?),
    })
}

enum GateApplied {
    Fixed(f64),
    Var(Var),
}

impl GateApplied {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            GateApplied::Fixed(g) => tape.scale(x, g),
            GateApplied::Var(g) => tape.scale_by(x, g),
        }
    }
}

/// `min(Att − g·Ãtt_t, Att − g·Ãtt_v)`; ties take the `Ãtt_t` branch.
pub fn fda_subtract(
    tape: &mut Tape,
    att: Var,
    att_t: Var,
    att_v: Var,
    gate: Gate,
    mode: MinMode,
) -> Result<Var> {
    let shape = tape.shape(att).to_vec();
    if tape.shape(att_t) != shape.as_slice() || tape.shape(att_v) != shape.as_slice() {
        return Err(Error::shape(format!(
            "subtract operands {:?}, {:?}, {:?}",
            shape,
            tape.shape(att_t),
            tape.shape(att_v)
        )));
    }
    let g = gate_value(tape, gate)?;
    let gt = g.apply(tape, att_t)?;
    let gv = g.apply(tape, att_v)?;
    let a = tape.sub(att, gt)?;
    let b = tape.sub(att, gv)?;
    match mode {
        MinMode::Elementwise => tape.elementwise_min(a, b),
        MinMode::RowBranch => {
            let (av, bv) = (tape.value(a), tape.value(b));
            let (rows, _) = av.dims2()?;
            let take_a = (0..rows)
                .map(|r| av.row(r).iter().sum::<f64>() <= bv.row(r).iter().sum::<f64>())
                .collect();
            tape.row_select(a, b, take_a)
        }
    }
}

/// Operands of one multi-head block. For fusion attention `query` is the
/// text stream, `kv` the visual features, `fda_query` the function-word
/// features and `fda_kv == kv`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'m> {
    pub query: Var,
    pub kv: Var,
    pub fda_query: Option<Var>,
    pub fda_kv: Option<Var>,
    pub key_mask: Option<&'m [bool]>,
}

impl<'m> AttentionInputs<'m> {
    pub fn plain(query: Var, kv: Var) -> Self {
        Self {
            query,
            kv,
            fda_query: None,
            fda_kv: None,
            key_mask: None,
        }
    }

    pub fn fusion(f_t: Var, f_tf: Var, f_v: Var) -> Self {
        Self {
            query: f_t,
            kv: f_v,
            fda_query: Some(f_tf),
            fda_kv: None,
            key_mask: None,
        }
    }
}

/// Where a block sits and how its placed heads behave.
#[derive(Debug, Clone, Copy)]
pub struct FdaSite<'p> {
    pub placement: &'p PlacementSpec,
    pub gates: &'p GateTable,
    pub layer: usize,
    pub depth: usize,
    pub min_mode: MinMode,
}

/// Multi-head attention with de-attention on the heads placed at
/// `site.layer`; other heads use plain attention. Heads are concatenated in
/// index order, then output-projected.
pub fn fda_multihead(
    tape: &mut Tape,
    inputs: AttentionInputs<'_>,
    w: &AttentionWeights<Var>,
    layout: HeadLayout,
    site: Option<FdaSite<'_>>,
) -> Result<Var> {
    let placed: Vec<bool> = match site {
        Some(s) => {
            if s.layer >= s.depth {
                return Err(Error::InvalidPlacement(format!(
                    "layer {} of a {}-layer stack",
                    s.layer, s.depth
                )));
            }
            s.placement.validate(s.depth, layout.heads)?;
            (0..layout.heads)
                .map(|h| s.placement.contains(s.layer, h))
                .collect()
        }
        None => vec![false; layout.heads],
    };
    let any_placed = placed.iter().any(|&p| p);

    check_width(tape, inputs.query, layout, "query features")?;
    check_width(tape, inputs.kv, layout, "key/value features")?;
    let q = project(tape, inputs.query, w.wq, w.bq)?;
    let k = project(tape, inputs.kv, w.wk, w.bk)?;
    let v = project(tape, inputs.kv, w.wv, w.bv)?;

    let (qf, kf, vf) = if any_placed {
        let fq = inputs
            .fda_query
            .ok_or_else(|| Error::InvalidPlacement("placed heads need function-word features".into()))?;
        check_width(tape, fq, layout, "function-word features")?;
        let qf = if fq == inputs.query {
            q
        } else {
            project(tape, fq, w.wq, w.bq)?
        };
        let (kf, vf) = match inputs.fda_kv {
            Some(fkv) if fkv != inputs.kv => {
                check_width(tape, fkv, layout, "function-word keys")?;
                (project(tape, fkv, w.wk, w.bk)?, project(tape, fkv, w.wv, w.bv)?)
            }
            _ => (k, v),
        };
        (Some(qf), Some(kf), Some(vf))
    } else {
        (None, None, None)
    };

    let mut outputs = Vec::with_capacity(layout.heads);
    for (h, &is_placed) in placed.iter().enumerate() {
        let qh = head_slice(tape, q, layout, h)?;
        let kh = head_slice(tape, k, layout, h)?;
        let vh = head_slice(tape, v, layout, h)?;
        let s = scaled_scores(tape, qh, kh, layout.head_dim, inputs.key_mask)?;
        let p = tape.softmax(s, 1)?;
        let att = tape.matmul(p, vh)?;
        if !is_placed {
            outputs.push(att);
            continue;
        }
        let site = site.expect("placed heads imply a site");
        let gate = *site.gates.get(&(site.layer, h)).ok_or_else(|| {
            Error::InvalidPlacement(format!("no gate for layer {} head {h}", site.layer))
        })?;
        let (qf, kf, vf) = (qf.unwrap(), kf.unwrap(), vf.unwrap());
        let qfh = head_slice(tape, qf, layout, h)?;
        let kfh = if kf == k { kh } else { head_slice(tape, kf, layout, h)? };
        let vfh = if vf == v { vh } else { head_slice(tape, vf, layout, h)? };
        let sf = scaled_scores(tape, qfh, kfh, layout.head_dim, None)?;
        let (att_t, att_v) = fda_distractions(tape, sf, vfh)?;
        outputs.push(fda_subtract(tape, att, att_t, att_v, gate, site.min_mode)?);
    }
    let cat = tape.concat(&outputs, 1)?;
    project(tape, cat, w.wo, w.bo)
}

/// Plain multi-head attention, optionally restricted to `key_mask`.
pub fn multihead_attention(
    tape: &mut Tape,
    query: Var,
    kv: Var,
    w: &AttentionWeights<Var>,
    layout: HeadLayout,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let inputs = AttentionInputs {
        key_mask,
        ..AttentionInputs::plain(query, kv)
    };
    fda_multihead(tape, inputs, w, layout, None)
}

/// Probability maps of one head at the three de-attention stages.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    /// `softmax(S, visual axis)`
    pub original: Tensor,
    /// `softmax(S_f, visual axis)`
    pub distraction_text: Tensor,
    /// `softmax(S_f, text axis)`
    pub distraction_visual: Tensor,
}

/// Score-level maps for a head, used by heatmap dumps.
pub fn head_maps(
    tape: &mut Tape,
    f_t: Var,
    f_tf: Var,
    f_v: Var,
    w: &AttentionWeights<Var>,
    layout: HeadLayout,
    head: usize,
) -> Result<HeadMaps> {
    let q = project(tape, f_t, w.wq, w.bq)?;
    let k = project(tape, f_v, w.wk, w.bk)?;
    let qh = head_slice(tape, q, layout, head)?;
    let kh = head_slice(tape, k, layout, head)?;
    let s = scaled_scores(tape, qh, kh, layout.head_dim, None)?;
    let p = tape.softmax(s, 1)?;
    let sf = fda_scores(tape, f_tf, f_v, w, layout, head)?;
    let pt = tape.softmax(sf, 1)?;
    let pv = tape.softmax(sf, 0)?;
    Ok(HeadMaps {
        original: tape.value(p).clone(),
        distraction_text: tape.value(pt).clone(),
        distraction_visual: tape.value(pv).clone(),
    })
}
