//! ℓ∞ image attacks on the matching score: PGD, APGD and masked APGD.
//!
//! Every attack ascends an attacker loss. Untargeted attacks use
//! `−score(x, caption)`, targeted attacks `score(x, target)`. Iterates are
//! projected onto the ε-ball around the clean image intersected with
//! `[0, 1]`, and the best-loss iterate is returned.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textproc::{remove_dictionary_words, FunctionWordDictionary, TokenSequence};
use crate::vlm::{Model, TextFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttackFamily {
    Pgd,
    Apgd,
    Mapgd,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 3] = [AttackFamily::Pgd, AttackFamily::Apgd, AttackFamily::Mapgd];
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackFamily::Pgd => "PGD",
            AttackFamily::Apgd => "APGD",
            AttackFamily::Mapgd => "MAPGD",
        })
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PGD" => Ok(AttackFamily::Pgd),
            "APGD" => Ok(AttackFamily::Apgd),
            "MAPGD" => Ok(AttackFamily::Mapgd),
            _ => Err(Error::parse(s, "expected PGD, APGD or MAPGD")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Targeted,
    Untargeted,
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "targeted" => Ok(AttackMode::Targeted),
            "untargeted" => Ok(AttackMode::Untargeted),
            _ => Err(Error::parse(s, "expected targeted or untargeted")),
        }
    }
}

/// Parses `"2/255"`-style fractions or plain decimals.
pub fn parse_epsilon(s: &str) -> Result<f64> {
    let s = s.trim();
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(s, "expected a decimal or `a/b` fraction"))
    };
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let d = num(b)?;
            if d == 0.0 {
                return Err(Error::parse(s, "zero denominator"));
            }
            num(a)? / d
        }
        None => num(s)?,
    };
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Range(format!("epsilon {s} must be finite and ≥ 0")));
    }
    Ok(v)
}

/// Prints ε as `k/255` when it is an integer multiple, else as a decimal.
pub fn format_epsilon(eps: f64) -> String {
    let k = eps * 255.0;
    if (k - k.round()).abs() < 1e-9 {
        format!("{}/255", k.round() as i64)
    } else {
        format!("{eps}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    /// gradient evaluations (APGD) or update steps (PGD)
    pub steps: usize,
    /// PGD step; `None` means ε/4
    pub step_size: Option<f64>,
    /// APGD improvement-fraction threshold
    pub rho: f64,
    /// APGD momentum blend
    pub momentum: f64,
    pub mode: AttackMode,
    pub seed: u64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            steps: 10,
            step_size: None,
            rho: 0.75,
            momentum: 0.75,
            mode: AttackMode::Targeted,
            seed: 0,
            random_start: false,
        }
    }

    pub fn apgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Apgd,
            steps: 100,
            ..Self::pgd(epsilon)
        }
    }

    pub fn mapgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Mapgd,
            ..Self::apgd(epsilon)
        }
    }

    /// Default configuration of `family`.
    pub fn for_family(family: AttackFamily, epsilon: f64) -> Self {
        match family {
            AttackFamily::Pgd => Self::pgd(epsilon),
            AttackFamily::Apgd => Self::apgd(epsilon),
            AttackFamily::Mapgd => Self::mapgd(epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon {}", self.epsilon)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!("rho {} outside (0, 1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if let Some(a) = self.step_size {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidConfig(format!("step size {a}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.family, format_epsilon(self.epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adv_image: Tensor,
    pub best_loss: f64,
    /// attacker loss at every evaluated iterate, start point first
    pub loss_trace: Vec<f64>,
    /// step size in force at every update
    pub step_sizes: Vec<f64>,
    /// task-level outcome, filled in by the evaluation harness
    pub success: Option<bool>,
}

/// Differentiable attacker loss over pixels.
pub trait Objective: Sync {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

/// `sign · score(x, text)` for fixed text features.
pub struct ScoreObjective<'m> {
    pub model: &'m Model,
    pub text: TextFeatures,
    pub sign: f64,
}

impl Objective for ScoreObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let (s, mut g) = self.model.score_with_pixel_grad(x, &self.text)?;
        if self.sign != 1.0 {
            g.data_mut().iter_mut().for_each(|v| *v *= self.sign);
        }
        Ok((self.sign * s, g))
    }
}

/// Per-pixel bounds of `B∞(x₀, ε) ∩ [0, 1]`, nudged inward so that
/// `|x − x₀| ≤ ε` holds exactly in floating point.
struct Ball {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Ball {
    fn new(x0: &Tensor, eps: f64) -> Self {
        let mut lo = Vec::with_capacity(x0.numel());
        let mut hi = Vec::with_capacity(x0.numel());
        for &c in x0.data() {
            let mut l = (c - eps).max(0.0);
            while c - l > eps {
                l = l.next_up();
            }
            let mut h = (c + eps).min(1.0);
            while h - c > eps {
                h = h.next_down();
            }
            lo.push(l);
            hi.push(h);
        }
        Self { lo, hi }
    }

    fn project(&self, x: &mut Tensor) {
        for ((v, &l), &h) in x.data_mut().iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(l, h);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn start_point(x0: &Tensor, ball: &Ball, cfg: &AttackConfig) -> Tensor {
    let mut x = x0.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Tensor::rand_uniform(x0.shape(), -cfg.epsilon, cfg.epsilon, &mut rng);
        for (v, n) in x.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
        ball.project(&mut x);
    }
    x
}

/// Observer called with every projected iterate.
pub type IterateHook<'h> = &'h mut dyn FnMut(&Tensor);

/// Sign-gradient ascent with step `α`; `steps` updates, `steps + 1` loss
/// evaluations.
pub fn run_pgd(obj: &dyn Objective, x0: &Tensor, cfg: &AttackConfig, hook: IterateHook<'_>) -> Result<AttackResult> {
    cfg.validate()?;
    let ball = Ball::new(x0, cfg.epsilon);
    let alpha = cfg.step_size.unwrap_or(cfg.epsilon / 4.0);
    let mut x = start_point(x0, &ball, cfg);
    hook(&x);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut step_sizes = Vec::with_capacity(cfg.steps);
    let (mut best_loss, mut best_x) = (f64::NEG_INFINITY, x.clone());
    for step in 0..=cfg.steps {
        let (loss, grad) = obj.loss_and_grad(&x)?;
        trace.push(loss);
        if loss > best_loss {
            best_loss = loss;
            best_x = x.clone();
        }
        if step == cfg.steps {
            break;
        }
        for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += alpha * sign(*g);
        }
        ball.project(&mut x);
        step_sizes.push(alpha);
        hook(&x);
    }
    Ok(AttackResult {
        adv_image: best_x,
        best_loss,
        loss_trace: trace,
        step_sizes,
        success: None,
    })
}

/// Iteration counts at which the step size is reviewed: first window
/// `⌊0.22·N⌋`, each later window `⌊0.03·N⌋` shorter, never below `⌊0.06·N⌋`.
pub fn apgd_checkpoints(n: usize) -> Vec<usize> {
    let first = ((0.22 * n as f64) as usize).max(1);
    let decrease = (0.03 * n as f64) as usize;
    let min_window = ((0.06 * n as f64) as usize).max(1);
    let mut out = Vec::new();
    let (mut at, mut window) = (0, first);
    loop {
        at += window;
        if at >= n {
            break;
        }
        out.push(at);
        window = window.saturating_sub(decrease).max(min_window);
    }
    out
}

/// Auto-PGD: momentum steps, step size starting at 2ε and halved at
/// checkpoints when too few steps improved the loss or the best loss
/// stalled under an unchanged step size; after halving the search restarts
/// from the best iterate. Uses `steps` loss/gradient evaluations.
pub fn run_apgd(obj: &dyn Objective, x0: &Tensor, cfg: &AttackConfig, hook: IterateHook<'_>) -> Result<AttackResult> {
    cfg.validate()?;
    let n = cfg.steps;
    let ball = Ball::new(x0, cfg.epsilon);
    let checkpoints = apgd_checkpoints(n);
    let mut eta = 2.0 * cfg.epsilon;

    let mut x = start_point(x0, &ball, cfg);
    hook(&x);
    let (mut f, mut g) = obj.loss_and_grad(&x)?;
    let mut trace = vec![f];
    let mut step_sizes = Vec::with_capacity(n.saturating_sub(1));
    let (mut best_f, mut best_x, mut best_g) = (f, x.clone(), g.clone());
    let mut x_prev = x.clone();

    let mut improved = 0usize;
    let mut last_check = 0usize;
    let mut best_at_check = best_f;
    let mut reduced_at_check = false;
    let mut next_cp = 0usize;

    for k in 0..n.saturating_sub(1) {
        let mut z = x.clone();
        for (v, gi) in z.data_mut().iter_mut().zip(g.data()) {
            *v += eta * sign(*gi);
        }
        ball.project(&mut z);
        let x_new = if k == 0 {
            z
        } else {
            let a = cfg.momentum;
            let mut y = x.clone();
            for ((v, &zi), (&xi, &pi)) in y
                .data_mut()
                .iter_mut()
                .zip(z.data())
                .zip(x.data().iter().zip(x_prev.data()))
            {
                *v = xi + a * (zi - xi) + (1.0 - a) * (xi - pi);
            }
            ball.project(&mut y);
            y
        };
        hook(&x_new);
        step_sizes.push(eta);
        let (f_new, g_new) = obj.loss_and_grad(&x_new)?;
        trace.push(f_new);
        if f_new > f {
            improved += 1;
        }
        if f_new > best_f {
            best_f = f_new;
            best_x = x_new.clone();
            best_g = g_new.clone();
        }
        x_prev = std::mem::replace(&mut x, x_new);
        f = f_new;
        g = g_new;

        let iter = k + 1;
        if next_cp < checkpoints.len() && iter == checkpoints[next_cp] {
            let window = iter - last_check;
            let oscillating = (improved as f64) < cfg.rho * window as f64;
            let stalled = !reduced_at_check && best_f <= best_at_check;
            reduced_at_check = oscillating || stalled;
            if reduced_at_check {
                eta /= 2.0;
                x = best_x.clone();
                x_prev = x.clone();
                f = best_f;
                g = best_g.clone();
            }
            best_at_check = best_f;
            improved = 0;
            last_check = iter;
            next_cp += 1;
        }
    }
    Ok(AttackResult {
        adv_image: best_x,
        best_loss: best_f,
        loss_trace: trace,
        step_sizes,
        success: None,
    })
}

fn objective<'m>(
    model: &'m Model,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    mode: AttackMode,
) -> Result<ScoreObjective<'m>> {
    match (mode, target) {
        (AttackMode::Targeted, None) => Err(Error::MissingTarget),
        (AttackMode::Targeted, Some(t)) => Ok(ScoreObjective {
            model,
            text: model.text_features(t)?,
            sign: 1.0,
        }),
        (AttackMode::Untargeted, None) => Ok(ScoreObjective {
            model,
            text: model.text_features(seq)?,
            sign: -1.0,
        }),
        (AttackMode::Untargeted, Some(_)) => Err(Error::InvalidConfig(
            "untargeted attacks take no target caption".into(),
        )),
    }
}

fn noop(_: &Tensor) {}

pub fn pgd(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let obj = objective(model, seq, target, cfg.mode)?;
    run_pgd(&obj, image, cfg, &mut noop)
}

pub fn apgd(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let obj = objective(model, seq, target, cfg.mode)?;
    run_apgd(&obj, image, cfg, &mut noop)
}

/// APGD whose loss sees the captions with dictionary words removed.
pub fn mapgd(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    dict: &FunctionWordDictionary,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let (seq, target) = mask_attacker_text(seq, target, dict);
    let obj = objective(model, &seq, target.as_ref(), cfg.mode)?;
    run_apgd(&obj, image, cfg, &mut noop)
}

/// Attacker-side captions for MAPGD.
pub fn mask_attacker_text(
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    dict: &FunctionWordDictionary,
) -> (TokenSequence, Option<TokenSequence>) {
    (
        remove_dictionary_words(seq, dict),
        target.map(|t| remove_dictionary_words(t, dict)),
    )
}

/// Runs `cfg.family` on one example, reporting every iterate to `hook`.
pub fn attack_with_hook(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    dict: &FunctionWordDictionary,
    cfg: &AttackConfig,
    hook: IterateHook<'_>,
) -> Result<AttackResult> {
    match cfg.family {
        AttackFamily::Pgd => run_pgd(&objective(model, seq, target, cfg.mode)?, image, cfg, hook),
        AttackFamily::Apgd => run_apgd(&objective(model, seq, target, cfg.mode)?, image, cfg, hook),
        AttackFamily::Mapgd => {
            let (s, t) = mask_attacker_text(seq, target, dict);
            run_apgd(&objective(model, &s, t.as_ref(), cfg.mode)?, image, cfg, hook)
        }
    }
}

pub fn attack(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    target: Option<&TokenSequence>,
    dict: &FunctionWordDictionary,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_with_hook(model, image, seq, target, dict, cfg, &mut noop)
}

/// Attacks every example in parallel; example `i` uses seed `cfg.seed + i`.
/// Results are in input order and equal a serial run.
pub fn attack_batch(
    model: &Model,
    images: &[Tensor],
    seqs: &[TokenSequence],
    targets: Option<&[TokenSequence]>,
    dict: &FunctionWordDictionary,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if images.len() != seqs.len() || targets.is_some_and(|t| t.len() != seqs.len()) {
        return Err(Error::LengthMismatch {
            expected: images.len(),
            got: seqs.len(),
        });
    }
    (0..images.len())
        .into_par_iter()
        .map(|i| {
            let cfg_i = AttackConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            attack(model, &images[i], &seqs[i], targets.map(|t| &t[i]), dict, &cfg_i)
        })
        .collect()
}

/// Targets shifted by one: `target[i] = batch[(i + 1) mod n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedTargets<T> {
    pub targets: Vec<T>,
    /// positions whose target equals their own caption
    pub duplicate_targets: Vec<usize>,
}

pub fn circular_shift_targets<T: Clone + PartialEq>(batch: &[T]) -> Result<ShiftedTargets<T>> {
    let n = batch.len();
    if n < 2 {
        log::warn!("circular shift on a batch of {n}: target would equal the source");
        return Err(Error::SingletonBatch);
    }
    let targets: Vec<T> = (0..n).map(|i| batch[(i + 1) % n].clone()).collect();
    let duplicate_targets: Vec<usize> = (0..n).filter(|&i| targets[i] == batch[i]).collect();
    for &i in &duplicate_targets {
        log::warn!("DuplicateTarget: item {i} is shifted onto an identical caption");
    }
    Ok(ShiftedTargets {
        targets,
        duplicate_targets,
    })
}
