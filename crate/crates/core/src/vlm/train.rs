//! Image–text matching training.
//!
//! Each batch scores every image against its own caption (positive) and
//! against captions circularly shifted within the batch (negatives). The
//! loss is binary cross-entropy with the positive and negative terms
//! averaged separately and summed.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::corpus::CorpusItem;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::textproc::{function_word_mask, TokenMask, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::parse(s, "expected sgd or adam")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Circular shifts used as negatives per image, capped at batch − 1.
    pub negatives: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 8,
            negatives: 7,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// loss of every optimizer step
    pub step_losses: Vec<f64>,
    /// mean step loss per epoch
    pub epoch_losses: Vec<f64>,
    /// mean loss over the corpus before the first step
    pub initial_loss: f64,
    /// mean loss over the corpus after the last step
    pub final_loss: f64,
}

struct Example<'a> {
    image: &'a Tensor,
    seq: TokenSequence,
    fmask: TokenMask,
}

fn examples<'a>(model: &Model, items: &'a [CorpusItem]) -> Result<Vec<Example<'a>>> {
    items
        .iter()
        .map(|it| {
            let seq = it.sequence(model.config().max_len)?;
            let fmask = function_word_mask(&seq, model.dictionary());
            Ok(Example {
                image: &it.image,
                seq,
                fmask,
            })
        })
        .collect()
}

/// Splits `order` into batches of `size`; a trailing singleton joins the
/// previous batch so every batch of a multi-item corpus has negatives.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    w: &super::Bound<'_>,
    batch: &[&Example<'_>],
    negatives: usize,
) -> Result<Var> {
    let b = batch.len();
    let mut f_v = Vec::with_capacity(b);
    let mut f_t = Vec::with_capacity(b);
    for ex in batch {
        let px = tape.constant(ex.image.clone());
        f_v.push(model.image_on(tape, w, px)?);
        f_t.push(model.text_on(tape, w, &ex.seq, &ex.fmask, true)?);
    }
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::new();
    for i in 0..b {
        pos.push(model.fuse_on(tape, w, f_t[i].0, f_t[i].1, f_v[i])?);
        for s in 1..=negatives.min(b - 1) {
            let j = (i + s) % b;
            neg.push(model.fuse_on(tape, w, f_t[j].0, f_t[j].1, f_v[i])?);
        }
    }
    let pos = tape.concat(&pos, 0)?;
    let pos = tape.scale(pos, -1.0)?;
    let pos = tape.softplus(pos)?;
    let mut loss = tape.mean(pos)?;
    if !neg.is_empty() {
        let neg = tape.concat(&neg, 0)?;
        let neg = tape.softplus(neg)?;
        let neg = tape.mean(neg)?;
        loss = tape.add(loss, neg)?;
    }
    Ok(loss)
}

/// Mean batch loss over `items` in corpus order, without updating weights.
pub fn mean_loss(model: &Model, items: &[CorpusItem], cfg: &TrainConfig) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ex = examples(model, items)?;
    let order: Vec<usize> = (0..ex.len()).collect();
    let all = batches(&order, cfg.batch_size);
    let mut total = 0.0;
    for idx in &all {
        let mut tape = Tape::new();
        let w = model.params().bind(&mut tape, false);
        let batch: Vec<&Example<'_>> = idx.iter().map(|&i| &ex[i]).collect();
        let l = batch_loss(model, &mut tape, &w, &batch, cfg.negatives)?;
        total += tape.value(l).item()?;
    }
    Ok(total / all.len() as f64)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains `model` in place on `items`. Single-threaded and deterministic
/// in `cfg.seed`.
pub fn train(model: &mut Model, items: &[CorpusItem], cfg: &TrainConfig) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::InvalidConfig(format!("learning rate {}", cfg.lr)));
    }
    let initial_loss = mean_loss(model, items, cfg)?;
    let ex = examples(model, items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let all = batches(&order, cfg.batch_size);
        for idx in &all {
            let (loss, grads) = {
                let mut tape = Tape::new();
                let w = model.params().bind(&mut tape, true);
                let batch: Vec<&Example<'_>> = idx.iter().map(|&i| &ex[i]).collect();
                let l = batch_loss(model, &mut tape, &w, &batch, cfg.negatives)?;
                let grads = tape.backward(l)?;
                let g: Vec<Tensor> = w
                    .vars()
                    .iter()
                    .map(|&v| grads.get(v).cloned().expect("every parameter is trainable"))
                    .collect();
                (tape.value(l).item()?, g)
            };
            apply_update(model, &grads, cfg, &mut adam);
            step_losses.push(loss);
            sum += loss;
        }
        let mean = sum / all.len() as f64;
        log::info!("epoch {}: mean loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    let final_loss = mean_loss(model, items, cfg)?;
    Ok(TrainReport {
        step_losses,
        epoch_losses,
        initial_loss,
        final_loss,
    })
}

fn apply_update(model: &mut Model, grads: &[Tensor], cfg: &TrainConfig, adam: &mut AdamState) {
    let params = model.params_mut();
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (i, g) in grads.iter().enumerate() {
                let p = params.tensor_mut(i);
                for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= cfg.lr * gi;
                }
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let c1 = 1.0 - BETA1.powi(adam.t);
            let c2 = 1.0 - BETA2.powi(adam.t);
            for (i, g) in grads.iter().enumerate() {
                let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
                let p = params.tensor_mut(i);
                for (k, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[k] = BETA1 * m[k] + (1.0 - BETA1) * gi;
                    v[k] = BETA2 * v[k] + (1.0 - BETA2) * gi * gi;
                    *x -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}
