//! Score matrices and ranked retrieval.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, TextFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textproc::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// caption queries, image gallery
    #[serde(rename = "T2IR")]
    T2I,
    /// image queries, caption gallery
    #[serde(rename = "I2TR")]
    I2T,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::T2I, Direction::I2T];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2I => "T2IR",
            Direction::I2T => "I2TR",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T2I" | "T2IR" => Ok(Direction::T2I),
            "I2T" | "I2TR" => Ok(Direction::I2T),
            _ => Err(Error::parse(s, "expected T2I or I2T")),
        }
    }
}

/// `scores[i][j]` = logit of image `i` with caption `j`. Images are encoded
/// once and captions once; rows are computed in parallel.
pub fn score_matrix(model: &Model, images: &[Tensor], captions: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
    let texts: Vec<TextFeatures> = captions
        .par_iter()
        .map(|c| model.text_features(c))
        .collect::<Result<_>>()?;
    images
        .par_iter()
        .map(|img| {
            let f_v = model.encode_image(img)?;
            texts.iter().map(|t| model.score_features(&f_v, t)).collect()
        })
        .collect()
}

/// Gallery indices by descending score; ties keep gallery order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// 1-based position of `item` in `ranking`.
pub fn rank_of(ranking: &[usize], item: usize) -> Option<usize> {
    ranking.iter().position(|&g| g == item).map(|p| p + 1)
}

fn query_scores(matrix: &[Vec<f64>], direction: Direction, q: usize) -> Vec<f64> {
    match direction {
        Direction::I2T => matrix[q].clone(),
        Direction::T2I => matrix.iter().map(|row| row[q]).collect(),
    }
}

fn n_queries(matrix: &[Vec<f64>], direction: Direction) -> usize {
    match direction {
        Direction::I2T => matrix.len(),
        Direction::T2I => matrix.first().map_or(0, Vec::len),
    }
}

/// Ranked gallery for every query of a score matrix.
pub fn rankings(matrix: &[Vec<f64>], direction: Direction) -> Vec<Vec<usize>> {
    (0..n_queries(matrix, direction))
        .map(|q| rank_descending(&query_scores(matrix, direction, q)))
        .collect()
}

/// Ranked lists for every query over a paired image/caption collection.
pub fn retrieve(
    model: &Model,
    images: &[Tensor],
    captions: &[TokenSequence],
    direction: Direction,
) -> Result<Vec<Vec<usize>>> {
    Ok(rankings(&score_matrix(model, images, captions)?, direction))
}

/// Percentage of queries whose paired item (same index) ranks within `k`.
pub fn recall_at_k(matrix: &[Vec<f64>], direction: Direction, k: usize) -> f64 {
    let ranked = rankings(matrix, direction);
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .enumerate()
        .filter(|(q, r)| rank_of(r, *q).is_some_and(|p| p <= k))
        .count();
    100.0 * hits as f64 / ranked.len() as f64
}
