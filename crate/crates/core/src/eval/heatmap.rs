//! Attention-probability heatmaps of one fusion head.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fda::MinMode;
use crate::tensor::Tensor;
use crate::textproc::TokenSequence;
use crate::vlm::Model;

/// Point of the de-attention pipeline at which the map is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapStage {
    /// plain softmax over visual tokens
    Original,
    /// original minus the gated text-axis distraction
    OneSubtraction,
    /// minimum of both gated subtractions
    FullFda,
}

impl HeatmapStage {
    pub const ALL: [HeatmapStage; 3] = [HeatmapStage::Original, HeatmapStage::OneSubtraction, HeatmapStage::FullFda];
}

impl fmt::Display for HeatmapStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapStage::Original => "original",
            HeatmapStage::OneSubtraction => "one_subtraction",
            HeatmapStage::FullFda => "full_fda",
        })
    }
}

impl FromStr for HeatmapStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "original" => Ok(HeatmapStage::Original),
            "one_subtraction" => Ok(HeatmapStage::OneSubtraction),
            "full_fda" => Ok(HeatmapStage::FullFda),
            _ => Err(Error::parse(s, "expected original, one_subtraction or full_fda")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapSummary {
    pub layer: usize,
    pub head: usize,
    pub stage: HeatmapStage,
    pub gate: f64,
    pub rows: usize,
    pub cols: usize,
    pub row_sums: Vec<f64>,
    pub min: f64,
    pub max: f64,
    #[serde(skip)]
    pub matrix: Tensor,
    #[serde(skip)]
    pub summary_path: PathBuf,
}

/// `n_t × n_v` map of fusion `(layer, head)` at `stage`.
///
/// The subtraction stages work on probabilities: `P − g·P_t` and
/// `min(P − g·P_t, P − g·P_v)`, where `P_t`, `P_v` are the function-word
/// scores softmaxed over the visual and the text axis. With the row-branch
/// min mode the whole row with the smaller sum is kept.
pub fn heatmap_matrix(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    layer: usize,
    head: usize,
    stage: HeatmapStage,
) -> Result<(Tensor, f64)> {
    let (maps, g) = model.fusion_head_maps(image, seq, layer, head)?;
    let p = &maps.original;
    let sub = |d: &Tensor| -> Vec<f64> { p.data().iter().zip(d.data()).map(|(a, b)| a - g * b).collect() };
    let data = match stage {
        HeatmapStage::Original => p.data().to_vec(),
        HeatmapStage::OneSubtraction => sub(&maps.distraction_text),
        HeatmapStage::FullFda => {
            let a = sub(&maps.distraction_text);
            let b = sub(&maps.distraction_visual);
            match model.config().min_mode {
                MinMode::Elementwise => a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect(),
                MinMode::RowBranch => {
                    let cols = p.shape()[1];
                    a.chunks(cols)
                        .zip(b.chunks(cols))
                        .flat_map(|(ra, rb)| {
                            let pick = if ra.iter().sum::<f64>() <= rb.iter().sum::<f64>() { ra } else { rb };
                            pick.to_vec()
                        })
                        .collect()
                }
            }
        }
    };
    Ok((Tensor::new(p.shape(), data)?, g))
}

/// Writes the map as CSV (one row per text token, one column per visual
/// token) and a JSON summary next to it (`<path>.summary.json`).
pub fn dump_attention_heatmap(
    model: &Model,
    image: &Tensor,
    seq: &TokenSequence,
    layer: usize,
    head: usize,
    stage: HeatmapStage,
    path: &Path,
) -> Result<HeatmapSummary> {
    let (m, gate) = heatmap_matrix(model, image, seq, layer, head, stage)?;
    let (rows, cols) = m.dims2()?;
    let mut csv = String::from("token");
    for j in 0..cols {
        csv.push_str(&format!(",v{j}"));
    }
    csv.push('\n');
    for (i, tok) in seq.tokens().iter().enumerate() {
        csv.push_str(&csv_field(tok));
        for v in m.row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    fs::write(path, csv)?;
    let row_sums = (0..rows).map(|i| m.row(i).iter().sum()).collect();
    let min = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut summary_path = path.as_os_str().to_owned();
    summary_path.push(".summary.json");
    let summary = HeatmapSummary {
        layer,
        head,
        stage,
        gate,
        rows,
        cols,
        row_sums,
        min,
        max,
        matrix: m,
        summary_path: summary_path.into(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&summary.summary_path, json + "\n")?;
    Ok(summary)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
