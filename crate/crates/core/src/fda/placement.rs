//! Layer/head placement of de-attention, written `L<range>,H<range>`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of layer or head indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IndexSet {
    All,
    Range { start: usize, end: usize },
    None,
}

impl IndexSet {
    pub fn contains(&self, i: usize) -> bool {
        match *self {
            IndexSet::All => true,
            IndexSet::Range { start, end } => (start..=end).contains(&i),
            IndexSet::None => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, IndexSet::None)
    }

    /// Concrete indices below `bound`.
    pub fn resolve(&self, bound: usize) -> BTreeSet<usize> {
        (0..bound).filter(|&i| self.contains(i)).collect()
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            IndexSet::Range { end, .. } => Some(end),
            _ => None,
        }
    }

    fn parse(s: &str, whole: &str) -> Result<Self> {
        if s == "all" {
            return Ok(IndexSet::All);
        }
        let num = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::parse(whole, format!("`{t}` is not an index")))
        };
        match s.split_once('-') {
            Some((a, b)) => {
                let (start, end) = (num(a)?, num(b)?);
                if start > end {
                    return Err(Error::parse(whole, format!("descending range {s}")));
                }
                Ok(IndexSet::Range { start, end })
            }
            None => {
                let i = num(s)?;
                Ok(IndexSet::Range { start: i, end: i })
            }
        }
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            IndexSet::All => f.write_str("all"),
            IndexSet::Range { start, end } if start == end => write!(f, "{start}"),
            IndexSet::Range { start, end } => write!(f, "{start}-{end}"),
            IndexSet::None => f.write_str("none"),
        }
    }
}

/// Which attention stacks carry de-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSite {
    #[default]
    Fusion,
    Text,
    Both,
}

impl EncoderSite {
    pub fn fusion(self) -> bool {
        matches!(self, EncoderSite::Fusion | EncoderSite::Both)
    }

    pub fn text(self) -> bool {
        matches!(self, EncoderSite::Text | EncoderSite::Both)
    }
}

impl FromStr for EncoderSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(EncoderSite::Fusion),
            "text" => Ok(EncoderSite::Text),
            "both" => Ok(EncoderSite::Both),
            _ => Err(Error::parse(s, "expected fusion, text or both")),
        }
    }
}

impl fmt::Display for EncoderSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderSite::Fusion => "fusion",
            EncoderSite::Text => "text",
            EncoderSite::Both => "both",
        })
    }
}

/// Layers and heads where de-attention is active. `"none"` is the empty
/// placement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "PlacementRepr", try_from = "PlacementRepr")]
pub struct PlacementSpec {
    pub layers: IndexSet,
    pub heads: IndexSet,
    pub site: EncoderSite,
}

impl PlacementSpec {
    pub fn none() -> Self {
        Self {
            layers: IndexSet::None,
            heads: IndexSet::None,
            site: EncoderSite::Fusion,
        }
    }

    pub fn all() -> Self {
        Self {
            layers: IndexSet::All,
            heads: IndexSet::All,
            site: EncoderSite::Fusion,
        }
    }

    pub fn with_site(mut self, site: EncoderSite) -> Self {
        self.site = site;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() || self.heads.is_empty()
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.layers.contains(layer) && self.heads.contains(head)
    }

    /// Placed `(layer, head)` pairs for a model of the given extents.
    pub fn resolve(&self, n_layers: usize, n_heads: usize) -> Vec<(usize, usize)> {
        let heads = self.heads.resolve(n_heads);
        self.layers
            .resolve(n_layers)
            .into_iter()
            .flat_map(|l| heads.iter().map(move |&h| (l, h)))
            .collect()
    }

    /// Checks explicit indices against model depth and head count.
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if let Some(l) = self.layers.max_index().filter(|&l| l >= n_layers) {
            return Err(Error::InvalidPlacement(format!(
                "layer {l} on a {n_layers}-layer stack"
            )));
        }
        if let Some(h) = self.heads.max_index().filter(|&h| h >= n_heads) {
            return Err(Error::InvalidPlacement(format!(
                "head {h} with {n_heads} heads"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PlacementRepr {
    spec: String,
    site: EncoderSite,
}

impl From<PlacementSpec> for PlacementRepr {
    fn from(p: PlacementSpec) -> Self {
        Self {
            spec: p.to_string(),
            site: p.site,
        }
    }
}

impl TryFrom<PlacementRepr> for PlacementSpec {
    type Error = Error;

    fn try_from(r: PlacementRepr) -> Result<Self> {
        Ok(r.spec.parse::<PlacementSpec>()?.with_site(r.site))
    }
}

impl FromStr for PlacementSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Self::none());
        }
        let (l, h) = s
            .split_once(',')
            .ok_or_else(|| Error::parse(s, "expected `L<range>,H<range>`"))?;
        let layers = l
            .strip_prefix('L')
            .ok_or_else(|| Error::parse(s, "layer clause must start with `L`"))?;
        let heads = h
            .strip_prefix('H')
            .ok_or_else(|| Error::parse(s, "head clause must start with `H`"))?;
        Ok(Self {
            layers: IndexSet::parse(layers, s)?,
            heads: IndexSet::parse(heads, s)?,
            site: EncoderSite::Fusion,
        })
    }
}

impl fmt::Display for PlacementSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        write!(f, "L{},H{}", self.layers, self.heads)
    }
}
