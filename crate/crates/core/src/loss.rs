//! Relative-distance triplet objective and its derivative with respect to each
//! distinct image's embedding.
//!
//! For a triplet `(q, m, x)` with embeddings `F(q), F(m), F(x)` the distance
//! difference is `d = ||F(q) - F(m)||² - ||F(q) - F(x)||²` and the objective sums
//! `max(d, C)` over triplets. The hinge is active only when `d > C` strictly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Embedding;

/// Index of an image in whatever collection the triplets refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageId(pub usize);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `(query, matched reference, mismatched reference)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub query: ImageId,
    pub matched: ImageId,
    pub mismatched: ImageId,
}

impl Triplet {
    pub fn new(query: usize, matched: usize, mismatched: usize) -> Self {
        Triplet {
            query: ImageId(query),
            matched: ImageId(matched),
            mismatched: ImageId(mismatched),
        }
    }

    pub fn ids(&self) -> [ImageId; 3] {
        [self.query, self.matched, self.mismatched]
    }

    /// Checks the identity constraints given a label lookup.
    pub fn validate<L: PartialEq>(&self, label_of: impl Fn(ImageId) -> Option<L>) -> Result<()> {
        let label = |id| {
            label_of(id).ok_or_else(|| Error::contract(format!("image {id} has no label")))
        };
        let (q, m, x) = (label(self.query)?, label(self.matched)?, label(self.mismatched)?);
        if self.query == self.matched {
            return Err(Error::contract(format!("{self}: query and matched are the same image")));
        }
        if q != m {
            return Err(Error::contract(format!("{self}: matched reference has another identity")));
        }
        if q == x {
            return Err(Error::contract(format!("{self}: mismatched reference shares the identity")));
        }
        Ok(())
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.query, self.matched, self.mismatched)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Hinge floor `C`; must be negative.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: -1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_finite() && self.margin < 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "margin must be finite and negative, got {}",
                self.margin
            )))
        }
    }
}

/// Distinct images of a triplet set, in ascending id order, with their embeddings.
#[derive(Clone, Debug)]
pub struct ImageTable {
    ids: Vec<ImageId>,
    slots: HashMap<ImageId, usize>,
    embeddings: Vec<Option<Vec<f64>>>,
}

impl ImageTable {
    pub fn from_triplets(triplets: &[Triplet]) -> Self {
        let mut ids: Vec<ImageId> = triplets.iter().flat_map(Triplet::ids).collect();
        ids.sort_unstable();
        ids.dedup();
        Self::from_ids(ids)
    }

    fn from_ids(ids: Vec<ImageId>) -> Self {
        let slots = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let embeddings = vec![None; ids.len()];
        ImageTable {
            ids,
            slots,
            embeddings,
        }
    }

    /// Table with embeddings already known, e.g. for evaluating the loss directly.
    pub fn with_embeddings(entries: impl IntoIterator<Item = (ImageId, Vec<f64>)>) -> Result<Self> {
        let mut entries: Vec<_> = entries.into_iter().collect();
        entries.sort_by_key(|(id, _)| *id);
        let ids: Vec<ImageId> = entries.iter().map(|(id, _)| *id).collect();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("duplicate image id in table"));
        }
        let mut table = Self::from_ids(ids);
        for (slot, (_, e)) in entries.into_iter().enumerate() {
            table.embeddings[slot] = Some(e);
        }
        Ok(table)
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    /// Number of distinct images `m`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slot(&self, id: ImageId) -> Result<usize> {
        self.slots
            .get(&id)
            .copied()
            .ok_or_else(|| Error::contract(format!("image {id} is not in the table")))
    }

    pub fn set_embedding(&mut self, id: ImageId, embedding: Embedding) -> Result<()> {
        let slot = self.slot(id)?;
        self.embeddings[slot] = Some(embedding.into_vec());
        Ok(())
    }

    pub fn embedding(&self, id: ImageId) -> Result<&[f64]> {
        let slot = self.slot(id)?;
        self.embeddings[slot]
            .as_deref()
            .ok_or_else(|| Error::contract(format!("image {id} has no embedding yet")))
    }

    fn triplet_embeddings(&self, t: &Triplet) -> Result<[&[f64]; 3]> {
        Ok([
            self.embedding(t.query)?,
            self.embedding(t.matched)?,
            self.embedding(t.mismatched)?,
        ])
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `||e1 - e2||² - ||e1 - e3||²`.
pub fn distance_diff(e1: &[f64], e2: &[f64], e3: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() || e1.len() != e3.len() {
        return Err(Error::shape(format!(
            "embedding lengths differ: {}, {}, {}",
            e1.len(),
            e2.len(),
            e3.len()
        )));
    }
    Ok(squared_distance(e1, e2) - squared_distance(e1, e3))
}

/// Distance difference of every triplet, in order.
pub fn distance_diffs(table: &ImageTable, triplets: &[Triplet]) -> Result<Vec<f64>> {
    triplets
        .iter()
        .map(|t| {
            let [a, b, c] = table.triplet_embeddings(t)?;
            distance_diff(a, b, c)
        })
        .collect()
}

/// `Σ max(d_i, C)`.
pub fn objective(table: &ImageTable, triplets: &[Triplet], cfg: &LossConfig) -> Result<f64> {
    Ok(distance_diffs(table, triplets)?
        .into_iter()
        .map(|d| d.max(cfg.margin))
        .sum())
}

/// Number of triplets whose matched pair is strictly farther apart than the mismatched pair.
pub fn count_violations(table: &ImageTable, triplets: &[Triplet]) -> Result<usize> {
    Ok(distance_diffs(table, triplets)?
        .into_iter()
        .filter(|&d| d > 0.0)
        .count())
}

/// Derivative of the objective with respect to each distinct image's embedding, one
/// vector per table entry in table order.
///
/// An active triplet (`d > C`) adds `2(F(x) - F(m))` to the query, `-2(F(q) - F(m))`
/// to the matched reference and `2(F(q) - F(x))` to the mismatched reference.
pub fn output_gradients(
    table: &ImageTable,
    triplets: &[Triplet],
    cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    let dim = match table.embeddings.iter().flatten().next() {
        Some(e) => e.len(),
        None if triplets.is_empty() => 0,
        None => return Err(Error::contract("table has no embeddings")),
    };
    let mut grads = vec![vec![0.0; dim]; table.len()];
    for t in triplets {
        let [f1, f2, f3] = table.triplet_embeddings(t)?;
        let d = distance_diff(f1, f2, f3)?;
        if d <= cfg.margin {
            continue;
        }
        let (s1, s2, s3) = (table.slot(t.query)?, table.slot(t.matched)?, table.slot(t.mismatched)?);
        for k in 0..dim {
            grads[s1][k] += 2.0 * (f3[k] - f2[k]);
            grads[s2][k] -= 2.0 * (f1[k] - f2[k]);
            grads[s3][k] += 2.0 * (f1[k] - f3[k]);
        }
    }
    Ok(grads)
}

/// Parses a triplet list: one `query matched mismatched` triple of image ids per line,
/// `#` starts a comment.
pub fn parse_triplets(text: &str) -> Result<Vec<Triplet>> {
    text.lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then_some((n + 1, line))
        })
        .map(|(n, line)| {
            line.parse::<Triplet>()
                .map_err(|e| Error::config(format!("triplet list line {n}: {e}")))
        })
        .collect()
}

pub fn format_triplets(triplets: &[Triplet]) -> String {
    let mut out = String::from("# query matched mismatched\n");
    for t in triplets {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

impl FromStr for Triplet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let ids: Vec<usize> = s
            .split_whitespace()
            .map(|tok| tok.parse().map_err(|_| format!("bad image id {tok:?}")))
            .collect::<std::result::Result<_, _>>()?;
        match ids[..] {
            [q, m, x] => Ok(Triplet::new(q, m, x)),
            _ => Err(format!("expected 3 ids, found {}", ids.len())),
        }
    }
}
