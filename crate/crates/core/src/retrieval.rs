//! Scene-level nearest-neighbour retrieval: embedding matrices, the dense
//! cosine-distance matrix between labeled and unlabeled images, and K-NN
//! neighbourhoods with deterministic tie-breaking.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::network::SceneEmbedder;

/// Z × count embeddings stored column by column; `ids[j]` names column j.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<u32>,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_columns(dim: usize, ids: Vec<u32>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != columns.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} columns",
                ids.len(),
                columns.len()
            )));
        }
        let mut data = Vec::with_capacity(dim * columns.len());
        for (id, col) in ids.iter().zip(&columns) {
            if col.len() != dim {
                return Err(Error::Shape(format!(
                    "column for id {id} has length {}, expected {dim}",
                    col.len()
                )));
            }
            data.extend_from_slice(col);
        }
        Ok(Self { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            dim: self.dim,
            ids: self.ids.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Embeds `(id, image)` pairs in order. Work is spread over threads but the
/// column order always follows the input.
pub fn embed_set(embedder: &dyn SceneEmbedder, items: &[(u32, &Image)]) -> Result<EmbeddingMatrix> {
    if items.is_empty() {
        return Err(Error::Usage("cannot embed an empty image list".into()));
    }
    let columns: Vec<Vec<f64>> = items
        .par_iter()
        .map(|(id, img)| {
            embedder.embed(img).map_err(|e| Error::Embedding {
                id: id.to_string(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    EmbeddingMatrix::from_columns(
        embedder.dim(),
        items.iter().map(|(id, _)| *id).collect(),
        columns,
    )
}

/// N_t × M_t cosine distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    row_ids: Vec<u32>,
    col_ids: Vec<u32>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(row_ids: Vec<u32>, col_ids: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        if data.len() != row_ids.len() * col_ids.len() {
            return Err(Error::Shape(format!(
                "{} distances for a {}x{} matrix",
                data.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        Ok(Self {
            row_ids,
            col_ids,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[u32] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[u32] {
        &self.col_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols()..(i + 1) * self.cols()]
    }
}

/// `1 − f·g / (‖f‖‖g‖)`, clamped to `[0, 2]`; 1 when either vector is zero.
pub fn cosine_distance(f: &[f64], g: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nf = 0.0;
    let mut ng = 0.0;
    for (a, b) in f.iter().zip(g) {
        dot += a * b;
        nf += a * a;
        ng += b * b;
    }
    if nf == 0.0 || ng == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (nf.sqrt() * ng.sqrt())).clamp(0.0, 2.0)
}

pub fn pairwise_cosine_distance(f: &EmbeddingMatrix, g: &EmbeddingMatrix) -> Result<DistanceMatrix> {
    if f.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            f.dim(),
            g.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..f.count())
        .into_par_iter()
        .map(|i| {
            let fi = f.column(i);
            (0..g.count()).map(|j| cosine_distance(fi, g.column(j))).collect()
        })
        .collect();
    DistanceMatrix::new(f.ids().to_vec(), g.ids().to_vec(), rows.concat())
}

/// Per-query neighbour lists N_i and their deduplicated union N.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhood {
    /// Unlabeled ids per labeled image, nearest first.
    pub per_query: Vec<Vec<u32>>,
    /// Union of all lists, ascending by id.
    pub union: Vec<u32>,
    pub k_requested: usize,
    pub k_used: usize,
    /// Set when K exceeded the pool size and was clamped.
    pub clamped: bool,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.union.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union.is_empty()
    }
}

/// For each row, the `k` columns with the smallest distance, ascending, ties
/// broken by the lower column id.
pub fn knn_neighborhoods(d: &DistanceMatrix, k: usize) -> Result<Neighborhood> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let k_used = k.min(d.cols());
    let cols = d.col_ids();
    let cmp = |row: &[f64], a: usize, b: usize| {
        row[a]
            .total_cmp(&row[b])
            .then_with(|| cols[a].cmp(&cols[b]))
    };
    let mut per_query = Vec::with_capacity(d.rows());
    let mut union = BTreeSet::new();
    for i in 0..d.rows() {
        let row = d.row(i);
        let mut idx: Vec<usize> = (0..d.cols()).collect();
        if k_used > 0 && k_used < idx.len() {
            idx.select_nth_unstable_by(k_used - 1, |&a, &b| cmp(row, a, b));
            idx.truncate(k_used);
        }
        idx.sort_unstable_by(|&a, &b| cmp(row, a, b));
        let ids: Vec<u32> = idx.iter().map(|&j| cols[j]).collect();
        union.extend(ids.iter().copied());
        per_query.push(ids);
    }
    Ok(Neighborhood {
        per_query,
        union: union.into_iter().collect(),
        k_requested: k,
        k_used,
        clamped: k > d.cols(),
    })
}

/// True iff rescaling the labeled embeddings by `alpha` leaves every
/// selected neighbour set unchanged.
pub fn scale_invariance_check(
    f: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    alpha: f64,
    k: usize,
) -> Result<bool> {
    if !(alpha > 0.0) {
        return Err(Error::Config("alpha must be positive".into()));
    }
    let base = knn_neighborhoods(&pairwise_cosine_distance(f, g)?, k)?;
    let scaled = knn_neighborhoods(&pairwise_cosine_distance(&f.scaled(alpha), g)?, k)?;
    let as_sets = |n: &Neighborhood| -> Vec<BTreeSet<u32>> {
        n.per_query
            .iter()
            .map(|l| l.iter().copied().collect())
            .collect()
    };
    Ok(as_sets(&base) == as_sets(&scaled))
}

/// On-disk embedding cache keyed by embedder tag and image key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, tag: &str, key: &str) -> Option<&Vec<f64>> {
        self.entries.get(tag)?.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Like [`embed_set`], but reuses cached vectors and records new ones.
    pub fn embed_set(
        &mut self,
        embedder: &dyn SceneEmbedder,
        items: &[(u32, &str, &Image)],
    ) -> Result<EmbeddingMatrix> {
        if items.is_empty() {
            return Err(Error::Usage("cannot embed an empty image list".into()));
        }
        let tag = embedder.tag().to_string();
        let missing_idx: Vec<usize> = (0..items.len())
            .filter(|&i| self.get(&tag, items[i].1).is_none())
            .collect();
        if !missing_idx.is_empty() {
            let missing: Vec<(u32, &Image)> =
                missing_idx.iter().map(|&i| (items[i].0, items[i].2)).collect();
            let fresh = embed_set(embedder, &missing)?;
            let bucket = self.entries.entry(tag.clone()).or_default();
            for (j, &i) in missing_idx.iter().enumerate() {
                bucket.insert(items[i].1.to_string(), fresh.column(j).to_vec());
            }
        }
        let columns = items
            .iter()
            .map(|(_, key, _)| self.get(&tag, key).cloned().expect("cached above"))
            .collect();
        EmbeddingMatrix::from_columns(
            embedder.dim(),
            items.iter().map(|(id, _, _)| *id).collect(),
            columns,
        )
    }
}
