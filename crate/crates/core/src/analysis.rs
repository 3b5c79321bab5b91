//! Measurement harnesses over a fixed model: region occlusion importance,
//! encoder-side similarity per grid slot, and text→image attention flow.
//! None of them mutate the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, MultimodalInput, YES};
use crate::numeric::{coefficient_of_variation, cosine, Matrix};
use crate::probe::{PatternLibrary, NUM_SLOTS};

/// Partition of the patch grid into `rows × cols` equal rectangular regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub const CELLS_3X3: RegionGrid = RegionGrid { rows: 3, cols: 3 };

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch indices (raster order over a `grid_rows × grid_cols` patch grid)
    /// of every region, regions in raster order. Every patch belongs to
    /// exactly one region.
    pub fn regions(&self, grid_rows: usize, grid_cols: usize) -> Result<Vec<Vec<usize>>> {
        if self.rows == 0
            || self.cols == 0
            || grid_rows % self.rows != 0
            || grid_cols % self.cols != 0
        {
            return Err(Error::config(format!(
                "{}x{} regions do not tile a {grid_rows}x{grid_cols} patch grid",
                self.rows, self.cols
            )));
        }
        let (h, w) = (grid_rows / self.rows, grid_cols / self.cols);
        let mut out = Vec::with_capacity(self.len());
        for rr in 0..self.rows {
            for rc in 0..self.cols {
                let mut cells = Vec::with_capacity(h * w);
                for r in rr * h..(rr + 1) * h {
                    for c in rc * w..(rc + 1) * w {
                        cells.push(r * grid_cols + c);
                    }
                }
                out.push(cells);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub regions: RegionGrid,
    /// `scores[r][c] = yes_logit(original) - yes_logit(region masked)`.
    pub scores: Matrix,
    pub reference_logit: f64,
    pub background: Vec<f64>,
}

impl ImportanceMap {
    /// Raster index of the highest-scoring region (first one on ties).
    pub fn argmax_region(&self) -> usize {
        let s = self.scores.as_slice();
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }
}

/// Masks each region in turn with `background` and records the drop in the
/// yes-logit.
pub fn occlusion_importance(
    model: &Model,
    input: &MultimodalInput,
    regions: RegionGrid,
    background: &[f64],
) -> Result<ImportanceMap> {
    let patches = input.patches();
    if background.len() != patches.cols() {
        return Err(Error::shape(format!(
            "background length {} != patch_dim {}",
            background.len(),
            patches.cols()
        )));
    }
    let grid_cols = input.grid_cols();
    let grid_rows = patches.rows() / grid_cols;
    let parts = regions.regions(grid_rows, grid_cols)?;
    let reference = model.logits(input)?[YES];
    let mut scores = Vec::with_capacity(parts.len());
    for part in &parts {
        let mut masked = patches.clone();
        for &p in part {
            masked.row_mut(p).copy_from_slice(background);
        }
        let logit = model.logits(&input.with_patches(masked)?)?[YES];
        scores.push(reference - logit);
    }
    Ok(ImportanceMap {
        regions,
        scores: Matrix::new(regions.rows, regions.cols, scores)?,
        reference_logit: reference,
        background: background.to_vec(),
    })
}

pub const IMPORTANCE_NORMALIZATION: &str = "per-sample min-max, then mean";

/// Aggregate of many importance maps: each map is min-max scaled to [0, 1]
/// (a constant map scales to all zeros) and the scaled maps are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedImportance {
    pub mean: Matrix,
    pub samples: usize,
    pub normalization: String,
}

pub fn aggregate_importance(maps: &[ImportanceMap]) -> Result<AggregatedImportance> {
    let first = maps
        .first()
        .ok_or_else(|| Error::data("no importance maps to aggregate"))?;
    let shape = first.scores.shape();
    let mut mean = Matrix::zeros(shape.0, shape.1);
    for m in maps {
        if m.scores.shape() != shape {
            return Err(Error::shape("importance maps of different region grids"));
        }
        let s = m.scores.as_slice();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (acc, &v) in mean.as_mut_slice().iter_mut().zip(s) {
            if span > 0.0 {
                *acc += (v - lo) / span;
            }
        }
    }
    mean.scale(1.0 / maps.len() as f64);
    Ok(AggregatedImportance {
        mean,
        samples: maps.len(),
        normalization: IMPORTANCE_NORMALIZATION.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub slot: usize,
    /// In [-1, 1].
    pub score: f64,
}

/// Mean of the projected image-token embeddings.
pub fn pooled_image_embedding(model: &Model, patches: &Matrix, grid_cols: usize) -> Result<Vec<f64>> {
    let emb = model.encode_image(patches, grid_cols)?;
    let mut pooled = vec![0.0; emb.cols()];
    for r in 0..emb.rows() {
        for (p, v) in pooled.iter_mut().zip(emb.row(r)) {
            *p += v;
        }
    }
    let k = emb.rows() as f64;
    pooled.iter_mut().for_each(|p| *p /= k);
    Ok(pooled)
}

/// For each slot, places `pattern` there with `background` everywhere else
/// and scores the cosine between the pooled image embedding and the
/// embedding of `caption_token`.
pub fn similarity_probe(
    model: &Model,
    lib: &PatternLibrary,
    pattern: usize,
    caption_token: usize,
    background: &[f64],
) -> Result<Vec<SimilarityRecord>> {
    if pattern >= lib.vocab_size() {
        return Err(Error::config(format!("pattern {pattern} outside library")));
    }
    let caption = model.embed_token(caption_token)?;
    (0..NUM_SLOTS)
        .map(|slot| {
            let mut cells = [None; NUM_SLOTS];
            cells[slot] = Some(pattern);
            let grid = lib.compose(&cells, background)?;
            let pooled = pooled_image_embedding(model, &grid, lib.grid_side())?;
            Ok(SimilarityRecord {
                slot,
                score: cosine(&pooled, caption)?,
            })
        })
        .collect()
}

/// Largest minus smallest score.
pub fn similarity_spread(records: &[SimilarityRecord]) -> f64 {
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    hi - lo
}

pub const FLOW_QUERIES: &str = "user tokens";

/// Attention received by each image token from the text tokens that follow
/// the image, averaged over layers, heads, those queries, and samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFlowMap {
    /// One entry per image token, raster order; each in [0, 1].
    pub values: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Mean over the same averaging set of the total weight landing on the
    /// image span.
    pub image_mass: f64,
    pub layers: usize,
    pub heads: usize,
    pub samples: usize,
    pub queries: String,
}

impl AttentionFlowMap {
    pub fn coefficient_of_variation(&self) -> f64 {
        coefficient_of_variation(&self.values)
    }

    /// `|mean(values) - image_mass / j|`, zero up to rounding.
    pub fn conservation_gap(&self) -> f64 {
        let j = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / j;
        (mean - self.image_mass / j).abs()
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::new(self.grid_rows, self.grid_cols, self.values.clone())
            .expect("flow map matches its grid")
    }
}

/// Flow from traces recorded with capture enabled. All traces must share one
/// layout.
pub fn attention_flow_from_traces(traces: &[ForwardTrace], grid_cols: usize) -> Result<AttentionFlowMap> {
    let first = traces
        .first()
        .ok_or_else(|| Error::data("attention flow over zero samples"))?;
    let layout = first.layout;
    let j = layout.image_len();
    if grid_cols == 0 || j % grid_cols != 0 {
        return Err(Error::shape("image span does not match the grid"));
    }
    let mut values = vec![0.0; j];
    let mut mass = 0.0;
    let mut count = 0usize;
    let (mut layers, mut heads) = (0, 0);
    for t in traces {
        if t.layout != layout {
            return Err(Error::data("attention flow over samples with different layouts"));
        }
        let cap = t
            .capture
            .as_ref()
            .ok_or_else(|| Error::data("attention flow needs a forward pass with capture"))?;
        layers = cap.attention.len();
        for per_layer in &cap.attention {
            heads = per_layer.len();
            for probs in per_layer {
                for q in layout.user_range() {
                    let row = &probs.row(q)[layout.image_range()];
                    for (v, w) in values.iter_mut().zip(row) {
                        *v += w;
                    }
                    mass += row.iter().sum::<f64>();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::data("captured traces hold no attention"));
    }
    let scale = 1.0 / count as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(AttentionFlowMap {
        values,
        grid_rows: j / grid_cols,
        grid_cols,
        image_mass: mass * scale,
        layers,
        heads,
        samples: traces.len(),
        queries: FLOW_QUERIES.into(),
    })
}

pub fn attention_flow(model: &Model, inputs: &[MultimodalInput]) -> Result<AttentionFlowMap> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::data("attention flow over zero samples"))?;
    let traces = inputs
        .iter()
        .map(|i| model.forward(i, true))
        .collect::<Result<Vec<_>>>()?;
    attention_flow_from_traces(&traces, first.grid_cols())
}
