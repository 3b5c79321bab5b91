//! Composite-grid probe data.
//!
//! A pattern library stands in for natural images: each pattern index is an
//! "image" (one or more patches) and also a caption symbol. A composite
//! sample places a key pattern in one cell of a 3×3 grid among eight
//! distractors and asks whether any cell matches the caption. For every key
//! the evaluation split draws one distractor set and one substitute, then
//! places the key at each grid slot in turn (distractors fill the other
//! cells in a fixed order). Each positive has a matched negative in which the
//! key cell holds the substitute while the caption stays the same.
//!
//! Slots are numbered row-major: `slot = 3 * row + col`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Example, MultimodalInput};
use crate::numeric::Matrix;

pub const GRID_SIDE: usize = 3;
pub const NUM_SLOTS: usize = GRID_SIDE * GRID_SIDE;
pub const NUM_DISTRACTORS: usize = NUM_SLOTS - 1;

pub const DATASET_FORMAT: &str = "vlprobe-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Fixed prompt vocabulary. Caption tokens follow the special tokens:
/// pattern `m` is token `CAPTION_OFFSET + m`.
pub mod prompt {
    pub const SYSTEM: [usize; 2] = [0, 1];
    /// Question lead-in that precedes the caption.
    pub const QUESTION: usize = 2;
    pub const CAPTION_OFFSET: usize = 3;

    pub fn caption_token(pattern: usize) -> usize {
        CAPTION_OFFSET + pattern
    }

    pub fn text_vocab_size(num_patterns: usize) -> usize {
        CAPTION_OFFSET + num_patterns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryParams {
    pub vocab_size: usize,
    pub patch_dim: usize,
    /// Each grid cell is `cell_side × cell_side` patches.
    pub cell_side: usize,
    /// Minimum Euclidean distance between any two patterns.
    pub min_distance: f64,
    pub seed: u64,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            patch_dim: 16,
            cell_side: 1,
            min_distance: 0.5,
            seed: 0,
        }
    }
}

/// Reproducible set of pairwise-distinct patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLibrary {
    pub params: LibraryParams,
    /// One `cell_side² × patch_dim` matrix per pattern, patches in raster
    /// order within the cell.
    pub patterns: Vec<Matrix>,
}

/// Generates a library with one patch per cell.
pub fn gen_library(vocab_size: usize, patch_dim: usize, seed: u64) -> Result<PatternLibrary> {
    gen_library_with(&LibraryParams {
        vocab_size,
        patch_dim,
        seed,
        ..LibraryParams::default()
    })
}

pub fn gen_library_with(params: &LibraryParams) -> Result<PatternLibrary> {
    if params.vocab_size < NUM_SLOTS + 1 {
        return Err(Error::config(format!(
            "vocab_size must be at least {} (key, 8 distractors, 1 substitute), got {}",
            NUM_SLOTS + 1,
            params.vocab_size
        )));
    }
    if params.patch_dim == 0 || params.cell_side == 0 {
        return Err(Error::config("patch_dim and cell_side must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let per_cell = params.cell_side * params.cell_side;
    let mut patterns: Vec<Matrix> = Vec::with_capacity(params.vocab_size);
    let mut attempts = 0;
    while patterns.len() < params.vocab_size {
        attempts += 1;
        if attempts > params.vocab_size * 1000 {
            return Err(Error::config(format!(
                "could not draw {} patterns at min distance {}",
                params.vocab_size, params.min_distance
            )));
        }
        let cand = Matrix::from_fn(per_cell, params.patch_dim, |_, _| rng.gen_range(-1.0..1.0));
        let far = patterns.iter().all(|p| {
            let d2: f64 = p
                .as_slice()
                .iter()
                .zip(cand.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() > params.min_distance
        });
        if far {
            patterns.push(cand);
        }
    }
    Ok(PatternLibrary {
        params: params.clone(),
        patterns,
    })
}

impl PatternLibrary {
    pub fn vocab_size(&self) -> usize {
        self.patterns.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.params.patch_dim
    }

    pub fn cell_side(&self) -> usize {
        self.params.cell_side
    }

    /// Side of the full patch grid.
    pub fn grid_side(&self) -> usize {
        GRID_SIDE * self.params.cell_side
    }

    pub fn pattern(&self, id: usize) -> &Matrix {
        &self.patterns[id]
    }

    /// Rasterizes one cell content per slot into the full patch grid.
    /// `None` cells are filled with `background`.
    pub fn compose(&self, cells: &[Option<usize>], background: &[f64]) -> Result<Matrix> {
        if cells.len() != NUM_SLOTS {
            return Err(Error::shape(format!("need {NUM_SLOTS} cells, got {}", cells.len())));
        }
        if background.len() != self.patch_dim() {
            return Err(Error::shape("background length differs from patch_dim"));
        }
        let c = self.cell_side();
        let side = self.grid_side();
        let mut grid = Matrix::zeros(side * side, self.patch_dim());
        for pr in 0..side {
            for pc in 0..side {
                let slot = (pr / c) * GRID_SIDE + pc / c;
                let row = grid.row_mut(pr * side + pc);
                match cells[slot] {
                    Some(id) => {
                        let sub = (pr % c) * c + pc % c;
                        row.copy_from_slice(self.patterns[id].row(sub));
                    }
                    None => row.copy_from_slice(background),
                }
            }
        }
        Ok(grid)
    }

    /// Raster indices (into the full patch grid) of the patches in `slot`.
    pub fn slot_patches(&self, slot: usize) -> Vec<usize> {
        let c = self.cell_side();
        let side = self.grid_side();
        let (r0, c0) = ((slot / GRID_SIDE) * c, (slot % GRID_SIDE) * c);
        (0..c)
            .flat_map(|dr| (0..c).map(move |dc| (r0 + dr) * side + c0 + dc))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn is_yes(self) -> bool {
        self == Label::Yes
    }
}

/// One probe instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeSample {
    pub key_id: usize,
    pub caption_id: usize,
    pub distractor_ids: Vec<usize>,
    /// Grid slot of the key (or of its substitute, for negatives).
    pub slot: usize,
    pub label: Label,
    /// Pattern id placed in each slot, raster order.
    pub cells: Vec<usize>,
}

impl CompositeSample {
    pub fn patch_grid(&self, lib: &PatternLibrary) -> Result<Matrix> {
        let cells: Vec<Option<usize>> = self.cells.iter().copied().map(Some).collect();
        lib.compose(&cells, &vec![0.0; lib.patch_dim()])
    }

    /// The prompt fed to the model: system tokens, the composite, then
    /// `question caption`. The caption is the last token, so the answer is
    /// read out at the caption.
    pub fn to_input(&self, lib: &PatternLibrary) -> Result<MultimodalInput> {
        MultimodalInput::new(
            prompt::SYSTEM.to_vec(),
            self.patch_grid(lib)?,
            lib.grid_side(),
            vec![prompt::QUESTION, prompt::caption_token(self.caption_id)],
        )
    }

    pub fn to_example(&self, lib: &PatternLibrary) -> Result<Example> {
        Ok(Example {
            input: self.to_input(lib)?,
            yes: self.label.is_yes(),
        })
    }

    fn check(&self, vocab: usize) -> std::result::Result<(), String> {
        if self.slot >= NUM_SLOTS || self.cells.len() != NUM_SLOTS {
            return Err("slot or cell count out of range".into());
        }
        if self.distractor_ids.len() != NUM_DISTRACTORS {
            return Err("need 8 distractors".into());
        }
        if self.cells.iter().chain([&self.key_id, &self.caption_id]).any(|&c| c >= vocab) {
            return Err("pattern id outside library".into());
        }
        if self.distractor_ids.contains(&self.key_id) {
            return Err("distractor equals key".into());
        }
        match self.label {
            Label::Yes => {
                if self.key_id != self.caption_id || self.cells[self.slot] != self.key_id {
                    return Err("positive sample without its key at the slot".into());
                }
            }
            Label::No => {
                if self.cells.contains(&self.caption_id) {
                    return Err("negative sample shows its caption".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub num_keys: usize,
    /// Number of training composites (random key, slot, and label).
    pub train_size: usize,
    /// Exclude evaluation keys from the training split.
    pub disjoint_keys: bool,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            num_keys: 20,
            train_size: 4096,
            disjoint_keys: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub cell_side: usize,
    pub num_keys: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub disjoint_keys: bool,
    /// SHA-256 over the library and both splits.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub manifest: Manifest,
    pub library: PatternLibrary,
    pub eval_keys: Vec<usize>,
    pub train: Vec<CompositeSample>,
    pub eval: Vec<CompositeSample>,
}

/// Eight distractors and one substitute, all distinct from `key`.
fn draw_composite(rng: &mut ChaCha8Rng, vocab: usize, key: usize) -> (Vec<usize>, usize) {
    let mut others: Vec<usize> = (0..vocab).filter(|&v| v != key).collect();
    others.shuffle(rng);
    let distractors = others[..NUM_DISTRACTORS].to_vec();
    let substitute = others[NUM_DISTRACTORS];
    (distractors, substitute)
}

fn make_sample(
    key: usize,
    slot: usize,
    label: Label,
    distractors: &[usize],
    substitute: usize,
) -> CompositeSample {
    let mut cells = Vec::with_capacity(NUM_SLOTS);
    let mut d = distractors.iter();
    for s in 0..NUM_SLOTS {
        if s == slot {
            cells.push(if label.is_yes() { key } else { substitute });
        } else {
            cells.push(*d.next().expect("eight distractors"));
        }
    }
    CompositeSample {
        key_id: key,
        caption_id: key,
        distractor_ids: distractors.to_vec(),
        slot,
        label,
        cells,
    }
}

fn content_hash(
    library: &PatternLibrary,
    eval_keys: &[usize],
    train: &[CompositeSample],
    eval: &[CompositeSample],
) -> String {
    let body = serde_json::to_vec(&(library, eval_keys, train, eval))
        .expect("dataset contents serialize");
    hex::encode(Sha256::digest(&body))
}

/// Builds the probe: for each evaluation key and each slot, one positive and
/// one matched negative, all nine slots sharing the key's distractors (`num_keys × 9 × 2` samples), plus a randomly drawn
/// training split.
pub fn gen_probe(lib: &PatternLibrary, params: &ProbeParams, seed: u64) -> Result<ProbeDataset> {
    let vocab = lib.vocab_size();
    if params.num_keys == 0 {
        return Err(Error::config("num_keys must be at least 1"));
    }
    if params.num_keys > vocab - NUM_SLOTS {
        return Err(Error::config(format!(
            "num_keys {} exceeds vocab_size - 9 = {}",
            params.num_keys,
            vocab - NUM_SLOTS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..vocab).collect();
    ids.shuffle(&mut rng);
    let mut eval_keys = ids[..params.num_keys].to_vec();
    eval_keys.sort_unstable();

    let mut eval = Vec::with_capacity(params.num_keys * NUM_SLOTS * 2);
    for &key in &eval_keys {
        let (distractors, substitute) = draw_composite(&mut rng, vocab, key);
        for slot in 0..NUM_SLOTS {
            eval.push(make_sample(key, slot, Label::Yes, &distractors, substitute));
            eval.push(make_sample(key, slot, Label::No, &distractors, substitute));
        }
    }

    let pool: Vec<usize> = if params.disjoint_keys {
        let held: BTreeSet<usize> = eval_keys.iter().copied().collect();
        (0..vocab).filter(|v| !held.contains(v)).collect()
    } else {
        (0..vocab).collect()
    };
    if pool.is_empty() {
        return Err(Error::config("no patterns left for the training split"));
    }
    let mut train = Vec::with_capacity(params.train_size);
    for i in 0..params.train_size {
        let key = pool[rng.gen_range(0..pool.len())];
        let slot = rng.gen_range(0..NUM_SLOTS);
        let label = if i % 2 == 0 { Label::Yes } else { Label::No };
        let (distractors, substitute) = draw_composite(&mut rng, vocab, key);
        train.push(make_sample(key, slot, label, &distractors, substitute));
    }

    let hash = content_hash(lib, &eval_keys, &train, &eval);
    Ok(ProbeDataset {
        manifest: Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed,
            vocab_size: vocab,
            patch_dim: lib.patch_dim(),
            cell_side: lib.cell_side(),
            num_keys: params.num_keys,
            train_size: train.len(),
            eval_size: eval.len(),
            disjoint_keys: params.disjoint_keys,
            hash,
        },
        library: lib.clone(),
        eval_keys,
        train,
        eval,
    })
}

impl ProbeDataset {
    pub fn hash(&self) -> &str {
        &self.manifest.hash
    }

    /// Evaluation samples whose key (or substitute) sits at `slot`.
    pub fn eval_at_slot(&self, slot: usize) -> impl Iterator<Item = &CompositeSample> {
        self.eval.iter().filter(move |s| s.slot == slot)
    }

    pub fn train_examples(&self) -> Result<Vec<Example>> {
        self.train.iter().map(|s| s.to_example(&self.library)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::corrupt(path, format!("serialize: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates a dataset: format, version, content hash, and
    /// every sample's construction invariants.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let manifest = value
            .get("manifest")
            .ok_or_else(|| Error::corrupt(path, "missing manifest"))?;
        if manifest.get("format").and_then(|f| f.as_str()) != Some(DATASET_FORMAT) {
            return Err(Error::corrupt(path, "not a probe dataset"));
        }
        let version = manifest
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::corrupt(path, "missing version"))?;
        if version != u64::from(DATASET_VERSION) {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        let ds: ProbeDataset =
            serde_json::from_value(value).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let hash = content_hash(&ds.library, &ds.eval_keys, &ds.train, &ds.eval);
        if hash != ds.manifest.hash {
            return Err(Error::corrupt(path, "content hash mismatch"));
        }
        let m = &ds.manifest;
        let lib = &ds.library;
        if m.vocab_size != lib.vocab_size()
            || m.patch_dim != lib.patch_dim()
            || m.cell_side != lib.cell_side()
            || m.train_size != ds.train.len()
            || m.eval_size != ds.eval.len()
            || m.num_keys != ds.eval_keys.len()
        {
            return Err(Error::corrupt(path, "manifest counts disagree with contents"));
        }
        for s in ds.train.iter().chain(&ds.eval) {
            s.check(lib.vocab_size())
                .map_err(|reason| Error::corrupt(path, reason))?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn dataset(num_keys: usize) -> ProbeDataset {
        let lib = gen_library(32, 8, 1).unwrap();
        gen_probe(
            &lib,
            &ProbeParams {
                num_keys,
                train_size: 64,
                disjoint_keys: false,
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn library_is_reproducible_and_distinct() {
        let a = gen_library(32, 16, 9).unwrap();
        assert_eq!(a, gen_library(32, 16, 9).unwrap());
        assert_eq!(a.vocab_size(), 32);
        for i in 0..32 {
            for j in i + 1..32 {
                assert_ne!(a.pattern(i), a.pattern(j));
            }
        }
        assert!(matches!(gen_library(9, 16, 0), Err(Error::Config(_))));
    }

    #[test]
    fn eval_split_size_and_construction() {
        let ds = dataset(10);
        assert_eq!(ds.eval.len(), 180);
        for s in &ds.eval {
            s.check(32).unwrap();
            let grid = s.patch_grid(&ds.library).unwrap();
            if s.label.is_yes() {
                assert_eq!(grid.row(s.slot), ds.library.pattern(s.key_id).row(0));
            } else {
                for r in 0..9 {
                    assert_ne!(grid.row(r), ds.library.pattern(s.caption_id).row(0));
                }
            }
        }
    }

    #[test]
    fn slots_hold_identical_key_multisets_and_labels_balance() {
        let ds = dataset(7);
        let mut per_slot: Vec<HashMap<(usize, usize, Label), usize>> = vec![HashMap::new(); 9];
        for s in &ds.eval {
            *per_slot[s.slot].entry((s.key_id, s.caption_id, s.label)).or_default() += 1;
        }
        assert!(per_slot.iter().all(|m| *m == per_slot[0]));
        let yes = ds.eval.iter().filter(|s| s.label.is_yes()).count();
        assert_eq!(2 * yes, ds.eval.len());
    }

    #[test]
    fn too_many_keys() {
        let lib = gen_library(12, 4, 0).unwrap();
        let p = ProbeParams {
            num_keys: 4,
            ..ProbeParams::default()
        };
        assert!(matches!(gen_probe(&lib, &p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn disjoint_training_keys() {
        let lib = gen_library(32, 4, 0).unwrap();
        let p = ProbeParams {
            num_keys: 5,
            train_size: 200,
            disjoint_keys: true,
        };
        let ds = gen_probe(&lib, &p, 3).unwrap();
        assert!(ds.train.iter().all(|s| !ds.eval_keys.contains(&s.key_id)));
    }

    #[test]
    fn super_resolution_cells() {
        let lib = gen_library_with(&LibraryParams {
            vocab_size: 12,
            patch_dim: 3,
            cell_side: 2,
            ..LibraryParams::default()
        })
        .unwrap();
        let ds = gen_probe(
            &lib,
            &ProbeParams {
                num_keys: 2,
                train_size: 4,
                disjoint_keys: false,
            },
            0,
        )
        .unwrap();
        let s = ds.eval.iter().find(|s| s.label.is_yes() && s.slot == 4).unwrap();
        let input = s.to_input(&lib).unwrap();
        assert_eq!(input.layout().image_len(), 36);
        let idx = lib.slot_patches(4);
        assert_eq!(idx, vec![14, 15, 20, 21]);
        for (k, &p) in idx.iter().enumerate() {
            assert_eq!(input.patches().row(p), lib.pattern(s.key_id).row(k));
        }
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = dataset(3);
        ds.save(&path).unwrap();
        assert_eq!(ProbeDataset::load(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"version\":1", "\"version\":2", 1)).unwrap();
        assert!(matches!(
            ProbeDataset::load(&path),
            Err(Error::Version { expected: 1, found: 2 })
        ));

        let tampered = text.replacen("\"seed\":2", "\"seed\":3", 1);
        assert_ne!(tampered, text);
        std::fs::write(&path, tampered).unwrap();
        assert!(ProbeDataset::load(&path).is_ok(), "seed lives outside the hashed body");

        let tampered = text.replacen("\"label\":\"yes\"", "\"label\":\"no\"", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(ProbeDataset::load(&path), Err(Error::Corrupt { .. })));

        assert!(matches!(
            ProbeDataset::load(&dir.path().join("nope.json")),
            Err(Error::Io { .. })
        ));
    }
}
