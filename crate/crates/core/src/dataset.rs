//! Paired `blur/` + `sharp/` corpora: discovery, splitting and patch batches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blur::list_images;
use crate::error::{Error, Result};
use crate::imaging::{convert_range, load_image, to_tensor, ImageTensor, RangeTag};
use crate::nn::Tensor;

pub const BLUR_DIR: &str = "blur";
pub const SHARP_DIR: &str = "sharp";

/// Default fraction of pairs held out for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

/// File locations of one pair; the id is the shared filename stem.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub id: String,
    pub blurred: PathBuf,
    pub sharp: PathBuf,
}

/// Aligned blurred (z) and sharp (x) images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub blurred: ImageTensor,
    pub sharp: ImageTensor,
}

impl PairRef {
    /// Loads both images in the unit_signed range.
    pub fn load(&self) -> Result<ImagePair> {
        let blurred = convert_range(&load_image(&self.blurred)?, RangeTag::UnitSigned);
        let sharp = convert_range(&load_image(&self.sharp)?, RangeTag::UnitSigned);
        if !blurred.same_shape(&sharp) {
            return Err(Error::Structure(format!(
                "pair {} has mismatched sizes {}x{} and {}x{}",
                self.id,
                blurred.height(),
                blurred.width(),
                sharp.height(),
                sharp.width()
            )));
        }
        Ok(ImagePair {
            id: self.id.clone(),
            blurred,
            sharp,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by id.
    pub pairs: Vec<PairRef>,
    /// Orphaned files excluded during discovery.
    pub warnings: Vec<String>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    fn subset(&self, split: Split, mut pairs: Vec<PairRef>) -> Self {
        pairs.sort();
        Self {
            root: self.root.clone(),
            split,
            pairs,
            warnings: Vec::new(),
        }
    }
}

fn by_filename(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect())
}

/// Matches `root/blur/<name>` with `root/sharp/<name>`.
pub fn discover(root: &Path) -> Result<PairedDataset> {
    let (blur_dir, sharp_dir) = (root.join(BLUR_DIR), root.join(SHARP_DIR));
    for dir in [&blur_dir, &sharp_dir] {
        if !dir.is_dir() {
            return Err(Error::Structure(format!("missing subdirectory {}", dir.display())));
        }
    }
    let blurred = by_filename(&blur_dir)?;
    let sharp = by_filename(&sharp_dir)?;
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (name, path) in &blurred {
        match sharp.get(name) {
            Some(s) => pairs.push(PairRef {
                id: Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string(),
                blurred: path.clone(),
                sharp: s.clone(),
            }),
            None => warnings.push(format!("{BLUR_DIR}/{name} has no sharp counterpart")),
        }
    }
    for name in sharp.keys().filter(|n| !blurred.contains_key(*n)) {
        warnings.push(format!("{SHARP_DIR}/{name} has no blurred counterpart"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    pairs.sort();
    Ok(PairedDataset {
        root: root.to_path_buf(),
        split: Split::All,
        pairs,
        warnings,
    })
}

/// Seeded shuffle, then the first `floor(n · val_fraction)` pairs go to
/// validation. Training always keeps at least one pair; validation may be empty.
pub fn split(ds: &PairedDataset, val_fraction: f64, seed: u64) -> Result<(PairedDataset, PairedDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Precondition(format!("val fraction {val_fraction} must lie in (0, 1)")));
    }
    let n = ds.len();
    let mut order = ds.pairs.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).floor() as usize).min(n.saturating_sub(1));
    let train = order.split_off(n_val);
    Ok((ds.subset(Split::Train, train), ds.subset(Split::Val, order)))
}

/// One batch of aligned patches, NCHW in the unit_signed range.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(row, col)` of each crop, shared by the blurred and sharp patch.
    pub offsets: Vec<(usize, usize)>,
    pub blurred: Tensor<f32>,
    pub sharp: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Epoch-ordered batch stream. Pairs smaller than the patch are skipped and
/// recorded in [`skipped`](Self::skipped).
pub struct Batches<'a> {
    pairs: Vec<&'a PairRef>,
    next: usize,
    batch_size: usize,
    patch_size: usize,
    positions: ChaCha8Rng,
    skipped: Vec<String>,
}

fn epoch_rng(seed: u64, salt: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64);
    rng
}

pub fn batches(ds: &PairedDataset, batch_size: usize, patch_size: usize, seed: u64, epoch: usize) -> Result<Batches<'_>> {
    if batch_size == 0 || patch_size == 0 {
        return Err(Error::Precondition("batch size and patch size must be at least 1".into()));
    }
    let mut pairs: Vec<&PairRef> = ds.pairs.iter().collect();
    pairs.shuffle(&mut epoch_rng(seed, 0, epoch));
    Ok(Batches {
        pairs,
        next: 0,
        batch_size,
        patch_size,
        positions: epoch_rng(seed, 0x5eed_0ff5_e7, epoch),
        skipped: Vec::new(),
    })
}

impl Batches<'_> {
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// Pair ids in visiting order for this epoch.
    pub fn order(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    fn next_batch(&mut self) -> Result<Option<Batch>> {
        let p = self.patch_size;
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut blurred = Vec::new();
        let mut sharp = Vec::new();
        while ids.len() < self.batch_size && self.next < self.pairs.len() {
            let pair_ref = self.pairs[self.next];
            self.next += 1;
            let pair = pair_ref.load()?;
            let (h, w) = (pair.sharp.height(), pair.sharp.width());
            if h < p || w < p {
                log::warn!("skipping {}: {h}x{w} is smaller than the {p}x{p} patch", pair.id);
                self.skipped.push(pair.id);
                continue;
            }
            let top = self.positions.gen_range(0..=h - p);
            let left = self.positions.gen_range(0..=w - p);
            blurred.push(pair.blurred.crop(top, left, p, p)?);
            sharp.push(pair.sharp.crop(top, left, p, p)?);
            offsets.push((top, left));
            ids.push(pair.id);
        }
        if ids.is_empty() {
            return Ok(None);
        }
        let blurred = to_tensor(&blurred.iter().collect::<Vec<_>>())?;
        let sharp = to_tensor(&sharp.iter().collect::<Vec<_>>())?;
        Ok(Some(Batch {
            ids,
            offsets,
            blurred,
            sharp,
        }))
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
