//! Datasets, hints and training-pair synthesis.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::{to_grayscale, ImagePlane, ImageStack, ValueRange};
use crate::error::{Error, Result};
use crate::priors::{synthetic_rough_color, DegradationConfig};
use crate::raster;

pub const HINT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One user-placed color hint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub x: u32,
    pub y: u32,
    /// sRGB in `[0, 1]`.
    pub color: [f64; 3],
    pub radius: u32,
}

/// Hints attached to one page, validated against the page dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct HintSet {
    width: u32,
    height: u32,
    hints: Vec<Hint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDims {
    pub width: u32,
    pub height: u32,
}

/// Serialized form of a [`HintSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintDocument {
    pub version: u32,
    pub page: PageDims,
    pub hints: Vec<Hint>,
}

impl HintSet {
    pub fn new(width: u32, height: u32, hints: Vec<Hint>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("hint page needs width, height >= 1"));
        }
        for (index, h) in hints.iter().enumerate() {
            let reason = if h.x >= width {
                Some(format!("x = {} outside page width {width}", h.x))
            } else if h.y >= height {
                Some(format!("y = {} outside page height {height}", h.y))
            } else if h.radius < 1 {
                Some("radius must be >= 1".to_string())
            } else if !h.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                Some(format!("color {:?} outside [0, 1]", h.color))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::InvalidHint { index, reason });
            }
        }
        Ok(Self {
            width,
            height,
            hints,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn hints(&self) -> &[Hint] {
        &self.hints
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.hints.is_empty()
    }

    pub fn to_document(&self) -> HintDocument {
        HintDocument {
            version: HINT_SCHEMA_VERSION,
            page: PageDims {
                width: self.width,
                height: self.height,
            },
            hints: self.hints.clone(),
        }
    }

    pub fn from_document(doc: HintDocument) -> Result<Self> {
        if doc.version != HINT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "hint document version {} (supported: {HINT_SCHEMA_VERSION})",
                doc.version
            )));
        }
        Self::new(doc.page.width, doc.page.height, doc.hints)
    }

    /// Stable digest of the hint content.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(save_hints(self).as_bytes()))
    }
}

pub fn load_hints(document: &str) -> Result<HintSet> {
    HintSet::from_document(serde_json::from_str(document)?)
}

pub fn save_hints(hints: &HintSet) -> String {
    serde_json::to_string_pretty(&hints.to_document()).expect("hint documents serialize")
}

/// One training example: ground truth crop plus the two synthesized priors.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub y_true: ImageStack,
    pub x_g: ImagePlane,
    pub x_col: ImageStack,
    pub source_id: String,
    pub seed: u64,
}

/// Resize-then-crop geometry applied to training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub short_side: usize,
    pub crop_size: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            short_side: 512,
            crop_size: 256,
        }
    }
}

/// Dimensions after scaling the shortest side to `short_side`.
pub fn resized_dims(height: usize, width: usize, short_side: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| {
        ((long as f64 * short_side as f64 / short as f64).round() as usize).max(short_side)
    };
    if height <= width {
        (short_side, scale(width, height))
    } else {
        (scale(height, width), short_side)
    }
}

pub fn prepare(img: &ImageStack, crop_seed: u64) -> Result<ImageStack> {
    prepare_with(img, crop_seed, &PrepareConfig::default())
}

/// Scales the shortest side to `short_side` (bicubic; small images are
/// upscaled) and takes a seeded random square crop.
pub fn prepare_with(img: &ImageStack, crop_seed: u64, cfg: &PrepareConfig) -> Result<ImageStack> {
    if cfg.crop_size > cfg.short_side || cfg.crop_size == 0 {
        return Err(Error::Config(format!(
            "crop_size {} must be in 1..=short_side {}",
            cfg.crop_size, cfg.short_side
        )));
    }
    let (h, w) = resized_dims(img.height(), img.width(), cfg.short_side);
    let resized = raster::resize_stack(&img.to_range(ValueRange::Unit)?, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
    let top = rng.random_range(0..=h - cfg.crop_size);
    let left = rng.random_range(0..=w - cfg.crop_size);
    raster::crop_stack(&resized, top, left, cfg.crop_size, cfg.crop_size)
}

pub fn synthesize_pair(img: &ImageStack, deg_cfg: &DegradationConfig, crop_seed: u64) -> Result<SamplePair> {
    synthesize_pair_with(img, deg_cfg, crop_seed, &PrepareConfig::default(), "")
}

pub fn synthesize_pair_with(
    img: &ImageStack,
    deg_cfg: &DegradationConfig,
    crop_seed: u64,
    prep: &PrepareConfig,
    source_id: &str,
) -> Result<SamplePair> {
    let y_true = prepare_with(img, crop_seed, prep)?;
    let x_g = to_grayscale(&y_true)?;
    let x_col = synthetic_rough_color(&y_true, deg_cfg)?;
    Ok(SamplePair {
        y_true,
        x_g,
        x_col,
        source_id: source_id.to_string(),
        seed: crop_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Files that were found but could not be decoded.
    #[serde(default)]
    pub rejected: Vec<String>,
}

const RASTER_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans `root` for rasters. Every `eval_every`-th image by content hash goes
/// to the eval split (0 disables the eval split).
pub fn ingest_with(root: &Path, eval_every: u64) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no raster images under {}", root.display())));
    }
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for path in files {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match image::load_from_memory(&bytes) {
            Ok(img) => {
                let digest = Sha256::digest(&bytes);
                let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                let split = if eval_every > 0 && bucket % eval_every == 0 {
                    Split::Eval
                } else {
                    Split::Train
                };
                entries.push(ManifestEntry {
                    path: rel,
                    width: img.width(),
                    height: img.height(),
                    sha256: hex::encode(digest),
                    split,
                });
            }
            Err(e) => {
                warn!("skipping undecodable image {}: {e}", path.display());
                rejected.push(rel);
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no decodable images under {}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        rejected,
    })
}

pub fn ingest(root: &Path) -> Result<DatasetManifest> {
    ingest_with(root, 10)
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Same manifest with every entry assigned to `split`.
    pub fn with_all(mut self, split: Split) -> Self {
        for e in &mut self.entries {
            e.split = split;
        }
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and verifies every entry's checksum.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        for e in &m.entries {
            let p = m.root.join(&e.path);
            let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
            if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
                return Err(Error::Dataset(format!("checksum mismatch for {}", e.path)));
            }
        }
        Ok(m)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<ImageStack> {
        raster::load_stack(&self.root.join(&entry.path))
    }

    /// Decodes every image of a split, keyed by relative path.
    pub fn load_split(&self, split: Split) -> Result<BTreeMap<String, ImageStack>> {
        self.split(split)
            .map(|e| Ok((e.path.clone(), self.load_image(e)?)))
            .collect()
    }
}

/// Order in which `n` samples are visited during `epoch`; a pure function of
/// the seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Procedural color page: a soft background gradient, flat-colored shapes
/// with dark outlines and a shaded band, standing in for colored manga art.
pub fn synthetic_page(height: usize, width: usize, seed: u64) -> ImageStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let base = rng.random_range(0.25..0.95);
        [
            (base + rng.random_range(-0.35..0.35f64)).clamp(0.05, 1.0),
            (base + rng.random_range(-0.35..0.35f64)).clamp(0.05, 1.0),
            (base + rng.random_range(-0.35..0.35f64)).clamp(0.05, 1.0),
        ]
    };
    let bg0 = color(&mut rng);
    let bg1 = color(&mut rng);
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..rng.random_range(3..6))
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(0.12..0.35) * height.min(width) as f64,
                color(&mut rng),
                rng.random_bool(0.5),
            )
        })
        .collect();
    ImageStack::from_fn(height, width, |y, x| {
        let t = y as f64 / height.max(1) as f64;
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = bg0[c] * (1.0 - t) + bg1[c] * t;
        }
        for &(cy, cx, r, col, round) in &shapes {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let d = if round {
                (dy * dy + dx * dx).sqrt()
            } else {
                dy.abs().max(dx.abs())
            };
            if d <= r {
                let shade = 1.0 - 0.3 * (d / r).powi(2);
                px = col.map(|v| v * shade);
                if r - d < 1.5 {
                    px = [0.05, 0.05, 0.08];
                }
            }
        }
        px.map(|v: f64| v.clamp(0.0, 1.0))
    })
    .expect("procedural pixels are in range")
}

/// Writes `n` procedural pages as PNGs into `dir`.
pub fn write_synthetic_dataset(dir: &Path, n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n)
        .map(|i| {
            let p = dir.join(format!("page_{i:03}.png"));
            raster::save_stack(&synthetic_page(height, width, seed + i as u64), &p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hint_round_trip() {
        let empty = load_hints(&save_hints(&HintSet::empty(10, 10).unwrap())).unwrap();
        assert!(empty.is_empty());
        let h = HintSet::new(
            64,
            64,
            vec![Hint {
                x: 10,
                y: 20,
                color: [1.0, 0.0, 0.0],
                radius: 4,
            }],
        )
        .unwrap();
        assert_eq!(load_hints(&save_hints(&h)).unwrap(), h);
    }

    #[test]
    fn hint_bounds_name_the_record() {
        let ok = Hint {
            x: 1,
            y: 1,
            color: [0.5; 3],
            radius: 2,
        };
        let bad = Hint { x: 32, ..ok };
        match HintSet::new(32, 16, vec![ok, bad]) {
            Err(Error::InvalidHint { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(HintSet::new(32, 16, vec![Hint { radius: 0, ..ok }]).is_err());
        assert!(HintSet::new(32, 16, vec![Hint { y: 16, ..ok }]).is_err());
        let doc = r#"{"version":1,"page":{"width":8,"height":8},"hints":[{"x":8,"y":0,"color":[0,0,0],"radius":1}]}"#;
        assert!(matches!(load_hints(doc), Err(Error::InvalidHint { index: 0, .. })));
        let doc = r#"{"version":2,"page":{"width":8,"height":8},"hints":[]}"#;
        assert!(load_hints(doc).is_err());
    }

    #[test]
    fn resize_rule() {
        assert_eq!(resized_dims(512, 1024, 512), (512, 1024));
        assert_eq!(resized_dims(300, 600, 512), (512, 1024));
        assert_eq!(resized_dims(600, 300, 512), (1024, 512));
        assert_eq!(resized_dims(100, 100, 512), (512, 512));
    }

    #[test]
    fn prepare_crops_deterministically() {
        let img = synthetic_page(30, 60, 1);
        let cfg = PrepareConfig {
            short_side: 64,
            crop_size: 32,
        };
        let a = prepare_with(&img, 5, &cfg).unwrap();
        let b = prepare_with(&img, 5, &cfg).unwrap();
        assert_eq!(a.dims(), (32, 32));
        assert_eq!(a, b);
        let big = prepare(&synthetic_page(300, 600, 2), 1).unwrap();
        assert_eq!(big.dims(), (256, 256));
    }

    #[test]
    fn pair_synthesis() {
        let img = synthetic_page(40, 40, 3);
        let prep = PrepareConfig {
            short_side: 32,
            crop_size: 32,
        };
        let p = synthesize_pair_with(&img, &DegradationConfig::default(), 9, &prep, "x").unwrap();
        assert_eq!(p.y_true.dims(), (32, 32));
        assert_eq!(p.x_g.dims(), (32, 32));
        assert_eq!(p.x_col.dims(), (32, 32));
        let q = synthesize_pair_with(&img, &DegradationConfig::default(), 9, &prep, "x").unwrap();
        assert_eq!(p, q);
        let id = synthesize_pair_with(&img, &DegradationConfig::identity(), 9, &prep, "x").unwrap();
        assert!(id.x_col.max_abs_diff(&id.y_true).unwrap() < 1e-6);
    }

    fn hint_strategy(w: u32, h: u32) -> impl Strategy<Value = Hint> {
        (0..w, 0..h, proptest::array::uniform3(0.0..=1.0f64), 1..64u32)
            .prop_map(|(x, y, color, radius)| Hint { x, y, color, radius })
    }

    proptest! {
        #[test]
        fn valid_hint_documents_round_trip(
            (w, h, hints) in (1..2048u32, 1..2048u32).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(hint_strategy(w, h), 0..20))
            })
        ) {
            let set = HintSet::new(w, h, hints).unwrap();
            let back = load_hints(&save_hints(&set)).unwrap();
            prop_assert_eq!(back.digest(), set.digest());
            prop_assert_eq!(back, set);
        }

        #[test]
        fn out_of_page_hints_are_rejected(w in 1..512u32, h in 1..512u32, dx in 0..100u32, dy in 0..100u32) {
            let hint = Hint { x: w + dx, y: dy % h, color: [0.5; 3], radius: 1 };
            prop_assert!(HintSet::new(w, h, vec![hint]).is_err());
            let hint = Hint { x: dx % w, y: h + dy, color: [0.5; 3], radius: 1 };
            prop_assert!(HintSet::new(w, h, vec![hint]).is_err());
        }

        #[test]
        fn epoch_orders_are_permutations(n in 1..200usize, seed in any::<u64>(), epoch in 0..1000u64) {
            let mut o = epoch_order(n, seed, epoch);
            o.sort_unstable();
            prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let o = epoch_order(10, 3, 0);
        let mut s = o.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(10, 3, 0));
        assert_ne!(o, epoch_order(10, 3, 1));
    }
}
