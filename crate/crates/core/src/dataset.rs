//! Portrait corpus ingestion: `root/images/<name>.png` with hair-mask sidecars
//! at `root/masks/<name>.mask.png`, a seeded train/test split cached as
//! `root/index.json`, and pseudo-supervised batch assembly.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::imaging::{
    extract_background, extract_hair_region, load_image, load_mask, resize_image, resize_mask,
    HairMask, PortraitImage, ResizePolicy,
};
use crate::networks::IMAGE_RESOLUTION;
use crate::nn::{images_to_tensor, masks_to_tensor};

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
/// Largest tolerated fraction of unreadable files before indexing fails.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

/// Produces hair masks for portraits. No implementation ships; masks are sidecar files.
pub trait HairSegmenter: Send + Sync {
    fn segment(&self, image: &PortraitImage) -> Result<HairMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub split_fraction: f64,
    pub entries: Vec<IndexEntry>,
    #[serde(skip)]
    root: PathBuf,
}

/// What `build_index` left out and why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexReport {
    pub images_found: usize,
    pub missing_masks: Vec<PathBuf>,
    pub unreadable: Vec<PathBuf>,
}

/// Seeded split: exactly `round(fraction * n)` entries are tagged train.
pub fn split_assignments(n: usize, split_fraction: f64, seed: u64) -> Vec<SplitTag> {
    let n_train = ((split_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![SplitTag::Test; n];
    for &i in &order[..n_train] {
        tags[i] = SplitTag::Train;
    }
    tags
}

fn mask_path_for(image_rel: &Path) -> PathBuf {
    let stem = image_rel
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PathBuf::from("masks").join(format!("{stem}.mask.png"))
}

fn validate_pair(root: &Path, image: &Path, mask: &Path) -> Result<()> {
    let img_dims = image::image_dimensions(root.join(image)).map_err(|e| Error::io(root.join(image), e))?;
    let m = load_mask(root.join(mask))?;
    if (m.width() as u32, m.height() as u32) != img_dims {
        return Err(Error::Dimension(format!(
            "{} is {}x{} but its mask is {}x{}",
            image.display(),
            img_dims.0,
            img_dims.1,
            m.width(),
            m.height()
        )));
    }
    Ok(())
}

impl DatasetIndex {
    /// Scan `root`, validate every image/mask pair, and assign splits.
    pub fn build(root: impl AsRef<Path>, split_fraction: f64, seed: u64) -> Result<(Self, IndexReport)> {
        let root = root.as_ref();
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::Argument(format!(
                "split fraction must be in [0, 1], got {split_fraction}"
            )));
        }
        let images_dir = root.join("images");
        let mut images: Vec<PathBuf> = match std::fs::read_dir(&images_dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .filter_map(|p| p.file_name().map(|f| PathBuf::from("images").join(f)))
                .collect(),
            Err(_) => Vec::new(),
        };
        if images.is_empty() {
            return Err(Error::Config(format!(
                "no images found under {}",
                images_dir.display()
            )));
        }
        images.sort();

        let mut report = IndexReport {
            images_found: images.len(),
            ..Default::default()
        };
        let mut pairs = Vec::with_capacity(images.len());
        for image in images {
            let mask = mask_path_for(&image);
            if !root.join(&mask).exists() {
                report.missing_masks.push(image);
                continue;
            }
            match validate_pair(root, &image, &mask) {
                Ok(()) => pairs.push((image, mask)),
                Err(e) => {
                    warn!("skipping {}: {e}", image.display());
                    report.unreadable.push(image);
                }
            }
        }
        let skipped = report.unreadable.len() as f64 / report.images_found as f64;
        if skipped > MAX_SKIP_FRACTION {
            return Err(Error::Config(format!(
                "{} of {} images unreadable ({:.1}% > {:.0}% limit)",
                report.unreadable.len(),
                report.images_found,
                skipped * 100.0,
                MAX_SKIP_FRACTION * 100.0
            )));
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!(
                "no image under {} has a usable mask",
                root.display()
            )));
        }

        let tags = split_assignments(pairs.len(), split_fraction, seed);
        let entries = pairs
            .into_iter()
            .zip(tags)
            .map(|((image, mask), split)| IndexEntry { image, mask, split })
            .collect();
        Ok((
            Self {
                version: INDEX_VERSION,
                seed,
                split_fraction,
                entries,
                root: root.to_path_buf(),
            },
            report,
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    /// Write `root/index.json`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(INDEX_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: Self =
            serde_json::from_str(&text).map_err(|e| Error::io(&path, e))?;
        if index.version != INDEX_VERSION {
            return Err(Error::Config(format!(
                "{} has version {}, expected {INDEX_VERSION}",
                path.display(),
                index.version
            )));
        }
        index.root = root.to_path_buf();
        Ok(index)
    }

    /// Load the cached index if present, otherwise build and cache it.
    pub fn open_or_build(root: impl AsRef<Path>, split_fraction: f64, seed: u64) -> Result<Self> {
        let root = root.as_ref();
        if root.join(INDEX_FILE).exists() {
            let index = Self::load(root)?;
            if index.seed == seed && index.split_fraction == split_fraction {
                return Ok(index);
            }
        }
        let (index, report) = Self::build(root, split_fraction, seed)?;
        if !report.missing_masks.is_empty() || !report.unreadable.is_empty() {
            warn!(
                "indexed {} of {} images ({} without masks, {} unreadable)",
                index.len(),
                report.images_found,
                report.missing_masks.len(),
                report.unreadable.len()
            );
        }
        index.save()?;
        Ok(index)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self, split: SplitTag) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        self.ids(SplitTag::Train)
    }

    pub fn test_ids(&self) -> Vec<usize> {
        self.ids(SplitTag::Test)
    }

    /// Decode entry `id`, resize to 128x128 and precompute hair/background.
    pub fn load_sample(&self, id: usize) -> Result<TrainingSample> {
        let entry = self.entries.get(id).ok_or_else(|| {
            Error::Argument(format!("sample id {id} out of range (0..{})", self.len()))
        })?;
        let image = load_image(self.root.join(&entry.image))?;
        let mask = load_mask(self.root.join(&entry.mask))?;
        TrainingSample::new(id, entry.split, image, mask)
    }
}

/// One portrait at generator resolution with its derived inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: usize,
    pub split: SplitTag,
    pub image: PortraitImage,
    pub mask: HairMask,
    /// `image * mask`
    pub hair: PortraitImage,
    /// `image * (1 - mask)`
    pub background: PortraitImage,
}

impl TrainingSample {
    pub fn new(id: usize, split: SplitTag, image: PortraitImage, mask: HairMask) -> Result<Self> {
        if image.resolution() != mask.resolution() {
            return Err(Error::Dimension(format!(
                "image {:?} and mask {:?} differ in resolution",
                image.resolution(),
                mask.resolution()
            )));
        }
        let target = (IMAGE_RESOLUTION, IMAGE_RESOLUTION);
        let image = resize_image(&image, target, ResizePolicy::AREA)?;
        let mask = resize_mask(&mask, target)?;
        let hair = extract_hair_region(&image, &mask)?;
        let background = extract_background(&image, &mask)?;
        Ok(Self {
            id,
            split,
            image,
            mask,
            hair,
            background,
        })
    }
}

/// Same-source conditioning: reference == input, target mask == reference mask,
/// and the source image is the ground truth.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<TrainingSample>,
}

/// Batch contents as `(N, C, 128, 128)` tensors.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// Input portrait; also the reconstruction target.
    pub input: Tensor,
    /// Reference portrait (the input itself).
    pub reference: Tensor,
    pub reference_mask: Tensor,
    pub target_mask: Tensor,
    /// `reference * reference_mask`
    pub hair: Tensor,
    /// `input * (1 - target_mask)`
    pub background: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn all_in(&self, split: SplitTag) -> bool {
        self.samples.iter().all(|s| s.split == split)
    }

    pub fn to_tensors(&self, dtype: DType, device: &Device) -> Result<BatchTensors> {
        let images: Vec<_> = self.samples.iter().map(|s| &s.image).collect();
        let masks: Vec<_> = self.samples.iter().map(|s| &s.mask).collect();
        let hair: Vec<_> = self.samples.iter().map(|s| &s.hair).collect();
        let bg: Vec<_> = self.samples.iter().map(|s| &s.background).collect();
        let input = images_to_tensor(&images, dtype, device)?;
        let mask = masks_to_tensor(&masks, dtype, device)?;
        Ok(BatchTensors {
            reference: input.clone(),
            input,
            reference_mask: mask.clone(),
            target_mask: mask,
            hair: images_to_tensor(&hair, dtype, device)?,
            background: images_to_tensor(&bg, dtype, device)?,
        })
    }
}

pub fn make_pseudo_supervised_batch(index: &DatasetIndex, ids: &[usize]) -> Result<Batch> {
    if ids.is_empty() {
        return Err(Error::Argument("batch needs at least one id".into()));
    }
    let samples = ids
        .iter()
        .map(|&id| index.load_sample(id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { samples })
}

/// Procedural portraits with hair masks, for hermetic tests and demos.
pub mod synthetic {
    use std::path::Path;

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::error::{Error, Result};
    use crate::imaging::{save_image, save_mask, HairMask, PortraitImage};

    /// A portrait and its binary hair mask, deterministic in `seed`.
    pub fn portrait(seed: u64, size: usize) -> (PortraitImage, HairMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = || [rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let bg_top = color();
        let bg_bottom = color();
        let mut hair = color();
        for c in &mut hair {
            *c *= 0.7;
        }
        let skin = {
            let t: f32 = rng.random_range(0.0..1.0);
            [0.95 - 0.5 * t, 0.8 - 0.45 * t, 0.7 - 0.4 * t]
        };
        let cx = 0.5 + rng.random_range(-0.05..0.05f32);
        let face_cy = 0.55 + rng.random_range(-0.04..0.04f32);
        let face_rx = rng.random_range(0.17..0.22f32);
        let face_ry = face_rx * rng.random_range(1.2..1.4f32);
        let hair_rx = face_rx * rng.random_range(1.15..1.6f32);
        let hair_ry = face_ry * rng.random_range(1.0..1.25f32);
        let hair_cy = face_cy - rng.random_range(0.05..0.12f32);
        let hair_drop = rng.random_range(0.0..0.3f32);
        let freq = rng.random_range(20.0..60.0f32);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);

        let s = size as f32;
        let inside = |x: f32, y: f32, cy: f32, rx: f32, ry: f32| {
            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            dx * dx + dy * dy <= 1.0
        };
        let is_hair = |x: f32, y: f32| {
            let in_hair = inside(x, y, hair_cy, hair_rx, hair_ry) && y < face_cy + hair_drop;
            let in_face = inside(x, y, face_cy, face_rx, face_ry) && y > face_cy - face_ry * 0.55;
            in_hair && !in_face
        };
        let mask = HairMask::from_fn(size, size, |i, j| {
            is_hair((j as f32 + 0.5) / s, (i as f32 + 0.5) / s) as u8 as f32
        });
        let image = PortraitImage::from_fn(size, size, |i, j, c| {
            let x = (j as f32 + 0.5) / s;
            let y = (i as f32 + 0.5) / s;
            if is_hair(x, y) {
                let angle = (y - hair_cy).atan2(x - cx);
                let strand = 0.5 + 0.5 * (angle * freq + phase).sin();
                hair[c] * (0.75 + 0.35 * strand)
            } else if inside(x, y, face_cy, face_rx, face_ry) {
                let shade = 1.0 - 0.3 * ((x - cx) / face_rx).powi(2);
                skin[c] * shade
            } else if y > 0.85 && (x - cx).abs() < 0.35 {
                skin[c] * 0.6
            } else {
                bg_top[c] * (1.0 - y) + bg_bottom[c] * y
            }
        });
        (image, mask)
    }

    /// Write `n` portraits in the `images/` + `masks/` layout. Returns the image names.
    pub fn write_corpus(root: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
        for dir in ["images", "masks"] {
            std::fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
        }
        (0..n)
            .map(|i| {
                let name = format!("{i:05}");
                let (img, mask) = portrait(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size);
                save_image(&img, root.join("images").join(format!("{name}.png")))?;
                save_mask(&mask, root.join("masks").join(format!("{name}.mask.png")))?;
                Ok(name)
            })
            .collect()
    }
}
