//! FCM membership caching, train/validation splitting and the on-disk
//! dataset layout:
//!
//! ```text
//! <root>/img_0000.pgm   16-bit intensities
//! <root>/lbl_0000.pgm   class ids
//! <root>/mem_0000.bin   membership matrix (tensor archive, f64)
//! <root>/manifest.txt   "index seed blur noise" per image
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fcm::{self, FcmConfig, MembershipMatrix};
use crate::matrix::ClassMatrix;
use crate::nn::TensorArchive;
use crate::seed::{self, stream};

use super::pgm::{self, BitDepth, GrayImage};
use super::phantom::{LabeledImage, PhantomConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub split_fraction: f64,
}

/// Runs FCM on every image and stores the memberships. Images are
/// processed in parallel; each uses its own tie-breaking seed derived from
/// `fcm_cfg.seed` and its index, so results do not depend on scheduling.
pub fn cache_memberships(images: &mut [LabeledImage], fcm_cfg: &FcmConfig) -> Result<()> {
    images.par_iter_mut().try_for_each(|img| {
        let cfg = FcmConfig { seed: seed::derive(fcm_cfg.seed, &[stream::FCM_TIES, img.index as u64]), ..fcm_cfg.clone() };
        let result = fcm::run(&img.intensities, &cfg).map_err(|e| Error::Image { index: img.index, source: Box::new(e) })?;
        img.memberships = Some(result.memberships);
        Ok(())
    })
}

/// Shuffles with `seed` and puts the first `round(n * split_fraction)`
/// images in the training set.
pub fn split_dataset(mut images: Vec<LabeledImage>, split_fraction: f64, seed_value: u64) -> Result<DatasetSplit> {
    if images.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::config(format!("split_fraction must be in [0, 1], got {split_fraction}")));
    }
    images.shuffle(&mut seed::rng(seed_value, &[stream::SPLIT]));
    let n_train = (images.len() as f64 * split_fraction).round() as usize;
    let val = images.split_off(n_train);
    Ok(DatasetSplit { train: images, val, split_fraction })
}

pub fn prepare_dataset(
    mut images: Vec<LabeledImage>,
    fcm_cfg: &FcmConfig,
    split_fraction: f64,
    seed_value: u64,
) -> Result<DatasetSplit> {
    if images.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    cache_memberships(&mut images, fcm_cfg)?;
    split_dataset(images, split_fraction, seed_value)
}

fn file(root: &Path, prefix: &str, index: usize, ext: &str) -> std::path::PathBuf {
    root.join(format!("{prefix}_{index:04}.{ext}"))
}

/// Rounds intensities to the 16-bit grid used on disk, so that memberships
/// computed in memory match what a later load will see.
pub fn quantize_intensities(images: &mut [LabeledImage]) {
    for img in images {
        img.intensities = pgm::quantize(&img.intensities, BitDepth::Sixteen).iter().map(|&s| s as f64 / 65535.0).collect();
    }
}

pub fn write_dataset(root: impl AsRef<Path>, images: &[LabeledImage], cfg: &PhantomConfig) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for img in images {
        let gray = GrayImage::new(img.width, img.height, img.intensities.clone())?;
        pgm::save_pgm(&gray, file(root, "img", img.index, "pgm"), BitDepth::Sixteen)?;
        pgm::save_labels_pgm(&img.labels, img.width, img.height, file(root, "lbl", img.index, "pgm"))?;
        if let Some(m) = &img.memberships {
            let mut ar = TensorArchive::new();
            ar.push_f64("memberships", &[m.clusters(), m.pixels()], m.0.as_slice().to_vec());
            ar.save(file(root, "mem", img.index, "bin"))?;
        }
        writeln!(manifest, "{} {} {} {}", img.index, cfg.seed, cfg.boundary_blur_sigma, cfg.noise_sigma).unwrap();
    }
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads every image listed in the manifest. Membership files are optional.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let root = root.as_ref();
    let manifest = fs::read_to_string(root.join("manifest.txt"))?;
    let mut images = Vec::new();
    let mut offset = 0;
    for line in manifest.lines() {
        let index: usize = line
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse { offset, message: format!("bad manifest line `{line}`") })?;
        offset += line.len() + 1;

        let gray = pgm::load_pgm(file(root, "img", index, "pgm"))?;
        let (w, h, labels) = pgm::load_labels_pgm(file(root, "lbl", index, "pgm"))?;
        if (w, h) != (gray.width, gray.height) {
            return Err(Error::shape(format!("image {index}: label map is {w}x{h}, image is {}x{}", gray.width, gray.height)));
        }
        let mem_path = file(root, "mem", index, "bin");
        let memberships = if mem_path.exists() {
            let ar = TensorArchive::load(&mem_path)?;
            let entry = ar.get("memberships").ok_or_else(|| Error::Checkpoint {
                tensor: "memberships".into(),
                message: format!("missing from {}", mem_path.display()),
            })?;
            let [c, n] = entry.shape[..] else {
                return Err(Error::Checkpoint { tensor: "memberships".into(), message: "expected a 2-d tensor".into() });
            };
            Some(MembershipMatrix(ClassMatrix::from_vec(c, n, entry.data.to_f64())?))
        } else {
            None
        };
        images.push(LabeledImage { index, width: w, height: h, intensities: gray.pixels, labels, memberships });
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::generate_phantoms;

    fn images(count: usize) -> Vec<LabeledImage> {
        generate_phantoms(&PhantomConfig { size: 16, count, seed: 3, ..PhantomConfig::default() }).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = prepare_dataset(images(10), &FcmConfig::default(), 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (8, 2));
        let mut idx: Vec<usize> = s.train.iter().chain(&s.val).map(|i| i.index).collect();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn full_fraction_leaves_val_empty() {
        let s = split_dataset(images(3), 1.0, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (3, 0));
    }

    #[test]
    fn cached_memberships_are_stochastic() {
        let s = prepare_dataset(images(6), &FcmConfig::default(), 0.5, 2).unwrap();
        for img in s.train.iter().chain(&s.val) {
            assert!(img.memberships.as_ref().unwrap().0.max_column_sum_error() < 1e-12);
        }
    }

    #[test]
    fn fcm_failure_reports_image_index() {
        let mut imgs = images(2);
        imgs[1].intensities[7] = f64::NAN;
        let err = prepare_dataset(imgs, &FcmConfig::default(), 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::Image { index: 1, .. }), "{err:?}");
    }

    #[test]
    fn empty_dataset() {
        assert!(prepare_dataset(Vec::new(), &FcmConfig::default(), 0.5, 0).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let mut imgs = images(3);
        quantize_intensities(&mut imgs);
        cache_memberships(&mut imgs, &FcmConfig::default()).unwrap();
        imgs[2].memberships = None;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &imgs, &PhantomConfig::default()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, imgs);
    }
}
