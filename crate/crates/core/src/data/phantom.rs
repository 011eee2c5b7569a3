//! Synthetic "brain slice" phantoms: nested, smoothly deformed rings with
//! one tissue class per ring, blurred at the boundaries and corrupted by
//! additive Gaussian noise.
//!
//! Labels come from the crisp geometry before blurring, so they depend on
//! the seed alone and never on the blur or noise settings.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fcm::MembershipMatrix;
use crate::seed::{self, stream};

pub const CLASS_NAMES: [&str; 4] = ["BG", "CSF", "GM", "WM"];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub num_classes: usize,
    pub boundary_blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { size: 32, num_classes: 4, boundary_blur_sigma: 1.5, noise_sigma: 0.05, seed: 0, count: 64 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_power_of_two() {
            return Err(Error::config(format!("phantom size must be a power of two >= 16, got {}", self.size)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        for (name, v) in [("boundary_blur_sigma", self.boundary_blur_sigma), ("noise_sigma", self.noise_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// An image with its ground truth and, once computed, its FCM memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f64>,
    pub labels: Vec<usize>,
    pub memberships: Option<MembershipMatrix>,
}

impl LabeledImage {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.pixels();
        if self.intensities.len() != n || self.labels.len() != n {
            return Err(Error::shape(format!("image {}: intensities/labels do not match {}x{}", self.index, self.width, self.height)));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("image {}: label {l} is not below {num_classes}", self.index)));
        }
        if let Some(m) = &self.memberships {
            if m.clusters() != num_classes || m.pixels() != n {
                return Err(Error::shape(format!("image {}: membership map has the wrong shape", self.index)));
            }
        }
        Ok(())
    }
}

/// Class mean intensities: BG/CSF/GM/WM levels for four classes, otherwise
/// evenly spaced from 0.05 to 0.9.
pub fn class_means(num_classes: usize) -> Vec<f64> {
    if num_classes == 4 {
        return vec![0.05, 0.35, 0.65, 0.9];
    }
    let step = 0.85 / (num_classes - 1) as f64;
    (0..num_classes).map(|k| 0.05 + step * k as f64).collect()
}

/// Closed radial profile `r(theta) = r0 (1 + sum a_k cos(k theta + phi_k))`.
struct Ring {
    r0: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Ring {
    fn radius(&self, theta: f64) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|&(k, a, phi)| a * (k * theta + phi).cos()).sum::<f64>())
    }
}

/// Draws crisp labels: the class of a pixel is the number of rings that
/// contain it.
fn draw_labels(size: usize, num_classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let cy = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let outer = rng.random_range(0.38..0.44) * s;
    let rings: Vec<Ring> = (1..num_classes)
        .map(|k| {
            let frac = 1.0 - 0.65 * (k - 1) as f64 / (num_classes - 2).max(1) as f64;
            let harmonics = (2..=4)
                .map(|h| (h as f64, rng.random_range(-0.06..0.06), rng.random_range(0.0..TAU)))
                .collect();
            Ring { r0: outer * frac, harmonics }
        })
        .collect();

    let mut labels = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (r, theta) = (dx.hypot(dy), dy.atan2(dx));
            labels[y * size + x] = rings.iter().filter(|ring| r <= ring.radius(theta)).count();
        }
    }
    labels
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with a kernel truncated at `ceil(3 sigma)` and
/// replicated edges. `sigma = 0` is the identity.
pub fn gaussian_blur(pixels: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return pixels.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] =
                k.iter().enumerate().map(|(i, w)| w * pixels[y * width + clampi(x as i64 + i as i64 - r, width)]).sum();
        }
    }
    let mut out = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] =
                k.iter().enumerate().map(|(i, w)| w * tmp[clampi(y as i64 + i as i64 - r, height) * width + x]).sum();
        }
    }
    out
}

/// Generates one phantom. Deterministic in `(cfg.seed, index)`.
pub fn generate_phantom(cfg: &PhantomConfig, index: usize) -> Result<LabeledImage> {
    cfg.validate()?;
    let (size, c) = (cfg.size, cfg.num_classes);
    let mut attempt = 0u64;
    let labels = loop {
        let mut rng = seed::rng(cfg.seed, &[stream::GEOMETRY, index as u64, attempt]);
        let labels = draw_labels(size, c, &mut rng);
        let mut present = vec![false; c];
        labels.iter().for_each(|&l| present[l] = true);
        if present.iter().all(|&p| p) {
            break labels;
        }
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::config(format!("cannot fit {c} classes into a {size}x{size} phantom")));
        }
    };

    let means = class_means(c);
    let crisp: Vec<f64> = labels.iter().map(|&l| means[l]).collect();
    let mut intensities = gaussian_blur(&crisp, size, size, cfg.boundary_blur_sigma);
    if cfg.noise_sigma > 0.0 {
        let mut rng = seed::rng(cfg.seed, &[stream::NOISE, index as u64]);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        intensities.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    intensities.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(LabeledImage { index, width: size, height: size, intensities, labels, memberships: None })
}

pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_phantom(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcm::{self, FcmConfig};

    fn cfg(blur: f64, noise: f64) -> PhantomConfig {
        PhantomConfig { size: 32, num_classes: 4, boundary_blur_sigma: blur, noise_sigma: noise, seed: 5, count: 3 }
    }

    #[test]
    fn means_for_four_classes() {
        assert_eq!(class_means(4), vec![0.05, 0.35, 0.65, 0.9]);
        let m = class_means(3);
        assert!((m[1] - 0.475).abs() < 1e-12 && m[2] == 0.9);
    }

    #[test]
    fn clean_phantom_is_piecewise_constant() {
        let means = class_means(4);
        for img in generate_phantoms(&cfg(0.0, 0.0)).unwrap() {
            for (v, &l) in img.intensities.iter().zip(&img.labels) {
                assert_eq!(*v, means[l]);
            }
            let r = fcm::run(&img.intensities, &FcmConfig::default()).unwrap();
            let interior = (0..img.pixels()).filter(|&j| r.memberships.get(img.labels[j], j) > 0.99).count();
            assert_eq!(interior, img.pixels());
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_phantoms(&cfg(1.5, 0.05)).unwrap();
        let b = generate_phantoms(&cfg(1.5, 0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_ignore_blur_and_noise() {
        let a = generate_phantoms(&cfg(0.0, 0.0)).unwrap();
        let b = generate_phantoms(&cfg(2.0, 0.1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn every_class_present_and_intensities_in_range() {
        let c = PhantomConfig { count: 20, ..cfg(1.5, 0.1) };
        for img in generate_phantoms(&c).unwrap() {
            for k in 0..4 {
                assert!(img.labels.contains(&k));
            }
            assert!(img.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blur_lowers_mean_max_membership() {
        let sharp = generate_phantom(&cfg(0.0, 0.0), 0).unwrap();
        let soft = generate_phantom(&cfg(1.5, 0.0), 0).unwrap();
        let f = FcmConfig::default();
        let a = fcm::run(&sharp.intensities, &f).unwrap().memberships.mean_max_membership();
        let b = fcm::run(&soft.intensities, &f).unwrap().memberships.mean_max_membership();
        assert!(b < a, "{b} !< {a}");
    }

    #[test]
    fn blur_preserves_constants() {
        let out = gaussian_blur(&[0.3; 20], 5, 4, 1.2);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn invalid_config() {
        assert!(PhantomConfig { size: 24, ..cfg(0.0, 0.0) }.validate().is_err());
        assert!(PhantomConfig { num_classes: 1, ..cfg(0.0, 0.0) }.validate().is_err());
        assert!(PhantomConfig { noise_sigma: -1.0, ..cfg(0.0, 0.0) }.validate().is_err());
    }
}
