//! Binary PGM (P5) reading and writing.
//!
//! Samples with maxval above 255 are two bytes, big-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image with samples in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u16 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Raw samples and header fields of a P5 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<RawPgm> {
    let mut cur = Cursor { bytes, pos: 0 };
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(Error::UnsupportedFormat("ASCII PGM (P2); only binary P5 is supported".into())),
        _ => return Err(cur.err("missing P5 magic")),
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if !(1..=65535).contains(&maxval) {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected whitespace after maxval"));
    }
    cur.pos += 1;

    let wide = maxval > 255;
    let n = width.checked_mul(height).ok_or_else(|| cur.err("image too large"))?;
    let need = if wide { 2 * n } else { n };
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated pixel data: need {need} bytes, found {}", payload.len()),
        });
    }
    let samples: Vec<u16> = if wide {
        payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(k) = samples.iter().position(|&s| s as usize > maxval) {
        let offset = cur.pos + if wide { 2 * k } else { k };
        return Err(Error::Parse { offset, message: format!("sample exceeds maxval {maxval}") });
    }
    Ok(RawPgm { width, height, maxval: maxval as u16, samples })
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        samples.iter().for_each(|s| out.extend_from_slice(&s.to_be_bytes()));
    } else {
        out.extend(samples.iter().map(|&s| s as u8));
    }
    out
}

/// Loads a P5 file, mapping samples to [0, 1].
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let raw = parse_pgm(&fs::read(path)?)?;
    let scale = raw.maxval as f64;
    GrayImage::new(raw.width, raw.height, raw.samples.iter().map(|&s| s as f64 / scale).collect())
}

/// Quantizes to the given depth after clamping to [0, 1].
pub fn quantize(pixels: &[f64], depth: BitDepth) -> Vec<u16> {
    let maxval = depth.maxval() as f64;
    pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * maxval).round() as u16).collect()
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let samples = quantize(&image.pixels, depth);
    fs::write(path, encode_pgm(image.width, image.height, depth.maxval(), &samples))?;
    Ok(())
}

/// Stores class ids verbatim as 8-bit samples.
pub fn save_labels_pgm(labels: &[usize], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape(format!("{width}x{height} label map needs {} entries, got {}", width * height, labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::invalid(format!("label {l} does not fit in 8 bits")));
    }
    let samples: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
    fs::write(path, encode_pgm(width, height, 255, &samples))?;
    Ok(())
}

/// Reads class ids stored by [`save_labels_pgm`]. Returns `(width, height, labels)`.
pub fn load_labels_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<usize>)> {
    let raw = parse_pgm(&fs::read(path)?)?;
    Ok((raw.width, raw.height, raw.samples.iter().map(|&s| s as usize).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn eight_bit_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed, &[]);
            let pixels: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.pgm");
            save_pgm(&GrayImage::new(w, h, pixels.clone()).unwrap(), &path, BitDepth::Eight).unwrap();
            let back = load_pgm(&path).unwrap();
            prop_assert_eq!((back.width, back.height), (w, h));
            for (a, b) in pixels.iter().zip(&back.pixels) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }

        #[test]
        fn sixteen_bit_samples_are_lossless(samples in proptest::collection::vec(any::<u16>(), 6)) {
            let raw = parse_pgm(&encode_pgm(3, 2, 65535, &samples)).unwrap();
            prop_assert_eq!(raw.samples, samples);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # made by hand\n2 1\n# depth\n255\n\x00\xff";
        let raw = parse_pgm(bytes).unwrap();
        assert_eq!((raw.width, raw.height, raw.maxval), (2, 1, 255));
        assert_eq!(raw.samples, vec![0, 255]);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let bytes = encode_pgm(4, 4, 255, &[7; 16]);
        for cut in 0..bytes.len() {
            match parse_pgm(&bytes[..cut]) {
                Err(Error::Parse { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        let err = parse_pgm(b"P5\n12 x\n255\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 6, .. }), "{err:?}");
    }

    #[test]
    fn ascii_pgm_is_unsupported() {
        assert!(matches!(parse_pgm(b"P2\n1 1\n255\n0\n"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let labels = vec![0, 1, 2, 3, 3, 2];
        save_labels_pgm(&labels, 3, 2, &path).unwrap();
        assert_eq!(load_labels_pgm(&path).unwrap(), (3, 2, labels));
    }
}
