//! Image datasets: PGM/PPM directories, the raw `VQ2I` container, a synthetic generator and
//! the deterministic train/validation split.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"VQ2I";

/// Images as normalized tensors `[N, C, H, W]` with values in `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the images at `indices` into one `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices
            .iter()
            .map(|&i| self.images[i].clone().reshape(&[1, self.channels, self.height, self.width]))
            .collect::<Result<_>>()?;
        Tensor::concat_batch(&items)
    }

    pub fn all(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), height: self.height, width: self.width, channels: self.channels }
    }

    pub fn from_pixels(pixels: Vec<Vec<u8>>, labels: Vec<usize>, height: usize, width: usize, channels: usize) -> Result<Self> {
        ensure!(pixels.len() == labels.len(), Format, "{} labels for {} images", labels.len(), pixels.len());
        let images = pixels.iter().map(|p| hwc_to_tensor(p, height, width, channels)).collect::<Result<_>>()?;
        Ok(Self { images, labels, height, width, channels })
    }

    /// Pixels of image `i` as HWC bytes.
    pub fn pixels(&self, i: usize) -> Vec<u8> {
        tensor_to_hwc(&self.images[i], self.height, self.width, self.channels)
    }
}

/// `[0, 255] → [-0.5, 0.5]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 255.0 - 0.5
}

/// Inverse of [`normalize`], clamped to `[0, 255]`.
pub fn denormalize(v: f64) -> u8 {
    ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

fn hwc_to_tensor(p: &[u8], h: usize, w: usize, c: usize) -> Result<Tensor> {
    ensure!(p.len() == h * w * c, Format, "{} bytes for a {h}×{w}×{c} image", p.len());
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = normalize(p[(y * w + x) * c + ch]);
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// CHW (or 1×CHW) tensor to HWC bytes.
pub fn tensor_to_hwc(t: &Tensor, h: usize, w: usize, c: usize) -> Vec<u8> {
    let d = t.data();
    let mut out = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = denormalize(d[(ch * h + y) * w + x]);
            }
        }
    }
    out
}

/// Loads a dataset from a PGM/PPM directory (files sorted by name) or a raw `VQ2I` file.
/// Without a labels file every label is 0.
pub fn ingest(path: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (pixels, h, w, c) = if path.is_dir() { read_pnm_dir(path)? } else { read_raw(path)? };
    let labels = match labels {
        Some(p) => read_labels(p)?,
        None => vec![0; pixels.len()],
    };
    ensure!(
        labels.len() == pixels.len(),
        Format,
        "{} labels for {} images in {}",
        labels.len(),
        pixels.len(),
        path.display()
    );
    Dataset::from_pixels(pixels, labels, h, w, c)
}

type Pixels = (Vec<Vec<u8>>, usize, usize, usize);

fn read_pnm_dir(dir: &Path) -> Result<Pixels> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    for f in &files {
        let img = image::open(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        let (bytes, d) = match img {
            DynamicImage::ImageLuma8(g) => {
                let d = (g.height() as usize, g.width() as usize, 1);
                (g.into_raw(), d)
            }
            DynamicImage::ImageRgb8(g) => {
                let d = (g.height() as usize, g.width() as usize, 3);
                (g.into_raw(), d)
            }
            other => return Err(Error::Format(format!("{}: unsupported pixel type {:?}", f.display(), other.color()))),
        };
        match dims {
            None => dims = Some(d),
            Some(prev) => ensure!(
                prev == d,
                Format,
                "{} is {}×{}×{}, earlier images are {}×{}×{}",
                f.display(),
                d.0,
                d.1,
                d.2,
                prev.0,
                prev.1,
                prev.2
            ),
        }
        out.push(bytes);
    }
    let (h, w, c) = dims.unwrap_or((0, 0, 0));
    Ok((out, h, w, c))
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_raw(path: &Path) -> Result<Pixels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_raw(bytes: &[u8]) -> Result<Pixels> {
    ensure!(bytes.len() >= 20, Format, "raw dataset header truncated ({} bytes)", bytes.len());
    ensure!(&bytes[..4] == RAW_MAGIC, Format, "bad magic {:?}, expected \"VQ2I\"", &bytes[..4]);
    let (n, h, w, c) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    );
    ensure!(
        n == 0 || (h > 0 && w > 0 && (c == 1 || c == 3)),
        Format,
        "invalid image geometry {h}×{w}×{c}"
    );
    let per = h * w * c;
    let expected = n.checked_mul(per).and_then(|t| t.checked_add(20));
    ensure!(
        expected == Some(bytes.len()),
        Format,
        "header declares {n} images of {h}×{w}×{c} but the file holds {} bytes",
        bytes.len()
    );
    let pixels = bytes[20..].chunks(per.max(1)).take(n).map(<[u8]>::to_vec).collect();
    Ok((pixels, h, w, c))
}

pub fn encode_raw(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.len() * ds.height * ds.width * ds.channels);
    out.extend_from_slice(RAW_MAGIC);
    for v in [ds.len(), ds.height, ds.width, ds.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        out.extend(ds.pixels(i));
    }
    out
}

pub fn write_raw(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("{}:{}: bad label `{}`: {e}", path.display(), i + 1, l.trim())))
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in labels {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes one CHW image in `[-0.5, 0.5]` as binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::Dimension(format!("cannot write tensor of shape {s:?} as an image"))),
    };
    let bytes = tensor_to_hwc(t, h, w, c);
    let (subtype, color) = match c {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        _ => return Err(Error::Dimension(format!("{c}-channel images cannot be written as PGM/PPM"))),
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf).with_subtype(subtype).encode(bytes.as_slice(), w as u32, h as u32, color)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One seeded synthetic image of class `class` (patterns cycle through eight families).
pub fn synthetic_image<R: Rng + ?Sized>(class: usize, size: usize, channels: usize, rng: &mut R) -> Vec<u8> {
    let n = size as f64;
    let phase = rng.gen_range(0..size.max(1));
    let period = [4, 8][rng.gen_range(0..2)];
    let flip = rng.gen_bool(0.5);
    let lo = rng.gen_range(0.0..0.25);
    let hi = rng.gen_range(0.75..1.0);
    let cx = rng.gen_range(0.3..0.7) * n;
    let cy = rng.gen_range(0.3..0.7) * n;
    let radius = rng.gen_range(0.15..0.35) * n;
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.6..1.0)).collect();
    let mut out = vec![0u8; size * size * channels];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / (n - 1.0).max(1.0), y as f64 / (n - 1.0).max(1.0));
            let t = match class % 8 {
                0 => (((x + phase) / (period / 2) + y / (period / 2)) % 2) as f64,
                1 => fx,
                2 => fy,
                3 => (fx + fy) / 2.0,
                4 => (((y + phase) / (period / 2)) % 2) as f64,
                5 => (((x + phase) / (period / 2)) % 2) as f64,
                6 => f64::from(((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() < radius),
                _ => f64::from((x as f64 - cx).abs() < n / 10.0 || (y as f64 - cy).abs() < n / 10.0),
            };
            let t = if flip { 1.0 - t } else { t };
            let v = lo + (hi - lo) * t;
            for (ch, tc) in tint.iter().enumerate() {
                out[(y * size + x) * channels + ch] = (v * tc * 255.0).round() as u8;
            }
        }
    }
    out
}

/// `count` images; image `i` has class `i % num_classes`.
pub fn synthetic_dataset(count: usize, num_classes: usize, size: usize, channels: usize, seed: u64) -> Result<Dataset> {
    ensure!(num_classes >= 1, Config, "synthetic data needs at least one class");
    let mut rng = seeded(seed);
    let labels: Vec<usize> = (0..count).map(|i| i % num_classes).collect();
    let pixels = labels.iter().map(|&c| synthetic_image(c, size, channels, &mut rng)).collect();
    Dataset::from_pixels(pixels, labels, size, size, channels)
}

/// Deterministic ~10% validation membership from a hash of the index.
pub fn is_validation_index(i: usize) -> bool {
    let digest = Sha256::digest((i as u64).to_le_bytes());
    u32::from_le_bytes(digest[..4].try_into().unwrap()) % 10 == 0
}

/// `(train, val)` by index hash.
pub fn hash_split(ds: &Dataset) -> (Dataset, Dataset) {
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_validation_index(i));
    (ds.subset(&train), ds.subset(&val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(normalize(0), -0.5);
        assert_eq!(normalize(255), 0.5);
    }

    #[test]
    fn raw_round_trip() {
        let ds = synthetic_dataset(5, 3, 8, 1, 1).unwrap();
        let (pixels, h, w, c) = parse_raw(&encode_raw(&ds)).unwrap();
        assert_eq!((h, w, c), (8, 8, 1));
        let back = Dataset::from_pixels(pixels, ds.labels.clone(), h, w, c).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_raw_file_parses() {
        let mut b = RAW_MAGIC.to_vec();
        for v in [0u32, 32, 32, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_raw(&b).unwrap().0.len(), 0);
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        assert!(matches!(parse_raw(b"VQ2X\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(parse_raw(b"VQ2I"), Err(Error::Format(_))));
        let mut b = RAW_MAGIC.to_vec();
        for v in [2u32, 4, 4, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend(vec![0u8; 31]);
        assert!(matches!(parse_raw(&b), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_is_seeded() {
        assert_eq!(synthetic_dataset(4, 4, 16, 3, 7).unwrap(), synthetic_dataset(4, 4, 16, 3, 7).unwrap());
        assert_ne!(synthetic_dataset(4, 4, 16, 1, 7).unwrap(), synthetic_dataset(4, 4, 16, 1, 8).unwrap());
    }

    #[test]
    fn split_is_roughly_ten_percent() {
        let val = (0..10_000).filter(|&i| is_validation_index(i)).count();
        assert!((800..1200).contains(&val), "{val}");
    }
}
