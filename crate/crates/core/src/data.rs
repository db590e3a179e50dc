//! Image folder ingestion, 8-bit quantisation, and synthetic domain pairs
//! with known ground-truth mappings.
//!
//! Pixels map to `p / 127.5 - 1` on load and back via round-half-up on
//! save; both directions are exercised by bit-exact tests. Synthetic
//! domains draw each side from its own stream, so the datasets are
//! unpaired by construction and the oracle map is available for
//! evaluation only.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    A,
    B,
}

#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// `[C,H,W]` items in `[-1, 1]`, all sharing one shape.
    pub items: Vec<Array>,
    pub names: Vec<String>,
    pub domain: DomainTag,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    /// Stack items at `indices` into a `[B,C,H,W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Array> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch".to_string()));
        }
        let shape = self.item_shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.items[0].numel());
        for &i in indices {
            data.extend_from_slice(self.items[i].data());
        }
        Array::new(vec![indices.len(), shape[0], shape[1], shape[2]], data)
    }
}

#[derive(Debug)]
pub struct LoadedFolder {
    pub dataset: ImageDataset,
    /// Files that could not be decoded, relative names.
    pub skipped: Vec<String>,
}

fn list_images_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn image_to_array(img: &RgbImage, channels: usize) -> Result<Array> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            // grayscale via plain channel average
            let mut data = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    let avg = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                    data.push(avg / 127.5 - 1.0);
                }
            }
            Array::new(vec![1, h, w], data)
        }
        3 => {
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = p[c] as f64 / 127.5 - 1.0;
                    }
                }
            }
            Array::new(vec![3, h, w], data)
        }
        other => Err(Error::config(format!("unsupported channel count {other} (use 1 or 3)"))),
    }
}

fn decode_and_convert(path: &Path, resize_to: Option<usize>, channels: usize) -> Result<Array> {
    let img = image::open(path)?;
    let mut rgb = img.to_rgb8();
    if let Some(size) = resize_to {
        if rgb.width() as usize != size || rgb.height() as usize != size {
            rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
        }
    }
    image_to_array(&rgb, channels)
}

fn load_folder_inner(
    path: &Path,
    resize_to: Option<usize>,
    channels: usize,
    domain: DomainTag,
) -> Result<LoadedFolder> {
    let files = list_images_sorted(path)?;
    let mut items = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for file in files {
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match decode_and_convert(&file, resize_to, channels) {
            Ok(arr) => {
                items.push(arr);
                names.push(name);
            }
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", file.display());
                skipped.push(file.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            }
        }
    }
    if items.is_empty() {
        return Err(Error::config(format!("no decodable images in {}", path.display())));
    }
    let first = items[0].shape().to_vec();
    if let Some(bad) = items.iter().find(|i| i.shape() != first) {
        return Err(Error::shape(format!(
            "images in {} have mixed sizes: {:?} vs {first:?}",
            path.display(),
            bad.shape()
        )));
    }
    Ok(LoadedFolder { dataset: ImageDataset { items, names, domain }, skipped })
}

/// Decode every readable image under `path`, resize to `size` x `size`
/// (bilinear) and normalise to `[-1, 1]`. Listing order is lexicographic.
pub fn load_folder(path: &Path, size: usize, channels: usize, domain: DomainTag) -> Result<LoadedFolder> {
    if size == 0 {
        return Err(Error::config("image size must be positive".to_string()));
    }
    load_folder_inner(path, Some(size), channels, domain)
}

/// Like [`load_folder`] but keeps native dimensions, requiring every image
/// in the folder to share one size.
pub fn load_folder_native(path: &Path, channels: usize, domain: DomainTag) -> Result<LoadedFolder> {
    load_folder_inner(path, None, channels, domain)
}

/// Round-half-up quantisation of `[-1, 1]` to a byte.
pub fn quantise(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Write one `[C,H,W]` item as a PNG.
pub fn save_image(item: &Array, path: &Path) -> Result<()> {
    let shape = item.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("save_image wants [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    match c {
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([quantise(item.data()[y * w + x])]));
                }
            }
            DynamicImage::ImageLuma8(img).save(path)?;
        }
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        quantise(item.data()[y * w + x]),
                        quantise(item.data()[h * w + y * w + x]),
                        quantise(item.data()[2 * h * w + y * w + x]),
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            DynamicImage::ImageRgb8(img).save(path)?;
        }
        other => return Err(Error::config(format!("cannot save {other}-channel images"))),
    }
    Ok(())
}

/// Write `items` into `dir` as `"{prefix}{index:04}.png"`.
pub fn save_images(items: &[Array], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let path = dir.join(format!("{prefix}{i:04}.png"));
        save_image(item, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// synthetic domains

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Domain B images are negations of independently drawn fields;
    /// oracle `g*(x) = -x`.
    Invert,
    /// Oracle adds 0.5 with clamping to `[-1, 1]`.
    ShiftBright,
    /// Domain B images are 3x3 gradient-magnitude maps of independently
    /// drawn fields; oracle is the same edge filter.
    BlobsToEdges,
}

impl SyntheticKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "invert" => Ok(SyntheticKind::Invert),
            "shift_bright" => Ok(SyntheticKind::ShiftBright),
            "blobs_to_edges" => Ok(SyntheticKind::BlobsToEdges),
            other => Err(Error::config(format!("unknown synthetic kind {other:?}"))),
        }
    }

    /// Ground-truth A-to-B map, used for evaluation only.
    pub fn oracle(&self, x: &Array) -> Array {
        match self {
            SyntheticKind::Invert => x.map(|v| -v),
            SyntheticKind::ShiftBright => x.map(|v| (v + 0.5).clamp(-1.0, 1.0)),
            SyntheticKind::BlobsToEdges => edge_filter(x),
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyntheticKind::Invert => write!(f, "invert"),
            SyntheticKind::ShiftBright => write!(f, "shift_bright"),
            SyntheticKind::BlobsToEdges => write!(f, "blobs_to_edges"),
        }
    }
}

/// Bright Gaussian bumps on a dark background; asymmetric under negation
/// so distribution-level translation is well-posed.
fn blob_field(size: usize, rng: &mut Prng) -> Array {
    let mut data = vec![-0.85; size * size];
    let bumps = rng.uniform_int(2, 4);
    for _ in 0..bumps {
        let cx = rng.uniform(1.0, (size - 1) as f64);
        let cy = rng.uniform(1.0, (size - 1) as f64);
        let sigma = rng.uniform(1.5, 3.5);
        let amp = rng.uniform(0.8, 1.6);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Array::new(vec![1, size, size], data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
        .expect("consistent field shape")
}

/// 3x3 Sobel gradient magnitude, zero-padded, mapped to `[-1, 1]` via
/// `clamp(m, 0, 2) - 1`.
fn edge_filter(x: &Array) -> Array {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Array::zeros(shape);
    let gx: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for dy in 0..3i64 {
                    for dx in 0..3i64 {
                        let yy = y as i64 + dy - 1;
                        let xi = xx as i64 + dx - 1;
                        if yy < 0 || yy >= h as i64 || xi < 0 || xi >= w as i64 {
                            continue;
                        }
                        let v = plane[yy as usize * w + xi as usize];
                        sx += gx[dy as usize][dx as usize] * v;
                        sy += gx[dx as usize][dy as usize] * v;
                    }
                }
                let m = (sx * sx + sy * sy).sqrt();
                out.data_mut()[ci * h * w + y * w + xx] = m.clamp(0.0, 2.0) - 1.0;
            }
        }
    }
    out
}

/// Unpaired synthetic domain pair; A and B sides draw from independent
/// streams of `seed`, so the i-th A image is not the preimage of the i-th
/// B image.
pub fn make_synthetic_domains(
    kind: SyntheticKind,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 images per domain, got {n}")));
    }
    if size < 4 {
        return Err(Error::config(format!("synthetic size {size} too small")));
    }
    let mut rng_a = Prng::derive(seed, &[1]);
    let mut rng_b = Prng::derive(seed, &[2]);
    let items_a: Vec<Array> = (0..n).map(|_| blob_field(size, &mut rng_a)).collect();
    let items_b: Vec<Array> = (0..n)
        .map(|_| {
            let base = blob_field(size, &mut rng_b);
            kind.oracle(&base)
        })
        .collect();
    let names = |prefix: &str| (0..n).map(|i| format!("{prefix}{i:04}")).collect::<Vec<_>>();
    Ok((
        ImageDataset { items: items_a, names: names("a"), domain: DomainTag::A },
        ImageDataset { items: items_b, names: names("b"), domain: DomainTag::B },
    ))
}
