//! Dataset ingestion, PNG grid emission, and checkpoint serialization.
//!
//! Decoders are bit-exact against the published byte layouts (MNIST idx,
//! CIFAR-10 binary) and reject malformed input with positioned diagnostics.
//! Gzip-compressed inputs are handled transparently. Image directories load
//! 8-bit PNG files, optionally through a manifest listing paths and labels.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

/// Maps one 8-bit pixel into the tanh range: `v / 127.5 - 1`.
pub fn preprocess<S: Scalar>(v: u8) -> S {
    S::from_f64(v as f64 / 127.5 - 1.0)
}

/// Maps a tanh-range value back to 8 bits: `round((x + 1) * 127.5)`,
/// clamped. Inverse of [`preprocess`] on the whole 8-bit lattice.
pub fn postprocess<S: Scalar>(x: S) -> u8 {
    let v = (x.to_f64() + 1.0) * 127.5;
    v.round().clamp(0.0, 255.0) as u8
}

/// Declared pixel range of a dataset's tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// Tanh range [-1, 1], the training representation.
    Unit,
}

/// An in-memory image corpus, preprocessed to the tanh range.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    /// `[n, c, h, w]` in [-1, 1].
    pub images: Tensor<S>,
    pub labels: Option<Vec<u8>>,
    /// Where the data came from, for logs and config snapshots.
    pub source: String,
    pub range: PixelRange,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Keeps only the first `n` examples.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n > self.len() {
            return Err(Error::data(format!(
                "cannot take {n} examples from {} ({})",
                self.len(),
                self.source
            )));
        }
        let shape = self.images.shape().to_vec();
        let per = shape[1..].iter().product::<usize>();
        let data = self.images.data()[..n * per].to_vec();
        self.images = Tensor::from_vec(&[n, shape[1], shape[2], shape[3]], data)?;
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
        Ok(())
    }

    /// Copies out one image as `[1, c, h, w]`.
    pub fn image(&self, i: usize) -> Tensor<S> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        Tensor::from_vec(&[1, s[1], s[2], s[3]], self.images.data()[i * per..(i + 1) * per].to_vec())
            .expect("per-image slice")
    }
}

/// Loader options, applied in order: decode, min-resize + center-crop,
/// pad, truncate.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Min-resize so the short side equals this, then center-crop square.
    pub crop: Option<usize>,
    /// Symmetric zero-pad (background -1) up to this square extent.
    pub pad_to: Option<usize>,
    /// Keep only the first `n` examples after decoding.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    MnistIdx,
    Cifar10Binary,
    ImageDir,
}

impl DatasetKind {
    pub fn from_str(s: &str) -> Option<DatasetKind> {
        Some(match s {
            "mnist-idx" => DatasetKind::MnistIdx,
            "cifar10-binary" => DatasetKind::Cifar10Binary,
            "image-dir" => DatasetKind::ImageDir,
            _ => return None,
        })
    }
}

/// Loads a dataset by kind. For `MnistIdx`, `path` is the images file and
/// the labels file is found by the standard naming convention. For
/// `Cifar10Binary`, `path` is one `.bin` file or a directory of
/// `data_batch_*.bin`. For `ImageDir`, `path` is a directory of PNG files
/// or a manifest (one image path per line, optional label column).
pub fn load_dataset<S: Scalar>(
    kind: DatasetKind,
    path: &Path,
    opts: &LoadOptions,
) -> Result<Dataset<S>> {
    let mut ds = match kind {
        DatasetKind::MnistIdx => {
            let labels = mnist_labels_path(path)?;
            load_mnist(path, &labels, opts)?
        }
        DatasetKind::Cifar10Binary => load_cifar10(path, opts)?,
        DatasetKind::ImageDir => load_image_dir(path, opts)?,
    };
    if let Some(limit) = opts.limit {
        ds.truncate(limit.min(ds.len()))?;
    }
    Ok(ds)
}

fn mnist_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::data(format!("bad MNIST path {}", images.display())))?;
    if !name.contains("images-idx3") {
        return Err(Error::data(format!(
            "MNIST images file should be named *images-idx3*, got {name}"
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

/// Reads a file, decompressing transparently when it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize, what: &str, path: &Path) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::data(format!(
            "{}: truncated at byte {off} reading {what}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

/// MNIST idx decoder: big-endian magic 0x803 (images) / 0x801 (labels),
/// counts, then raw bytes.
pub fn load_mnist<S: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    opts: &LoadOptions,
) -> Result<Dataset<S>> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, "magic", images_path)?;
    if magic != 0x0000_0803 {
        return Err(Error::data(format!(
            "{}: bad idx image magic {magic:#010x} at byte 0, expected 0x00000803",
            images_path.display()
        )));
    }
    let n = be_u32(&img, 4, "count", images_path)? as usize;
    let h = be_u32(&img, 8, "rows", images_path)? as usize;
    let w = be_u32(&img, 12, "cols", images_path)? as usize;
    let want = 16 + n * h * w;
    if img.len() != want {
        return Err(Error::data(format!(
            "{}: payload is {} bytes, header implies {want}",
            images_path.display(),
            img.len()
        )));
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, "magic", labels_path)?;
    if magic != 0x0000_0801 {
        return Err(Error::data(format!(
            "{}: bad idx label magic {magic:#010x} at byte 0, expected 0x00000801",
            labels_path.display()
        )));
    }
    let ln = be_u32(&lab, 4, "count", labels_path)? as usize;
    if ln != n || lab.len() != 8 + n {
        return Err(Error::data(format!(
            "{}: {ln} labels for {n} images",
            labels_path.display()
        )));
    }

    let mut planes: Vec<GrayImage8> = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * h * w;
        planes.push(GrayImage8 {
            w,
            h,
            channels: vec![img[start..start + h * w].to_vec()],
        });
    }
    finish_dataset(
        planes,
        Some(lab[8..].to_vec()),
        images_path.display().to_string(),
        opts,
    )
}

/// CIFAR-10 binary decoder: 3073-byte records, 1 label byte + 3×1024
/// channel planes.
pub fn load_cifar10<S: Scalar>(path: &Path, opts: &LoadOptions) -> Result<Dataset<S>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.contains(".bin"))
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::data(format!(
                "{}: no data_batch_*.bin files",
                path.display()
            )));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };

    const REC: usize = 3073;
    let mut planes = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = read_maybe_gz(file)?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(Error::data(format!(
                "{}: {} bytes is not a whole number of 3073-byte records",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(REC) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::data(format!(
                    "{}: label {label} out of range at record {}",
                    file.display(),
                    labels.len()
                )));
            }
            labels.push(label);
            planes.push(GrayImage8 {
                w: 32,
                h: 32,
                channels: vec![
                    rec[1..1025].to_vec(),
                    rec[1025..2049].to_vec(),
                    rec[2049..3073].to_vec(),
                ],
            });
        }
    }
    finish_dataset(planes, Some(labels), path.display().to_string(), opts)
}

/// 8-bit image as channel planes; 1 (gray) or 3 (rgb).
struct GrayImage8 {
    w: usize,
    h: usize,
    channels: Vec<Vec<u8>>,
}

/// Loads PNGs from a directory (sorted by file name) or from a manifest
/// file: one path per line relative to the manifest, with an optional
/// whitespace-separated numeric label.
pub fn load_image_dir<S: Scalar>(path: &Path, opts: &LoadOptions) -> Result<Dataset<S>> {
    let (files, labels): (Vec<PathBuf>, Option<Vec<u8>>) = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
            })
            .collect();
        v.sort();
        (v, None)
    } else {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut files = Vec::new();
        let mut labels = Vec::new();
        let mut any_label = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.rsplitn(2, char::is_whitespace);
            let tail = parts.next().unwrap();
            match (parts.next(), tail.parse::<u8>()) {
                (Some(head), Ok(label)) => {
                    files.push(base.join(head.trim()));
                    labels.push(label);
                    any_label = true;
                }
                _ => {
                    files.push(base.join(line));
                    labels.push(0);
                }
            }
            let _ = lineno;
        }
        (files, if any_label { Some(labels) } else { None })
    };

    if files.is_empty() {
        return Err(Error::data(format!(
            "{}: no images to load",
            path.display()
        )));
    }

    let mut planes = Vec::with_capacity(files.len());
    for file in &files {
        planes.push(decode_png(file)?);
    }
    let want = planes[0].channels.len();
    for (i, p) in planes.iter().enumerate() {
        if p.channels.len() != want {
            return Err(Error::data(format!(
                "{}: image {i} has {} channels, first image has {want}",
                path.display(),
                p.channels.len()
            )));
        }
    }
    finish_dataset(planes, labels, path.display().to_string(), opts)
}

fn decode_png(path: &Path) -> Result<GrayImage8> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(GrayImage8 {
            w,
            h,
            channels: vec![g.into_raw()],
        }),
        other => {
            let rgb = other.to_rgb8();
            let raw = rgb.into_raw();
            let mut channels = vec![Vec::with_capacity(w * h); 3];
            for px in raw.chunks_exact(3) {
                channels[0].push(px[0]);
                channels[1].push(px[1]);
                channels[2].push(px[2]);
            }
            Ok(GrayImage8 { w, h, channels })
        }
    }
}

/// Applies crop/pad options and packs planes into the `[n,c,h,w]` tensor.
fn finish_dataset<S: Scalar>(
    mut planes: Vec<GrayImage8>,
    labels: Option<Vec<u8>>,
    source: String,
    opts: &LoadOptions,
) -> Result<Dataset<S>> {
    if let Some(side) = opts.crop {
        for p in &mut planes {
            *p = min_resize_center_crop(p, side)?;
        }
    }
    if let Some(side) = opts.pad_to {
        for p in &mut planes {
            *p = pad_to(p, side)?;
        }
    }

    let (w, h, c) = (planes[0].w, planes[0].h, planes[0].channels.len());
    let n = planes.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for (i, p) in planes.iter().enumerate() {
        if p.w != w || p.h != h {
            return Err(Error::data(format!(
                "{source}: image {i} is {}x{}, first image is {w}x{h} (sizes must agree; use crop)",
                p.w, p.h
            )));
        }
        for ch in &p.channels {
            data.extend(ch.iter().map(|&v| preprocess::<S>(v)));
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        source,
        range: PixelRange::Unit,
    })
}

/// Min-resize so the short side equals `side` (bilinear, pixel-center
/// aligned), then center-crop to `side`x`side`. Crop offsets are
/// `floor((dim - side) / 2)`.
fn min_resize_center_crop(img: &GrayImage8, side: usize) -> Result<GrayImage8> {
    if side == 0 {
        return Err(Error::config("crop size must be positive"));
    }
    let short = img.w.min(img.h);
    let scaled = if short == side {
        GrayImage8 {
            w: img.w,
            h: img.h,
            channels: img.channels.clone(),
        }
    } else {
        let scale = side as f64 / short as f64;
        let nw = ((img.w as f64 * scale).round() as usize).max(side);
        let nh = ((img.h as f64 * scale).round() as usize).max(side);
        resize_bilinear(img, nw, nh)
    };
    let x0 = (scaled.w - side) / 2;
    let y0 = (scaled.h - side) / 2;
    let mut channels = Vec::with_capacity(scaled.channels.len());
    for ch in &scaled.channels {
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            let row = (y0 + y) * scaled.w + x0;
            out.extend_from_slice(&ch[row..row + side]);
        }
        channels.push(out);
    }
    Ok(GrayImage8 {
        w: side,
        h: side,
        channels,
    })
}

fn resize_bilinear(img: &GrayImage8, nw: usize, nh: usize) -> GrayImage8 {
    let sx = img.w as f64 / nw as f64;
    let sy = img.h as f64 / nh as f64;
    let mut channels = Vec::with_capacity(img.channels.len());
    for ch in &img.channels {
        let mut out = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(img.h - 1);
            let wy = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(img.w - 1);
                let wx = fx - x0 as f64;
                let v = ch[y0 * img.w + x0] as f64 * (1.0 - wy) * (1.0 - wx)
                    + ch[y0 * img.w + x1] as f64 * (1.0 - wy) * wx
                    + ch[y1 * img.w + x0] as f64 * wy * (1.0 - wx)
                    + ch[y1 * img.w + x1] as f64 * wy * wx;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        channels.push(out);
    }
    GrayImage8 {
        w: nw,
        h: nh,
        channels,
    }
}

/// Pads symmetrically with black (which preprocesses to -1) up to
/// `side`x`side`; extra odd pixel goes to the bottom/right.
fn pad_to(img: &GrayImage8, side: usize) -> Result<GrayImage8> {
    if img.w > side || img.h > side {
        return Err(Error::data(format!(
            "cannot pad {}x{} to {side}x{side}",
            img.w, img.h
        )));
    }
    let left = (side - img.w) / 2;
    let top = (side - img.h) / 2;
    let mut channels = Vec::with_capacity(img.channels.len());
    for ch in &img.channels {
        let mut out = vec![0u8; side * side];
        for y in 0..img.h {
            let dst = (top + y) * side + left;
            out[dst..dst + img.w].copy_from_slice(&ch[y * img.w..(y + 1) * img.w]);
        }
        channels.push(out);
    }
    Ok(GrayImage8 {
        w: side,
        h: side,
        channels,
    })
}

/// Gray level of the separator lines between grid tiles.
pub const GRID_SEPARATOR: u8 = 128;
/// Separator width in pixels.
pub const GRID_GAP: usize = 2;

/// Tiles `[n,c,h,w]` images (tanh range) row-major into a PNG with 2px
/// mid-gray separators. `c` must be 1 (gray) or 3 (rgb).
pub fn save_grid<S: Scalar>(images: &Tensor<S>, path: &Path, columns: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("grid expects [n,c,h,w], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if n == 0 || columns == 0 {
        return Err(Error::config("grid needs at least one image and one column"));
    }
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("grid supports 1 or 3 channels, got {c}")));
    }
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let out_w = cols * w + (cols - 1) * GRID_GAP;
    let out_h = rows * h + (rows - 1) * GRID_GAP;
    let mut canvas = vec![GRID_SEPARATOR; out_w * out_h * c];
    let data = images.data();
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let oy = gy * (h + GRID_GAP);
        let ox = gx * (w + GRID_GAP);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = postprocess(data[((i * c + ch) * h + y) * w + x]);
                    canvas[((oy + y) * out_w + ox + x) * c + ch] = v;
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let color = if c == 1 {
        image::ColorType::L8
    } else {
        image::ColorType::Rgb8
    };
    image::save_buffer(path, &canvas, out_w as u32, out_h as u32, color)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Reads a grid PNG back as `[1,c,h,w]` u8 values (for tests and audits).
pub fn load_png_u8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = decode_png(path)?;
    let c = img.channels.len();
    let mut data = Vec::with_capacity(c * img.w * img.h);
    for ch in &img.channels {
        data.extend_from_slice(ch);
    }
    Ok((c, img.h, img.w, data))
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Byte layout (all integers little-endian):
//
//   offset  size        field
//   0       8           magic "DCGANCKP"
//   8       4           version (u32) = 1
//   12      4           meta length M (u32)
//   16      M           meta: utf-8 "key=value" lines
//   ..      4           spec count (u32)
//   per spec:
//           4           text length (u32)
//           len         spec text (utf-8)
//   ..      4           tensor count (u32)
//   per tensor:
//           4           name length (u32)
//           len         name (utf-8)
//           1           dtype tag (0 = f32, 1 = f64)
//           1           rank (u8)
//           8 * rank    dims (u64 each)
//           prod * size payload, scalars little-endian
//           8           FNV-1a 64 checksum of the payload bytes
//
// The container stores insertion order, so save -> load -> save is
// byte-identical.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCGANCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a 64-bit hash, the per-tensor payload checksum.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A checkpoint: ordered metadata, network spec texts, and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub meta: Vec<(String, String)>,
    pub specs: Vec<String>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for Checkpoint<S> {
    fn default() -> Self {
        Checkpoint {
            meta: Vec::new(),
            specs: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        push_str(&mut out, &meta);
        out.extend_from_slice(&(self.specs.len() as u32).to_le_bytes());
        for spec in &self.specs {
            push_str(&mut out, spec);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            push_str(&mut out, name);
            out.push(S::DTYPE.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let start = out.len();
            for &v in t.data() {
                v.write_le(&mut out);
            }
            let sum = fnv1a(&out[start..]);
            out.extend_from_slice(&sum.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint<S>> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "checkpoint version {version} unsupported (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let meta_text = r.string("meta")?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        let n_specs = r.u32("spec count")? as usize;
        let mut specs = Vec::with_capacity(n_specs);
        for _ in 0..n_specs {
            specs.push(r.string("spec text")?);
        }
        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| Error::checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
            if dtype != S::DTYPE {
                return Err(Error::checkpoint(format!(
                    "{name}: stored as {dtype:?}, loading as {:?}",
                    S::DTYPE
                )));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * S::DTYPE.size(), "tensor payload")?;
            let stored = u64::from_le_bytes(
                r.take(8, "checksum")?.try_into().unwrap(),
            );
            let computed = fnv1a(payload);
            if stored != computed {
                return Err(Error::checkpoint(format!(
                    "tensor {name}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})"
                )));
            }
            let data: Vec<S> = payload
                .chunks_exact(S::DTYPE.size())
                .map(S::read_le)
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint {
            meta,
            specs,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<S>> {
        let bytes = fs::read(path)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::checkpoint(format!("{what}: invalid utf-8")))
    }
}

/// Creates `root/<timestamp>-<name>` (UTC seconds since the epoch), unique
/// by suffixing when the second collides.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::create_dir_all(root)?;
    let mut candidate = root.join(format!("{secs}-{name}"));
    let mut bump = 0;
    while candidate.exists() {
        bump += 1;
        candidate = root.join(format!("{secs}-{name}-{bump}"));
    }
    fs::create_dir_all(&candidate)?;
    Ok(candidate)
}
