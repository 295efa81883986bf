//! Dataset containers, MNIST IDX and USPS ingestion, preprocessing and the
//! synthetic domain-shift generator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const USPS_MAGIC: &[u8; 4] = b"USPS";

/// Image collection with pixels in `[0, 1]`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    /// Source name followed by every preprocessing step applied.
    pub provenance: Vec<String>,
}

/// Images with no label storage at all; the only kind of data the
/// reconstruction pipeline accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub images: Tensor,
    pub provenance: Vec<String>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, classes: usize, name: &str) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Dimension(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::Validation(format!(
                    "label {bad} out of range for {classes} classes in `{name}`"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            provenance: vec![name.to_string()],
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &str {
        &self.provenance[0]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Argument(format!("dataset `{}` has no labels", self.name())))
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            images: self.images.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut d = self.subset(&idx);
        if n < self.len() {
            d.provenance.push(format!("take({n})"));
        }
        d
    }

    /// Random split into `(train, held_out)` with `held_fraction` held out.
    pub fn split(&self, held_fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let held = ((self.len() as f64) * held_fraction).round() as usize;
        let (a, b) = idx.split_at(held.min(self.len()));
        let mut train = self.subset(b);
        let mut val = self.subset(a);
        train.provenance.push(format!("split(train {:.2})", 1.0 - held_fraction));
        val.provenance.push(format!("split(held {held_fraction:.2})"));
        (train, val)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {at}")))
}

fn le_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {at}")))
}

/// Decodes an IDX image file (`u8` pixels, 3 dims) into `[N, 1, H, W]`
/// scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: expected magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let h = be_u32(bytes, 8, "idx images")? as usize;
    let w = be_u32(bytes, 12, "idx images")? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Length(format!(
            "idx images: header declares {n}x{h}x{w} = {} pixels, file holds {}",
            n * h * w,
            body.len()
        )));
    }
    Tensor::new(vec![n, 1, h, w], body.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: expected magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Length(format!(
            "idx labels: header declares {n} labels, file holds {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Re-encodes `[N, 1, H, W]` pixels in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    images.expect_rank(4, "idx encoding")?;
    let s = images.shape();
    if s[1] != 1 {
        return Err(Error::Dimension(format!("idx stores single-channel images, got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Loads an MNIST-style IDX image file and, optionally, its label file.
pub fn load_idx(images: &Path, labels: Option<&Path>, classes: usize) -> Result<Dataset> {
    let imgs = parse_idx_images(&read_file(images)?)?;
    let labels = labels.map(|p| parse_idx_labels(&read_file(p)?)).transpose()?;
    let name = images.file_name().and_then(|s| s.to_str()).unwrap_or("idx");
    Dataset::new(imgs, labels, classes, &format!("idx:{name}"))
}

/// Decodes the flat USPS container: `"USPS"`, then little-endian `u32`
/// count, rows and cols, then `f32` pixels per image, then one label byte
/// per image.
pub fn parse_usps(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.len() < 4 || &bytes[..4] != USPS_MAGIC {
        let seen = &bytes[..bytes.len().min(4)];
        return Err(Error::Format(format!("usps: expected magic \"USPS\", found {seen:?}")));
    }
    let n = le_u32(bytes, 4, "usps")? as usize;
    let h = le_u32(bytes, 8, "usps")? as usize;
    let w = le_u32(bytes, 12, "usps")? as usize;
    let pix = h * w;
    let expected = 16 + n * pix * 4 + n;
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "usps: header declares {n} records of {h}x{w}, expecting {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * pix);
    for record in 0..n {
        let start = 16 + record * pix * 4;
        for chunk in bytes[start..start + pix * 4].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!(
                    "usps: record {record} has pixel value {v} outside [0, 1]"
                )));
            }
            data.push(f64::from(v));
        }
    }
    let labels = bytes[16 + n * pix * 4..].iter().map(|&b| usize::from(b)).collect();
    Ok((Tensor::new(vec![n.max(1), 1, h, w], data)?, labels))
}

pub fn encode_usps(images: &Tensor, labels: &[usize]) -> Result<Vec<u8>> {
    images.expect_rank(4, "usps encoding")?;
    let s = images.shape();
    if s[1] != 1 || labels.len() != s[0] {
        return Err(Error::Dimension(format!(
            "usps stores single-channel labeled images, got {s:?} with {} labels",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len() * 4 + labels.len());
    out.extend_from_slice(USPS_MAGIC);
    for v in [s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in images.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn load_usps(path: &Path, classes: usize) -> Result<Dataset> {
    let (imgs, labels) = parse_usps(&read_file(path)?)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("usps");
    Dataset::new(imgs, Some(labels), classes, &format!("usps:{name}"))
}

/// Intensity handling after rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Clamp into `[0, 1]`.
    UnitRange,
    None,
}

/// Bilinear resampling of one `[h, w]` plane with half-pixel centres and
/// edge clamping.
fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, oh);
    let cols = axis(w, ow);
    for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out[r * ow + c] = (1.0 - fy) * top + fy * bottom;
        }
    }
}

/// Rescales every image to `size = (H, W)` bilinearly and applies the
/// intensity mode.
pub fn preprocess(ds: &Dataset, size: (usize, usize), mode: Normalize) -> Dataset {
    let [c, h, w] = ds.image_shape();
    let (oh, ow) = size;
    let mut out = ds.clone();
    if (h, w) != (oh, ow) {
        let n = ds.len();
        let mut data = vec![0.0; n * c * oh * ow];
        for (src, dst) in ds.images.data().chunks(h * w).zip(data.chunks_mut(oh * ow)) {
            resize_plane(src, h, w, oh, ow, dst);
        }
        out.images = Tensor::new(vec![n, c, oh, ow], data).expect("resized shape is consistent");
        out.provenance.push(format!("bilinear {h}x{w}->{oh}x{ow}"));
    }
    if mode == Normalize::UnitRange {
        if out.images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            out.images = out.images.map(|x| x.clamp(0.0, 1.0));
        }
        if out.provenance.last().map(String::as_str) != Some("unit-range") {
            out.provenance.push("unit-range".into());
        }
    }
    out
}

/// Domain shift applied to rendered glyphs to form the target domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shift {
    Identity,
    /// `x ↦ 1 − x`.
    Invert,
    /// Fixed rotation in degrees.
    Rotate(f64),
    /// `x ↦ v + (1 − v)·x`, lifting the background to `v`.
    BackgroundOffset(f64),
}

impl Shift {
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        match *self {
            Shift::Identity => {}
            Shift::Invert => out.images = ds.images.map(|x| 1.0 - x),
            Shift::Rotate(deg) => {
                let params = crate::noise::AffineParams::rotation(deg);
                let imgs = (0..ds.len())
                    .map(|i| crate::noise::apply_affine(&ds.images.sample(i), &params))
                    .collect::<Result<Vec<_>>>()?;
                out.images = Tensor::stack(&imgs)?;
            }
            Shift::BackgroundOffset(v) => out.images = ds.images.map(|x| v + (1.0 - v) * x),
        }
        out.provenance.push(format!("shift:{self:?}"));
        Ok(out)
    }
}

impl std::str::FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse().map_err(|_| Error::Config(format!("bad shift argument `{a}` in `{s}`")))
            })
        };
        match kind {
            "identity" => Ok(Shift::Identity),
            "invert" => Ok(Shift::Invert),
            "rotate" => Ok(Shift::Rotate(num(30.0)?)),
            "offset" => Ok(Shift::BackgroundOffset(num(0.4)?)),
            _ => Err(Error::Config(format!(
                "unknown shift `{s}` (expected identity, invert, rotate[:deg] or offset[:v])"
            ))),
        }
    }
}

/// Parameters of the synthetic two-domain task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub shift: Shift,
    /// Render the target from the same glyph draws as the source.
    pub paired: bool,
}

impl SyntheticSpec {
    pub fn new(classes: usize, shift: Shift) -> Self {
        SyntheticSpec {
            classes,
            size: 28,
            shift,
            paired: false,
        }
    }
}

/// Glyph outlines as stroke segments in a unit box centred on the origin;
/// the ring is handled separately.
fn glyph_segments(class: usize) -> Vec<[(f64, f64); 2]> {
    let s = |a: (f64, f64), b: (f64, f64)| [a, b];
    match class {
        0 => vec![],
        1 => vec![s((0.0, -1.0), (0.0, 1.0)), s((-1.0, 0.0), (1.0, 0.0))],
        2 => vec![s((-1.0, -1.0), (1.0, 1.0)), s((-1.0, 1.0), (1.0, -1.0))],
        3 => vec![
            s((-0.8, -0.8), (0.8, -0.8)),
            s((0.8, -0.8), (0.8, 0.8)),
            s((0.8, 0.8), (-0.8, 0.8)),
            s((-0.8, 0.8), (-0.8, -0.8)),
        ],
        4 => vec![s((0.0, -1.0), (0.9, 0.8)), s((0.9, 0.8), (-0.9, 0.8)), s((-0.9, 0.8), (0.0, -1.0))],
        5 => vec![s((-1.0, -1.0), (1.0, -1.0)), s((0.0, -1.0), (0.0, 1.0))],
        6 => vec![s((-0.6, -1.0), (-0.6, 1.0)), s((-0.6, 1.0), (0.8, 1.0))],
        7 => vec![s((-0.9, -0.3), (0.9, -0.3)), s((-0.9, 0.4), (0.9, 0.4))],
        8 => vec![s((-0.4, -1.0), (-0.4, 1.0)), s((0.4, -1.0), (0.4, 1.0))],
        _ => vec![s((-1.0, 1.0), (0.0, -1.0)), s((0.0, -1.0), (1.0, 1.0))],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one anti-aliased glyph of `class` with random placement, size,
/// stroke width and slant.
fn render_glyph(class: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let n = size as f64;
    let cx = (n - 1.0) / 2.0 + rng.uniform(-0.1, 0.1) * n;
    let cy = (n - 1.0) / 2.0 + rng.uniform(-0.1, 0.1) * n;
    let radius = rng.uniform(0.25, 0.36) * n;
    let stroke = rng.uniform(0.045, 0.08) * n;
    let (sin, cos) = rng.uniform(-0.3, 0.3).sin_cos();
    let segments = glyph_segments(class);
    let ring = rng.uniform(0.75, 1.0);
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f64 - cx) / radius, (r as f64 - cy) / radius);
            let (u, v) = (cos * x + sin * y, -sin * x + cos * y);
            let d = if segments.is_empty() {
                ((u * u + v * v).sqrt() - ring).abs()
            } else {
                segments
                    .iter()
                    .map(|[a, b]| segment_distance((u, v), *a, *b))
                    .fold(f64::INFINITY, f64::min)
            } * radius;
            img[r * size + c] = (stroke - d + 0.5).clamp(0.0, 1.0);
        }
    }
    img
}

fn render_set(rng: &mut Rng, n: usize, spec: &SyntheticSpec, name: &str) -> Result<Dataset> {
    let m = spec.classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % m).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * spec.size * spec.size);
    for &l in &labels {
        data.extend(render_glyph(l, spec.size, rng));
    }
    let images = Tensor::new(vec![n, 1, spec.size, spec.size], data)?;
    Dataset::new(images, Some(labels), m, name)
}

/// Source and target datasets of `n` glyph images each, balanced over
/// classes. The target is the source distribution passed through
/// `spec.shift`; its labels are for evaluation only.
pub fn make_synthetic_shift(rng: &mut Rng, n: usize, spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.classes > 10 {
        return Err(Error::Argument(format!("synthetic task supports 2..=10 classes, got {}", spec.classes)));
    }
    if n == 0 || !n.is_multiple_of(spec.classes) {
        return Err(Error::Argument(format!(
            "{n} samples cannot be split evenly over {} classes",
            spec.classes
        )));
    }
    let source = render_set(&mut rng.fork(0), n, spec, "synthetic")?;
    let target_base = if spec.paired {
        source.clone()
    } else {
        render_set(&mut rng.fork(1), n, spec, "synthetic")?
    };
    let mut target = spec.shift.apply(&target_base)?;
    target.provenance[0] = "synthetic-target".into();
    Ok((source, target))
}
