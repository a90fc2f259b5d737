//! Dataset container (`.fsd`), class-split manifests, and the procedural
//! synthetic dataset generator used for desk-scale end-to-end runs.
//!
//! Container layout (all integers little-endian):
//!   magic "FSD1", version u16, class_count u32, image_count u32,
//!   H u16, W u16, C u16, then per image: class_id u32 + C*H*W pixel bytes.

use crate::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug)]
pub enum DataError {
    /// Malformed container or manifest, with the byte offset of the problem.
    Format { offset: u64, message: String },
    InvalidSpec(String),
    InvalidArgument(String),
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Format { offset, message } => write!(f, "format error at byte {offset}: {message}"),
            DataError::InvalidSpec(m) => write!(f, "invalid spec: {m}"),
            DataError::InvalidArgument(m) => write!(f, "{m}"),
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

const MAGIC: &[u8; 4] = b"FSD1";
const VERSION: u16 = 1;

/// In-memory dataset: u8 pixels (dequantized to [0,1] on access) plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_count: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    labels: Vec<u32>,
    pixels: Vec<u8>, // image-major, channel-planar
}

impl Dataset {
    pub fn new(class_count: u32, channels: usize, height: usize, width: usize) -> Self {
        Dataset { class_count, height, width, channels, labels: Vec::new(), pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Appends an image given [0,1] pixel values; quantizes to u8.
    pub fn push_image(&mut self, class_id: u32, pixels: &[f64]) -> DataResult<()> {
        if class_id >= self.class_count {
            return Err(DataError::InvalidArgument(format!(
                "class id {class_id} out of range ({} classes)",
                self.class_count
            )));
        }
        if pixels.len() != self.image_size() {
            return Err(DataError::InvalidArgument(format!(
                "image has {} values, expected {}",
                pixels.len(),
                self.image_size()
            )));
        }
        self.labels.push(class_id);
        self.pixels
            .extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        Ok(())
    }

    /// Dequantized [C,H,W] tensor for one image.
    pub fn image_tensor(&self, index: usize) -> Tensor {
        let sz = self.image_size();
        let data: Vec<f64> = self.pixels[index * sz..(index + 1) * sz]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("consistent size")
    }

    /// Dequantized [N,C,H,W] tensor for a list of images.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let sz = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend(self.pixels[i * sz..(i + 1) * sz].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
            .expect("consistent size")
    }

    /// Image indices per class id.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count as usize];
        for (i, &c) in self.labels.iter().enumerate() {
            groups[c as usize].push(i);
        }
        groups
    }

    pub fn save(&self, path: &Path) -> DataResult<()> {
        let mut buf = Vec::with_capacity(19 + self.labels.len() * (4 + self.image_size()));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.class_count.to_le_bytes());
        buf.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.extend_from_slice(&(self.channels as u16).to_le_bytes());
        let sz = self.image_size();
        for (i, &label) in self.labels.iter().enumerate() {
            buf.extend_from_slice(&label.to_le_bytes());
            buf.extend_from_slice(&self.pixels[i * sz..(i + 1) * sz]);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> DataResult<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> DataResult<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(DataError::Format { offset: 0, message: format!("bad magic {magic:?}") });
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(DataError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let class_count = u32::from_le_bytes(r.take(4, "class_count")?.try_into().unwrap());
        let image_count = u32::from_le_bytes(r.take(4, "image_count")?.try_into().unwrap());
        let height = u16::from_le_bytes(r.take(2, "height")?.try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(r.take(2, "width")?.try_into().unwrap()) as usize;
        let channels = u16::from_le_bytes(r.take(2, "channels")?.try_into().unwrap()) as usize;
        let mut ds = Dataset::new(class_count, channels, height, width);
        let sz = ds.image_size();
        for _ in 0..image_count {
            let off = r.pos as u64;
            let class_id = u32::from_le_bytes(r.take(4, "class_id")?.try_into().unwrap());
            if class_id >= class_count {
                return Err(DataError::Format {
                    offset: off,
                    message: format!("class id {class_id} out of range ({class_count} classes)"),
                });
            }
            let px = r.take(sz, "pixels")?;
            ds.labels.push(class_id);
            ds.pixels.extend_from_slice(px);
        }
        if r.pos != bytes.len() {
            return Err(DataError::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(ds)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> DataResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Disjoint class-id lists for the base / validation / novel splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
}

impl SplitManifest {
    pub fn validate(&self, class_count: u32) -> DataResult<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, list) in [("base", &self.base), ("val", &self.val), ("novel", &self.novel)] {
            for &c in list {
                if c >= class_count {
                    return Err(DataError::InvalidArgument(format!(
                        "[{name}] class {c} out of range ({class_count} classes)"
                    )));
                }
                if !seen.insert(c) {
                    return Err(DataError::InvalidArgument(format!(
                        "class {c} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, list) in [("base", &self.base), ("val", &self.val), ("novel", &self.novel)] {
            s.push_str(&format!("[{name}]\n"));
            for c in list {
                s.push_str(&format!("{c}\n"));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> DataResult<Self> {
        let mut manifest = SplitManifest { base: vec![], val: vec![], novel: vec![] };
        let mut current: Option<&mut Vec<u32>> = None;
        let mut offset = 0u64;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() {
                offset += line.len() as u64 + 1;
                continue;
            }
            match trimmed {
                "[base]" => current = Some(&mut manifest.base),
                "[val]" => current = Some(&mut manifest.val),
                "[novel]" => current = Some(&mut manifest.novel),
                other if other.starts_with('[') => {
                    return Err(DataError::Format {
                        offset,
                        message: format!("unknown section {other}"),
                    });
                }
                other => {
                    let id: u32 = other.parse().map_err(|_| DataError::Format {
                        offset,
                        message: format!("expected class id, got '{other}'"),
                    })?;
                    match current.as_deref_mut() {
                        Some(list) => list.push(id),
                        None => {
                            return Err(DataError::Format {
                                offset,
                                message: "class id before any section header".into(),
                            });
                        }
                    }
                }
            }
            offset += line.len() as u64 + 1;
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> DataResult<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> DataResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let m = Self::from_text(&text)?;
        // Pairwise disjointness holds for every manifest accepted.
        m.validate(u32::MAX)?;
        Ok(m)
    }
}

/// Deterministic shuffle-then-partition of the dataset's classes.
pub fn split_classes(
    dataset: &Dataset,
    base_frac: f64,
    val_frac: f64,
    seed: u64,
) -> DataResult<SplitManifest> {
    if base_frac <= 0.0 || val_frac <= 0.0 || base_frac + val_frac > 1.0 {
        return Err(DataError::InvalidArgument(format!(
            "fractions must be positive and sum to <= 1, got {base_frac} and {val_frac}"
        )));
    }
    let n = dataset.class_count as usize;
    let mut ids: Vec<u32> = (0..dataset.class_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let n_base = (base_frac * n as f64).floor() as usize;
    let n_val = (val_frac * n as f64).floor() as usize;
    if n_base == 0 || n_val == 0 || n_base + n_val >= n {
        return Err(DataError::InvalidArgument(format!(
            "split of {n} classes gives sizes {n_base}/{n_val}/{}; every split needs >= 1 class",
            n - n_base - n_val
        )));
    }
    Ok(SplitManifest {
        base: ids[..n_base].to_vec(),
        val: ids[n_base..n_base + n_val].to_vec(),
        novel: ids[n_base + n_val..].to_vec(),
    })
}

/// Shapes the synthetic generator can render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Ring,
    Bar,
    Cross,
    Checker,
}

pub const ALL_SHAPES: [ShapeKind; 5] = [
    ShapeKind::Disc,
    ShapeKind::Ring,
    ShapeKind::Bar,
    ShapeKind::Cross,
    ShapeKind::Checker,
];

pub fn default_hues() -> Vec<[f64; 3]> {
    vec![
        [0.95, 0.25, 0.25],
        [0.25, 0.95, 0.25],
        [0.25, 0.35, 0.95],
        [0.95, 0.90, 0.25],
        [0.90, 0.30, 0.90],
        [0.25, 0.90, 0.90],
        [0.95, 0.60, 0.20],
        [0.60, 0.40, 0.95],
    ]
}

pub fn default_freqs() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}

/// Generator parameters. Class identity is a distinct (shape, hue, frequency)
/// triple; position/scale/rotation jitter plus additive noise vary per image,
/// so the discriminative structure stays spatially localized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_level: f64,
    pub seed: u64,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default = "all_shapes_vec")]
    pub shapes: Vec<ShapeKind>,
    #[serde(default = "default_hues")]
    pub hues: Vec<[f64; 3]>,
    #[serde(default = "default_freqs")]
    pub freqs: Vec<f64>,
}

fn default_scale_range() -> (f64, f64) {
    (0.28, 0.46)
}

fn all_shapes_vec() -> Vec<ShapeKind> {
    ALL_SHAPES.to_vec()
}

impl SynthSpec {
    /// 32 classes x 200 images x 3x32x32 (~20 MB), the desk-scale default.
    pub fn desk_default() -> Self {
        SynthSpec {
            num_classes: 32,
            images_per_class: 200,
            height: 32,
            width: 32,
            noise_level: 0.1,
            seed: 7,
            scale_range: default_scale_range(),
            shapes: ALL_SHAPES.to_vec(),
            hues: default_hues(),
            freqs: default_freqs(),
        }
    }

    /// A vocabulary disjoint from `desk_default` (different shapes and hues),
    /// for train-on-A / eval-on-B domain-shift runs.
    pub fn shifted_default() -> Self {
        SynthSpec {
            num_classes: 12,
            images_per_class: 100,
            height: 32,
            width: 32,
            noise_level: 0.1,
            seed: 1013,
            scale_range: default_scale_range(),
            shapes: vec![ShapeKind::Bar, ShapeKind::Cross],
            hues: vec![
                [0.85, 0.85, 0.85],
                [0.55, 0.75, 0.35],
                [0.35, 0.55, 0.75],
            ],
            freqs: vec![1.5, 2.5],
        }
    }

    fn class_triples(&self) -> Vec<(ShapeKind, usize, usize)> {
        let mut triples = Vec::new();
        for (si, &s) in self.shapes.iter().enumerate() {
            for hi in 0..self.hues.len() {
                for fi in 0..self.freqs.len() {
                    let _ = si;
                    triples.push((s, hi, fi));
                }
            }
        }
        triples
    }

    pub fn validate(&self) -> DataResult<()> {
        if self.num_classes == 0 || self.images_per_class == 0 {
            return Err(DataError::InvalidSpec("need at least 1 class and 1 image per class".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(DataError::InvalidSpec("images must be at least 8x8".into()));
        }
        let available = self.shapes.len() * self.hues.len() * self.freqs.len();
        if self.num_classes > available {
            return Err(DataError::InvalidSpec(format!(
                "{} classes requested but only {} distinct (shape, hue, frequency) triples exist",
                self.num_classes, available
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(DataError::InvalidSpec("noise_level must be in [0, 0.5]".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1 && self.scale_range.1 <= 1.0) {
            return Err(DataError::InvalidSpec("scale_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        Ok(())
    }
}

/// Renders the dataset for a spec. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> DataResult<Dataset> {
    spec.validate()?;
    let mut triples = spec.class_triples();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5EED]));
    for i in (1..triples.len()).rev() {
        triples.swap(i, rng.random_range(0..=i));
    }
    let mut ds = Dataset::new(spec.num_classes as u32, 3, spec.height, spec.width);
    let mut pixels = vec![0.0f64; 3 * spec.height * spec.width];
    for class in 0..spec.num_classes {
        let (shape, hue_i, freq_i) = triples[class];
        let hue = spec.hues[hue_i];
        let freq = spec.freqs[freq_i];
        for img in 0..spec.images_per_class {
            let img_seed = derive_seed(spec.seed, &[class as u64, img as u64]);
            render_image(
                &mut pixels,
                spec,
                shape,
                hue,
                freq,
                img_seed,
            );
            ds.push_image(class as u32, &pixels)?;
        }
    }
    Ok(ds)
}

fn render_image(out: &mut [f64], spec: &SynthSpec, shape: ShapeKind, hue: [f64; 3], freq: f64, seed: u64) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = spec.scale_range.0 + rng.random::<f64>() * (spec.scale_range.1 - spec.scale_range.0);
    let radius = scale * h.min(w) as f64 / 2.0 * 2.0; // half-extent of the shape in pixels
    // Keep the shape inside the frame with a small margin.
    let margin = radius.min(h.min(w) as f64 / 2.0 - 1.0);
    let cx = margin + rng.random::<f64>() * (w as f64 - 2.0 * margin);
    let cy = margin + rng.random::<f64>() * (h as f64 - 2.0 * margin);
    let theta = (rng.random::<f64>() - 0.5) * std::f64::consts::FRAC_PI_2;
    let (sin_t, cos_t) = theta.sin_cos();
    let background = 0.12;
    for y in 0..h {
        for x in 0..w {
            // Local coordinates in [-1, 1] within the shape's bounding box.
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            let inside = match shape {
                ShapeKind::Disc => u * u + v * v <= 1.0,
                ShapeKind::Ring => {
                    let r2 = u * u + v * v;
                    (0.36..=1.0).contains(&r2)
                }
                ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.34,
                ShapeKind::Cross => {
                    (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
                }
                ShapeKind::Checker => {
                    u.abs() <= 1.0
                        && v.abs() <= 1.0
                        && (((u + 1.0) * freq).floor() as i64 + ((v + 1.0) * freq).floor() as i64) % 2 == 0
                }
            };
            let stripe = match shape {
                // Checker already encodes the frequency in its cells.
                ShapeKind::Checker => 1.0,
                _ => 0.78 + 0.22 * (freq * std::f64::consts::PI * (u + v)).sin(),
            };
            for c in 0..3 {
                let value = if inside { hue[c] * stripe } else { background };
                let noise = (rng.random::<f64>() - 0.5) * 2.0 * spec.noise_level;
                out[(c * h + y) * w + x] = (value + noise).clamp(0.0, 1.0);
            }
        }
    }
}
