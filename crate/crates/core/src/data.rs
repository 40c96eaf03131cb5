//! Labeled datasets (synthetic blobs and glyphs, IDX files) and the
//! augmentation family used by the manifold condition.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use dsv_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::Container;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"DSVD";

/// Samples stored as one `[n, ...feature_shape]` tensor.
///
/// A 3-axis feature shape (`[channels, h, w]`) marks image data, whose values
/// lie in `[0, 1]`; a 1-axis shape marks points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::Dataset(format!("features must be [n, d] or [n, c, h, w], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{classes}")));
        }
        if shape.len() == 4 && features.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("pixel values outside [0, 1]".into()));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    /// Builds a dataset from individual samples of equal shape.
    pub fn from_samples(samples: &[Tensor], labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("no samples".into()));
        }
        Dataset::new(Tensor::stack(samples)?, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.feature_shape().len() == 3
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        Ok(self.features.slice_outer(i)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices.iter().map(|&i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::from_samples(&samples, labels, self.classes)
    }

    /// Batch tensor of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let samples = indices.iter().map(|&i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&samples)?)
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Labels mapped to `±1` (class 0 → +1) for the binary SVM view.
    pub fn signed_labels(&self) -> Result<Vec<f64>> {
        if self.classes != 2 {
            return Err(Error::Dataset(format!("binary view needs 2 classes, dataset has {}", self.classes)));
        }
        Ok(self.labels.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect())
    }

    /// Rows as flat feature vectors.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let d: usize = self.feature_shape().iter().product();
        self.features.data().chunks(d).map(|c| c.to_vec()).collect()
    }

    /// Order-independent-of-platform digest of the contents (FNV-1a over the
    /// little-endian bytes).
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for &v in self.features.data() {
            eat(&v.to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        h
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(DATASET_MAGIC, format!("classes={}", self.classes));
        c.push("x", self.features.clone());
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        c.push("y", Tensor::vector(labels).expect("finite labels"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let classes = c
            .header
            .strip_prefix("classes=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Malformed(format!("dataset header {:?}", c.header)))?;
        let labels = c
            .get("y")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Malformed(format!("label {v}")))
                }
            })
            .collect::<Result<_>>()?;
        Dataset::new(c.get("x")?.clone(), labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_container(&Container::load(path, DATASET_MAGIC)?)
    }
}

/// `C` isotropic Gaussian clusters (σ = 1) whose centres sit evenly on a
/// circle of radius `separation`. Samples are grouped by class.
pub fn gen_blobs2d(classes: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 {
        return Err(Error::Dataset("need at least 2 classes and 1 sample per class".into()));
    }
    if separation < 0.0 || !separation.is_finite() {
        return Err(Error::Dataset(format!("separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = 2.0 * PI * c as f64 / classes as f64;
        let (cx, cy) = (separation * angle.cos(), separation * angle.sin());
        for _ in 0..per_class {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            data.push(cx + dx);
            data.push(cy + dy);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(&[classes * per_class, 2], data)?, labels, classes)
}

/// Stroke endpoints in unit coordinates (x right, y down).
type Stroke = ((f64, f64), (f64, f64));

const L: f64 = 0.28;
const R: f64 = 0.72;
const T: f64 = 0.18;
const M: f64 = 0.5;
const B: f64 = 0.82;

const SEG_A: Stroke = ((L, T), (R, T));
const SEG_B: Stroke = ((R, T), (R, M));
const SEG_C: Stroke = ((R, M), (R, B));
const SEG_D: Stroke = ((L, B), (R, B));
const SEG_E: Stroke = ((L, M), (L, B));
const SEG_F: Stroke = ((L, T), (L, M));
const SEG_G: Stroke = ((L, M), (R, M));
/// Extra diagonal that keeps the "5" glyph from being the mirror image of "2".
const SEG_DIAG: Stroke = ((R, T), (L, M));

/// Seven-segment style digit templates.
fn glyph_strokes(class: usize) -> &'static [Stroke] {
    const GLYPHS: [&[Stroke]; 10] = [
        &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F],
        &[SEG_B, SEG_C],
        &[SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        &[SEG_A, SEG_B, SEG_G, SEG_C, SEG_D],
        &[SEG_F, SEG_G, SEG_B, SEG_C],
        &[SEG_A, SEG_F, SEG_G, SEG_C, SEG_D, SEG_DIAG],
        &[SEG_A, SEG_F, SEG_E, SEG_D, SEG_C, SEG_G],
        &[SEG_A, SEG_B, SEG_C],
        &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_F, SEG_G],
    ];
    GLYPHS[class]
}

fn segment_distance(p: (f64, f64), s: Stroke) -> f64 {
    let ((x0, y0), (x1, y1)) = s;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((p.0 - x0) * dx + (p.1 - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Noise-free `size × size` template of one class, values in `[0, 1]`.
pub fn glyph_template(class: usize, size: usize) -> Vec<f64> {
    let half_width = 0.07;
    let soft = 1.0 / size as f64;
    let strokes = glyph_strokes(class);
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let p = ((col as f64 + 0.5) / size as f64, (row as f64 + 0.5) / size as f64);
            let d = strokes.iter().map(|&s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            out.push((1.0 - (d - half_width) / soft).clamp(0.0, 1.0));
        }
    }
    out
}

/// Glyph generation parameters; `noise` holds one σ per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: Vec<f64>,
    pub seed: u64,
}

/// Single-channel digit-like glyphs: a fixed template per class plus
/// Gaussian pixel noise, clipped to `[0, 1]`. Samples are grouped by class.
pub fn gen_glyphs(classes: usize, per_class: usize, size: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    gen_glyphs_with(&GlyphSpec {
        classes,
        per_class,
        size,
        noise: vec![sigma; classes],
        seed,
    })
}

pub fn gen_glyphs_with(spec: &GlyphSpec) -> Result<Dataset> {
    let GlyphSpec {
        classes,
        per_class,
        size,
        ref noise,
        seed,
    } = *spec;
    if ![8, 16, 32].contains(&size) {
        return Err(Error::Dataset(format!("glyph size {size} not in {{8, 16, 32}}")));
    }
    if !(2..=10).contains(&classes) || per_class == 0 {
        return Err(Error::Dataset(format!("glyphs need 2..=10 classes and 1+ sample per class, got {classes}")));
    }
    if noise.len() != classes || noise.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::Dataset("one non-negative noise level per class required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * per_class * size * size);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let template = glyph_template(c, size);
        for _ in 0..per_class {
            for &t in &template {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((t + noise[c] * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(&[classes * per_class, 1, size, size], data)?, labels, classes)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Truncated("IDX magic"));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::BadMagic {
            expected: format!("{magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated("IDX dimensions"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    if bytes.len() < header + numel {
        return Err(Error::Truncated("IDX payload"));
    }
    if bytes.len() > header + numel {
        return Err(Error::Malformed(format!("{} trailing bytes in IDX file", bytes.len() - header - numel)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads unsigned-byte IDX image (`0x803`) and label (`0x801`) files; pixels
/// are scaled to `[0, 1]` and the class count is `max label + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images.as_ref(), IDX_IMAGES)?;
    let (ldims, raw_labels) = read_idx(labels.as_ref(), IDX_LABELS)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)?, labels, classes)
}

/// Writes IDX image/label files; pixels are rounded from `[0, 1]` to bytes.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = dataset.feature_shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Dataset("IDX export needs single-channel images".into()));
    }
    let mut img = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [dataset.len(), shape[1], shape[2]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(dataset.features().data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = IDX_LABELS.to_be_bytes().to_vec();
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

/// Augmentation families: a kind plus its strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugKind {
    HFlip,
    PadCrop { pad: usize },
    Jitter { sigma: f64 },
}

/// One concrete augmentation with its randomness resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    Identity,
    HFlip,
    /// Zero-pad by `pad`, then take the window at offset `(oy, ox)`,
    /// `0 ≤ oy, ox ≤ 2·pad`.
    Crop { pad: usize, oy: usize, ox: usize },
    /// Additive Gaussian noise; row `k` of a batch uses a stream derived
    /// from `seed` and `k`.
    Jitter { sigma: f64, seed: u64 },
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmentation::Identity => f.write_str("identity"),
            Augmentation::HFlip => f.write_str("hflip"),
            Augmentation::Crop { pad, oy, ox } => write!(f, "pad_crop({pad})@{oy},{ox}"),
            Augmentation::Jitter { sigma, seed } => write!(f, "jitter({sigma})#{seed}"),
        }
    }
}

fn jitter_noise(sigma: f64, seed: u64, key: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

impl Augmentation {
    /// Applies the augmentation to a batch `[B, ...feature]` on a graph.
    /// Row `k` is keyed as `first_key + k` for per-sample randomness.
    /// For images the result stays inside `[0, 1]`.
    pub fn apply_var<'g>(&self, x: Var<'g>, first_key: u64) -> Result<Var<'g>> {
        let shape = x.shape();
        let image = shape.len() == 4;
        match *self {
            Augmentation::Identity => Ok(x),
            Augmentation::HFlip | Augmentation::Crop { .. } if !image => Err(Error::Augmentation {
                aug: self.to_string(),
                what: "point data".into(),
            }),
            Augmentation::HFlip => Ok(x.flip_last()?),
            Augmentation::Crop { pad, oy, ox } => {
                if oy > 2 * pad || ox > 2 * pad {
                    return Err(Error::Augmentation {
                        aug: self.to_string(),
                        what: "offsets beyond twice the padding".into(),
                    });
                }
                Ok(x.shift2d(pad as isize - oy as isize, pad as isize - ox as isize)?)
            }
            Augmentation::Jitter { sigma, seed } => {
                let per: usize = shape[1..].iter().product();
                let xv = x.value();
                let mut noise = Vec::with_capacity(xv.len());
                for k in 0..shape[0] {
                    noise.extend(jitter_noise(sigma, seed, first_key + k as u64, per));
                }
                if image {
                    // keep x + noise inside the pixel box; the shift stays additive
                    for (n, &v) in noise.iter_mut().zip(xv.data()) {
                        *n = (v + *n).clamp(0.0, 1.0) - v;
                    }
                }
                let g: &'g Graph = x.graph();
                Ok(x.add(g.constant(Tensor::new(&shape, noise)?))?)
            }
        }
    }

    /// Tensor version of [`Augmentation::apply_var`] for a single sample or
    /// a batch.
    pub fn apply(&self, x: &Tensor, feature_ndim: usize, first_key: u64) -> Result<Tensor> {
        let batched = x.ndim() == feature_ndim + 1;
        let xb = if batched {
            x.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.reshape(&s)?
        };
        let g = Graph::new();
        let out = self.apply_var(g.constant(xb), first_key)?.value();
        Ok(if batched { out } else { out.reshape(x.shape())? })
    }
}

/// The augmentation set sampled once per synthesis iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentFamily {
    pub kinds: Vec<AugKind>,
}

impl AugmentFamily {
    /// Images: horizontal flip and pad-2 crops. Points: jitter σ = 0.05.
    pub fn for_features(feature_shape: &[usize]) -> Self {
        let kinds = if feature_shape.len() == 3 {
            vec![AugKind::HFlip, AugKind::PadCrop { pad: 2 }]
        } else {
            vec![AugKind::Jitter { sigma: 0.05 }]
        };
        AugmentFamily { kinds }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Augmentation {
        if self.kinds.is_empty() {
            return Augmentation::Identity;
        }
        match self.kinds[rng.random_range(0..self.kinds.len())] {
            AugKind::HFlip => Augmentation::HFlip,
            AugKind::PadCrop { pad } => Augmentation::Crop {
                pad,
                oy: rng.random_range(0..=2 * pad),
                ox: rng.random_range(0..=2 * pad),
            },
            AugKind::Jitter { sigma } => Augmentation::Jitter {
                sigma,
                seed: rng.random(),
            },
        }
    }

    /// Deterministic representatives used by consistency checks: the flip,
    /// every crop offset, and eight fixed jitter draws.
    pub fn representatives(&self) -> Vec<Augmentation> {
        let mut out = Vec::new();
        for kind in &self.kinds {
            match *kind {
                AugKind::HFlip => out.push(Augmentation::HFlip),
                AugKind::PadCrop { pad } => {
                    for oy in 0..=2 * pad {
                        for ox in 0..=2 * pad {
                            if (oy, ox) != (pad, pad) {
                                out.push(Augmentation::Crop { pad, oy, ox });
                            }
                        }
                    }
                }
                AugKind::Jitter { sigma } => out.extend((0..8).map(|seed| Augmentation::Jitter { sigma, seed })),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_counts_and_determinism() {
        let d = gen_blobs2d(2, 1, 6.0, 0).unwrap();
        assert_eq!(d.len(), 2);
        let a = gen_blobs2d(3, 10, 4.0, 5).unwrap();
        let b = gen_blobs2d(3, 10, 4.0, 5).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.class_indices(1).len(), 10);
    }

    #[test]
    fn glyphs_without_noise_are_templates() {
        let d = gen_glyphs(3, 4, 16, 0.0, 1).unwrap();
        for c in 0..3 {
            let idx = d.class_indices(c);
            let first = d.sample(idx[0]).unwrap();
            for &i in &idx[1..] {
                assert!(d.sample(i).unwrap().bit_eq(&first));
            }
        }
    }

    #[test]
    fn glyph_digest_is_reproducible() {
        let a = gen_glyphs(3, 5, 16, 0.1, 9).unwrap();
        let b = gen_glyphs(3, 5, 16, 0.1, 9).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), gen_glyphs(3, 5, 16, 0.1, 10).unwrap().digest());
        assert!(gen_glyphs(3, 5, 12, 0.1, 9).is_err());
    }

    #[test]
    fn templates_are_distinct_under_flips() {
        for size in [8, 16, 32] {
            let t: Vec<Vec<f64>> = (0..10).map(|c| glyph_template(c, size)).collect();
            let flip = |v: &[f64]| -> Vec<f64> { v.chunks(size).flat_map(|r| r.iter().rev().cloned().collect::<Vec<_>>()).collect() };
            for a in 0..10 {
                for b in 0..10 {
                    if a != b {
                        assert_ne!(t[a], t[b]);
                        assert_ne!(flip(&t[a]), t[b], "{a} mirrors {b} at {size}");
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_contracts() {
        let d = gen_glyphs(2, 1, 16, 0.1, 3).unwrap();
        let x = d.sample(0).unwrap();
        let f = Augmentation::HFlip;
        assert!(f.apply(&f.apply(&x, 3, 0).unwrap(), 3, 0).unwrap().bit_eq(&x));
        let crop = Augmentation::Crop { pad: 2, oy: 0, ox: 4 };
        let y = crop.apply(&x, 3, 0).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let j = Augmentation::Jitter { sigma: 0.0, seed: 4 };
        assert!(j.apply(&x, 3, 0).unwrap().bit_eq(&x));
        let jl = Augmentation::Jitter { sigma: 0.5, seed: 4 }.apply(&x, 3, 0).unwrap();
        assert!(jl.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_on_points_fails() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let crop = Augmentation::Crop { pad: 2, oy: 1, ox: 1 };
        assert!(matches!(crop.apply(&p, 1, 0), Err(Error::Augmentation { .. })));
        assert!(Augmentation::HFlip.apply(&p, 1, 0).is_err());
    }

    #[test]
    fn family_per_mode() {
        assert_eq!(AugmentFamily::for_features(&[1, 16, 16]).representatives().len(), 25);
        let pts = AugmentFamily::for_features(&[2]);
        assert_eq!(pts.kinds, vec![AugKind::Jitter { sigma: 0.05 }]);
    }
}
