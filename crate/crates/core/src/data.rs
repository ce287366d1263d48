//! Synthetic two-domain image classification data.
//!
//! Classes render as parametric shapes (bars, disks, crosses) on small RGB
//! canvases. The source domain uses clean renderings; the target domain
//! applies a configurable photometric shift (brightness, contrast, additive
//! noise, background texture). Generation is a pure function of the
//! parameters and seed, with per-sample derived seeds so samples are
//! independent of generation order.
//!
//! The on-disk container is little-endian and strict: magic `RTFQDS1\0`,
//! u32 fields (version, N, C, H, W, labels-present flag), the pixel floats,
//! then the labels when present.

use std::path::Path;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::numerics::Tensor;
use crate::supernet::Domain;

/// Canvas height/width of generated images.
pub const IMG_SIZE: usize = 32;
/// Channels of generated images.
pub const IMG_CHANNELS: usize = 3;

const DATASET_MAGIC: &[u8; 8] = b"RTFQDS1\0";
const DATASET_VERSION: u32 = 1;

/// One domain's images, with labels when the view is supervised.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub images: Tensor,
    pub labels: Option<Vec<u32>>,
    pub domain: Domain,
}

impl DomainDataset {
    /// Validate invariants: NCHW images with finite pixels in [0,1] and, when
    /// present, one label per image.
    pub fn new(images: Tensor, labels: Option<Vec<u32>>, domain: Domain) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(
                "DomainDataset::new",
                "[N, C, H, W] images",
                format!("{:?}", images.shape()),
            ));
        }
        for (i, &v) in images.data().iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "pixel {i} out of range: {v} (must be finite in [0,1])"
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::shape(
                    "DomainDataset::new",
                    format!("{} labels", images.shape()[0]),
                    format!("{}", l.len()),
                ));
            }
        }
        Ok(DomainDataset {
            images,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy rows `indices` into a new NCHW batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.images.shape();
        let row = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range (dataset has {} rows)",
                    s[0]
                )));
            }
            out.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        Tensor::new(vec![indices.len(), s[1], s[2], s[3]], out)
    }

    /// Labels for `indices`; errors when the view is unlabeled.
    pub fn gather_labels(&self, indices: &[usize]) -> Result<Vec<u32>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset view has no labels"))?;
        indices
            .iter()
            .map(|&i| {
                labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("label index {i} out of range")))
            })
            .collect()
    }
}

/// Photometric domain shift applied to target-domain renderings.
///
/// Order of application: contrast about 0.5, brightness offset, background
/// texture, additive Gaussian noise, then a clip to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    /// Added to every pixel.
    pub brightness: f32,
    /// Multiplies the deviation from mid-gray; 1.0 leaves contrast alone.
    pub contrast: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f32,
    /// Spatial frequency (cycles per image) of an additive sinusoidal
    /// texture; 0 disables it.
    pub texture_freq: f32,
    /// Amplitude of the sinusoidal texture.
    pub texture_amp: f32,
}

impl ShiftSpec {
    /// No shift at all: the target domain matches the source distribution.
    pub fn none() -> Self {
        ShiftSpec {
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            texture_freq: 0.0,
            texture_amp: 0.0,
        }
    }

    /// The default shift used by the desk-scale experiments: a brightness
    /// push, mild contrast loss, noise, and a low-frequency texture.
    pub fn default_shift() -> Self {
        ShiftSpec {
            brightness: 0.3,
            contrast: 0.6,
            noise_sigma: 0.1,
            texture_freq: 3.0,
            texture_amp: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("brightness", self.brightness, -1.0, 1.0),
            ("contrast", self.contrast, 0.0, 4.0),
            ("noise_sigma", self.noise_sigma, 0.0, 1.0),
            ("texture_freq", self.texture_freq, 0.0, 16.0),
            ("texture_amp", self.texture_amp, 0.0, 1.0),
        ];
        for (name, v, lo, hi) in fields {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::invalid(format!(
                    "shift {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        if self.contrast == 0.0 {
            return Err(Error::invalid("shift contrast must be positive"));
        }
        Ok(())
    }

    fn is_none(&self) -> bool {
        *self == ShiftSpec::none()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    mix64(seed ^ mix64((domain.index() as u64) << 32 ^ index as u64))
}

/// Soft-edged coverage: 1 inside, 0 outside, linear over one pixel.
fn coverage(dist: f32) -> f32 {
    (0.5 - dist).clamp(0.0, 1.0)
}

/// Render one labeled shape into `out` (C×H×W), overwriting it.
fn render_shape(out: &mut [f32], class: u32, classes: u32, rng: &mut ChaCha8Rng) {
    let size = IMG_SIZE as f32;
    let background = rng.sample(Uniform::new(0.10f32, 0.30));
    let foreground = rng.sample(Uniform::new(0.70f32, 1.00));
    let tint: [f32; IMG_CHANNELS] = [
        rng.sample(Uniform::new(0.85f32, 1.0)),
        rng.sample(Uniform::new(0.85f32, 1.0)),
        rng.sample(Uniform::new(0.85f32, 1.0)),
    ];
    let cx = rng.sample(Uniform::new(0.35f32, 0.65)) * size;
    let cy = rng.sample(Uniform::new(0.35f32, 0.65)) * size;
    let half_thick = rng.sample(Uniform::new(0.05f32, 0.09)) * size;
    let half_len = rng.sample(Uniform::new(0.25f32, 0.38)) * size;
    let radius = rng.sample(Uniform::new(0.18f32, 0.30)) * size;

    // Signed distance to the shape boundary (negative inside), per class
    // modulo the class count: horizontal bar, vertical bar, disk, cross.
    let shape = class % classes.min(4);
    let sdf = |x: f32, y: f32| -> f32 {
        let bar = |dx: f32, dy: f32, hx: f32, hy: f32| (dx.abs() - hx).max(dy.abs() - hy);
        match shape {
            0 => bar(x - cx, y - cy, half_len, half_thick),
            1 => bar(x - cx, y - cy, half_thick, half_len),
            2 => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - radius,
            _ => {
                let arm = half_len * 0.85;
                let h = bar(x - cx, y - cy, arm, half_thick);
                let v = bar(x - cx, y - cy, half_thick, arm);
                h.min(v)
            }
        }
    };

    let hw = IMG_SIZE * IMG_SIZE;
    for yi in 0..IMG_SIZE {
        for xi in 0..IMG_SIZE {
            let a = coverage(sdf(xi as f32 + 0.5, yi as f32 + 0.5));
            for c in 0..IMG_CHANNELS {
                let fg = foreground * tint[c];
                out[c * hw + yi * IMG_SIZE + xi] = background + a * (fg - background);
            }
        }
    }
}

fn apply_shift(pixels: &mut [f32], shift: &ShiftSpec, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0f64, shift.noise_sigma.max(f32::MIN_POSITIVE) as f64)
        .expect("validated sigma");
    let hw = IMG_SIZE * IMG_SIZE;
    for c in 0..IMG_CHANNELS {
        for yi in 0..IMG_SIZE {
            for xi in 0..IMG_SIZE {
                let i = c * hw + yi * IMG_SIZE + xi;
                let mut v = (pixels[i] - 0.5) * shift.contrast + 0.5 + shift.brightness;
                if shift.texture_freq > 0.0 {
                    let phase = std::f32::consts::TAU * shift.texture_freq / IMG_SIZE as f32
                        * (xi as f32 + yi as f32);
                    v += shift.texture_amp * phase.sin();
                }
                if shift.noise_sigma > 0.0 {
                    v += noise.sample(rng) as f32;
                }
                pixels[i] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn generate_domain(
    classes: u32,
    n: usize,
    shift: &ShiftSpec,
    seed: u64,
    domain: Domain,
) -> Result<(Tensor, Vec<u32>)> {
    let row = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
    let mut data = vec![0.0f32; n * row];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i as u32) % classes;
        labels.push(label);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, domain, i));
        let pix = &mut data[i * row..(i + 1) * row];
        render_shape(pix, label, classes, &mut rng);
        if !shift.is_none() {
            apply_shift(pix, shift, &mut rng);
        }
    }
    let images = Tensor::new(vec![n, IMG_CHANNELS, IMG_SIZE, IMG_SIZE], data)?;
    Ok((images, labels))
}

/// Generate a (labeled source, unlabeled target) pair plus the held-back
/// target labels for evaluation.
///
/// Labels are balanced (class counts within one of each other); the whole
/// output is a pure function of the arguments.
pub fn generate_pair(
    classes: u32,
    n_source: usize,
    n_target: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset, Vec<u32>)> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if classes > 4 {
        return Err(Error::invalid(format!(
            "the shape renderer supports at most 4 classes, got {classes}"
        )));
    }
    if n_source < classes as usize || n_target < classes as usize {
        return Err(Error::invalid(format!(
            "need at least {classes} samples per domain, got {n_source}/{n_target}"
        )));
    }
    shift.validate()?;

    let (src_images, src_labels) =
        generate_domain(classes, n_source, &ShiftSpec::none(), seed, Domain::Source)?;
    let (tgt_images, tgt_labels) = generate_domain(classes, n_target, shift, seed, Domain::Target)?;

    let source = DomainDataset::new(src_images, Some(src_labels), Domain::Source)?;
    let target = DomainDataset::new(tgt_images, None, Domain::Target)?;
    Ok((source, target, tgt_labels))
}

/// Serialize a dataset to the container format.
pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let s = ds.images.shape();
    let mut w = ByteWriter::new();
    w.write_magic(DATASET_MAGIC);
    w.write_u32(DATASET_VERSION);
    for &dim in s {
        if dim > u32::MAX as usize {
            return Err(Error::invalid(format!("dimension {dim} overflows u32")));
        }
    }
    w.write_u32(s[0] as u32);
    w.write_u32(s[1] as u32);
    w.write_u32(s[2] as u32);
    w.write_u32(s[3] as u32);
    w.write_u32(ds.labels.is_some() as u32);
    w.write_f32_slice(ds.images.data());
    if let Some(labels) = &ds.labels {
        w.write_u32_slice(labels);
    }
    write_file(path, &w.into_bytes())
}

/// Parse a dataset container. The file does not record the domain role, so
/// the caller assigns it.
pub fn load_dataset(path: &Path, domain: Domain) -> Result<DomainDataset> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.read_u32()?;
    if version != DATASET_VERSION {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let n = r.read_u32()? as usize;
    let c = r.read_u32()? as usize;
    let h = r.read_u32()? as usize;
    let w = r.read_u32()? as usize;
    let labels_present = r.read_u32()?;
    if labels_present > 1 {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("labels-present flag must be 0 or 1, got {labels_present}"),
        ));
    }
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::parse(path, 12, "image dimensions overflow"))?;
    let data = r.read_f32_vec(count)?;
    let labels = if labels_present == 1 {
        Some(r.read_u32_vec(n)?)
    } else {
        None
    };
    r.finish()?;
    let images = Tensor::new(vec![n, c, h, w], data)?;
    DomainDataset::new(images, labels, domain)
}
