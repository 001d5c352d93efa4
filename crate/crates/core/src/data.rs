//! Synthetic landmark-annotated datasets, alignment perturbation, and
//! lossless dataset I/O.
//!
//! Classes share a common low-frequency envelope anchored at the landmark
//! positions; identity lives in per-landmark oriented gratings whose
//! parameters are class-seeded. Misalignment therefore changes the
//! registration between the discriminative pattern and the pixel grid,
//! which is the nuisance the training method targets.
//!
//! Datasets round-trip bitwise through a directory of raw little-endian
//! f64 tensors plus a JSON-lines manifest.

use crate::constraint::LandmarkTemplate;
use crate::error::{Error, Result};
use crate::geometry::{inverse, to_centered, AffineParams, CenteredPoint, GridShape};
use crate::rng::{stream, Stream};
use crate::warp::{warp_image, ImageTensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 16] = b"AROTEN01        ";

/// One labeled, landmark-annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: ImageTensor,
    pub label: usize,
    /// Ground-truth landmark positions for this sample (centered coords).
    pub landmarks: [CenteredPoint; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Zero-mean Gaussian alignment perturbation (scale is mean 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Radians.
    pub rotation_std: f64,
    /// Pixels, applied independently to both shift axes.
    pub translation_std: f64,
    /// Dimensionless deviation of the scale factor.
    pub scale_std: f64,
}

impl PerturbSpec {
    pub fn zero() -> Self {
        PerturbSpec {
            rotation_std: 0.0,
            translation_std: 0.0,
            scale_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eval.rotation_std", self.rotation_std),
            ("eval.translation_std", self.translation_std),
            ("eval.scale_std", self.scale_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Draw one transform (order: rotation, du, dv, scale).
    pub fn draw(&self, rng: &mut Stream) -> AffineParams {
        let rot = Normal::new(0.0, self.rotation_std).expect("normal");
        let trans = Normal::new(0.0, self.translation_std).expect("normal");
        let scale = Normal::new(1.0, self.scale_std).expect("normal");
        AffineParams::new(
            rot.sample(rng),
            trans.sample(rng),
            trans.sample(rng),
            scale.sample(rng).max(1e-6),
        )
    }
}

struct GratingParams {
    amp: f64,
    freq: f64,
    orient: f64,
    width: f64,
    /// Phase per channel; the fragile half of the class identity.
    phases: Vec<f64>,
    /// Broad intensity offset; the warp-tolerant half of the identity.
    blob_amp: f64,
}

/// Fixed per-landmark carrier frequencies (cycles per pixel) and
/// orientations; every class shares them, so class identity never leaks
/// into carrier geometry.
const CARRIER_FREQ: [f64; 5] = [0.34, 0.37, 0.40, 0.43, 0.415];
const CARRIER_ORIENT: [f64; 5] = [0.0, 0.628, 1.257, 1.885, 2.513];
const CARRIER_AMP: f64 = 0.85;
const CARRIER_WIDTH: f64 = 3.0;

/// A class is a vector of carrier phases plus a vector of broad
/// per-landmark intensity offsets. The phase half is destroyed by
/// sub-pixel misalignment, the blob half survives it, so robustness is
/// learnable but not free.
fn class_gratings(seed: u64, class: usize, channels: usize) -> Vec<GratingParams> {
    let mut rng = stream(seed, "class-pattern", class as u64);
    (0..5)
        .map(|l| GratingParams {
            amp: CARRIER_AMP,
            freq: CARRIER_FREQ[l],
            orient: CARRIER_ORIENT[l],
            width: CARRIER_WIDTH,
            phases: (0..channels).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
            blob_amp: rng.gen_range(-0.5..0.5),
        })
        .collect()
}

/// Common envelope width (pixels) shared by all classes.
const ENVELOPE_WIDTH: f64 = 5.0;
const ENVELOPE_AMP: f64 = 0.5;
/// Width of the warp-tolerant intensity blobs.
const BLOB_WIDTH: f64 = 4.5;

fn pattern_value(gratings: &[GratingParams], landmarks: &[CenteredPoint; 5], c: usize, p: CenteredPoint) -> f64 {
    let mut value = 0.0;
    for (g, lm) in gratings.iter().zip(landmarks) {
        let du = p.u - lm.u;
        let dv = p.v - lm.v;
        let d2 = du * du + dv * dv;
        value += ENVELOPE_AMP * (-d2 / (2.0 * ENVELOPE_WIDTH * ENVELOPE_WIDTH)).exp();
        value += g.blob_amp * (-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp();
        let along = du * g.orient.cos() + dv * g.orient.sin();
        let envelope = (-d2 / (2.0 * g.width * g.width)).exp();
        value += g.amp * envelope * (std::f64::consts::TAU * g.freq * along + g.phases[c]).cos();
    }
    value
}

/// Generate a synthetic dataset.
///
/// Class patterns depend on `(seed, class)` only, so two calls with the same
/// seed but different `instance_offset` draw from the same classes with
/// disjoint per-sample noise; that is how train/test splits are produced.
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    channels: usize,
    shape: GridShape,
    tpl: &LandmarkTemplate,
    noise_std: f64,
    seed: u64,
    instance_offset: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {n_classes}")));
    }
    if per_class < 1 {
        return Err(Error::Validation("need at least 1 sample per class".into()));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::Validation(format!("noise std must be >= 0, got {noise_std}")));
    }
    let tpl = if tpl.shape == shape { *tpl } else { tpl.rescaled(shape) };
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let gratings = class_gratings(seed, class, channels);
        let clean = ImageTensor::from_fn(channels, shape, |c, i, j| {
            pattern_value(&gratings, &tpl.points, c, to_centered(i as i64, j as i64, shape))
        });
        for inst in 0..per_class {
            let global_inst = instance_offset + inst as u64;
            let id = ((class as u64) << 32) | global_inst;
            let image = if noise_std > 0.0 {
                let mut rng = stream(seed, "sample-noise", id);
                let noise = Normal::new(0.0, noise_std).expect("normal");
                let mut img = clean.clone();
                for v in img.data.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
                img
            } else {
                clean.clone()
            };
            samples.push(Sample {
                id,
                image,
                label: class,
                landmarks: tpl.points,
            });
        }
    }
    Ok(Dataset {
        samples,
        n_classes,
    })
}

/// Warp a sample by a random draw from `spec`; the stored landmarks are the
/// originals mapped through the inverse transform, so they remain the true
/// positions for the warped pixels under the pull convention.
pub fn perturb_alignment(s: &Sample, spec: &PerturbSpec, rng: &mut Stream) -> Sample {
    let theta = spec.draw(rng);
    perturb_with(s, theta)
}

/// Deterministic core of [`perturb_alignment`].
pub fn perturb_with(s: &Sample, theta: AffineParams) -> Sample {
    Sample {
        id: s.id,
        image: warp_image(&s.image, theta),
        label: s.label,
        landmarks: s.landmarks.map(|p| inverse(theta, p)),
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: u64,
    label: usize,
    path: String,
    shape: [usize; 3],
    landmarks: [f64; 10],
}

fn write_tensor(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 12 + img.data.len() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(img.shape.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.shape.width as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: format!("file too short for a tensor header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[..16] != TENSOR_MAGIC {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: "bad magic, not a tensor file".into(),
        });
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(16), dim(20), dim(24));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: format!("degenerate dims {c}x{h}x{w}"),
        });
    }
    let expected = 28 + c * h * w * 8;
    if bytes.len() != expected {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: format!("truncated or oversized: expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let data: Vec<f64> = bytes[28..]
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Ok(ImageTensor::from_vec(c, GridShape::new(h, w), data))
}

/// Write a dataset directory: `manifest.jsonl` plus one `.ten` file per
/// sample.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for s in &ds.samples {
        let rel = format!("img_{:016x}.ten", s.id);
        write_tensor(&dir.join(&rel), &s.image)?;
        let mut landmarks = [0.0; 10];
        for (k, p) in s.landmarks.iter().enumerate() {
            landmarks[2 * k] = p.u;
            landmarks[2 * k + 1] = p.v;
        }
        let row = ManifestRow {
            id: s.id,
            label: s.label,
            path: rel,
            shape: [s.image.channels, s.image.shape.height, s.image.shape.width],
            landmarks,
        };
        manifest.push_str(&serde_json::to_string(&row).expect("manifest row serialization"));
        manifest.push('\n');
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Format {
            what: "dataset manifest",
            path: manifest_path.clone(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        let img_path = dir.join(&row.path);
        let image = read_tensor(&img_path)?;
        if [image.channels, image.shape.height, image.shape.width] != row.shape {
            return Err(Error::Integrity {
                path: img_path,
                detail: format!(
                    "shape mismatch: manifest says {:?}, file holds {}x{}x{}",
                    row.shape, image.channels, image.shape.height, image.shape.width
                ),
            });
        }
        let mut landmarks = [CenteredPoint::new(0.0, 0.0); 5];
        for (k, lm) in landmarks.iter_mut().enumerate() {
            *lm = CenteredPoint::new(row.landmarks[2 * k], row.landmarks[2 * k + 1]);
        }
        max_label = max_label.max(row.label);
        samples.push(Sample {
            id: row.id,
            image,
            label: row.label,
            landmarks,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format {
            what: "dataset manifest",
            path: manifest_path,
            detail: "no samples".into(),
        });
    }
    Ok(Dataset {
        samples,
        n_classes: max_label + 1,
    })
}
