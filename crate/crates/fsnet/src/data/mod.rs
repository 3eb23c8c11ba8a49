//! Dataset container, IDX and netpbm ingestion, and a deterministic
//! synthetic-shapes generator so the whole pipeline runs without downloads.

mod idx;
mod netpbm;

pub use idx::load_idx;
pub use netpbm::{load_netpbm, save_pgm, save_ppm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Immutable labelled image collection with pixels in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has pixels outside [0,1]"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copy of the half-open index range [start, start+len).
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.images.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} exceeds dataset of {}",
                start + len,
                self.images.len()
            )));
        }
        Ok(Dataset {
            images: self.images[start..start + len].to_vec(),
            labels: self.labels[start..start + len].to_vec(),
            classes: self.classes,
            provenance: format!("{}[{start}..{}]", self.provenance, start + len),
        })
    }
}

const SHAPE_CLASSES: usize = 4;
const SIDE: usize = 28;

/// Deterministic 28×28 grayscale dataset of four filled shapes (circle,
/// square, triangle, cross) at random position/scale/intensity with
/// uniform noise of amplitude 0.05. Labels cycle round-robin, so class
/// counts stay balanced within ±1.
pub fn synth_shapes(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);

    for i in 0..count {
        let label = i % SHAPE_CLASSES;
        let cx = rng.gen_range(10.0f32..18.0);
        let cy = rng.gen_range(10.0f32..18.0);
        let r = rng.gen_range(5.0f32..9.0);
        let intensity = rng.gen_range(0.6f32..1.0);

        let mut pixels = vec![0.0f32; SIDE * SIDE];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let inside = match label {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                    // upward triangle: apex at cy - r, base at cy + r
                    2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
                    _ => {
                        let bar = (r / 3.0).max(1.0);
                        (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r)
                    }
                };
                if inside {
                    pixels[y * SIDE + x] = intensity;
                }
            }
        }
        for p in pixels.iter_mut() {
            *p = (*p + rng.gen_range(0.0..0.05)).clamp(0.0, 1.0);
        }

        images.push(Tensor::new(vec![1, SIDE, SIDE], pixels)?);
        labels.push(label);
    }

    Dataset::new(
        images,
        labels,
        SHAPE_CLASSES,
        format!("synth-shapes(count={count}, seed={seed})"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_shapes(12, 99).unwrap();
        let b = synth_shapes(12, 99).unwrap();
        for i in 0..12 {
            assert_eq!(a.image(i).data(), b.image(i).data());
            assert_eq!(a.label(i), b.label(i));
        }
        let c = synth_shapes(12, 100).unwrap();
        assert_ne!(a.image(0).data(), c.image(0).data());
    }

    #[test]
    fn synth_labels_are_balanced_within_one() {
        let d = synth_shapes(10, 1).unwrap();
        let mut counts = [0usize; SHAPE_CLASSES];
        for i in 0..d.len() {
            counts[d.label(i)] += 1;
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn synth_pixels_stay_in_range() {
        let d = synth_shapes(8, 5).unwrap();
        for i in 0..d.len() {
            assert!(d.image(i).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dataset_rejects_mismatched_lengths_and_bad_labels() {
        let img = Tensor::zeros(vec![1, 2, 2]);
        assert!(Dataset::new(vec![img.clone()], vec![], 2, "t").is_err());
        assert!(Dataset::new(vec![img.clone()], vec![2], 2, "t").is_err());
        let mut bad = Tensor::zeros(vec![1, 2, 2]);
        bad.data_mut()[0] = -0.5;
        assert!(Dataset::new(vec![bad], vec![0], 2, "t").is_err());
    }

    #[test]
    fn slice_bounds_are_checked() {
        let d = synth_shapes(4, 1).unwrap();
        assert!(d.slice(2, 3).is_err());
        let s = d.slice(1, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.image(0).data(), d.image(1).data());
    }
}
