use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled images stored as one flat `[n, 3, r, r]` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Vec<T>,
    labels: Vec<usize>,
    pub resolution: usize,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<T>, labels: Vec<usize>, resolution: usize, num_classes: usize) -> Result<Self> {
        let per = 3 * resolution * resolution;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Format(format!(
                "{} values for {} images of {resolution}x{resolution}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            resolution,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images `[indices.len(), 3, r, r]` and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = 3 * self.resolution * self.resolution;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let r = self.resolution;
        let t = Tensor::new(&[indices.len(), 3, r, r], data).expect("batch extents");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = 3 * self.resolution * self.resolution;
        Self {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            resolution: self.resolution,
            num_classes: self.num_classes,
        }
    }
}

/// Class-conditional Gaussian colour blobs on a noisy background. Each class
/// owns a colour and a blob centre; samples jitter the centre and add noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub num_classes: usize,
    pub resolution: usize,
}

struct Prototype {
    colour: [f64; 3],
    centre: (f64, f64),
}

impl SynthDataset {
    pub fn new(seed: u64, num_classes: usize, resolution: usize) -> Result<Self> {
        if num_classes < 2 || resolution < 4 {
            return Err(Error::config("synthetic data needs at least 2 classes and 4 pixels"));
        }
        Ok(Self {
            seed,
            num_classes,
            resolution,
        })
    }

    fn prototypes(&self) -> Vec<Prototype> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let r = self.resolution as f64;
        (0..self.num_classes)
            .map(|k| {
                // evenly spread hues keep classes apart even for small seeds
                let phase = std::f64::consts::TAU * k as f64 / self.num_classes as f64;
                let colour = [phase.cos(), (phase + 2.1).cos(), (phase + 4.2).cos()];
                let centre = (rng.random_range(0.3..0.7) * r, rng.random_range(0.3..0.7) * r);
                Prototype { colour, centre }
            })
            .collect()
    }

    /// `samples` images with balanced labels; `split` selects an independent
    /// sample stream over the same classes.
    pub fn generate<T: Scalar>(&self, samples: usize, split: u64) -> Dataset<T> {
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (split.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let noise = Normal::new(0.0, 0.2).expect("valid std");
        let r = self.resolution;
        let sigma = r as f64 / 6.0;
        let jitter = r as f64 / 16.0;
        let mut images = Vec::with_capacity(samples * 3 * r * r);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let k = i % self.num_classes;
            let p = &protos[k];
            let cx = p.centre.0 + rng.random_range(-jitter..=jitter);
            let cy = p.centre.1 + rng.random_range(-jitter..=jitter);
            for colour in p.colour {
                for y in 0..r {
                    for x in 0..r {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = colour * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                        images.push(T::from_f64_lossy(v));
                    }
                }
            }
            labels.push(k);
        }
        Dataset::new(images, labels, r, self.num_classes).expect("consistent by construction")
    }
}

fn ppm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let token = std::str::from_utf8(&bytes[start..i]).unwrap_or("");
        out.push(token.parse().map_err(|_| Error::Format("malformed PPM header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((out, i + 1))
}

/// Decodes a binary (P6, 8-bit) PPM into channel-major values in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (P6) image".into()));
    }
    let (header, offset) = ppm_tokens(&bytes[2..], 3)?;
    let (w, h, max) = (header[0], header[1], header[2]);
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {max}")));
    }
    let raster = bytes.get(2 + offset..2 + offset + w * h * 3).ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let mut out = vec![0.0; 3 * w * h];
    for (p, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + p] = px[c] as f64 / max as f64 * 2.0 - 1.0;
        }
    }
    Ok((w, h, out))
}

/// Square P6 images listed in `dir/labels.txt`, one `<file> <label>` per line.
pub fn load_image_dir<T: Scalar>(dir: &Path, resolution: usize, num_classes: usize) -> Result<Dataset<T>> {
    let index = fs::read_to_string(dir.join("labels.txt"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("labels.txt line {}: expected `<file> <label>`", n + 1)));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Format(format!("labels.txt line {}: bad label `{label}`", n + 1)))?;
        let (w, h, px) = decode_ppm(&fs::read(dir.join(file))?)?;
        if w != resolution || h != resolution {
            return Err(Error::Format(format!("{file} is {w}x{h}, expected {resolution}x{resolution}")));
        }
        images.extend(px.into_iter().map(T::from_f64_lossy));
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Format("labels.txt lists no images".into()));
    }
    Dataset::new(images, labels, resolution, num_classes)
}
