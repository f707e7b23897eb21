//! Synthetic image classification data: deterministic pattern generator,
//! stratified semi-supervised splitting, and the dataset file format.
//!
//! Each class is a fixed smooth colour texture, rendered per image at a
//! random contrast and buried under a fresh smooth distractor field plus
//! Gaussian pixel noise. Class textures are invariant under horizontal
//! flips, so the weak training augmentations are label-preserving. The
//! contrast spread grades images from easy to hard: a few labels pin the
//! high-contrast core of each class while the low-contrast tail stays
//! ambiguous until a model has seen enough data to average the
//! distractors out.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::Distribution;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Role of one image within a split dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Labelled = 0,
    Unlabelled = 1,
    Test = 2,
    Calibration = 3,
}

impl SplitTag {
    fn from_u8(v: u8) -> Result<SplitTag> {
        Ok(match v {
            0 => SplitTag::Labelled,
            1 => SplitTag::Unlabelled,
            2 => SplitTag::Test,
            3 => SplitTag::Calibration,
            other => return Err(Error::Data(format!("unknown split tag {other}"))),
        })
    }
}

/// An image classification dataset with per-image split tags.
#[derive(Clone)]
pub struct Dataset {
    /// [N, C, H, W], values in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<u16>,
    pub tags: Vec<SplitTag>,
    pub num_classes: usize,
}

const CHANNELS: usize = 3;

/// Deterministic synthetic dataset: `classes * per_class` images in
/// class-major order, all tagged unlabelled until `split` assigns roles.
/// Resolution is one of 8, 16, 32. Per image, the class texture is scaled
/// by a log-uniform contrast; `noise_sigma` sets the Gaussian pixel noise
/// and (at twice its value) the amplitude of a per-image structured
/// distractor field. With `noise_sigma` 0 the images of a class differ
/// only by contrast.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    resolution: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data(format!("{classes} classes (need at least 2)")));
    }
    if per_class == 0 {
        return Err(Error::Data("per_class is 0".into()));
    }
    if !matches!(resolution, 8 | 16 | 32) {
        return Err(Error::Data(format!("resolution {resolution} (expected 8, 16, or 32)")));
    }
    if !(0.0..=1.0).contains(&noise_sigma) {
        return Err(Error::Data(format!("noise sigma {noise_sigma} outside [0, 1]")));
    }
    let n = classes * per_class;
    let (h, w) = (resolution, resolution);
    let mut images = Tensor::zeros(&[n, CHANNELS, h, w]);
    let mut labels = Vec::with_capacity(n);
    let mut rng = substream(seed, "gen-synthetic");
    // Class textures first, then images in class-major order. Per image:
    // one contrast draw, one distractor field, then pixel noise. The draw
    // order is fixed so a seed pins the bytes.
    let templates: Vec<Vec<f64>> =
        (0..classes).map(|_| smooth_field(&mut rng, CHANNELS, h, w, true)).collect();
    let gauss = rand_distr::Normal::new(0.0f64, noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let data = images.data_mut();
    let plane = CHANNELS * h * w;
    let mut idx = 0usize;
    for c in 0..classes {
        for _ in 0..per_class {
            let contrast = rng.gen_range(CONTRAST_LO.ln()..CONTRAST_HI.ln()).exp();
            let amp = SIGNAL_AMP * contrast;
            let base = idx * plane;
            if noise_sigma > 0.0 {
                let distractor = smooth_field(&mut rng, CHANNELS, h, w, false);
                let d_amp = DISTRACTOR_RATIO * noise_sigma;
                for i in 0..plane {
                    let v = 0.5 + amp * templates[c][i] + d_amp * distractor[i]
                        + gauss.sample(&mut rng);
                    data[base + i] = v.clamp(0.0, 1.0) as f32;
                }
            } else {
                for i in 0..plane {
                    data[base + i] = (0.5 + amp * templates[c][i]).clamp(0.0, 1.0) as f32;
                }
            }
            labels.push(c as u16);
            idx += 1;
        }
    }
    Ok(Dataset {
        images,
        labels,
        tags: vec![SplitTag::Unlabelled; n],
        num_classes: classes,
    })
}

/// Frequency pairs (fx, fy) of the cosine terms in one smooth field.
const FIELD_FREQS: &[(usize, usize)] = &[(0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (2, 1)];

/// Class texture amplitude at contrast 1 (fields are unit RMS).
const SIGNAL_AMP: f64 = 0.13;

/// Distractor field amplitude per unit of noise sigma.
const DISTRACTOR_RATIO: f64 = 2.0;

/// Per-image contrast bounds, sampled log-uniformly.
const CONTRAST_LO: f64 = 0.4;
const CONTRAST_HI: f64 = 1.7;

/// A zero-mean, unit-RMS random field: per channel, a sum of separable
/// low-frequency cosine products with Gaussian coefficients shrunk as
/// frequency grows. With `flip_even` the x factors are centred cosines
/// with no phase, making the field invariant under horizontal flips;
/// distractor fields drawn without it get free x phases.
fn smooth_field<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, flip_even: bool) -> Vec<f64> {
    use std::f64::consts::PI;
    let norm = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut field = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for &(fx, fy) in FIELD_FREQS {
            let coef = norm.sample(rng) / (1.0 + (fx + fy) as f64);
            let phase_y: f64 = rng.gen_range(0.0..2.0 * PI);
            let phase_x: f64 = if flip_even { 0.0 } else { rng.gen_range(0.0..2.0 * PI) };
            for y in 0..h {
                let uy = (2.0 * PI * fy as f64 * y as f64 / h as f64 + phase_y).cos();
                for x in 0..w {
                    let xc = x as f64 - (w as f64 - 1.0) / 2.0;
                    let vx = (2.0 * PI * fx as f64 * xc / w as f64 + phase_x).cos();
                    field[ch * h * w + y * w + x] += coef * uy * vx;
                }
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let mut ss = 0.0;
    for v in field.iter_mut() {
        *v -= mean;
        ss += *v * *v;
    }
    let rms = (ss / field.len() as f64).sqrt().max(1e-9);
    for v in field.iter_mut() {
        *v /= rms;
    }
    field
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Indices carrying one tag, ascending.
    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// The unlabelled training stream: every non-test, non-calibration
    /// image, labelled ones included (their labels are simply unused).
    pub fn unlabelled_stream_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.tags[i], SplitTag::Labelled | SplitTag::Unlabelled))
            .collect()
    }

    /// Copy out a batch: images [B, C, H, W] plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u16>)> {
        let shape = self.images.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let plane = c * h * w;
        let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
        let dst = out.data_mut();
        let src = self.images.data();
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            if i >= self.labels.len() {
                return Err(Error::IndexOutOfRange { what: "image", index: i, size: self.labels.len() });
            }
            dst[b * plane..(b + 1) * plane].copy_from_slice(&src[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }

    /// Assign split roles: per class, `test_fraction` of its images become
    /// test; `calib_count` images total are then taken round-robin per
    /// class for statistics calibration; `labelled_per_class` of the rest
    /// keep their labels; everything else is unlabelled. Shuffling is
    /// seed-deterministic and roles partition the dataset exactly.
    pub fn split(
        &self,
        labelled_per_class: usize,
        test_fraction: f64,
        calib_count: usize,
        seed: u64,
    ) -> Result<Dataset> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Data(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let k = self.num_classes;
        let mut by_class: Vec<Vec<usize>> = vec![vec![]; k];
        for (i, &l) in self.labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(Error::Data(format!("label {l} with {k} classes")));
            }
            by_class[l].push(i);
        }
        let mut rng = substream(seed, "split");
        let mut tags = vec![SplitTag::Unlabelled; self.len()];
        // Per-class shuffle, then carve off the test block.
        let mut pools: Vec<Vec<usize>> = Vec::with_capacity(k);
        for list in by_class.iter_mut() {
            if list.is_empty() {
                return Err(Error::Data("a class has no images".into()));
            }
            // Fisher-Yates in index order keeps the draw sequence fixed.
            for i in (1..list.len()).rev() {
                let j = rng.gen_range(0..=i);
                list.swap(i, j);
            }
            let n_test = (list.len() as f64 * test_fraction).floor() as usize;
            for &i in &list[..n_test] {
                tags[i] = SplitTag::Test;
            }
            pools.push(list[n_test..].to_vec());
        }
        // Calibration: round-robin across classes so the batch stays
        // roughly balanced.
        let mut cursor = vec![0usize; k];
        let mut assigned = 0usize;
        let mut turn = 0usize;
        let mut stalled = 0usize;
        while assigned < calib_count {
            if stalled == k {
                return Err(Error::Data(format!(
                    "calibration wants {calib_count} images, only {assigned} available after the test split"
                )));
            }
            let c = turn % k;
            turn += 1;
            if cursor[c] < pools[c].len() {
                tags[pools[c][cursor[c]]] = SplitTag::Calibration;
                cursor[c] += 1;
                assigned += 1;
                stalled = 0;
            } else {
                stalled += 1;
            }
        }
        // Labelled: an exact per-class count from what remains.
        for c in 0..k {
            let available = pools[c].len() - cursor[c];
            if available < labelled_per_class {
                return Err(Error::Data(format!(
                    "class {c} has {available} images left for {labelled_per_class} labelled"
                )));
            }
            for j in 0..labelled_per_class {
                tags[pools[c][cursor[c] + j]] = SplitTag::Labelled;
            }
        }
        Ok(Dataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            tags,
            num_classes: k,
        })
    }

    /// Write the dataset file format: magic, version, dimensions, f32
    /// little-endian images, u16 labels, u8 tags.
    pub fn save(&self, path: &Path) -> Result<()> {
        let shape = self.images.shape();
        let mut out: Vec<u8> =
            Vec::with_capacity(24 + self.images.len() * 4 + self.labels.len() * 3);
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        for v in [shape[0], shape[1], shape[2], shape[3], self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &t in &self.tags {
            out.push(t as u8);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Read a dataset file, validating structure and label range.
    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = ByteReader::new(std::fs::read(path)?);
        let magic = r.take(4, "magic")?;
        if magic != DATA_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad magic (not a dataset file)".into() });
        }
        let version = r.u16("version")?;
        if version != DATA_VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported version {version}") });
        }
        let n = r.u32("image count")? as usize;
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let k = r.u32("class count")? as usize;
        let count = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or(Error::Format { offset: 6, reason: "dimension overflow".into() })?;
        let raw = r.take(count * 4, "image payload")?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().expect("len 4")));
        }
        let images = Tensor::from_vec(&[n, c, h, w], data)?;
        let raw = r.take(n * 2, "labels")?;
        let labels: Vec<u16> = raw
            .chunks_exact(2)
            .map(|ch| u16::from_le_bytes(ch.try_into().expect("len 2")))
            .collect();
        let raw = r.take(n, "tags")?.to_vec();
        r.finish()?;
        let tags = raw.into_iter().map(SplitTag::from_u8).collect::<Result<Vec<_>>>()?;
        if k < 2 {
            return Err(Error::Data(format!("{k} classes in file")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {bad} with {k} classes")));
        }
        Ok(Dataset { images, labels, tags, num_classes: k })
    }
}

const DATA_MAGIC: &[u8; 4] = b"ENDS";
const DATA_VERSION: u16 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_validates_arguments() {
        assert!(gen_synthetic(1, 4, 16, 0.0, 1).is_err());
        assert!(gen_synthetic(4, 0, 16, 0.0, 1).is_err());
        assert!(gen_synthetic(4, 4, 12, 0.0, 1).is_err());
        assert!(gen_synthetic(4, 4, 16, 1.5, 1).is_err());
        gen_synthetic(2, 1, 8, 0.0, 1).unwrap();
    }

    #[test]
    fn images_are_bounded_and_class_major() {
        let d = gen_synthetic(5, 3, 16, 0.2, 7).unwrap();
        assert_eq!(d.images.shape(), &[15, 3, 16, 16]);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.labels[..3], [0, 0, 0]);
        assert_eq!(d.labels[12..], [4, 4, 4]);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_synthetic(4, 5, 16, 0.1, 42).unwrap();
        let b = gen_synthetic(4, 5, 16, 0.1, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        let c = gen_synthetic(4, 5, 16, 0.1, 43).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    fn nearest_centroid_accuracy(d: &Dataset) -> f64 {
        let n = d.len();
        let dim = d.images.len() / n;
        let k = d.num_classes;
        let data = d.images.data();
        let mut centroids = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = d.labels[i] as usize;
            counts[c] += 1;
            for j in 0..dim {
                centroids[c][j] += data[i * dim + j] as f64;
            }
        }
        for c in 0..k {
            for v in centroids[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut hits = 0usize;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let mut dist = 0.0;
                for j in 0..dim {
                    let diff = data[i * dim + j] as f64 - centroids[c][j];
                    dist += diff * diff;
                }
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == d.labels[i] as usize {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn noiseless_classes_are_nearest_centroid_separable() {
        let d = gen_synthetic(10, 20, 16, 0.0, 3).unwrap();
        assert_eq!(nearest_centroid_accuracy(&d), 1.0);
    }

    #[test]
    fn noise_and_distractors_grade_difficulty() {
        let easy = nearest_centroid_accuracy(&gen_synthetic(10, 20, 16, 0.02, 4).unwrap());
        let hard = nearest_centroid_accuracy(&gen_synthetic(10, 20, 16, 0.12, 4).unwrap());
        assert!(easy > 0.9, "low noise should be near-separable, got {easy}");
        assert!(hard < easy, "raising sigma should cost accuracy: {hard} vs {easy}");
        assert!(hard > 0.3, "hard setting should stay well above chance, got {hard}");
    }

    #[test]
    fn split_partitions_exactly_and_stratified() {
        let d = gen_synthetic(10, 50, 16, 0.05, 5).unwrap();
        let s = d.split(4, 0.2, 30, 9).unwrap();
        let labelled = s.indices_with_tag(SplitTag::Labelled);
        let test = s.indices_with_tag(SplitTag::Test);
        let calib = s.indices_with_tag(SplitTag::Calibration);
        let unlab = s.indices_with_tag(SplitTag::Unlabelled);
        assert_eq!(labelled.len(), 40);
        assert_eq!(test.len(), 100);
        assert_eq!(calib.len(), 30);
        assert_eq!(labelled.len() + test.len() + calib.len() + unlab.len(), 500);
        // Exactly 4 labelled and 10 test per class.
        for c in 0..10u16 {
            assert_eq!(labelled.iter().filter(|&&i| s.labels[i] == c).count(), 4);
            assert_eq!(test.iter().filter(|&&i| s.labels[i] == c).count(), 10);
            assert_eq!(calib.iter().filter(|&&i| s.labels[i] == c).count(), 3);
        }
        // The unlabelled stream carries labelled plus unlabelled.
        assert_eq!(s.unlabelled_stream_indices().len(), 400 - 30);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let d = gen_synthetic(4, 30, 8, 0.0, 6).unwrap();
        let a = d.split(3, 0.1, 8, 1).unwrap();
        let b = d.split(3, 0.1, 8, 1).unwrap();
        assert_eq!(a.tags, b.tags);
        let c = d.split(3, 0.1, 8, 2).unwrap();
        assert_ne!(a.tags, c.tags);
    }

    #[test]
    fn split_rejects_impossible_requests() {
        let d = gen_synthetic(4, 10, 8, 0.0, 6).unwrap();
        assert!(d.split(10, 0.2, 0, 1).is_err());
        assert!(d.split(2, 0.2, 100, 1).is_err());
        assert!(d.split(2, 1.0, 0, 1).is_err());
    }

    #[test]
    fn file_format_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(3, 8, 8, 0.1, 8).unwrap().split(2, 0.25, 4, 3).unwrap();
        let path = dir.path().join("d.ends");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.images.data(), d.images.data());
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.tags, d.tags);
        assert_eq!(back.num_classes, 3);
    }

    #[test]
    fn loader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(2, 4, 8, 0.0, 9).unwrap();
        let path = dir.path().join("d.ends");
        d.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 20, bytes.len() / 2, bytes.len() - 1] {
            let p = dir.path().join(format!("c{cut}.ends"));
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(Dataset::load(&p), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'x';
        let p = dir.path().join("m.ends");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn gather_returns_requested_rows() {
        let d = gen_synthetic(3, 4, 8, 0.0, 10).unwrap();
        let (batch, labels) = d.gather(&[0, 5, 11]).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 8, 8]);
        assert_eq!(labels, vec![0, 1, 2]);
        let plane = 3 * 8 * 8;
        assert_eq!(&batch.data()[plane..2 * plane], &d.images.data()[5 * plane..6 * plane]);
        assert!(d.gather(&[99]).is_err());
    }

    #[test]
    fn degenerate_split_labels_everything() {
        let d = gen_synthetic(4, 6, 8, 0.1, 11).unwrap().split(6, 0.0, 0, 2).unwrap();
        assert_eq!(d.indices_with_tag(SplitTag::Labelled).len(), 24);
        assert!(d.indices_with_tag(SplitTag::Unlabelled).is_empty());
        assert!(d.indices_with_tag(SplitTag::Test).is_empty());
        assert!(d.indices_with_tag(SplitTag::Calibration).is_empty());
        let stream = d.unlabelled_stream_indices();
        assert_eq!(stream.len(), 24);
    }

    #[test]
    fn saved_header_matches_in_memory_shape() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..5u64 {
            let classes = 2 + (seed as usize % 3);
            let per_class = 3 + seed as usize;
            let res = if seed % 2 == 0 { 8 } else { 16 };
            let d = gen_synthetic(classes, per_class, res, 0.05, seed).unwrap();
            let path = dir.path().join(format!("h{seed}.ends"));
            d.save(&path).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(&bytes[..4], b"ENDS");
            assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
            let field = |i: usize| {
                u32::from_le_bytes([bytes[6 + 4 * i], bytes[7 + 4 * i], bytes[8 + 4 * i], bytes[9 + 4 * i]])
            };
            assert_eq!(field(0) as usize, classes * per_class);
            assert_eq!(field(1) as usize, CHANNELS);
            assert_eq!(field(2) as usize, res);
            assert_eq!(field(3) as usize, res);
            assert_eq!(field(4) as usize, classes);
        }
    }
}
