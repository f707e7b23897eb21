//! Semi-supervised objective pieces: weak and strong augmentations,
//! confidence-thresholded pseudo-labels, and the per-subnet loss terms
//! (labelled, self-labelled, teacher-distilled) assembled into one step
//! loss.
//!
//! Pseudo-labels always come from a no-gradient forward pass; they enter
//! loss terms as constants, so the label-producing pass never receives
//! gradient by construction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Which loss assembly a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Teacher-distilled supernet training: largest subnet labels the
    /// unlabelled batch once; every student consumes those labels.
    MatchNas,
    /// Every sampled subnet labels the unlabelled batch for itself.
    NaiveSslNas,
    /// Labelled data only; the unlabelled stream is never read.
    SupervisedNas,
    /// One fixed network, self-labelled unlabelled loss.
    FixmatchSingle,
    /// One fixed network, labelled loss only.
    SupervisedSingle,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<LossMode> {
        Ok(match s {
            "matchnas" => LossMode::MatchNas,
            "naive-ssl-nas" => LossMode::NaiveSslNas,
            "supervised-nas" => LossMode::SupervisedNas,
            "fixmatch-single" => LossMode::FixmatchSingle,
            "supervised-single" => LossMode::SupervisedSingle,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown loss mode {other:?} (matchnas | naive-ssl-nas | supervised-nas | fixmatch-single | supervised-single)"
                )))
            }
        })
    }

    /// True when the mode reads the unlabelled stream.
    pub fn uses_unlabelled(self) -> bool {
        !matches!(self, LossMode::SupervisedNas | LossMode::SupervisedSingle)
    }

    /// True for the modes that train one fixed architecture.
    pub fn is_single(self) -> bool {
        matches!(self, LossMode::FixmatchSingle | LossMode::SupervisedSingle)
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::MatchNas => "matchnas",
            LossMode::NaiveSslNas => "naive-ssl-nas",
            LossMode::SupervisedNas => "supervised-nas",
            LossMode::FixmatchSingle => "fixmatch-single",
            LossMode::SupervisedSingle => "supervised-single",
        })
    }
}

/// Which augmented view students compute their distilled loss on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillView {
    Weak,
    Strong,
}

impl DistillView {
    pub fn parse(s: &str) -> Result<DistillView> {
        Ok(match s {
            "weak" => DistillView::Weak,
            "strong" => DistillView::Strong,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown distill view {other:?} (weak | strong)"
                )))
            }
        })
    }
}

impl std::fmt::Display for DistillView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillView::Weak => "weak",
            DistillView::Strong => "strong",
        })
    }
}

/// One training step's data: a labelled minibatch in its weak view plus
/// an unlabelled minibatch in raw, weak, and strong views.
pub struct SslBatch {
    pub labelled_x: Tensor<f32>,
    pub labelled_y: Vec<usize>,
    pub x_weak: Tensor<f32>,
    pub unlabelled_u: Tensor<f32>,
    pub u_weak: Tensor<f32>,
    pub u_strong: Tensor<f32>,
    pub mu: usize,
}

impl SslBatch {
    /// Check the view-size invariant |u| = |u_weak| = |u_strong| = mu * |x|.
    pub fn validate(&self) -> Result<()> {
        let b = self.labelled_x.shape()[0];
        let m = self.unlabelled_u.shape()[0];
        if self.labelled_y.len() != b || self.x_weak.shape()[0] != b {
            return Err(Error::InvalidArgument(format!(
                "labelled views disagree: {b} images, {} labels, {} weak rows",
                self.labelled_y.len(),
                self.x_weak.shape()[0]
            )));
        }
        if self.u_weak.shape()[0] != m || self.u_strong.shape()[0] != m || m != self.mu * b {
            return Err(Error::InvalidArgument(format!(
                "unlabelled views disagree: {m} raw, {} weak, {} strong, mu*b = {}",
                self.u_weak.shape()[0],
                self.u_strong.shape()[0],
                self.mu * b
            )));
        }
        Ok(())
    }
}

/// One image's weak transform: optional horizontal flip, then an integer
/// translation with edge padding.
fn weak_one(src: &[f32], dst: &mut [f32], c: usize, h: usize, w: usize, flip: bool, dx: i64, dy: i64) {
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let out = &mut dst[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let mut sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                if flip {
                    sx = w - 1 - sx;
                }
                out[y * w + x] = plane[sy * w + sx];
            }
        }
    }
}

/// Weak view: per image, horizontal flip with probability 0.5 and an
/// integer translation up to +-2 px with edge padding. Output pixel
/// values are a subset of the input image's values.
pub fn augment_weak<R: Rng>(batch: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(&shape);
    let src = batch.data();
    let dst = out.data_mut();
    let plane = c * h * w;
    for i in 0..n {
        let flip = rng.gen_bool(0.5);
        let dx = rng.gen_range(-2i64..=2);
        let dy = rng.gen_range(-2i64..=2);
        weak_one(&src[i * plane..(i + 1) * plane], &mut dst[i * plane..(i + 1) * plane], c, h, w, flip, dx, dy);
    }
    out
}

/// Strong view: the weak transform, then one erased rectangle covering at
/// most a quarter of the image (filled with the batch mean), then a
/// per-image intensity rescale that stretches deviations from the image
/// mean by a factor in [0.7, 1.3], clamped back to [0, 1]. A constant
/// batch is a fixed point: the erase fill equals the constant and the
/// rescale has nothing to stretch.
pub fn augment_strong<R: Rng>(batch: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let mut out = augment_weak(batch, rng);
    let shape = out.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 {
        return out;
    }
    let data = out.data_mut();
    let batch_mean =
        (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
    let plane = c * h * w;
    for i in 0..n {
        let rh = rng.gen_range(1..=h / 2);
        let rw = rng.gen_range(1..=w / 2);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        let s = rng.gen_range(0.7f64..1.3);
        let img = &mut data[i * plane..(i + 1) * plane];
        for ch in 0..c {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    img[ch * h * w + y * w + x] = batch_mean;
                }
            }
        }
        let mean = (img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64) as f32;
        for v in img.iter_mut() {
            *v = (mean as f64 + s * (*v as f64 - mean as f64)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Hard pseudo-labels for one unlabelled batch: per row the argmax class,
/// and a mask admitting rows whose top softmax probability reaches tau.
#[derive(Clone, Debug)]
pub struct PseudoLabelResult {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub pass_fraction: f64,
}

impl PseudoLabelResult {
    /// Per-row loss weights: 1 where the mask admits the row, else 0.
    pub fn weights<T: Scalar>(&self) -> Vec<T> {
        self.mask
            .iter()
            .map(|&m| T::from_f64_val(if m { 1.0 } else { 0.0 }))
            .collect()
    }
}

/// Threshold teacher logits into hard labels: labels = row argmax, mask =
/// (max softmax probability >= tau), pass_fraction = mean(mask).
pub fn pseudo_label<T: Scalar>(teacher_logits: &Tensor<T>, tau: f64) -> Result<PseudoLabelResult> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let shape = teacher_logits.shape();
    if shape.len() != 2 {
        return Err(Error::DimensionMismatch {
            op: "pseudo_label",
            detail: format!("logits shape {shape:?}, expected [rows, classes]"),
        });
    }
    let (m, k) = (shape[0], shape[1]);
    let data = teacher_logits.data();
    let mut labels = Vec::with_capacity(m);
    let mut mask = Vec::with_capacity(m);
    for r in 0..m {
        let row: Vec<f64> = data[r * k..(r + 1) * k].iter().map(|v| v.to_f64_val()).collect();
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        let z: f64 = row.iter().map(|&v| (v - row[best]).exp()).sum();
        let max_prob = 1.0 / z;
        labels.push(best);
        mask.push(max_prob >= tau);
    }
    let pass_fraction = if m == 0 {
        0.0
    } else {
        mask.iter().filter(|&&b| b).count() as f64 / m as f64
    };
    Ok(PseudoLabelResult { labels, mask, pass_fraction })
}

/// Mean cross-entropy of logits against ground-truth labels.
pub fn labelled_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, y: &[usize]) -> Result<NodeId> {
    let weights = vec![T::from_f64_val(1.0); y.len()];
    g.cross_entropy(logits, y, &weights, T::from_f64_val(y.len() as f64))
}

/// Self-labelled unlabelled loss: the network's own no-gradient weak-view
/// logits are thresholded into pseudo-labels, and its strong-view logits
/// pay cross-entropy against them. Masked rows contribute zero; the sum
/// is normalized by the total row count, not the pass count.
pub fn unlabelled_loss_self<T: Scalar>(
    g: &mut Graph<T>,
    student_logits_strong: NodeId,
    teacher_logits_weak: &Tensor<T>,
    tau: f64,
) -> Result<(NodeId, PseudoLabelResult)> {
    let m = teacher_logits_weak.shape()[0];
    let student_rows = g.value(student_logits_strong).shape()[0];
    if m != student_rows {
        return Err(Error::DimensionMismatch {
            op: "unlabelled_loss_self",
            detail: format!("{m} teacher rows, {student_rows} student rows"),
        });
    }
    let pseudo = pseudo_label(teacher_logits_weak, tau)?;
    let loss = unlabelled_loss_distilled(g, student_logits_strong, &pseudo)?;
    Ok((loss, pseudo))
}

/// Distilled unlabelled loss: cross-entropy of the student's logits
/// against a teacher's pseudo-labels and mask, normalized by the total
/// unlabelled count. The labels are constants; no gradient reaches the
/// pass that produced them.
pub fn unlabelled_loss_distilled<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: NodeId,
    teacher: &PseudoLabelResult,
) -> Result<NodeId> {
    let m = teacher.labels.len();
    if m == 0 {
        return Err(Error::InvalidArgument("empty unlabelled batch".into()));
    }
    let student_rows = g.value(student_logits).shape()[0];
    if m != student_rows {
        return Err(Error::DimensionMismatch {
            op: "unlabelled_loss_distilled",
            detail: format!("{m} pseudo-labels, {student_rows} student rows"),
        });
    }
    g.cross_entropy(student_logits, &teacher.labels, &teacher.weights::<T>(), T::from_f64_val(m as f64))
}

/// One network's contribution to a step: its labelled loss and, in modes
/// that read unlabelled data, its unlabelled loss.
#[derive(Clone, Copy, Debug)]
pub struct TermPair {
    pub labelled: f64,
    pub unlabelled: Option<f64>,
}

/// Sum a step's terms with unit weights and name each for the record:
/// term 0 is the teacher (or the only network), the rest are students.
/// Errors when the term structure contradicts the mode.
pub fn assemble_step_loss(
    mode: LossMode,
    terms: &[TermPair],
) -> Result<(f64, Vec<(String, f64)>)> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no loss terms".into()));
    }
    if mode.is_single() && terms.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{mode} expects exactly one network, got {} terms",
            terms.len()
        )));
    }
    let mut total = 0.0;
    let mut breakdown = Vec::with_capacity(terms.len() * 2);
    for (i, t) in terms.iter().enumerate() {
        let tag = if i == 0 { "A".to_string() } else { format!("sub{i}") };
        match (mode.uses_unlabelled(), t.unlabelled) {
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "{mode} requires an unlabelled term for every network (missing on term {i})"
                )))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "{mode} must not carry unlabelled terms (present on term {i})"
                )))
            }
            _ => {}
        }
        total += t.labelled;
        breakdown.push((format!("loss_l_{tag}"), t.labelled));
        if let Some(u) = t.unlabelled {
            total += u;
            breakdown.push((format!("loss_u_{tag}"), u));
        }
    }
    Ok((total, breakdown))
}
