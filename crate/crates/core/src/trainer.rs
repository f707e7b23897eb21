//! The training loop: per step it assembles a semi-supervised batch,
//! samples a teacher-first set of subnets, builds every loss term in one
//! graph, aggregates gradients across subnets, and takes a single masked
//! optimizer step. Shared-weight and standalone targets run the exact
//! same loop, so a one-subnet shared run and a single-network run on the
//! same seed produce identical records and weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::space::{ArchConfig, SearchSpace};
use crate::ssl::{
    assemble_step_loss, augment_strong, augment_weak, labelled_loss, pseudo_label,
    unlabelled_loss_distilled, DistillView, LossMode, SslBatch, TermPair,
};
use crate::supernet::{Standalone, Supernet};
use crate::tensor::{
    argmax_rows, CosineSchedule, Graph, NodeId, OptimConfig, OptimState, ParamStore, Tensor,
};

/// How student subnets are drawn each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Largest first, then uniform draws.
    Spos,
    /// Largest and smallest first, then uniform draws.
    Sandwich,
}

impl SamplingStrategy {
    pub fn parse(s: &str) -> Result<SamplingStrategy> {
        Ok(match s {
            "spos" => SamplingStrategy::Spos,
            "sandwich" => SamplingStrategy::Sandwich,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown sampling strategy {other:?} (spos | sandwich)"
                )))
            }
        })
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingStrategy::Spos => "spos",
            SamplingStrategy::Sandwich => "sandwich",
        })
    }
}

/// Hyperparameters for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    /// Networks trained per step; ignored by single-network modes.
    pub n_subnets_per_step: usize,
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
    /// Unlabelled batch = mu * labelled batch.
    pub mu: usize,
    pub labelled_batch: usize,
    /// One epoch is one pass over the labelled set.
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub sampling: SamplingStrategy,
    pub distill_view: DistillView,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::MatchNas,
            n_subnets_per_step: 4,
            tau: 0.95,
            mu: 1,
            labelled_batch: 16,
            epochs: 1,
            lr0: 3e-4,
            weight_decay: 3e-5,
            sampling: SamplingStrategy::Spos,
            distill_view: DistillView::Weak,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subnets_per_step == 0 {
            return Err(Error::InvalidArgument("n_subnets_per_step must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.labelled_batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("labelled_batch and epochs must be positive".into()));
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lr0 {} / weight_decay {} unusable",
                self.lr0, self.weight_decay
            )));
        }
        if self.loss_mode.uses_unlabelled() && self.mu == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} reads unlabelled data; mu must be at least 1",
                self.loss_mode
            )));
        }
        if self.sampling == SamplingStrategy::Sandwich && self.n_subnets_per_step < 2 {
            return Err(Error::InvalidArgument("sandwich sampling needs n_subnets_per_step >= 2".into()));
        }
        Ok(())
    }
}

/// Everything measured during one optimizer step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Named loss terms in assembly order: the teacher (or only network)
    /// first as `loss_l_A` / `loss_u_A`, then `loss_{l,u}_sub<i>`.
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    /// Fraction of the unlabelled batch whose pseudo-labels passed the
    /// threshold, from the first network's labels; 0 when the step
    /// produced none.
    pub pass_fraction: f64,
    /// Encodings of the step's architectures, teacher first.
    pub archs: Vec<String>,
}

/// Draw one step's architectures, teacher (largest) always first. With a
/// narrowed candidate list, student draws come uniformly from that list
/// plus the largest network.
pub fn sample_step_archs<R: Rng>(
    space: &SearchSpace,
    strategy: SamplingStrategy,
    n: usize,
    narrowed: Option<&[ArchConfig]>,
    rng: &mut R,
) -> Result<Vec<ArchConfig>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample zero architectures".into()));
    }
    let mut archs = vec![space.largest()];
    let random_from = 1 + match strategy {
        SamplingStrategy::Spos => 0,
        SamplingStrategy::Sandwich => {
            if n < 2 {
                return Err(Error::InvalidArgument("sandwich sampling needs n >= 2".into()));
            }
            if narrowed.is_some() {
                return Err(Error::InvalidArgument(
                    "narrowed candidate lists train with spos sampling".into(),
                ));
            }
            archs.push(space.smallest());
            1
        }
    };
    let pool: Option<Vec<ArchConfig>> = narrowed.map(|list| {
        let largest = space.largest();
        let have_largest = list
            .iter()
            .any(|a| a.canonical(space).encode() == largest.encode());
        let mut pool = list.to_vec();
        if !have_largest {
            pool.push(largest);
        }
        pool
    });
    for _ in random_from..n {
        archs.push(match &pool {
            Some(pool) => pool[rng.gen_range(0..pool.len())].clone(),
            None => space.sample_uniform(rng),
        });
    }
    Ok(archs)
}

/// A network the loop can train: shared supernet or standalone.
trait TrainTarget {
    fn space(&self) -> &SearchSpace;
    fn forward_nograd(&self, arch: &ArchConfig, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn forward_graph(&self, arch: &ArchConfig, g: &mut Graph<f32>, input: NodeId) -> Result<NodeId>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
}

impl TrainTarget for Supernet<f32> {
    fn space(&self) -> &SearchSpace {
        self.space()
    }
    fn forward_nograd(&self, arch: &ArchConfig, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_train(arch, x)
    }
    fn forward_graph(&self, arch: &ArchConfig, g: &mut Graph<f32>, input: NodeId) -> Result<NodeId> {
        self.forward_into_graph(g, arch, input)
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        self.store_mut()
    }
}

impl TrainTarget for Standalone<f32> {
    fn space(&self) -> &SearchSpace {
        &self.space
    }
    fn forward_nograd(&self, _arch: &ArchConfig, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_train(x)
    }
    fn forward_graph(&self, _arch: &ArchConfig, g: &mut Graph<f32>, input: NodeId) -> Result<NodeId> {
        self.forward_into_graph(g, input)
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        self.store_mut()
    }
}

/// Endless shuffled pass over a fixed index set; reshuffles whenever the
/// remaining tail cannot fill a request.
struct IndexCycler {
    order: Vec<usize>,
    pos: usize,
    fresh: bool,
}

impl IndexCycler {
    fn new(indices: Vec<usize>) -> Self {
        IndexCycler { order: indices, pos: 0, fresh: true }
    }

    fn next<R: Rng>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        debug_assert!(k <= self.order.len());
        if self.fresh || self.pos + k > self.order.len() {
            fisher_yates(&mut self.order, rng);
            self.pos = 0;
            self.fresh = false;
        }
        let out = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

fn fisher_yates<R: Rng>(list: &mut [usize], rng: &mut R) {
    for i in (1..list.len()).rev() {
        let j = rng.gen_range(0..=i);
        list.swap(i, j);
    }
}

/// Train a shared-weight network. `narrowed` restricts student sampling
/// to a pre-searched candidate list. Single-network modes belong in
/// `train_single`.
pub fn train(
    net: &mut Supernet<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    narrowed: Option<&[ArchConfig]>,
) -> Result<Vec<StepRecord>> {
    if cfg.loss_mode.is_single() {
        return Err(Error::InvalidArgument(format!(
            "{} trains one network; use train_single",
            cfg.loss_mode
        )));
    }
    run_loop(net, None, data, cfg, narrowed)
}

/// Train one fixed architecture with no weight sharing.
pub fn train_single(
    net: &mut Standalone<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    if !cfg.loss_mode.is_single() {
        return Err(Error::InvalidArgument(format!(
            "{} trains a shared network; use train",
            cfg.loss_mode
        )));
    }
    let arch = net.arch.clone();
    run_loop(net, Some(arch), data, cfg, None)
}

fn check_data_fits(space: &SearchSpace, data: &Dataset) -> Result<()> {
    if data.resolution() != space.resolution
        || data.channels() != space.in_channels
        || data.num_classes != space.num_classes
    {
        return Err(Error::Data(format!(
            "dataset is {} classes of {}x{}x{}, the network expects {} classes of {}x{}x{}",
            data.num_classes,
            data.channels(),
            data.resolution(),
            data.resolution(),
            space.num_classes,
            space.in_channels,
            space.resolution,
            space.resolution,
        )));
    }
    Ok(())
}

fn run_loop<T: TrainTarget>(
    net: &mut T,
    fixed_arch: Option<ArchConfig>,
    data: &Dataset,
    cfg: &TrainConfig,
    narrowed: Option<&[ArchConfig]>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    check_data_fits(net.space(), data)?;
    let mode = cfg.loss_mode;
    let mut labelled = data.indices_with_tag(SplitTag::Labelled);
    if labelled.is_empty() {
        return Err(Error::Data("no labelled images in the dataset".into()));
    }
    let steps_per_epoch = labelled.len() / cfg.labelled_batch;
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "{} labelled images cannot fill a batch of {}",
            labelled.len(),
            cfg.labelled_batch
        )));
    }
    let m = cfg.mu * cfg.labelled_batch;
    let mut unlabelled = IndexCycler::new(vec![]);
    if mode.uses_unlabelled() {
        let stream = data.unlabelled_stream_indices();
        if stream.len() < m {
            return Err(Error::Data(format!(
                "unlabelled stream holds {} images, one batch needs {m}",
                stream.len()
            )));
        }
        unlabelled = IndexCycler::new(stream);
    }

    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let schedule = CosineSchedule { lr0: cfg.lr0, total_steps };
    let opt_cfg = OptimConfig { lr0: cfg.lr0, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = OptimState::new();

    // Independent draw streams per purpose: modes that skip a stream
    // leave every other stream untouched.
    let mut rng_shuffle_l = substream(cfg.seed, "train-shuffle-l");
    let mut rng_shuffle_u = substream(cfg.seed, "train-shuffle-u");
    let mut rng_weak_x = substream(cfg.seed, "train-aug-weak-x");
    let mut rng_weak_u = substream(cfg.seed, "train-aug-weak-u");
    let mut rng_strong_u = substream(cfg.seed, "train-aug-strong-u");
    let mut rng_arch = substream(cfg.seed, "train-arch-sample");

    let (ch, res) = (data.channels(), data.resolution());
    let mut records = Vec::with_capacity(total_steps as usize);
    for epoch in 0..cfg.epochs {
        fisher_yates(&mut labelled, &mut rng_shuffle_l);
        for step_in_epoch in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let lr = schedule.lr_at(step as u64);

            let lo = step_in_epoch * cfg.labelled_batch;
            let l_idx = &labelled[lo..lo + cfg.labelled_batch];
            let (labelled_x, raw_y) = data.gather(l_idx)?;
            let labelled_y: Vec<usize> = raw_y.into_iter().map(|y| y as usize).collect();
            let x_weak = augment_weak(&labelled_x, &mut rng_weak_x);

            let (unlabelled_u, u_weak, u_strong) = if mode.uses_unlabelled() {
                let u_idx = unlabelled.next(m, &mut rng_shuffle_u);
                let (u_raw, _) = data.gather(&u_idx)?;
                let u_weak = augment_weak(&u_raw, &mut rng_weak_u);
                let u_strong = augment_strong(&u_raw, &mut rng_strong_u);
                (u_raw, u_weak, u_strong)
            } else {
                let empty = || Tensor::zeros(&[0, ch, res, res]);
                (empty(), empty(), empty())
            };
            let batch = SslBatch {
                labelled_x,
                labelled_y,
                x_weak,
                unlabelled_u,
                u_weak,
                u_strong,
                mu: if mode.uses_unlabelled() { cfg.mu } else { 0 },
            };
            batch.validate()?;

            let archs = match &fixed_arch {
                Some(a) => vec![a.clone()],
                None => sample_step_archs(
                    net.space(),
                    cfg.sampling,
                    cfg.n_subnets_per_step,
                    narrowed,
                    &mut rng_arch,
                )?,
            };

            let record = train_step(net, &archs, &batch, cfg, step, lr, &mut opt, &opt_cfg)?;
            records.push(record);
        }
    }
    Ok(records)
}

/// One optimizer step: build every architecture's loss terms in a single
/// graph, check them for divergence, run one backward pass per
/// architecture, and apply the aggregated gradients once.
#[allow(clippy::too_many_arguments)]
fn train_step<T: TrainTarget>(
    net: &mut T,
    archs: &[ArchConfig],
    batch: &SslBatch,
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
    opt: &mut OptimState,
    opt_cfg: &OptimConfig,
) -> Result<StepRecord> {
    let mode = cfg.loss_mode;
    let mut g: Graph<f32> = Graph::new();
    let x_weak = g.input(batch.x_weak.clone());
    let (u_weak, u_strong) = if mode.uses_unlabelled() {
        (Some(g.input(batch.u_weak.clone())), Some(g.input(batch.u_strong.clone())))
    } else {
        (None, None)
    };

    let mut arch_losses: Vec<NodeId> = Vec::with_capacity(archs.len());
    let mut terms: Vec<TermPair> = Vec::with_capacity(archs.len());
    let mut pass_fraction = 0.0;

    match mode {
        LossMode::MatchNas | LossMode::FixmatchSingle => {
            // The teacher labels the weak unlabelled view once, without
            // gradients; its own unlabelled loss and every student's
            // distilled loss consume those same labels.
            let teacher_logits = net.forward_nograd(&archs[0], &batch.u_weak)?;
            let pseudo = pseudo_label(&teacher_logits, cfg.tau)?;
            pass_fraction = pseudo.pass_fraction;
            for (i, arch) in archs.iter().enumerate() {
                let logits_l = net.forward_graph(arch, &mut g, x_weak)?;
                let l = labelled_loss(&mut g, logits_l, &batch.labelled_y)?;
                let view = if i == 0 {
                    u_strong.expect("ssl mode has unlabelled views")
                } else {
                    match cfg.distill_view {
                        DistillView::Weak => u_weak.expect("ssl mode has unlabelled views"),
                        DistillView::Strong => u_strong.expect("ssl mode has unlabelled views"),
                    }
                };
                let logits_u = net.forward_graph(arch, &mut g, view)?;
                let u = unlabelled_loss_distilled(&mut g, logits_u, &pseudo)?;
                arch_losses.push(g.add_n(&[l, u])?);
                terms.push(TermPair {
                    labelled: g.value(l).item()?.into(),
                    unlabelled: Some(g.value(u).item()?.into()),
                });
            }
        }
        LossMode::NaiveSslNas => {
            // Every network labels the weak view for itself and pays its
            // unlabelled loss on the strong view.
            for (i, arch) in archs.iter().enumerate() {
                let own_logits = net.forward_nograd(arch, &batch.u_weak)?;
                let pseudo = pseudo_label(&own_logits, cfg.tau)?;
                if i == 0 {
                    pass_fraction = pseudo.pass_fraction;
                }
                let logits_l = net.forward_graph(arch, &mut g, x_weak)?;
                let l = labelled_loss(&mut g, logits_l, &batch.labelled_y)?;
                let logits_u =
                    net.forward_graph(arch, &mut g, u_strong.expect("ssl mode has unlabelled views"))?;
                let u = unlabelled_loss_distilled(&mut g, logits_u, &pseudo)?;
                arch_losses.push(g.add_n(&[l, u])?);
                terms.push(TermPair {
                    labelled: g.value(l).item()?.into(),
                    unlabelled: Some(g.value(u).item()?.into()),
                });
            }
        }
        LossMode::SupervisedNas | LossMode::SupervisedSingle => {
            for arch in archs {
                let logits_l = net.forward_graph(arch, &mut g, x_weak)?;
                let l = labelled_loss(&mut g, logits_l, &batch.labelled_y)?;
                arch_losses.push(l);
                terms.push(TermPair { labelled: g.value(l).item()?.into(), unlabelled: None });
            }
        }
    }

    let (total, breakdown) = assemble_step_loss(mode, &terms)?;
    for (name, value) in &breakdown {
        if !value.is_finite() {
            return Err(Error::Diverged { step, term: name.clone() });
        }
    }

    for &loss in &arch_losses {
        g.backward(loss, net.store_mut())?;
    }
    opt.step(net.store_mut(), lr, opt_cfg)?;

    Ok(StepRecord {
        step,
        lr,
        terms: breakdown,
        total,
        pass_fraction,
        archs: archs.iter().map(|a| a.encode()).collect(),
    })
}

fn accuracy_over(
    data: &Dataset,
    indices: &[usize],
    mut forward: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut hits = 0usize;
    for chunk in indices.chunks(64) {
        let (x, y) = data.gather(chunk)?;
        let logits = forward(&x)?;
        let pred = argmax_rows(&logits)?;
        hits += pred.iter().zip(&y).filter(|(&p, &b)| p == b as usize).count();
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Top-1 accuracy of one subnet on the test split. Requires calibrated
/// normalization statistics for the architecture.
pub fn evaluate(net: &Supernet<f32>, arch: &ArchConfig, data: &Dataset) -> Result<f64> {
    check_data_fits(net.space(), data)?;
    accuracy_over(data, &data.indices_with_tag(SplitTag::Test), |x| net.forward_eval(arch, x))
}

/// Top-1 accuracy of a standalone network on the test split.
pub fn evaluate_single(net: &Standalone<f32>, data: &Dataset) -> Result<f64> {
    check_data_fits(&net.space, data)?;
    accuracy_over(data, &data.indices_with_tag(SplitTag::Test), |x| net.forward_eval(x))
}

/// Gather the calibration split as one batch (the whole test-time
/// statistics source).
pub fn calibration_batch(data: &Dataset) -> Result<Tensor<f32>> {
    let idx = data.indices_with_tag(SplitTag::Calibration);
    if idx.is_empty() {
        return Err(Error::Data("no calibration images in the dataset".into()));
    }
    Ok(data.gather(&idx)?.0)
}

/// Recalibrate and evaluate in one move.
pub fn recalibrate_and_evaluate(
    net: &mut Supernet<f32>,
    arch: &ArchConfig,
    data: &Dataset,
) -> Result<f64> {
    let calib = calibration_batch(data)?;
    net.recalibrate(arch, &calib)?;
    evaluate(net, arch, data)
}
