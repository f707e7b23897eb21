//! Execution plan: the ordered layer list of one architecture, with every
//! parameter's slice into the shared maximal tensors. One plan drives the
//! training-graph forward, the plain inference forward, statistics
//! calibration, weight initialization, and resource counting, so all of
//! them agree on structure by construction.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::space::{ArchConfig, LatencyModel, ResourceReport, SearchSpace};
use crate::tensor::{
    batch_norm_stats, bn_eval_forward, bn_train_forward, conv2d_forward, conv_out_dim,
    global_avg_pool_forward, hardswish_forward, linear_forward, Graph, NodeId, NormStats,
    ParamStore, Scalar, Tensor, NORM_EPS,
};

/// One layer of the plan. Slices index into the maximal parameter tensors;
/// their lengths are the active dimensions. `counted` marks the elastic
/// stage layers that participate in resource reports.
#[derive(Clone, Debug)]
pub enum PlanStep {
    Conv {
        key: String,
        /// [out_ch, in_ch_per_group, kh, kw] ranges into the maximal tensor.
        slice: Vec<Range<usize>>,
        stride: usize,
        pad: usize,
        groups: usize,
        counted: bool,
    },
    Norm {
        scale_key: String,
        shift_key: String,
        /// Active channel prefix of the maximal affine vectors.
        channels: Range<usize>,
        /// Occurrence index, addressing this layer's calibration slot.
        idx: usize,
        counted: bool,
    },
    Act,
    ResidualSave,
    ResidualAdd,
    Pool,
    Fc {
        w_key: String,
        b_key: String,
        w_slice: Vec<Range<usize>>,
        b_slice: Vec<Range<usize>>,
    },
}

/// Ordered layers of one architecture plus its normalization-layer count.
#[derive(Clone, Debug)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    pub norm_count: usize,
}

/// How normalization layers behave during a plain forward pass.
pub enum NormMode<'a> {
    /// Per-batch statistics, as in training.
    Train,
    /// Frozen statistics from a prior calibration, one entry per layer.
    Eval(&'a [NormStats]),
    /// Compute and record this batch's statistics, normalizing with them;
    /// the vector must start empty and ends with one entry per layer.
    Calibrate(&'a mut Vec<NormStats>),
    /// Skip normalization entirely (identity affine).
    Identity,
}

/// Where a plain forward stops.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum RunUntil {
    /// Class logits after the pooled classifier.
    Logits,
    /// The feature map just before global pooling.
    PrePool,
}

/// FLOPs of a conv-like layer: one multiply-accumulate counts as 2.
pub fn conv_flops(out_elements: u64, macs_per_element: u64) -> u64 {
    2 * out_elements * macs_per_element
}

/// Center crop of an active kernel extent within the maximal one.
fn kernel_crop(k_max: usize, k_act: usize) -> Range<usize> {
    let start = (k_max - k_act) / 2;
    start..start + k_act
}

struct PlanBuilder {
    steps: Vec<PlanStep>,
    norm_idx: usize,
}

impl PlanBuilder {
    fn conv(&mut self, key: String, slice: Vec<Range<usize>>, stride: usize, pad: usize, groups: usize, counted: bool) {
        self.steps.push(PlanStep::Conv { key, slice, stride, pad, groups, counted });
    }

    fn norm(&mut self, prefix: &str, c_act: usize, counted: bool) {
        self.steps.push(PlanStep::Norm {
            scale_key: format!("{prefix}.scale"),
            shift_key: format!("{prefix}.shift"),
            channels: 0..c_act,
            idx: self.norm_idx,
            counted,
        });
        self.norm_idx += 1;
    }

    fn act(&mut self) {
        self.steps.push(PlanStep::Act);
    }

    /// One inverted-bottleneck block: 1x1 expand, depthwise, 1x1 project,
    /// each followed by normalization, activation after the first two. The
    /// expansion is skipped when it would be an identity-width map
    /// (expand 1 with hidden == input), and a skip connection wraps the
    /// block when stride is 1 and input width equals output width. Channel
    /// ranges are active prefixes, so only active extents appear here; the
    /// maximal kernel extent is needed to center the crop.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        prefix: &str,
        in_act: usize,
        out_act: usize,
        h_act: usize,
        expand_act: usize,
        (k_act, k_max): (usize, usize),
        stride: usize,
        counted: bool,
    ) {
        let residual = stride == 1 && in_act == out_act;
        if residual {
            self.steps.push(PlanStep::ResidualSave);
        }
        let skip_expand = expand_act == 1 && h_act == in_act;
        let dw_in = if skip_expand { in_act } else { h_act };
        if !skip_expand {
            self.conv(
                format!("{prefix}.exp.w"),
                vec![0..h_act, 0..in_act, 0..1, 0..1],
                1,
                0,
                1,
                counted,
            );
            self.norm(&format!("{prefix}.exp_norm"), h_act, counted);
            self.act();
        }
        let crop = kernel_crop(k_max, k_act);
        self.conv(
            format!("{prefix}.dw.w"),
            vec![0..dw_in, 0..1, crop.clone(), crop],
            stride,
            k_act / 2,
            dw_in,
            counted,
        );
        self.norm(&format!("{prefix}.dw_norm"), dw_in, counted);
        self.act();
        self.conv(
            format!("{prefix}.proj.w"),
            vec![0..out_act, 0..dw_in, 0..1, 0..1],
            1,
            0,
            1,
            counted,
        );
        self.norm(&format!("{prefix}.proj_norm"), out_act, counted);
        if residual {
            self.steps.push(PlanStep::ResidualAdd);
        }
    }
}

/// Build the execution plan of `arch` within `space`. Slices cover the
/// maximal tensors of the space even when the plan later runs against a
/// store holding only the active extents.
pub fn plan_for(space: &SearchSpace, arch: &ArchConfig) -> Result<Plan> {
    space.validate_arch(arch)?;
    let mut b = PlanBuilder { steps: vec![], norm_idx: 0 };
    let sc = space.stem_channels;
    let sk = space.stem_kernel;
    b.conv(
        "stem.conv.w".into(),
        vec![0..sc, 0..space.in_channels, 0..sk, 0..sk],
        space.stem_stride,
        sk / 2,
        1,
        false,
    );
    b.norm("stem.norm", sc, false);
    b.act();
    let mut cur = sc;
    for (i, fb) in space.stem_blocks.iter().enumerate() {
        let hidden = fb.out * fb.expand;
        b.block(
            &format!("pre{i}"),
            cur,
            fb.out,
            hidden,
            fb.expand,
            (fb.kernel, fb.kernel),
            fb.stride,
            false,
        );
        cur = fb.out;
    }
    for (s, stage) in space.stages.iter().enumerate() {
        let out_act = space.widths_for(arch)[s];
        let k_max = *stage.kernels.last().expect("validated");
        for blk in 0..arch.depths[s] {
            let e_act = arch.expands[s][blk];
            let k_act = arch.kernels[s][blk];
            b.block(
                &format!("s{s}.b{blk}"),
                cur,
                out_act,
                out_act * e_act,
                e_act,
                (k_act, k_max),
                if blk == 0 { stage.stride } else { 1 },
                true,
            );
            cur = out_act;
        }
    }
    for (i, &t) in space.tail_channels.iter().enumerate() {
        b.conv(
            format!("tail{i}.conv.w"),
            vec![0..t, 0..cur, 0..1, 0..1],
            1,
            0,
            1,
            false,
        );
        b.norm(&format!("tail{i}.norm"), t, false);
        b.act();
        cur = t;
    }
    b.steps.push(PlanStep::Pool);
    let k = space.num_classes;
    b.steps.push(PlanStep::Fc {
        w_key: "fc.w".into(),
        b_key: "fc.b".into(),
        w_slice: vec![0..k, 0..cur],
        b_slice: vec![0..k],
    });
    Ok(Plan { steps: b.steps, norm_count: b.norm_idx })
}

impl Plan {
    /// Every parameter the plan touches, with its active ranges into the
    /// maximal tensors. Fixed layers appear with full ranges.
    pub fn slice_map(&self) -> BTreeMap<String, Vec<Range<usize>>> {
        let mut map = BTreeMap::new();
        for step in &self.steps {
            match step {
                PlanStep::Conv { key, slice, .. } => {
                    map.insert(key.clone(), slice.clone());
                }
                PlanStep::Norm { scale_key, shift_key, channels, .. } => {
                    map.insert(scale_key.clone(), vec![channels.clone()]);
                    map.insert(shift_key.clone(), vec![channels.clone()]);
                }
                PlanStep::Fc { w_key, b_key, w_slice, b_slice } => {
                    map.insert(w_key.clone(), w_slice.clone());
                    map.insert(b_key.clone(), b_slice.clone());
                }
                _ => {}
            }
        }
        map
    }
}

/// Fill a store with freshly initialized tensors sized to the plan's
/// slices: fan-in-scaled Gaussians for conv and linear weights, ones for
/// normalization scales, zeros for shifts and the classifier bias. Built
/// from the largest architecture's plan this yields the shared maximal
/// store; from any other plan, a standalone-sized one.
pub fn init_store_for<T: Scalar, R: Rng>(plan: &Plan, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for step in &plan.steps {
        match step {
            PlanStep::Conv { key, slice, .. } => {
                let shape: Vec<usize> = slice.iter().map(|r| r.len()).collect();
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                store.insert_gaussian(key, &shape, (2.0 / fan_in).sqrt(), rng);
            }
            PlanStep::Norm { scale_key, shift_key, channels, .. } => {
                let c = channels.len();
                store.insert(scale_key, Tensor::from_vec(&[c], vec![T::from_f64_val(1.0); c]).expect("shape"));
                store.insert(shift_key, Tensor::zeros(&[c]));
            }
            PlanStep::Fc { w_key, b_key, w_slice, b_slice } => {
                let shape: Vec<usize> = w_slice.iter().map(|r| r.len()).collect();
                let fan_in = shape[1] as f64;
                store.insert_gaussian(w_key, &shape, (2.0 / fan_in).sqrt(), rng);
                store.insert(b_key, Tensor::zeros(&[b_slice[0].len()]));
            }
            _ => {}
        }
    }
    store
}

/// Read a parameter at the step's active extent. A maximal store gets
/// sliced; a store already holding active-sized tensors is passed through.
fn fetch<T: Scalar>(store: &ParamStore<T>, key: &str, ranges: &[Range<usize>]) -> Result<Tensor<T>> {
    let full = store.value(key)?;
    let want: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    if full.shape() == want.as_slice() {
        Ok(full.clone())
    } else {
        full.slice(ranges)
    }
}

/// As `fetch`, but for graph nodes: returns the slice argument the graph
/// needs so gradients scatter back into the same extent.
fn slice_arg<T: Scalar>(store: &ParamStore<T>, key: &str, ranges: &[Range<usize>]) -> Result<Option<Vec<Range<usize>>>> {
    let full = store.value(key)?;
    let want: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    if full.shape() == want.as_slice() {
        Ok(None)
    } else {
        Ok(Some(ranges.to_vec()))
    }
}

/// Run the plan without building a graph. Normalization behavior and the
/// stopping point are the caller's choice; no gradients are produced.
pub fn forward_plain<T: Scalar>(
    plan: &Plan,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    mut norm_mode: NormMode<'_>,
    until: RunUntil,
) -> Result<Tensor<T>> {
    if let NormMode::Eval(stats) = &norm_mode {
        if stats.len() != plan.norm_count {
            return Err(Error::InvalidArgument(format!(
                "calibration covers {} normalization layers, plan has {}",
                stats.len(),
                plan.norm_count
            )));
        }
    }
    let eps = T::from_f64_val(NORM_EPS);
    let mut cur = x.clone();
    let mut saved: Vec<Tensor<T>> = vec![];
    for step in &plan.steps {
        match step {
            PlanStep::Conv { key, slice, stride, pad, groups, .. } => {
                let w = fetch(store, key, slice)?;
                cur = conv2d_forward(&cur, &w, *stride, *pad, *groups)?;
            }
            PlanStep::Norm { scale_key, shift_key, channels, idx, .. } => {
                let scale = fetch(store, scale_key, std::slice::from_ref(channels))?;
                let shift = fetch(store, shift_key, std::slice::from_ref(channels))?;
                cur = match &mut norm_mode {
                    NormMode::Train => bn_train_forward(&cur, &scale, &shift, eps)?.0,
                    NormMode::Eval(stats) => bn_eval_forward(&cur, &scale, &shift, &stats[*idx], NORM_EPS)?,
                    NormMode::Calibrate(out) => {
                        out.push(batch_norm_stats(&cur)?);
                        bn_eval_forward(&cur, &scale, &shift, out.last().expect("just pushed"), NORM_EPS)?
                    }
                    NormMode::Identity => cur,
                };
            }
            PlanStep::Act => cur = hardswish_forward(&cur),
            PlanStep::ResidualSave => saved.push(cur.clone()),
            PlanStep::ResidualAdd => {
                let r = saved.pop().ok_or_else(|| {
                    Error::InvalidArgument("residual add without a saved activation".into())
                })?;
                if r.shape() != cur.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "residual add",
                        detail: format!("{:?} vs {:?}", r.shape(), cur.shape()),
                    });
                }
                for (c, s) in cur.data_mut().iter_mut().zip(r.data()) {
                    *c = *c + *s;
                }
            }
            PlanStep::Pool => {
                if until == RunUntil::PrePool {
                    return Ok(cur);
                }
                cur = global_avg_pool_forward(&cur)?;
            }
            PlanStep::Fc { w_key, b_key, w_slice, b_slice } => {
                let w = fetch(store, w_key, w_slice)?;
                let b = fetch(store, b_key, b_slice)?;
                cur = linear_forward(&cur, &w, Some(&b))?;
            }
        }
    }
    Ok(cur)
}

/// Build the training forward into a graph (train-mode normalization),
/// returning the logits node. Parameter nodes carry the plan's slices so
/// the backward pass scatters gradients into exactly the active extents.
pub fn forward_graph<T: Scalar>(
    plan: &Plan,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    input: NodeId,
) -> Result<NodeId> {
    let eps = T::from_f64_val(NORM_EPS);
    let mut cur = input;
    let mut saved: Vec<NodeId> = vec![];
    for step in &plan.steps {
        match step {
            PlanStep::Conv { key, slice, stride, pad, groups, .. } => {
                let w = g.param(store, key, slice_arg(store, key, slice)?)?;
                cur = g.conv2d(cur, w, *stride, *pad, *groups)?;
            }
            PlanStep::Norm { scale_key, shift_key, channels, .. } => {
                let ranges = std::slice::from_ref(channels);
                let sc = g.param(store, scale_key, slice_arg(store, scale_key, ranges)?)?;
                let sh = g.param(store, shift_key, slice_arg(store, shift_key, ranges)?)?;
                cur = g.norm_train(cur, sc, sh, eps)?;
            }
            PlanStep::Act => cur = g.hardswish(cur),
            PlanStep::ResidualSave => saved.push(cur),
            PlanStep::ResidualAdd => {
                let r = saved.pop().ok_or_else(|| {
                    Error::InvalidArgument("residual add without a saved activation".into())
                })?;
                cur = g.add(r, cur)?;
            }
            PlanStep::Pool => cur = g.global_avg_pool(cur)?,
            PlanStep::Fc { w_key, b_key, w_slice, b_slice } => {
                let w = g.param(store, w_key, slice_arg(store, w_key, w_slice)?)?;
                let b = g.param(store, b_key, slice_arg(store, b_key, b_slice)?)?;
                cur = g.linear(cur, w, Some(b))?;
            }
        }
    }
    Ok(cur)
}

impl SearchSpace {
    /// Resources of one architecture's elastic stages at a given input
    /// resolution: FLOPs (1 MAC = 2, bias and normalization excluded),
    /// parameter elements over active slices, and the latency proxy.
    pub fn count_resources(&self, arch: &ArchConfig, resolution: usize) -> Result<ResourceReport> {
        self.count_resources_with(arch, resolution, &LatencyModel::default())
    }

    /// `count_resources` with explicit latency coefficients.
    pub fn count_resources_with(
        &self,
        arch: &ArchConfig,
        resolution: usize,
        latency: &LatencyModel,
    ) -> Result<ResourceReport> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution 0".into()));
        }
        let plan = plan_for(self, arch)?;
        let (mut h, mut w) = (resolution, resolution);
        let mut flops: u64 = 0;
        let mut params: u64 = 0;
        for step in &plan.steps {
            match step {
                PlanStep::Conv { slice, stride, pad, counted, .. } => {
                    let (oc, cig, kh, kw) =
                        (slice[0].len(), slice[1].len(), slice[2].len(), slice[3].len());
                    let oh = conv_out_dim(h, kh, *stride, *pad);
                    let ow = conv_out_dim(w, kw, *stride, *pad);
                    if oh == 0 || ow == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "resolution {resolution} vanishes inside the network"
                        )));
                    }
                    if *counted {
                        flops += conv_flops((oc * oh * ow) as u64, (cig * kh * kw) as u64);
                        params += (oc * cig * kh * kw) as u64;
                    }
                    h = oh;
                    w = ow;
                }
                PlanStep::Norm { channels, counted, .. } => {
                    if *counted {
                        params += 2 * channels.len() as u64;
                    }
                }
                _ => {}
            }
        }
        Ok(ResourceReport {
            flops,
            params,
            latency_ms: latency.ms_per_gflop * (flops as f64 / 1e9) + latency.ms_base,
        })
    }

    /// Parameter elements of the fixed layers (stem, tail, classifier) at
    /// their stored maximal extents. The shared store's total size equals
    /// this plus `count_resources(largest).params`.
    pub fn fixed_param_count(&self) -> u64 {
        let plan = plan_for(self, &self.largest()).expect("largest arch is valid");
        let mut params: u64 = 0;
        for step in &plan.steps {
            match step {
                PlanStep::Conv { slice, counted: false, .. } => {
                    params += slice.iter().map(|r| r.len() as u64).product::<u64>();
                }
                PlanStep::Norm { channels, counted: false, .. } => {
                    params += 2 * channels.len() as u64;
                }
                PlanStep::Fc { w_slice, b_slice, .. } => {
                    params += w_slice.iter().map(|r| r.len() as u64).product::<u64>();
                    params += b_slice[0].len() as u64;
                }
                _ => {}
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn desk() -> SearchSpace {
        SearchSpace::named("desk-tiny").unwrap()
    }

    #[test]
    fn single_conv_layer_flops_closed_form() {
        // A 3x3 conv producing 64 output elements from 1 input channel:
        // 2 * 64 * 9.
        assert_eq!(conv_flops(64, 9), 1152);
    }

    #[test]
    fn kernel_crop_is_centered() {
        assert_eq!(kernel_crop(7, 3), 2..5);
        assert_eq!(kernel_crop(5, 5), 0..5);
        assert_eq!(kernel_crop(5, 3), 1..4);
    }

    #[test]
    fn largest_plan_has_expected_structure() {
        let space = desk();
        let plan = plan_for(&space, &space.largest()).unwrap();
        // Norms: stem + 3 per block * 6 blocks + tail.
        assert_eq!(plan.norm_count, 1 + 18 + 1);
        let convs = plan
            .steps
            .iter()
            .filter(|s| matches!(s, PlanStep::Conv { .. }))
            .count();
        assert_eq!(convs, 1 + 18 + 1);
        assert!(matches!(plan.steps.last(), Some(PlanStep::Fc { .. })));
    }

    #[test]
    fn residual_only_when_widths_line_up() {
        let space = desk();
        let count = |a: &ArchConfig| {
            plan_for(&space, a)
                .unwrap()
                .steps
                .iter()
                .filter(|s| matches!(s, PlanStep::ResidualSave))
                .count()
        };
        // Width set 0, one block per stage: stems 8 channels flow into an
        // 8-wide stage (skip), stage 1 strides (no skip), stage 2 is 8 -> 8
        // stride 1 (skip).
        let mut a = space.smallest();
        assert_eq!(count(&a), 2);
        // Width set 1: the 8 -> 16 jump removes stage 0's skip.
        a.width_idx = 1;
        assert_eq!(count(&a), 1);
        // Depth 2 adds an in-stage 16 -> 16 stride-1 block per stage: skips
        // on every non-striding block.
        a.depths = vec![2, 2, 2];
        assert_eq!(count(&a), 1 + 1 + 2);
    }

    #[test]
    fn forward_shapes_follow_the_strides() {
        let space = desk();
        let plan = plan_for(&space, &space.largest()).unwrap();
        let mut rng = substream(1, "init");
        let store: ParamStore<f32> = init_store_for(&plan, &mut rng);
        let mut xr = substream(2, "x");
        let mut x = Tensor::zeros(&[2, 3, 16, 16]);
        for v in x.data_mut() {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut xr);
        }
        let logits = forward_plain(&plan, &store, &x, NormMode::Train, RunUntil::Logits).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let feat = forward_plain(&plan, &store, &x, NormMode::Train, RunUntil::PrePool).unwrap();
        // 16 -> stem /2 -> 8 -> stage1 /2 -> 4; tail is 32 channels.
        assert_eq!(feat.shape(), &[2, 32, 4, 4]);
    }

    #[test]
    fn graph_forward_matches_plain_forward_exactly() {
        let space = desk();
        let mut rng = substream(3, "init");
        for arch in [space.largest(), space.smallest(), space.medium()] {
            let plan = plan_for(&space, &arch).unwrap();
            let store: ParamStore<f32> = init_store_for(&plan_for(&space, &space.largest()).unwrap(), &mut rng);
            let mut xr = substream(4, "x");
            let mut x = Tensor::zeros(&[2, 3, 16, 16]);
            for v in x.data_mut() {
                *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut xr);
            }
            let plain = forward_plain(&plan, &store, &x, NormMode::Train, RunUntil::Logits).unwrap();
            let mut g: Graph<f32> = Graph::new();
            let xin = g.input(x);
            let out = forward_graph(&plan, &store, &mut g, xin).unwrap();
            assert_eq!(g.value(out).data(), plain.data());
        }
    }

    #[test]
    fn calibrated_eval_matches_train_statistics_on_the_same_batch() {
        let space = desk();
        let arch = space.medium();
        let plan = plan_for(&space, &arch).unwrap();
        let mut rng = substream(5, "init");
        let store: ParamStore<f32> =
            init_store_for(&plan_for(&space, &space.largest()).unwrap(), &mut rng);
        let mut xr = substream(6, "x");
        let mut x = Tensor::zeros(&[8, 3, 16, 16]);
        for v in x.data_mut() {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut xr);
        }
        let mut stats = vec![];
        let calib_out =
            forward_plain(&plan, &store, &x, NormMode::Calibrate(&mut stats), RunUntil::Logits).unwrap();
        assert_eq!(stats.len(), plan.norm_count);
        // Eval with the recorded statistics reproduces the calibration pass
        // bit for bit.
        let eval_out = forward_plain(&plan, &store, &x, NormMode::Eval(&stats), RunUntil::Logits).unwrap();
        assert_eq!(eval_out.data(), calib_out.data());
        // And agrees with train-mode normalization up to rounding.
        let train_out = forward_plain(&plan, &store, &x, NormMode::Train, RunUntil::Logits).unwrap();
        for (a, b) in eval_out.data().iter().zip(train_out.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_zero_calibration_yields_zero_stats() {
        let space = desk();
        let arch = space.smallest();
        let plan = plan_for(&space, &arch).unwrap();
        let mut rng = substream(7, "init");
        let store: ParamStore<f32> =
            init_store_for(&plan_for(&space, &space.largest()).unwrap(), &mut rng);
        let x = Tensor::zeros(&[4, 3, 16, 16]);
        let mut stats = vec![];
        forward_plain(&plan, &store, &x, NormMode::Calibrate(&mut stats), RunUntil::Logits).unwrap();
        // The first layer sees all-zero input: mean and variance are 0 and
        // the epsilon guard keeps the output finite.
        assert!(stats[0].mean.iter().all(|&m| m == 0.0));
        assert!(stats[0].var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_requires_matching_calibration_length() {
        let space = desk();
        let plan = plan_for(&space, &space.smallest()).unwrap();
        let mut rng = substream(8, "init");
        let store: ParamStore<f32> =
            init_store_for(&plan_for(&space, &space.largest()).unwrap(), &mut rng);
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let stats = vec![NormStats { mean: vec![0.0; 8], var: vec![1.0; 8] }];
        let err = forward_plain(&plan, &store, &x, NormMode::Eval(&stats), RunUntil::Logits);
        assert!(err.is_err());
    }

    #[test]
    fn store_total_is_stage_params_plus_fixed_overhead() {
        let space = desk();
        let plan = plan_for(&space, &space.largest()).unwrap();
        let mut rng = substream(9, "init");
        let store: ParamStore<f32> = init_store_for(&plan, &mut rng);
        let stage = space.count_resources(&space.largest(), space.resolution).unwrap().params;
        assert_eq!(store.total_elements(), stage + space.fixed_param_count());
    }

    #[test]
    fn nested_archs_have_nested_slices() {
        let space = desk();
        let small = space.smallest();
        let big = space.largest();
        assert!(small.is_nested_in(&big));
        let sm = plan_for(&space, &small).unwrap().slice_map();
        let bm = plan_for(&space, &big).unwrap().slice_map();
        for (key, ranges) in &sm {
            let br = &bm[key];
            for (a, b) in ranges.iter().zip(br) {
                assert!(b.start <= a.start && a.end <= b.end, "{key}: {a:?} not in {b:?}");
            }
        }
    }

    #[test]
    fn identity_norm_mode_skips_normalization() {
        let space = desk();
        let arch = space.smallest();
        let plan = plan_for(&space, &arch).unwrap();
        let mut rng = substream(10, "init");
        let store: ParamStore<f32> =
            init_store_for(&plan_for(&space, &space.largest()).unwrap(), &mut rng);
        let mut xr = substream(11, "x");
        let mut x = Tensor::zeros(&[1, 3, 16, 16]);
        for v in x.data_mut() {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut xr);
        }
        let a = forward_plain(&plan, &store, &x, NormMode::Identity, RunUntil::PrePool).unwrap();
        let b = forward_plain(&plan, &store, &x, NormMode::Train, RunUntil::PrePool).unwrap();
        assert_ne!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let space = desk();
        let plan = plan_for(&space, &space.largest()).unwrap();
        let s1: ParamStore<f32> = init_store_for(&plan, &mut substream(12, "init"));
        let s2: ParamStore<f32> = init_store_for(&plan, &mut substream(12, "init"));
        for (k, p) in s1.iter() {
            assert_eq!(p.value.data(), s2.value(k).unwrap().data());
        }
    }
}
