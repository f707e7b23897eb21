//! The shared-weight network: one maximal parameter store that every
//! architecture in the space runs against through slice views, plus
//! per-architecture statistics recalibration, standalone extraction, and
//! the model file format.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::plan::{forward_graph, forward_plain, init_store_for, plan_for, NormMode, Plan, RunUntil};
use crate::rng::substream;
use crate::space::{ArchConfig, SearchSpace};
use crate::tensor::{Graph, NodeId, NormStats, ParamStore, Scalar, Tensor};

/// A read-only description of which parameter extents one architecture
/// uses: every touched key mapped to its active ranges in the maximal
/// tensors. Fixed layers appear with full ranges. Construction is
/// deterministic: the same architecture always yields the same view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubnetView {
    pub encoding: String,
    pub slices: BTreeMap<String, Vec<Range<usize>>>,
}

impl SubnetView {
    /// True when every range of `self` lies inside the matching range of
    /// `other` for every shared key.
    pub fn nests_in(&self, other: &SubnetView) -> bool {
        self.slices.iter().all(|(key, ranges)| match other.slices.get(key) {
            Some(big) => ranges
                .iter()
                .zip(big)
                .all(|(a, b)| b.start <= a.start && a.end <= b.end),
            None => false,
        })
    }
}

/// The elastic shared-weight network over one search space.
pub struct Supernet<T: Scalar = f32> {
    space: SearchSpace,
    store: ParamStore<T>,
    calib: BTreeMap<String, Vec<NormStats>>,
}

impl<T: Scalar> Supernet<T> {
    /// Fresh network with fan-in-scaled Gaussian weights sized for the
    /// largest architecture; every subnet shares these tensors.
    pub fn init(space: SearchSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let plan = plan_for(&space, &space.largest())?;
        let mut rng = substream(seed, "supernet-init");
        let store = init_store_for(&plan, &mut rng);
        Ok(Supernet { space, store, calib: BTreeMap::new() })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// The slice view of one architecture.
    pub fn slice_view(&self, arch: &ArchConfig) -> Result<SubnetView> {
        let plan = plan_for(&self.space, arch)?;
        Ok(SubnetView { encoding: arch.encode(), slices: plan.slice_map() })
    }

    fn plan(&self, arch: &ArchConfig) -> Result<Plan> {
        plan_for(&self.space, arch)
    }

    /// Logits with train-mode (per-batch) normalization, no gradients.
    pub fn forward_train(&self, arch: &ArchConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward_plain(&self.plan(arch)?, &self.store, x, NormMode::Train, RunUntil::Logits)
    }

    /// Logits with this architecture's calibrated statistics. Errors until
    /// `recalibrate` has run for the architecture (weights change during
    /// training, so stale statistics are never substituted silently).
    pub fn forward_eval(&self, arch: &ArchConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
        let key = arch.canonical(&self.space).encode();
        let stats = self
            .calib
            .get(&key)
            .ok_or_else(|| Error::MissingCalibration { arch: arch.encode() })?;
        forward_plain(&self.plan(arch)?, &self.store, x, NormMode::Eval(stats), RunUntil::Logits)
    }

    /// Recompute and cache this architecture's normalization statistics
    /// from one calibration batch. Keyed by functional identity, so two
    /// encodings differing only in inactive blocks share statistics.
    pub fn recalibrate(&mut self, arch: &ArchConfig, calib_batch: &Tensor<T>) -> Result<()> {
        let plan = self.plan(arch)?;
        let mut stats = vec![];
        forward_plain(&plan, &self.store, calib_batch, NormMode::Calibrate(&mut stats), RunUntil::Logits)?;
        self.calib.insert(arch.canonical(&self.space).encode(), stats);
        Ok(())
    }

    /// Whether `forward_eval` would succeed for this architecture.
    pub fn is_calibrated(&self, arch: &ArchConfig) -> bool {
        self.calib.contains_key(&arch.canonical(&self.space).encode())
    }

    /// Drop all cached statistics (they go stale whenever weights move).
    pub fn clear_calibration(&mut self) {
        self.calib.clear();
    }

    /// Build one subnet's training forward into a shared graph, returning
    /// the logits node. Parameters enter as sliced views so the backward
    /// pass scatters gradients into exactly the active extents.
    pub fn forward_into_graph(
        &self,
        g: &mut Graph<T>,
        arch: &ArchConfig,
        input: NodeId,
    ) -> Result<NodeId> {
        forward_graph(&self.plan(arch)?, &self.store, g, input)
    }

    /// Accumulate gradients from one training step's per-subnet losses: one
    /// backward pass per (architecture, loss) pair, summing into the shared
    /// store. Listing the same architecture twice with the same loss
    /// doubles its gradients. The caller then takes a single optimizer
    /// step.
    pub fn accumulate_step_grads(
        &mut self,
        archs: &[ArchConfig],
        graph: &Graph<T>,
        losses: &[NodeId],
    ) -> Result<()> {
        if archs.len() != losses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} architectures with {} losses",
                archs.len(),
                losses.len()
            )));
        }
        for &loss in losses {
            graph.backward(loss, &mut self.store)?;
        }
        Ok(())
    }

    /// Copy one architecture's active slices out into an independent
    /// network with its own (exactly-sized) tensors.
    pub fn extract_standalone(&self, arch: &ArchConfig) -> Result<Standalone<T>> {
        let plan = self.plan(arch)?;
        let mut store = ParamStore::new();
        for (key, ranges) in plan.slice_map() {
            store.insert(&key, self.store.value_slice(&key, Some(&ranges))?);
        }
        let calib = self.calib.get(&arch.canonical(&self.space).encode()).cloned();
        Ok(Standalone { space: self.space.clone(), arch: arch.clone(), store, calib })
    }

    /// Serialize to a model file. A shared network is stored as its space,
    /// the largest encoding, and the full maximal tensors; statistics are
    /// not persisted (recalibrate after loading).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(path, &self.space, &self.space.largest(), &self.store)
    }

    /// Load a model file that holds a full shared network.
    pub fn load(path: &Path) -> Result<Self> {
        match load_model(path)? {
            LoadedModel::Shared(net) => Ok(net),
            LoadedModel::Single(single) => Err(Error::InvalidArgument(format!(
                "{} holds a single extracted network ({}), not a shared one",
                path.display(),
                single.arch.encode()
            ))),
        }
    }
}

/// An extracted network: one architecture with its own exactly-sized
/// parameter tensors, independent of the shared store it came from.
pub struct Standalone<T: Scalar = f32> {
    pub space: SearchSpace,
    pub arch: ArchConfig,
    store: ParamStore<T>,
    calib: Option<Vec<NormStats>>,
}

impl<T: Scalar> Standalone<T> {
    /// Fresh standalone network with fan-in-scaled Gaussian weights, sized
    /// to the architecture's active extents.
    pub fn init(space: SearchSpace, arch: ArchConfig, seed: u64) -> Result<Self> {
        space.validate_arch(&arch)?;
        let plan = plan_for(&space, &arch)?;
        let mut rng = substream(seed, "supernet-init");
        let store = init_store_for(&plan, &mut rng);
        Ok(Standalone { space, arch, store, calib: None })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn plan(&self) -> Result<Plan> {
        plan_for(&self.space, &self.arch)
    }

    /// Logits with train-mode (per-batch) normalization, no gradients.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward_plain(&self.plan()?, &self.store, x, NormMode::Train, RunUntil::Logits)
    }

    /// Logits with calibrated statistics; errors until `recalibrate` runs.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = self
            .calib
            .as_ref()
            .ok_or_else(|| Error::MissingCalibration { arch: self.arch.encode() })?;
        forward_plain(&self.plan()?, &self.store, x, NormMode::Eval(stats), RunUntil::Logits)
    }

    /// Recompute normalization statistics from one calibration batch.
    pub fn recalibrate(&mut self, calib_batch: &Tensor<T>) -> Result<()> {
        let plan = self.plan()?;
        let mut stats = vec![];
        forward_plain(&plan, &self.store, calib_batch, NormMode::Calibrate(&mut stats), RunUntil::Logits)?;
        self.calib = Some(stats);
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.calib.is_some()
    }

    /// Build the training forward into a graph, returning the logits node.
    pub fn forward_into_graph(&self, g: &mut Graph<T>, input: NodeId) -> Result<NodeId> {
        forward_graph(&self.plan()?, &self.store, g, input)
    }

    /// Serialize to a model file (weights only; statistics are rebuilt by
    /// recalibrating after load).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(path, &self.space, &self.arch, &self.store)
    }

    /// Load a model file holding an extracted network. A file holding a
    /// full shared network loads too (its architecture is the largest).
    pub fn load(path: &Path) -> Result<Self> {
        match load_model(path)? {
            LoadedModel::Single(s) => Ok(s),
            LoadedModel::Shared(net) => {
                let arch = net.space.largest();
                Ok(Standalone { space: net.space, arch, store: net.store, calib: None })
            }
        }
    }
}

/// What a model file turned out to contain.
pub enum LoadedModel<T: Scalar> {
    /// The architecture was the space's largest: a full shared network.
    Shared(Supernet<T>),
    /// Any other architecture: an extracted standalone network.
    Single(Standalone<T>),
}

/// Every key and shape the plan expects, for store validation.
fn expected_shapes(plan: &Plan) -> BTreeMap<String, Vec<usize>> {
    plan.slice_map()
        .into_iter()
        .map(|(k, ranges)| (k, ranges.iter().map(|r| r.len()).collect()))
        .collect()
}

fn check_store_matches<T: Scalar>(plan: &Plan, store: &ParamStore<T>) -> Result<()> {
    let want = expected_shapes(plan);
    for (key, shape) in &want {
        let got = store.value(key)?;
        if got.shape() != shape.as_slice() {
            return Err(Error::DimensionMismatch {
                op: "model load",
                detail: format!("{key}: stored {:?}, plan wants {:?}", got.shape(), shape),
            });
        }
    }
    for key in store.keys() {
        if !want.contains_key(key) {
            return Err(Error::InvalidArgument(format!("model holds unknown parameter '{key}'")));
        }
    }
    Ok(())
}

const MODEL_MAGIC: &[u8; 4] = b"ENAS";
const MODEL_VERSION: u16 = 1;

/// Write the model format: magic, version, space text, architecture
/// encoding, then each parameter as (path, dtype, shape, little-endian
/// row-major payload) in key order.
fn write_model<T: Scalar>(
    path: &Path,
    space: &SearchSpace,
    arch: &ArchConfig,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut out: Vec<u8> = vec![];
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let space_text = space.to_text();
    out.extend_from_slice(&(space_text.len() as u32).to_le_bytes());
    out.extend_from_slice(space_text.as_bytes());
    let enc = arch.encode();
    out.extend_from_slice(&(enc.len() as u32).to_le_bytes());
    out.extend_from_slice(enc.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (key, param) in store.iter() {
        let t = &param.value;
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.push(T::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            if T::DTYPE == 0 {
                out.extend_from_slice(&(v.to_f64_val() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64_val().to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Parse a model file, classifying it as shared or standalone by whether
/// its architecture is the space's largest.
pub fn load_model<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let mut r = ByteReader::new(std::fs::read(path)?);
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic (not a model file)".into() });
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let space_len = r.u32("space length")? as usize;
    let space_text = r.string(space_len, "space text")?;
    let space = SearchSpace::from_text(&space_text)?;
    let enc_len = r.u32("encoding length")? as usize;
    let enc = r.string(enc_len, "architecture encoding")?;
    let arch = ArchConfig::decode(&enc, &space)?;
    let n_params = r.u32("parameter count")? as usize;
    let mut store: ParamStore<T> = ParamStore::new();
    for _ in 0..n_params {
        let path_len = r.u16("path length")? as usize;
        let key = r.string(path_len, "parameter path")?;
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Format {
                offset: r.off as u64 - 1,
                reason: format!("parameter '{key}' has dtype code {dtype}, wanted {}", T::DTYPE),
            });
        }
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("shape extent")? as usize);
        }
        let count: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(
            Error::Format { offset: r.off as u64, reason: format!("shape overflow in '{key}'") },
        )?;
        let elem = if dtype == 0 { 4 } else { 8 };
        let raw = r.take(count * elem, "parameter payload")?;
        let mut data = Vec::with_capacity(count);
        if dtype == 0 {
            for c in raw.chunks_exact(4) {
                data.push(T::from_f64_val(f32::from_le_bytes(c.try_into().expect("len 4")) as f64));
            }
        } else {
            for c in raw.chunks_exact(8) {
                data.push(T::from_f64_val(f64::from_le_bytes(c.try_into().expect("len 8"))));
            }
        }
        if store.contains(&key) {
            return Err(Error::Format {
                offset: r.off as u64,
                reason: format!("duplicate parameter '{key}'"),
            });
        }
        store.insert(&key, Tensor::from_vec(&shape, data)?);
    }
    r.finish()?;
    let plan = plan_for(&space, &arch)?;
    check_store_matches(&plan, &store)?;
    if arch == space.largest() {
        Ok(LoadedModel::Shared(Supernet { space, store, calib: BTreeMap::new() }))
    } else {
        Ok(LoadedModel::Single(Standalone { space, arch, store, calib: None }))
    }
}
