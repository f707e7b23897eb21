//! The candidate family: stage-structured choice sets, architecture
//! configurations, canonical string encoding, sampling, and exact counting.

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;

use crate::error::{Error, Result};

/// One elastic stage: a run of inverted-bottleneck blocks sharing choice
/// sets. Depth picks how many leading blocks are active; each block has its
/// own kernel and expand choice. Width comes from the space-level width
/// sets (one global multiplier index picks a channel count per stage).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// Allowed active-block counts, ascending, each >= 1.
    pub depths: Vec<usize>,
    /// Allowed depthwise kernel sizes, ascending, odd.
    pub kernels: Vec<usize>,
    /// Allowed hidden-channel expansion ratios, ascending.
    pub expands: Vec<usize>,
    /// Stride of the first block in the stage; later blocks use stride 1.
    pub stride: usize,
}

impl StageSpec {
    /// The largest allowed depth; blocks beyond it never exist.
    pub fn max_depth(&self) -> usize {
        *self.depths.iter().max().expect("validated non-empty")
    }
}

/// A non-elastic inverted-bottleneck block placed between the stem and the
/// first stage (e.g. the fixed 16-channel block of the MobileNetV3 family).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedBlock {
    pub out: usize,
    pub kernel: usize,
    pub expand: usize,
    pub stride: usize,
}

/// The full search space: fixed stem and tail, elastic stages, and the
/// global width sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub name: String,
    pub resolution: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_blocks: Vec<FixedBlock>,
    pub stages: Vec<StageSpec>,
    /// Per-multiplier stage widths: `width_sets[m][s]` is the channel count
    /// of stage `s` under multiplier `m`. Sets are elementwise ascending.
    pub width_sets: Vec<Vec<usize>>,
    /// Fixed 1x1 conv widths applied after the last stage, before pooling.
    pub tail_channels: Vec<usize>,
}

/// One point in the space. Kernel/expand choices are stored for every block
/// up to the stage's maximal depth; blocks at index >= depth are inactive
/// but their choices are retained so the encoding is stable and sampling
/// stays uniform per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub width_idx: usize,
    pub depths: Vec<usize>,
    pub kernels: Vec<Vec<usize>>,
    pub expands: Vec<Vec<usize>>,
}

/// Resource usage of one architecture's elastic stages. The fixed stem,
/// tail, and classifier are identical for every candidate and excluded.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResourceReport {
    /// Floating-point operations per image; one multiply-accumulate counts
    /// as 2, bias and normalization excluded.
    pub flops: u64,
    /// Parameter elements over the active slices (conv weights plus
    /// normalization affines).
    pub params: u64,
    /// Linear FLOPs-to-milliseconds proxy.
    pub latency_ms: f64,
}

/// Coefficients of the latency proxy: ms = a * GFLOPs + b.
#[derive(Clone, Copy, Debug)]
pub struct LatencyModel {
    pub ms_per_gflop: f64,
    pub ms_base: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { ms_per_gflop: 50.0, ms_base: 1.0 }
    }
}

impl SearchSpace {
    /// A named preset space. `desk-tiny` is the fast experimental space;
    /// the other three reproduce the full-size families structurally.
    pub fn named(name: &str) -> Result<SearchSpace> {
        let space = match name {
            "desk-tiny" => SearchSpace {
                name: "desk-tiny".into(),
                resolution: 16,
                in_channels: 3,
                num_classes: 10,
                stem_channels: 8,
                stem_kernel: 3,
                stem_stride: 2,
                stem_blocks: vec![],
                stages: (0..3)
                    .map(|s| StageSpec {
                        depths: vec![1, 2],
                        kernels: vec![3, 5],
                        expands: vec![2, 4],
                        stride: if s == 1 { 2 } else { 1 },
                    })
                    .collect(),
                width_sets: vec![vec![8, 8, 8], vec![16, 16, 16]],
                tail_channels: vec![32],
            },
            "mbv3-large" => SearchSpace {
                name: "mbv3-large".into(),
                resolution: 32,
                in_channels: 3,
                num_classes: 10,
                stem_channels: 16,
                stem_kernel: 3,
                stem_stride: 2,
                stem_blocks: vec![FixedBlock { out: 16, kernel: 3, expand: 1, stride: 1 }],
                stages: [2, 2, 2, 1, 2]
                    .iter()
                    .map(|&stride| StageSpec {
                        depths: vec![2, 3, 4],
                        kernels: vec![3, 5, 7],
                        expands: vec![3, 4, 6],
                        stride,
                    })
                    .collect(),
                width_sets: vec![vec![12, 20, 40, 56, 80], vec![24, 40, 80, 112, 160]],
                tail_channels: vec![960, 1280],
            },
            "mbv3-small" => SearchSpace {
                name: "mbv3-small".into(),
                resolution: 32,
                in_channels: 3,
                num_classes: 10,
                stem_channels: 16,
                stem_kernel: 3,
                stem_stride: 2,
                stem_blocks: vec![],
                stages: [2, 2, 1, 2]
                    .iter()
                    .map(|&stride| StageSpec {
                        depths: vec![2, 3, 4],
                        kernels: vec![3, 5],
                        expands: vec![3, 4, 6],
                        stride,
                    })
                    .collect(),
                width_sets: vec![vec![12, 20, 24, 48], vec![24, 40, 48, 96], vec![36, 60, 72, 144]],
                tail_channels: vec![576, 1024],
            },
            "proxyless" => SearchSpace {
                name: "proxyless".into(),
                resolution: 32,
                in_channels: 3,
                num_classes: 10,
                stem_channels: 16,
                stem_kernel: 3,
                stem_stride: 2,
                stem_blocks: vec![],
                stages: [2, 2, 2, 1, 2]
                    .iter()
                    .map(|&stride| StageSpec {
                        depths: vec![2, 3, 4],
                        kernels: vec![3, 5, 7],
                        expands: vec![3, 4, 6],
                        stride,
                    })
                    .collect(),
                width_sets: vec![vec![24, 40, 80, 96, 192]],
                tail_channels: vec![960, 1280],
            },
            other => {
                return Err(Error::SpaceValidation(format!(
                    "unknown space '{other}' (expected desk-tiny, mbv3-large, mbv3-small, or proxyless)"
                )))
            }
        };
        space.validate()?;
        Ok(space)
    }

    /// Structural consistency checks; every constructor funnels through this.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::SpaceValidation(msg));
        if self.stages.is_empty() {
            return fail("space has no stages".into());
        }
        if self.resolution == 0 || self.in_channels == 0 || self.num_classes < 2 {
            return fail(format!(
                "resolution {}, in_channels {}, classes {} (need >0, >0, >=2)",
                self.resolution, self.in_channels, self.num_classes
            ));
        }
        if self.stem_channels == 0 || self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return fail("stem must have channels > 0, odd kernel, stride > 0".into());
        }
        for (i, b) in self.stem_blocks.iter().enumerate() {
            if b.out == 0 || b.kernel % 2 == 0 || b.expand == 0 || b.stride == 0 {
                return fail(format!("stem block {i} has an invalid field"));
            }
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.depths.is_empty() || st.kernels.is_empty() || st.expands.is_empty() {
                return fail(format!("stage {s} has an empty choice set"));
            }
            if st.depths.iter().any(|&d| d == 0) {
                return fail(format!("stage {s} allows depth 0"));
            }
            if st.kernels.iter().any(|&k| k % 2 == 0) {
                return fail(format!("stage {s} has an even kernel choice"));
            }
            if st.expands.iter().any(|&e| e == 0) {
                return fail(format!("stage {s} allows expand 0"));
            }
            for (name, v) in [("depths", &st.depths), ("kernels", &st.kernels), ("expands", &st.expands)] {
                if v.windows(2).any(|w| w[0] >= w[1]) {
                    return fail(format!("stage {s} {name} must be strictly ascending"));
                }
            }
            if st.stride == 0 {
                return fail(format!("stage {s} has stride 0"));
            }
        }
        if self.width_sets.is_empty() {
            return fail("space has no width sets".into());
        }
        for (m, set) in self.width_sets.iter().enumerate() {
            if set.len() != self.stages.len() {
                return fail(format!(
                    "width set {m} covers {} stages, space has {}",
                    set.len(),
                    self.stages.len()
                ));
            }
            if set.iter().any(|&w| w == 0) {
                return fail(format!("width set {m} contains 0"));
            }
        }
        // Slicing takes channel prefixes, so later sets must dominate
        // earlier ones elementwise for subnet nesting to hold.
        for m in 1..self.width_sets.len() {
            for s in 0..self.stages.len() {
                if self.width_sets[m][s] < self.width_sets[m - 1][s] {
                    return fail(format!(
                        "width sets must be elementwise ascending (set {m} stage {s})"
                    ));
                }
            }
        }
        if self.tail_channels.iter().any(|&c| c == 0) {
            return fail("tail channel of 0".into());
        }
        // The feature map must stay non-empty through every downsampling.
        let mut res = self.resolution;
        res = conv_span(res, self.stem_stride, "stem", &fail)?;
        for b in &self.stem_blocks {
            res = conv_span(res, b.stride, "stem block", &fail)?;
        }
        for (s, st) in self.stages.iter().enumerate() {
            res = conv_span(res, st.stride, &format!("stage {s}"), &fail)?;
        }
        Ok(())
    }

    /// Check that an architecture is a member of this space, including the
    /// retained choices of its inactive blocks.
    pub fn validate_arch(&self, arch: &ArchConfig) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArch(msg));
        if arch.width_idx >= self.width_sets.len() {
            return fail(format!(
                "width index {} out of {} sets",
                arch.width_idx,
                self.width_sets.len()
            ));
        }
        if arch.depths.len() != self.stages.len()
            || arch.kernels.len() != self.stages.len()
            || arch.expands.len() != self.stages.len()
        {
            return fail(format!(
                "arch covers {} stages, space has {}",
                arch.depths.len(),
                self.stages.len()
            ));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if !st.depths.contains(&arch.depths[s]) {
                return fail(format!("stage {s} depth {} not a choice", arch.depths[s]));
            }
            let maxd = st.max_depth();
            if arch.kernels[s].len() != maxd || arch.expands[s].len() != maxd {
                return fail(format!(
                    "stage {s} needs {} block choices, got {}/{}",
                    maxd,
                    arch.kernels[s].len(),
                    arch.expands[s].len()
                ));
            }
            for b in 0..maxd {
                if !st.kernels.contains(&arch.kernels[s][b]) {
                    return fail(format!("stage {s} block {b} kernel {} not a choice", arch.kernels[s][b]));
                }
                if !st.expands.contains(&arch.expands[s][b]) {
                    return fail(format!("stage {s} block {b} expand {} not a choice", arch.expands[s][b]));
                }
            }
        }
        Ok(())
    }

    /// Exact number of distinct candidate networks: width sets times, per
    /// stage, the sum over allowed depths of (kernels * expands)^depth.
    /// Inactive-block choice retention does not change this count; two
    /// configs differing only in inactive blocks are the same network.
    pub fn count_subnets(&self) -> BigUint {
        let mut total = BigUint::from(self.width_sets.len());
        for st in &self.stages {
            let per_block = BigUint::from(st.kernels.len() * st.expands.len());
            let mut stage_sum = BigUint::from(0u32);
            for &d in &st.depths {
                stage_sum += per_block.pow(d as u32);
            }
            total *= stage_sum;
        }
        total
    }

    /// Uniform per-dimension sample. Draw order is fixed: width index, then
    /// per stage its depth, then per block (kernel, expand) for every block
    /// up to the stage's maximal depth.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> ArchConfig {
        let width_idx = rng.gen_range(0..self.width_sets.len());
        let mut depths = Vec::with_capacity(self.stages.len());
        let mut kernels = Vec::with_capacity(self.stages.len());
        let mut expands = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            depths.push(st.depths[rng.gen_range(0..st.depths.len())]);
            let maxd = st.max_depth();
            let mut ks = Vec::with_capacity(maxd);
            let mut es = Vec::with_capacity(maxd);
            for _ in 0..maxd {
                ks.push(st.kernels[rng.gen_range(0..st.kernels.len())]);
                es.push(st.expands[rng.gen_range(0..st.expands.len())]);
            }
            kernels.push(ks);
            expands.push(es);
        }
        ArchConfig { width_idx, depths, kernels, expands }
    }

    /// The maximal architecture (the teacher A).
    pub fn largest(&self) -> ArchConfig {
        self.pick(|v| v[v.len() - 1])
    }

    /// The minimal architecture.
    pub fn smallest(&self) -> ArchConfig {
        self.pick(|v| v[0])
    }

    /// Per-dimension lower-median architecture, used as the "medium"
    /// evaluation point.
    pub fn medium(&self) -> ArchConfig {
        self.pick(|v| v[(v.len() - 1) / 2])
    }

    fn pick(&self, f: impl Fn(&[usize]) -> usize) -> ArchConfig {
        let widths: Vec<usize> = (0..self.width_sets.len()).collect();
        ArchConfig {
            width_idx: f(&widths),
            depths: self.stages.iter().map(|st| f(&st.depths)).collect(),
            kernels: self
                .stages
                .iter()
                .map(|st| vec![f(&st.kernels); st.max_depth()])
                .collect(),
            expands: self
                .stages
                .iter()
                .map(|st| vec![f(&st.expands); st.max_depth()])
                .collect(),
        }
    }

    /// All distinct networks in canonical form (inactive blocks set to the
    /// first kernel/expand choice). Returns None when the space holds more
    /// than `limit` candidates.
    pub fn enumerate_canonical(&self, limit: usize) -> Option<Vec<ArchConfig>> {
        if self.count_subnets() > BigUint::from(limit) {
            return None;
        }
        let mut out = vec![];
        let mut arch = self.smallest();
        self.enum_rec(0, &mut arch, &mut out);
        Some(out)
    }

    fn enum_rec(&self, stage: usize, arch: &mut ArchConfig, out: &mut Vec<ArchConfig>) {
        if stage == self.stages.len() {
            for w in 0..self.width_sets.len() {
                arch.width_idx = w;
                out.push(arch.clone());
            }
            return;
        }
        let st = &self.stages[stage];
        let maxd = st.max_depth();
        for &d in &st.depths {
            arch.depths[stage] = d;
            // Reset all blocks to canonical, then spin the active ones.
            for b in 0..maxd {
                arch.kernels[stage][b] = st.kernels[0];
                arch.expands[stage][b] = st.expands[0];
            }
            self.block_rec(stage, 0, d, arch, out);
        }
    }

    fn block_rec(
        &self,
        stage: usize,
        block: usize,
        depth: usize,
        arch: &mut ArchConfig,
        out: &mut Vec<ArchConfig>,
    ) {
        if block == depth {
            self.enum_rec(stage + 1, arch, out);
            return;
        }
        let st = &self.stages[stage];
        for ki in 0..st.kernels.len() {
            for ei in 0..st.expands.len() {
                arch.kernels[stage][block] = st.kernels[ki];
                arch.expands[stage][block] = st.expands[ei];
                self.block_rec(stage, block + 1, depth, arch, out);
            }
        }
        arch.kernels[stage][block] = st.kernels[0];
        arch.expands[stage][block] = st.expands[0];
    }

    /// Active stage widths for an architecture.
    pub fn widths_for(&self, arch: &ArchConfig) -> &[usize] {
        &self.width_sets[arch.width_idx]
    }

    /// Maximal width of each stage (the last width set).
    pub fn max_widths(&self) -> &[usize] {
        self.width_sets.last().expect("validated non-empty")
    }

    /// Replace the class count (e.g. to match a dataset before building a
    /// network).
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    /// Serialize to the space text format (see `from_text`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("name = {}\n", self.name));
        s.push_str(&format!("resolution = {}\n", self.resolution));
        s.push_str(&format!("in_channels = {}\n", self.in_channels));
        s.push_str(&format!("classes = {}\n", self.num_classes));
        s.push_str(&format!(
            "stem = channels:{} kernel:{} stride:{}\n",
            self.stem_channels, self.stem_kernel, self.stem_stride
        ));
        for b in &self.stem_blocks {
            s.push_str(&format!(
                "stem_block = out:{} kernel:{} expand:{} stride:{}\n",
                b.out, b.kernel, b.expand, b.stride
            ));
        }
        for st in &self.stages {
            s.push_str(&format!(
                "stage = depths:{} kernels:{} expands:{} stride:{}\n",
                join(&st.depths),
                join(&st.kernels),
                join(&st.expands),
                st.stride
            ));
        }
        let sets: Vec<String> = self.width_sets.iter().map(|w| join(w)).collect();
        s.push_str(&format!("width_sets = {}\n", sets.join(" | ")));
        s.push_str(&format!("tail = {}\n", join(&self.tail_channels)));
        s
    }

    /// Parse the space text format: `key = value` lines, `#` comments,
    /// repeated `stage` and `stem_block` lines in order. Unknown keys are
    /// errors.
    pub fn from_text(text: &str) -> Result<SearchSpace> {
        let mut name = None;
        let mut resolution = None;
        let mut in_channels = None;
        let mut classes = None;
        let mut stem = None;
        let mut stem_blocks = vec![];
        let mut stages = vec![];
        let mut width_sets: Option<Vec<Vec<usize>>> = None;
        let mut tail = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::SpaceValidation(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::SpaceValidation(format!("line {}: bad {what}: '{value}'", lineno + 1))
            };
            match key {
                "name" => name = Some(value.to_string()),
                "resolution" => resolution = Some(value.parse().map_err(|_| bad("resolution"))?),
                "in_channels" => in_channels = Some(value.parse().map_err(|_| bad("in_channels"))?),
                "classes" => classes = Some(value.parse().map_err(|_| bad("classes"))?),
                "stem" => {
                    let f = parse_fields(value, &["channels", "kernel", "stride"])
                        .map_err(|e| Error::SpaceValidation(format!("line {}: {e}", lineno + 1)))?;
                    stem = Some((f[0][0], f[1][0], f[2][0]));
                }
                "stem_block" => {
                    let f = parse_fields(value, &["out", "kernel", "expand", "stride"])
                        .map_err(|e| Error::SpaceValidation(format!("line {}: {e}", lineno + 1)))?;
                    stem_blocks.push(FixedBlock { out: f[0][0], kernel: f[1][0], expand: f[2][0], stride: f[3][0] });
                }
                "stage" => {
                    let f = parse_fields(value, &["depths", "kernels", "expands", "stride"])
                        .map_err(|e| Error::SpaceValidation(format!("line {}: {e}", lineno + 1)))?;
                    stages.push(StageSpec {
                        depths: f[0].clone(),
                        kernels: f[1].clone(),
                        expands: f[2].clone(),
                        stride: f[3][0],
                    });
                }
                "width_sets" => {
                    let sets: Result<Vec<Vec<usize>>> = value
                        .split('|')
                        .map(|part| parse_list(part).map_err(|e| Error::SpaceValidation(e)))
                        .collect();
                    width_sets = Some(sets?);
                }
                "tail" => tail = Some(parse_list(value).map_err(Error::SpaceValidation)?),
                other => {
                    return Err(Error::SpaceValidation(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        let (stem_channels, stem_kernel, stem_stride) =
            stem.ok_or_else(|| Error::SpaceValidation("missing 'stem' line".into()))?;
        let space = SearchSpace {
            name: name.ok_or_else(|| Error::SpaceValidation("missing 'name'".into()))?,
            resolution: resolution.ok_or_else(|| Error::SpaceValidation("missing 'resolution'".into()))?,
            in_channels: in_channels.ok_or_else(|| Error::SpaceValidation("missing 'in_channels'".into()))?,
            num_classes: classes.ok_or_else(|| Error::SpaceValidation("missing 'classes'".into()))?,
            stem_channels,
            stem_kernel,
            stem_stride,
            stem_blocks,
            stages,
            width_sets: width_sets.ok_or_else(|| Error::SpaceValidation("missing 'width_sets'".into()))?,
            tail_channels: tail.unwrap_or_default(),
        };
        space.validate()?;
        Ok(space)
    }
}

/// Validation helper: track spatial size through a stride, failing when the
/// map would vanish.
fn conv_span(
    res: usize,
    stride: usize,
    what: &str,
    fail: &impl Fn(String) -> Result<()>,
) -> Result<usize> {
    let next = (res + stride - 1) / stride;
    if next == 0 {
        fail(format!("{what} downsamples a {res}px map to nothing"))?;
    }
    Ok(next)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.trim()
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer list '{s}'")))
        .collect()
}

/// Parse `key:val key:val ...` with a fixed expected key order; list-valued
/// fields use commas.
fn parse_fields(s: &str, keys: &[&str]) -> std::result::Result<Vec<Vec<usize>>, String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(format!("expected fields {keys:?}, got '{s}'"));
    }
    let mut out = Vec::with_capacity(keys.len());
    for (part, want) in parts.iter().zip(keys) {
        let (k, v) = part
            .split_once(':')
            .ok_or_else(|| format!("expected '{want}:<values>', got '{part}'"))?;
        if k != *want {
            return Err(format!("expected field '{want}', got '{k}'"));
        }
        out.push(parse_list(v)?);
    }
    Ok(out)
}

impl ArchConfig {
    /// Canonical string form: `w<idx>|d<d1>,...|k<...>|e<...>` with kernel
    /// and expand lists flattened across stages (maximal-depth blocks,
    /// inactive ones included).
    pub fn encode(&self) -> String {
        let flat = |vv: &[Vec<usize>]| {
            vv.iter()
                .flat_map(|v| v.iter())
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!("w{}|d{}|k{}|e{}", self.width_idx, join(&self.depths), flat(&self.kernels), flat(&self.expands))
    }

    /// Parse and validate an encoding against a space.
    pub fn decode(input: &str, space: &SearchSpace) -> Result<ArchConfig> {
        let err = |reason: String| Error::DecodeError { input: input.to_string(), reason };
        let parts: Vec<&str> = input.split('|').collect();
        if parts.len() != 4 {
            return Err(err(format!("expected 4 '|' fields, got {}", parts.len())));
        }
        let field = |idx: usize, prefix: char| -> Result<&str> {
            parts[idx]
                .strip_prefix(prefix)
                .ok_or_else(|| err(format!("field {} must start with '{prefix}'", idx + 1)))
        };
        let width_idx: usize = field(0, 'w')?
            .parse()
            .map_err(|_| err("bad width index".into()))?;
        let nums = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|p| p.parse::<usize>().map_err(|_| err(format!("bad integer '{p}'"))))
                .collect()
        };
        let depths = nums(field(1, 'd')?)?;
        let flat_k = nums(field(2, 'k')?)?;
        let flat_e = nums(field(3, 'e')?)?;
        if depths.len() != space.stages.len() {
            return Err(err(format!(
                "{} depth entries for {} stages",
                depths.len(),
                space.stages.len()
            )));
        }
        let total: usize = space.stages.iter().map(|st| st.max_depth()).sum();
        if flat_k.len() != total || flat_e.len() != total {
            return Err(err(format!(
                "kernel/expand lists must have {total} entries, got {}/{}",
                flat_k.len(),
                flat_e.len()
            )));
        }
        let mut kernels = vec![];
        let mut expands = vec![];
        let mut off = 0;
        for st in &space.stages {
            let maxd = st.max_depth();
            kernels.push(flat_k[off..off + maxd].to_vec());
            expands.push(flat_e[off..off + maxd].to_vec());
            off += maxd;
        }
        let arch = ArchConfig { width_idx, depths, kernels, expands };
        space
            .validate_arch(&arch)
            .map_err(|e| err(format!("not in space: {e}")))?;
        Ok(arch)
    }

    /// Functional identity: the same network with inactive blocks reset to
    /// the first choice. Two configs are the same network iff their
    /// canonical encodings match.
    pub fn canonical(&self, space: &SearchSpace) -> ArchConfig {
        let mut c = self.clone();
        for (s, st) in space.stages.iter().enumerate() {
            for b in self.depths[s]..st.max_depth() {
                c.kernels[s][b] = st.kernels[0];
                c.expands[s][b] = st.expands[0];
            }
        }
        c
    }

    /// True when every active choice of `self` is <= the corresponding
    /// choice of `other` (so self's parameter slices nest inside other's).
    /// Only active blocks matter; inactive choices are cosmetic.
    pub fn is_nested_in(&self, other: &ArchConfig) -> bool {
        if self.width_idx > other.width_idx {
            return false;
        }
        for s in 0..self.depths.len() {
            if self.depths[s] > other.depths[s] {
                return false;
            }
            for b in 0..self.depths[s] {
                if self.kernels[s][b] > other.kernels[s][b] || self.expands[s][b] > other.expands[s][b] {
                    return false;
                }
            }
        }
        true
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn named_spaces_validate() {
        for name in ["desk-tiny", "mbv3-large", "mbv3-small", "proxyless"] {
            SearchSpace::named(name).unwrap();
        }
        assert!(SearchSpace::named("nope").is_err());
    }

    #[test]
    fn counting_matches_the_closed_form() {
        // Per stage: sum over depths of (|K|*|E|)^d, then product, times
        // width sets. These big-integer values are computed independently
        // of count_subnets' loop structure.
        let large = SearchSpace::named("mbv3-large").unwrap();
        let per_stage = BigUint::from(9u32).pow(2) + BigUint::from(9u32).pow(3) + BigUint::from(9u32).pow(4);
        assert_eq!(per_stage, BigUint::from(7371u32));
        assert_eq!(large.count_subnets(), BigUint::from(2u32) * per_stage.pow(5));

        let small = SearchSpace::named("mbv3-small").unwrap();
        let per_stage = BigUint::from(6u32).pow(2) + BigUint::from(6u32).pow(3) + BigUint::from(6u32).pow(4);
        assert_eq!(per_stage, BigUint::from(1548u32));
        assert_eq!(small.count_subnets(), BigUint::from(3u32) * per_stage.pow(4));

        let proxy = SearchSpace::named("proxyless").unwrap();
        assert_eq!(proxy.count_subnets(), BigUint::from(7371u32).pow(5));
    }

    #[test]
    fn full_scale_counts_land_in_the_published_magnitudes() {
        let large = SearchSpace::named("mbv3-large").unwrap().count_subnets();
        // ~4e19 to one significant figure.
        assert!(large > BigUint::parse_bytes(b"35000000000000000000", 10).unwrap());
        assert!(large < BigUint::parse_bytes(b"45000000000000000000", 10).unwrap());
        let small = SearchSpace::named("mbv3-small").unwrap().count_subnets();
        // "about 1e13"
        assert!(small > BigUint::parse_bytes(b"10000000000000", 10).unwrap());
        assert!(small < BigUint::parse_bytes(b"20000000000000", 10).unwrap());
    }

    #[test]
    fn desk_tiny_count_equals_exhaustive_enumeration() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let all = space.enumerate_canonical(100_000).unwrap();
        assert_eq!(BigUint::from(all.len()), space.count_subnets());
        assert_eq!(all.len(), 16_000);
        // All canonical encodings are distinct.
        let mut encs: Vec<String> = all.iter().map(|a| a.encode()).collect();
        encs.sort();
        encs.dedup();
        assert_eq!(encs.len(), 16_000);
    }

    #[test]
    fn degenerate_single_choice_space_counts_one() {
        let space = SearchSpace {
            name: "one".into(),
            resolution: 8,
            in_channels: 1,
            num_classes: 2,
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 1,
            stem_blocks: vec![],
            stages: vec![StageSpec { depths: vec![1], kernels: vec![3], expands: vec![2], stride: 1 }],
            width_sets: vec![vec![4]],
            tail_channels: vec![],
        };
        space.validate().unwrap();
        assert_eq!(space.count_subnets(), BigUint::from(1u32));
        assert_eq!(space.enumerate_canonical(10).unwrap().len(), 1);
    }

    #[test]
    fn largest_and_smallest_pick_the_extremes() {
        let space = SearchSpace::named("mbv3-large").unwrap();
        let largest = space.largest();
        assert_eq!(largest.width_idx, 1);
        assert!(largest.depths.iter().all(|&d| d == 4));
        assert!(largest.kernels.iter().flatten().all(|&k| k == 7));
        assert!(largest.expands.iter().flatten().all(|&e| e == 6));
        let smallest = space.smallest();
        assert_eq!(smallest.width_idx, 0);
        assert!(smallest.depths.iter().all(|&d| d == 2));
        assert!(smallest.kernels.iter().flatten().all(|&k| k == 3));
        assert!(smallest.expands.iter().flatten().all(|&e| e == 3));
        space.validate_arch(&largest).unwrap();
        space.validate_arch(&smallest).unwrap();
    }

    #[test]
    fn medium_takes_lower_median_choices() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let m = space.medium();
        // Two choices per dimension: lower median is the first.
        assert_eq!(m.width_idx, 0);
        assert!(m.depths.iter().all(|&d| d == 1));
        assert!(m.kernels.iter().flatten().all(|&k| k == 3));
        let space3 = SearchSpace::named("mbv3-small").unwrap();
        let m3 = space3.medium();
        assert_eq!(m3.width_idx, 1);
        assert!(m3.depths.iter().all(|&d| d == 3));
        assert!(m3.expands.iter().flatten().all(|&e| e == 4));
    }

    #[test]
    fn sampled_archs_validate_and_round_trip() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = space.sample_uniform(&mut rng);
            space.validate_arch(&a).unwrap();
            let back = ArchConfig::decode(&a.encode(), &space).unwrap();
            assert_eq!(a, back);
        }
    }

    #[test]
    fn decode_rejects_out_of_space_values() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let good = space.largest().encode();
        assert!(ArchConfig::decode(&good, &space).is_ok());
        // Kernel 4 is not a choice.
        let bad = good.replacen("k5", "k4", 1);
        assert!(matches!(ArchConfig::decode(&bad, &space), Err(Error::DecodeError { .. })));
        assert!(ArchConfig::decode("w0|d1", &space).is_err());
        assert!(ArchConfig::decode("", &space).is_err());
        // Depth not offered by the stage.
        let bad_depth = good.replacen("d2", "d3", 1);
        assert!(ArchConfig::decode(&bad_depth, &space).is_err());
    }

    #[test]
    fn encoding_keeps_inactive_block_choices() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let mut a = space.smallest();
        // Depth 1: block 1 of stage 0 is inactive, but its kernel choice
        // still round-trips.
        a.kernels[0][1] = 5;
        let back = ArchConfig::decode(&a.encode(), &space).unwrap();
        assert_eq!(back.kernels[0][1], 5);
        // Canonicalization resets exactly that hidden choice.
        let canon = a.canonical(&space);
        assert_eq!(canon.kernels[0][1], 3);
        assert_eq!(canon.kernels[0][0], a.kernels[0][0]);
    }

    #[test]
    fn nesting_ignores_inactive_blocks() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let small = space.smallest();
        let mut cosmetic = small.clone();
        cosmetic.kernels[0][1] = 5;
        assert!(cosmetic.is_nested_in(&small));
        assert!(small.is_nested_in(&cosmetic));
        let big = space.largest();
        assert!(small.is_nested_in(&big));
        assert!(!big.is_nested_in(&small));
    }

    #[test]
    fn sampling_is_roughly_uniform_per_dimension() {
        let space = SearchSpace::named("desk-tiny").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut width_counts = [0usize; 2];
        let mut depth_counts = [0usize; 2];
        let mut kernel_counts = [0usize; 2];
        for _ in 0..n {
            let a = space.sample_uniform(&mut rng);
            width_counts[a.width_idx] += 1;
            depth_counts[a.depths[0] - 1] += 1;
            kernel_counts[if a.kernels[1][0] == 3 { 0 } else { 1 }] += 1;
        }
        // Binomial(10^4, 0.5): 3 sigma is 150.
        for counts in [width_counts, depth_counts, kernel_counts] {
            assert!((counts[0] as i64 - 5000).abs() < 150, "{counts:?}");
        }
    }

    #[test]
    fn text_format_round_trips_every_named_space() {
        for name in ["desk-tiny", "mbv3-large", "mbv3-small", "proxyless"] {
            let space = SearchSpace::named(name).unwrap();
            let text = space.to_text();
            let back = SearchSpace::from_text(&text).unwrap();
            assert_eq!(space, back);
        }
    }

    #[test]
    fn text_parser_rejects_unknown_keys_and_bad_fields() {
        let good = SearchSpace::named("desk-tiny").unwrap().to_text();
        assert!(SearchSpace::from_text(&format!("{good}bogus = 1\n")).is_err());
        assert!(SearchSpace::from_text(&good.replace("stride:2", "stride:0")).is_err());
        assert!(SearchSpace::from_text("name = x\n").is_err());
        // Even kernels are rejected by validation.
        assert!(SearchSpace::from_text(&good.replace("kernels:3,5", "kernels:3,4")).is_err());
    }

    #[test]
    fn validation_requires_ascending_width_sets() {
        let mut space = SearchSpace::named("desk-tiny").unwrap();
        space.width_sets = vec![vec![16, 16, 16], vec![8, 8, 8]];
        assert!(matches!(space.validate(), Err(Error::SpaceValidation(_))));
    }
}
