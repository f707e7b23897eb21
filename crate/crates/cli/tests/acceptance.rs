//! Acceptance suite: one test per release criterion, each printing its own
//! pass/fail line through the harness. Training-heavy criteria share their
//! expensive runs through lazily initialized statics.

use std::collections::BTreeMap;
use std::ops::Range;

use num_bigint::BigUint;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use enas_core::rng::substream;
use enas_core::ssl::{labelled_loss, pseudo_label};
use enas_core::tensor::{OptimConfig, OptimState};
use enas_core::zeroshot::{zen_score, zero_shot_search};
use enas_core::{
    ArchConfig, ConstraintSet, Graph, ParamStore, SearchSpace, Supernet, Tensor,
};

fn rand_image_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = substream(seed, "acceptance-input");
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(shape, vals).unwrap()
}

/// Draw an architecture nested inside `outer`: every choice is picked from
/// the options less than or equal to outer's choice in that dimension.
fn nested_inside(space: &SearchSpace, outer: &ArchConfig, rng: &mut ChaCha8Rng) -> ArchConfig {
    let pick_le = |options: &[usize], cap: usize, rng: &mut ChaCha8Rng| -> usize {
        let feasible: Vec<usize> = options.iter().copied().filter(|&o| o <= cap).collect();
        feasible[rng.gen_range(0..feasible.len())]
    };
    ArchConfig {
        width_idx: rng.gen_range(0..=outer.width_idx),
        depths: space
            .stages
            .iter()
            .zip(&outer.depths)
            .map(|(st, &d)| pick_le(&st.depths, d, rng))
            .collect(),
        kernels: space
            .stages
            .iter()
            .zip(&outer.kernels)
            .map(|(st, row)| row.iter().map(|&k| pick_le(&st.kernels, k, rng)).collect())
            .collect(),
        expands: space
            .stages
            .iter()
            .zip(&outer.expands)
            .map(|(st, row)| row.iter().map(|&e| pick_le(&st.expands, e, rng)).collect())
            .collect(),
    }
}

/// True when flat element `idx` of a tensor with `shape` lies inside the
/// per-dimension `ranges`.
fn element_in_ranges(mut idx: usize, shape: &[usize], ranges: &[Range<usize>]) -> bool {
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = idx % shape[d];
        idx /= shape[d];
    }
    coords.iter().zip(ranges).all(|(c, r)| r.contains(c))
}

#[test]
fn criterion_01_weight_sharing_invariants() {
    let space = SearchSpace::named("desk-tiny").unwrap();
    let mut rng = substream(17, "acceptance-c1");
    let x = rand_image_batch(&[4, 3, 16, 16], 91);

    // Extraction equivalence: supernet forward equals the extracted
    // standalone network's forward on random subnets.
    let net = Supernet::<f32>::init(space.clone(), 3).unwrap();
    for _ in 0..10 {
        let arch = space.sample_uniform(&mut rng);
        let shared = net.forward_train(&arch, &x).unwrap();
        let solo = net.extract_standalone(&arch).unwrap().forward_train(&x).unwrap();
        let diff = shared
            .data()
            .iter()
            .zip(solo.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "extraction mismatch {diff} on {}", arch.encode());
    }

    // Update locality: one optimizer step through one subnet leaves every
    // parameter element outside that subnet's slices bitwise untouched.
    let mut net = Supernet::<f32>::init(space.clone(), 4).unwrap();
    let arch = space.smallest();
    let view = net.slice_view(&arch).unwrap();
    let before: BTreeMap<String, Vec<u32>> = net
        .store()
        .iter()
        .map(|(k, p)| (k.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let logits = net.forward_into_graph(&mut g, &arch, input).unwrap();
    let loss = labelled_loss(&mut g, logits, &[0, 1, 2, 3]).unwrap();
    g.backward(loss, net.store_mut()).unwrap();
    let mut opt = OptimState::new();
    opt.step(net.store_mut(), 1e-2, &OptimConfig::default()).unwrap();
    for (key, param) in net.store().iter() {
        let old = &before[key];
        let shape = param.value.shape();
        match view.slices.get(key) {
            None => {
                for (i, v) in param.value.data().iter().enumerate() {
                    assert_eq!(v.to_bits(), old[i], "untouched key {key} changed at {i}");
                }
            }
            Some(ranges) => {
                for (i, v) in param.value.data().iter().enumerate() {
                    if !element_in_ranges(i, shape, ranges) {
                        assert_eq!(v.to_bits(), old[i], "{key}[{i}] outside slice changed");
                    }
                }
            }
        }
    }

    // Nested architectures map to nested slices.
    let net = Supernet::<f32>::init(space.clone(), 5).unwrap();
    for _ in 0..100 {
        let outer = space.sample_uniform(&mut rng);
        let inner = nested_inside(&space, &outer, &mut rng);
        let vo = net.slice_view(&outer).unwrap();
        let vi = net.slice_view(&inner).unwrap();
        assert!(
            vi.nests_in(&vo),
            "slice of {} does not nest in {}",
            inner.encode(),
            outer.encode()
        );
    }
}

// ---------------------------------------------------------------------------
// Gradient checks: reverse-mode gradients against 64-bit central differences
// on every parameter element of small dedicated graphs.

/// Max mixed absolute/relative error between reverse-mode and numeric
/// gradients over every parameter element.
fn fd_max_err(store: &ParamStore<f64>, build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> enas_core::NodeId) -> f64 {
    let mut astore = store.clone();
    let mut g = Graph::new();
    let loss = build(&mut g, &astore);
    g.backward(loss, &mut astore).unwrap();
    let h = 1e-6;
    let mut max_err = 0.0f64;
    let keys: Vec<String> = store.keys().map(|s| s.to_string()).collect();
    for key in &keys {
        let grad = astore
            .get(key)
            .unwrap()
            .grad
            .clone()
            .unwrap_or_else(|| panic!("no gradient reached {key}"));
        let n = store.value(key).unwrap().data().len();
        for i in 0..n {
            let mut probe = store.clone();
            probe.get_mut(key).unwrap().value.data_mut()[i] += h;
            let mut gp = Graph::new();
            let lp = build(&mut gp, &probe);
            let plus = gp.value(lp).data()[0];
            probe.get_mut(key).unwrap().value.data_mut()[i] -= 2.0 * h;
            let mut gm = Graph::new();
            let lm = build(&mut gm, &probe);
            let minus = gm.value(lm).data()[0];
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / (1.0 + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

fn f64_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "fd-input");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
    Tensor::from_vec(shape, vals).unwrap()
}

fn gaussian_store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = substream(seed, "fd-params");
    let mut store = ParamStore::new();
    for (key, shape) in specs {
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        store.insert_gaussian(key, shape, (1.0 / fan_in as f64).sqrt(), &mut rng);
    }
    store
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let tol = 1e-5;
    let x = f64_input(&[2, 3, 6, 6], 41);

    // Each convolution variant sits between a pointwise layer (so its input
    // gradient is exercised) and a pooled linear head with a weighted,
    // renormalized cross-entropy.
    let conv_cases: &[(&str, &[usize], usize, usize, usize)] = &[
        ("k3_s1_p1", &[4, 4, 3, 3], 1, 1, 1),
        ("k5_s1_p2", &[4, 4, 5, 5], 1, 2, 1),
        ("k3_s2_p1", &[4, 4, 3, 3], 2, 1, 1),
        ("k3_s1_p0", &[4, 4, 3, 3], 1, 0, 1),
        ("pointwise", &[6, 4, 1, 1], 1, 0, 1),
        ("depthwise_k3", &[4, 1, 3, 3], 1, 1, 4),
        ("depthwise_k5_s2", &[4, 1, 5, 5], 2, 2, 4),
        ("grouped_g2", &[4, 2, 3, 3], 1, 1, 2),
    ];
    for &(name, wshape, stride, pad, groups) in conv_cases {
        let cout = wshape[0];
        let store = gaussian_store(
            &[("pre", &[4, 3, 1, 1]), ("conv", wshape), ("head", &[3, cout]), ("bias", &[3])],
            7,
        );
        let xc = x.clone();
        let err = fd_max_err(&store, &move |g, s| {
            let input = g.input(xc.clone());
            let pre = g.param(s, "pre", None).unwrap();
            let mid = g.conv2d(input, pre, 1, 0, 1).unwrap();
            let w = g.param(s, "conv", None).unwrap();
            let y = g.conv2d(mid, w, stride, pad, groups).unwrap();
            let act = g.hardswish(y);
            let pooled = g.global_avg_pool(act).unwrap();
            let head = g.param(s, "head", None).unwrap();
            let bias = g.param(s, "bias", None).unwrap();
            let logits = g.linear(pooled, head, Some(bias)).unwrap();
            g.cross_entropy(logits, &[0, 2], &[0.7, 1.3], 2.5).unwrap()
        });
        assert!(err < tol, "conv case {name}: max fd error {err:.3e}");
    }

    // Normalization (training statistics), both activations, residual adds,
    // n-ary sums, and scaling.
    let store = gaussian_store(
        &[
            ("pre", &[4, 3, 1, 1]),
            ("branch_a", &[4, 4, 3, 3]),
            ("branch_b", &[4, 4, 3, 3]),
            ("scale", &[4]),
            ("shift", &[4]),
            ("head", &[3, 4]),
            ("bias", &[3]),
        ],
        19,
    );
    let xc = x.clone();
    let err = fd_max_err(&store, &move |g, s| {
        let input = g.input(xc.clone());
        let pre = g.param(s, "pre", None).unwrap();
        let mid = g.conv2d(input, pre, 1, 0, 1).unwrap();
        let wa = g.param(s, "branch_a", None).unwrap();
        let wb = g.param(s, "branch_b", None).unwrap();
        let a = g.conv2d(mid, wa, 1, 1, 1).unwrap();
        let b = g.conv2d(mid, wb, 1, 1, 1).unwrap();
        let scale = g.param(s, "scale", None).unwrap();
        let shift = g.param(s, "shift", None).unwrap();
        let an = g.norm_train(a, scale, shift, 1e-5).unwrap();
        let ar = g.relu(an);
        let bh = g.hardswish(b);
        let sum = g.add(ar, bh).unwrap();
        let residual = g.add(sum, mid).unwrap();
        let tripled = g.add_n(&[sum, residual, mid]).unwrap();
        let scaled = g.scale(tripled, 0.37);
        let pooled = g.global_avg_pool(scaled).unwrap();
        let head = g.param(s, "head", None).unwrap();
        let bias = g.param(s, "bias", None).unwrap();
        let logits = g.linear(pooled, head, Some(bias)).unwrap();
        g.cross_entropy(logits, &[1, 0], &[1.0, 1.0], 2.0).unwrap()
    });
    assert!(err < tol, "mixed-op graph: max fd error {err:.3e}");

    // A full network containing a complete inverted-bottleneck block chain
    // (expansion, depthwise, projection, normalization, residual): every
    // parameter of a two-block stage architecture.
    let space = SearchSpace::named("desk-tiny").unwrap();
    let arch =
        ArchConfig::decode("w0|d2,1,1|k5,3,3,3,3,3|e4,2,2,2,2,2", &space).unwrap();
    let plan = enas_core::plan::plan_for(&space, &arch).unwrap();
    let mut prng = substream(23, "fd-net");
    let store = enas_core::plan::init_store_for::<f64, _>(&plan, &mut prng);
    let xi = f64_input(&[2, 3, 16, 16], 43);
    let err = fd_max_err(&store, &move |g, s| {
        let input = g.input(xi.clone());
        let logits = enas_core::plan::forward_graph(&plan, s, g, input).unwrap();
        g.cross_entropy(logits, &[3, 7], &[1.0, 1.0], 2.0).unwrap()
    });
    assert!(err < tol, "full block chain: max fd error {err:.3e}");
}

#[test]
fn criterion_03_loss_reduction_identities() {
    // tau = 0 admits every pseudo-label; raising tau never admits more.
    let mut rng = substream(33, "acceptance-c3");
    for _ in 0..1000 {
        let rows = rng.gen_range(2..12);
        let classes = rng.gen_range(2..15);
        let scale: f32 = rng.gen_range(0.5..6.0);
        let vals: Vec<f32> =
            (0..rows * classes).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let logits = Tensor::from_vec(&[rows, classes], vals).unwrap();
        let all = pseudo_label(&logits, 0.0).unwrap();
        assert!(all.mask.iter().all(|&m| m), "tau=0 must admit every row");
        assert_eq!(all.pass_fraction, 1.0);
        let lo: f64 = rng.gen_range(0.0..1.0);
        let hi: f64 = rng.gen_range(lo..1.0);
        let n_lo = pseudo_label(&logits, lo).unwrap().mask.iter().filter(|&&m| m).count();
        let n_hi = pseudo_label(&logits, hi).unwrap().mask.iter().filter(|&&m| m).count();
        assert!(n_lo >= n_hi, "mask must shrink as tau rises ({lo:.2} -> {hi:.2})");
    }
}

fn round_to_one_significant_figure(n: &BigUint) -> (u32, usize) {
    let s = n.to_string();
    let exponent = s.len() - 1;
    let first = s.as_bytes()[0] - b'0';
    let second = if s.len() > 1 { s.as_bytes()[1] - b'0' } else { 0 };
    let rounded = first + u8::from(second >= 5);
    if rounded == 10 {
        (1, exponent + 1)
    } else {
        (u32::from(rounded), exponent)
    }
}

#[test]
fn criterion_04_space_cardinalities() {
    let large = SearchSpace::named("mbv3-large").unwrap();
    let expected = BigUint::from(2u32) * BigUint::from(7371u32).pow(5);
    assert_eq!(large.count_subnets(), expected);
    assert_eq!(round_to_one_significant_figure(&large.count_subnets()), (4, 19));

    // The small space is documented as holding about 1e13 candidates: an
    // order-of-magnitude statement, so assert the rounded base-10 exponent.
    let small = SearchSpace::named("mbv3-small").unwrap();
    let small_count = small.count_subnets();
    let per_stage = BigUint::from(1548u32);
    assert_eq!(small_count, BigUint::from(3u32) * per_stage.pow(4));
    let digits = small_count.to_string();
    let log10 = (digits.len() - 1) as f64 + (digits.as_bytes()[0] - b'0') as f64 / 10.0;
    assert_eq!(log10.round() as i64, 13, "count {small_count} is not about 1e13");

    let tiny = SearchSpace::named("desk-tiny").unwrap();
    let enumerated = tiny.enumerate_canonical(1_000_000).unwrap();
    assert_eq!(tiny.count_subnets(), BigUint::from(enumerated.len()));
    let mut encodings: Vec<String> = enumerated.iter().map(|a| a.encode()).collect();
    encodings.sort_unstable();
    encodings.dedup();
    assert_eq!(encodings.len(), enumerated.len(), "enumeration must be duplicate-free");
}

#[test]
fn criterion_05_search_matches_brute_force() {
    let space = SearchSpace::named("desk-tiny").unwrap();
    let budgets =
        [100_000u64, 160_000, 240_000, 360_000, 520_000, 760_000, 1_050_000, 1_433_600];
    let text: String =
        budgets.iter().map(|b| format!("flops <= {b}\n")).collect();
    let constraints = ConstraintSet::parse(&text).unwrap();

    // One shared score memo keeps the search and the brute force reading
    // the identical deterministic value per architecture.
    let mut memo: BTreeMap<String, f64> = BTreeMap::new();
    let space_for_scorer = space.clone();
    let mut scorer = |arch: &ArchConfig| -> enas_core::Result<f64> {
        let key = arch.canonical(&space_for_scorer).encode();
        if let Some(&v) = memo.get(&key) {
            return Ok(v);
        }
        let v = zen_score(&space_for_scorer, arch, 2, 1e-2, 77)?;
        memo.insert(key, v);
        Ok(v)
    };

    let found =
        zero_shot_search(&space, &mut scorer, &constraints, usize::MAX, 123).unwrap();
    assert_eq!(found.len(), budgets.len());

    let all = space.enumerate_canonical(100_000).unwrap();
    for (i, c) in constraints.constraints.iter().enumerate() {
        let mut best: Option<(f64, u64, String)> = None;
        for arch in &all {
            let r = space.count_resources(arch, space.resolution).unwrap();
            if !c.satisfied_by(&r) {
                continue;
            }
            let score = scorer(arch).unwrap();
            let encoding = arch.encode();
            let wins = match &best {
                None => true,
                Some((bs, bf, be)) => {
                    score > *bs
                        || (score == *bs && r.flops < *bf)
                        || (score == *bs && r.flops == *bf && encoding < *be)
                }
            };
            if wins {
                best = Some((score, r.flops, encoding));
            }
        }
        let (_, _, brute) = best.expect("every budget admits the smallest network");
        assert_eq!(found[i].encoding, brute, "budget {} disagrees with brute force", budgets[i]);
        assert_eq!(found[i].constraint_id, i);
        assert!(
            c.satisfied_by(&found[i].resources),
            "winner for budget {} violates it",
            budgets[i]
        );
    }
}

#[test]
fn criterion_06_score_ranks_largest_above_smallest() {
    let space = SearchSpace::named("desk-tiny").unwrap();
    let largest = space.largest();
    let smallest = space.smallest();
    let mut wins = 0;
    for seed in 0..20 {
        let l = zen_score(&space, &largest, 16, 1e-2, seed).unwrap();
        let s = zen_score(&space, &smallest, 16, 1e-2, seed).unwrap();
        if l > s {
            wins += 1;
        }
    }
    assert!(wins >= 18, "largest outscored smallest in only {wins}/20 seeds");
}

#[test]
fn criterion_11_compare_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dconf = dir.path().join("d.conf");
    std::fs::write(
        &dconf,
        "data.classes = 4\ndata.per_class = 30\ndata.labelled_per_class = 8\n\
         data.test_fraction = 0.2\ndata.calib_count = 16\ndata.seed = 5\n",
    )
    .unwrap();
    let data = dir.path().join("d.ends");
    let cconf = dir.path().join("c.conf");
    std::fs::write(
        &cconf,
        "space = desk-tiny\ncompare.methods = matchnas, spos\ncompare.seeds = 0,1\n\
         train.epochs = 1\ntrain.labelled_batch = 8\ntrain.n_subnets = 2\ntrain.mu = 1\n\
         train.lr0 = 0.001\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_enas"))
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["gen-data", "--config", dconf.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    for out in [&out1, &out2] {
        run(&[
            "compare", "--config", cconf.to_str().unwrap(), "--data", data.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]);
    }
    let a = std::fs::read(out1.join("summary.csv")).unwrap();
    let b = std::fs::read(out2.join("summary.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "summary CSV differs between identical runs");
}
