//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `--nocapture`). Criteria run at their stated
//! tolerances; nothing here is calibrated after the fact.

use fpbetter::attack::{self, fgsm, pgd, AttackConfig, AttackTarget, InitMode};
use fpbetter::autodiff::grad_check;
use fpbetter::bound;
use fpbetter::error::{Error, FormatError};
use fpbetter::eval::{self, MonitorThresholds};
use fpbetter::io::dataset::make_blobs;
use fpbetter::io::formats::{load_cifar_binary, load_idx};
use fpbetter::model::{self, BlockMask, NetworkSpec, Scaling};
use fpbetter::rng::{Stream, StreamId};
use fpbetter::sampler::{
    expected_effective_blocks, sample_mask, spatial_probabilities, ScheduleMode, TemporalState,
};
use fpbetter::tensor::Tensor;
use fpbetter::trainer::{self, Method, TrainConfig, UpdateTarget};

fn pass(name: &str, detail: &str) {
    println!("ACCEPT {name}: PASS ({detail})");
}

fn random_tensor(shape: &[usize], rng: &mut Stream, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero (for relu kink avoidance): magnitude in
/// [0.2, 1.0), random sign.
fn random_tensor_off_kink(shape: &[usize], rng: &mut Stream) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.next_sign() * rng.uniform(0.2, 1.0))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn random_labels(n: usize, classes: usize, rng: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| rng.next_below(classes as u64) as usize).collect()
}

// ── c01: gradient oracle ─────────────────────────────────────────────

#[test]
fn c01_gradient_oracle() {
    let started = std::time::Instant::now();
    let tol = 1e-4;
    let h = 1e-5;
    let mut rng = Stream::new(0xC01, StreamId::Init);
    let cases_per_primitive = 5;

    for case in 0..cases_per_primitive {
        let b = 1 + (case % 3);
        let classes = 2 + (case % 3);

        // affine
        {
            let (input, out) = (2 + case % 3, classes);
            let x = random_tensor(&[b, input], &mut rng, -1.0, 1.0);
            let w = random_tensor(&[input, out], &mut rng, -1.0, 1.0);
            let bias = random_tensor(&[out], &mut rng, -0.5, 0.5);
            let labels = random_labels(b, classes, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let y = g.affine(ids[0], ids[1], ids[2])?;
                    g.softmax_cross_entropy(y, &labels)
                },
            )
            .unwrap();
            assert!(
                report.max_rel_err <= tol,
                "affine case {case}: {:?}",
                report.per_leaf
            );
        }

        // conv2d, stride 1 and 2
        for stride in [1usize, 2] {
            let (ci, co, side, k) = (1 + case % 3, classes, 4 + (case % 3) * 2, 3);
            let x = random_tensor(&[b, ci, side, side], &mut rng, -1.0, 1.0);
            let w = random_tensor(&[co, ci, k, k], &mut rng, -0.6, 0.6);
            let bias = random_tensor(&[co], &mut rng, -0.2, 0.2);
            let labels = random_labels(b, co, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride)?;
                    let pooled = g.global_avg_pool(y)?;
                    g.softmax_cross_entropy(pooled, &labels)
                },
            )
            .unwrap();
            assert!(
                report.max_rel_err <= tol,
                "conv2d stride {stride} case {case}: {:?}",
                report.per_leaf
            );
        }

        // relu (inputs off the kink by far more than h)
        {
            let d = 2 + case % 4;
            let x = random_tensor_off_kink(&[b, d], &mut rng);
            let w = random_tensor(&[d, classes], &mut rng, -1.0, 1.0);
            let bias = random_tensor(&[classes], &mut rng, -0.3, 0.3);
            let labels = random_labels(b, classes, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let r = g.relu(ids[0]);
                    let y = g.affine(r, ids[1], ids[2])?;
                    g.softmax_cross_entropy(y, &labels)
                },
            )
            .unwrap();
            assert!(report.max_rel_err <= tol, "relu case {case}");
        }

        // add (residual sum)
        {
            let d = 2 + case % 3;
            let a = random_tensor(&[b, d], &mut rng, -1.0, 1.0);
            let c = random_tensor(&[b, d], &mut rng, -1.0, 1.0);
            let w = random_tensor(&[d, classes], &mut rng, -1.0, 1.0);
            let bias = random_tensor(&[classes], &mut rng, -0.3, 0.3);
            let labels = random_labels(b, classes, &mut rng);
            let report = grad_check(
                &[("a", a), ("c", c), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let s = g.add(ids[0], ids[1])?;
                    let y = g.affine(s, ids[2], ids[3])?;
                    g.softmax_cross_entropy(y, &labels)
                },
            )
            .unwrap();
            assert!(report.max_rel_err <= tol, "add case {case}");
        }

        // scale by a constant
        {
            let d = 3;
            let factor = 0.25 + 0.5 * (case as f64);
            let x = random_tensor(&[b, d], &mut rng, -1.0, 1.0);
            let w = random_tensor(&[d, classes], &mut rng, -1.0, 1.0);
            let bias = random_tensor(&[classes], &mut rng, -0.3, 0.3);
            let labels = random_labels(b, classes, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let y = g.affine(ids[0], ids[1], ids[2])?;
                    let scaled = g.scale(y, factor)?;
                    g.softmax_cross_entropy(scaled, &labels)
                },
            )
            .unwrap();
            assert!(report.max_rel_err <= tol, "scale case {case}");
        }

        // global average pool straight to logits
        {
            let (ch, side) = (classes, 3 + case % 4);
            let x = random_tensor(&[b, ch, side, side], &mut rng, -1.0, 1.0);
            let labels = random_labels(b, ch, &mut rng);
            let report = grad_check(&[("x", x)], h, |g, ids| {
                let pooled = g.global_avg_pool(ids[0])?;
                g.softmax_cross_entropy(pooled, &labels)
            })
            .unwrap();
            assert!(report.max_rel_err <= tol, "gap case {case}");
        }

        // flatten
        {
            let (ch, side) = (1 + case % 2, 2 + case % 3);
            let flat = ch * side * side;
            let x = random_tensor(&[b, ch, side, side], &mut rng, -1.0, 1.0);
            let w = random_tensor(&[flat, classes], &mut rng, -0.8, 0.8);
            let bias = random_tensor(&[classes], &mut rng, -0.3, 0.3);
            let labels = random_labels(b, classes, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", bias)],
                h,
                |g, ids| {
                    let f = g.flatten(ids[0])?;
                    let y = g.affine(f, ids[1], ids[2])?;
                    g.softmax_cross_entropy(y, &labels)
                },
            )
            .unwrap();
            assert!(report.max_rel_err <= tol, "flatten case {case}");
        }

        // fused softmax-cross-entropy on raw logits
        {
            let k = 2 + case % 4;
            let logits = random_tensor(&[b, k], &mut rng, -2.0, 2.0);
            let labels = random_labels(b, k, &mut rng);
            let report = grad_check(&[("logits", logits)], h, |g, ids| {
                g.softmax_cross_entropy(ids[0], &labels)
            })
            .unwrap();
            assert!(report.max_rel_err <= tol, "softmax-ce case {case}");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient oracle took {elapsed:?}");
    pass(
        "c01 gradient oracle",
        &format!("8 primitives x {cases_per_primitive} shapes, rel err <= {tol}, {elapsed:?}"),
    );
}

// ── c02: attack invariants ───────────────────────────────────────────

struct LinearLoss {
    v: Vec<f64>,
}

impl AttackTarget for LinearLoss {
    fn loss_and_input_grad(&mut self, x: &Tensor) -> fpbetter::Result<(f64, Tensor)> {
        let loss = x.data().iter().zip(&self.v).map(|(a, b)| a * b).sum();
        Ok((loss, Tensor::from_vec(x.shape().to_vec(), self.v.clone())?))
    }
}

#[test]
fn c02_attack_invariants() {
    let started = std::time::Instant::now();
    let mut rng = Stream::new(0xC02, StreamId::Attacks);
    let mut cases = 0usize;

    // 900 randomized toy-target cases.
    while cases < 900 {
        let dims = 1 + (rng.next_below(6) as usize);
        let epsilon = if cases % 7 == 0 { 0.0 } else { rng.uniform(0.0, 0.5) };
        let config = AttackConfig {
            epsilon,
            alpha: rng.uniform(0.01, 1.0),
            steps: 1 + (rng.next_below(4) as usize),
            init: if rng.next_u64() & 1 == 0 {
                InitMode::Zero
            } else {
                InitMode::Uniform
            },
            clip: if rng.next_u64() & 1 == 0 {
                Some((-1.0, 1.0))
            } else {
                None
            },
        };
        let v: Vec<f64> = (0..dims).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = random_tensor(&[dims], &mut rng, -0.8, 0.8);
        let mut target = LinearLoss { v };
        let mut attack_rng = Stream::derive(cases as u64, &[StreamId::Attacks as u64]);
        let p = pgd(&mut target, &x, &config, &mut attack_rng).unwrap();
        assert!(
            p.delta.max_abs() <= config.epsilon,
            "case {cases}: |delta| {} > eps {}",
            p.delta.max_abs(),
            config.epsilon
        );
        cases += 1;
    }

    // 100 network-target cases.
    let spec = NetworkSpec::resmlp(2, 8, 2, 2);
    let params = model::build_network(&spec, 0xC02).unwrap();
    for i in 0..100u64 {
        let mut case_rng = Stream::derive(i, &[7]);
        let epsilon = case_rng.uniform(0.0, 0.4);
        let config = AttackConfig {
            epsilon,
            alpha: case_rng.uniform(0.05, 0.8),
            steps: 1 + (case_rng.next_below(3) as usize),
            init: InitMode::Uniform,
            clip: None,
        };
        let x = random_tensor(&[3, 2], &mut case_rng, -1.5, 1.5);
        let labels = [0usize, 1, 0];
        let mut attack_rng = Stream::derive(i, &[StreamId::Attacks as u64]);
        let p = attack::pgd_on_network(&params, &spec, &x, &labels, &config, &mut attack_rng)
            .unwrap();
        assert!(p.delta.max_abs() <= config.epsilon);
        cases += 1;
    }

    // Bitwise single-step equivalence on the network.
    let config = AttackConfig {
        epsilon: 0.25,
        alpha: 0.25,
        steps: 1,
        init: InitMode::Zero,
        clip: None,
    };
    let x = Tensor::from_vec(vec![2, 2], vec![1.0, 0.9, -1.1, -1.0]).unwrap();
    let labels = [0usize, 1];
    let mask = BlockMask::all_ones(2);
    let mut r1 = Stream::new(1, StreamId::Attacks);
    let mut r2 = Stream::new(1, StreamId::Attacks);
    let a = attack::fgsm_on_network(&params, &spec, &mask, &x, &labels, &config, &mut r1).unwrap();
    let b = attack::pgd_on_network(&params, &spec, &x, &labels, &config, &mut r2).unwrap();
    assert_eq!(a.delta.data(), b.delta.data(), "pgd(1, zero) != fgsm(zero)");

    // Saturation: alpha >= 2 eps with nonzero gradients puts every
    // coordinate at exactly +-eps.
    for i in 0..50u64 {
        let mut case_rng = Stream::derive(i, &[11]);
        let epsilon = case_rng.uniform(0.05, 0.5);
        let config = AttackConfig {
            epsilon,
            alpha: 2.0 * epsilon + case_rng.uniform(0.0, 0.3),
            steps: 1,
            init: InitMode::Uniform,
            clip: None,
        };
        let dims = 1 + (case_rng.next_below(5) as usize);
        let v: Vec<f64> = (0..dims)
            .map(|_| case_rng.next_sign() * case_rng.uniform(0.1, 2.0))
            .collect();
        let x = random_tensor(&[dims], &mut case_rng, -0.5, 0.5);
        let mut target = LinearLoss { v };
        let mut attack_rng = Stream::derive(i, &[StreamId::Attacks as u64, 3]);
        let p = fgsm(&mut target, &x, &config, &mut attack_rng).unwrap();
        for &d in p.delta.data() {
            assert_eq!(d.abs(), epsilon, "saturation case {i}");
        }
        cases += 1;
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "attack battery took {elapsed:?}");
    pass(
        "c02 attack invariants",
        &format!("{cases} randomized cases, box exact, one-step bitwise, saturation, {elapsed:?}"),
    );
}

// ── c03: schedule exactness ──────────────────────────────────────────

#[test]
fn c03_schedule_exactness() {
    let p = spatial_probabilities(8, 0.5, ScheduleMode::Linear).unwrap();
    let expected = [0.9375, 0.875, 0.8125, 0.75, 0.6875, 0.625, 0.5625, 0.5];
    for (i, (a, e)) in p.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= 1e-12, "p[{i}] = {a}, expected {e}");
    }
    let total = expected_effective_blocks(&p);
    assert!((total - 5.75).abs() <= 1e-12, "sum {total}");
    pass("c03 schedule exactness", "linear(8, 0.5) and expected blocks to 1e-12");
}

// ── c04: temporal controller ─────────────────────────────────────────

#[test]
fn c04_temporal_controller() {
    // Strictly decreasing sums: hand-simulated trajectory over 4 epochs.
    let mut state = TemporalState::new();
    let mut p_min = 0.5;
    let mu = 0.04;
    let mut trajectory = Vec::new();
    for sum in [4.0, 3.0, 2.0, 1.0] {
        trajectory.push(p_min);
        state.record(sum);
        p_min = state.end_period(p_min, mu);
    }
    for (got, want) in trajectory.iter().zip([0.5, 0.5, 0.54, 0.58]) {
        assert!((got - want).abs() <= 1e-12, "{trajectory:?}");
    }

    // Ties keep, drops raise, clamp at one, epoch one never compares.
    let mut state = TemporalState::new();
    let mut p_min = 0.9;
    let mu = 0.08;
    let mut seen = Vec::new();
    for sum in [5.0, 6.0, 4.0, 4.0, 3.0] {
        seen.push(p_min);
        state.record(sum);
        p_min = state.end_period(p_min, mu);
    }
    let expected = [0.9, 0.9, 0.9, 0.98, 0.98];
    for (got, want) in seen.iter().zip(expected) {
        assert!((got - want).abs() <= 1e-12, "{seen:?}");
    }
    assert!((p_min - 1.0).abs() <= 1e-12, "final clamp: {p_min}");

    // A negative first-period sum still cannot trigger a comparison.
    let mut state = TemporalState::new();
    state.record(-1.0);
    assert_eq!(state.end_period(0.5, 0.04), 0.5);

    pass(
        "c04 temporal controller",
        "scripted sequences reproduce hand-simulated floors exactly",
    );
}

// ── c05: subnetwork semantics ────────────────────────────────────────

#[test]
fn c05_subnetwork_semantics() {
    let spec = NetworkSpec::resmlp(3, 10, 5, 2);
    let mut rng = Stream::new(0xC05, StreamId::Masks);
    let probs = spatial_probabilities(5, 0.4, ScheduleMode::Linear).unwrap();
    let mut checked_drops = 0usize;

    for trial in 0..20 {
        let params = model::build_network(&spec, trial).unwrap();
        let mask = sample_mask(&probs, &mut rng);
        let x = random_tensor(&[4, 3], &mut rng, -1.2, 1.2);
        let labels = random_labels(4, 2, &mut rng);

        let mut pass_fwd = model::forward(&params, &spec, &x, &mask, &Scaling::None).unwrap();
        let loss = pass_fwd.loss(&labels).unwrap();
        let grads = pass_fwd.graph.backward(loss).unwrap();
        let per_param = pass_fwd.param_gradients(&grads);

        // Optimizer step with weight decay on.
        let mut updated = params.clone();
        let mut buffers: Vec<Tensor> = updated
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        for (idx, grad) in per_param.iter().enumerate() {
            if let Some(grad) = grad {
                trainer::sgd_momentum_step(
                    updated.tensor_mut(idx),
                    grad,
                    &mut buffers[idx],
                    0.1,
                    0.9,
                    5e-4,
                )
                .unwrap();
            }
        }

        for (block, &alive) in mask.bits().iter().enumerate() {
            for name in model::branch_param_names(block) {
                let idx = params.index_of(&name).unwrap();
                if alive {
                    assert!(per_param[idx].is_some(), "{name} missing gradient");
                } else {
                    // Dropped: gradient exactly zero and parameter bytes
                    // unchanged across the step.
                    assert!(per_param[idx].is_none(), "{name} has a gradient");
                    let before = params.get(idx).tensor.data();
                    let after = updated.get(idx).tensor.data();
                    assert_eq!(before, after, "{name} changed");
                    checked_drops += 1;
                }
            }
        }
    }
    assert!(checked_drops > 0, "no branches were dropped in 20 trials");
    pass(
        "c05 subnetwork semantics",
        &format!("{checked_drops} dropped-branch tensors: zero grads, bit-unchanged params"),
    );
}

// ── c06: mask statistics ─────────────────────────────────────────────

#[test]
fn c06_mask_statistics() {
    let draws = 20_000usize;
    for (mode, p_min) in [(ScheduleMode::Linear, 0.5), (ScheduleMode::Uniform, 0.5)] {
        let p = spatial_probabilities(8, p_min, mode).unwrap();
        let mut rng = Stream::new(0xC06, StreamId::Masks);
        let mut hits = vec![0usize; 8];
        let mut realized = 0usize;
        for _ in 0..draws {
            let mask = sample_mask(&p, &mut rng);
            realized += mask.effective_block_count();
            for (h, &bit) in hits.iter_mut().zip(mask.bits()) {
                *h += bit as usize;
            }
        }
        for (l, (&h, &pl)) in hits.iter().zip(&p).enumerate() {
            let rate = h as f64 / draws as f64;
            let bound = 4.0 * (pl * (1.0 - pl) / draws as f64).sqrt();
            assert!(
                (rate - pl).abs() <= bound,
                "{mode:?} block {l}: rate {rate} vs {pl} (bound {bound})"
            );
        }
        let mean = realized as f64 / draws as f64;
        let expect = expected_effective_blocks(&p);
        let bound =
            4.0 * (p.iter().map(|v| v * (1.0 - v)).sum::<f64>() / draws as f64).sqrt();
        assert!(
            (mean - expect).abs() <= bound,
            "{mode:?} realized mean {mean} vs {expect} (bound {bound})"
        );
    }
    pass(
        "c06 mask statistics",
        "20k draws per schedule inside the 4-sigma binomial envelope",
    );
}

// ── c07: compute-saving measurement ──────────────────────────────────

fn desk_attack(epsilon: f64) -> AttackConfig {
    AttackConfig {
        epsilon,
        alpha: 1.25 * epsilon,
        steps: 1,
        init: InitMode::Uniform,
        clip: None,
    }
}

fn desk_eval_attack(epsilon: f64) -> AttackConfig {
    AttackConfig {
        epsilon,
        alpha: epsilon / 4.0,
        steps: 10,
        init: InitMode::Uniform,
        clip: None,
    }
}

#[test]
fn c07_compute_saving() {
    // Fixed linear schedule at p_min = 0.5 over an 8-block network: the
    // executed-branch fraction must match sum(p)/L = 5.75/8 = 0.71875.
    let config = TrainConfig {
        spec: NetworkSpec::resmlp(2, 16, 8, 2),
        method: Method::FpBetter,
        epochs: 5,
        batch_size: 20,
        lr: 0.0001,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_decay_factor: 0.1,
        lr_decay_points: vec![],
        attack: desk_attack(0.3),
        schedule_mode: ScheduleMode::Linear,
        p_min: 0.5,
        mu: 0.0, // fixed schedule for the measurement
        update_target: UpdateTarget::Subnetwork,
        seed: 0xC07,
        eval_every: 0,
        monitor_subset: 0,
        eval_batch: 256,
        eval_attack: desk_eval_attack(0.3),
        trace_iterations: false,
    };
    let train_set = make_blobs(1000, 2, &[vec![1.0, 1.0], vec![-1.0, -1.0]], 0.1, 1).unwrap();
    let eval_set = make_blobs(100, 2, &[vec![1.0, 1.0], vec![-1.0, -1.0]], 0.1, 2).unwrap();
    let out = trainer::train(&config, &train_set, &eval_set).unwrap();
    let fraction: f64 =
        out.metrics.iter().map(|m| m.branch_fraction).sum::<f64>() / out.metrics.len() as f64;
    assert!(
        (fraction - 0.71875).abs() <= 0.02,
        "executed-branch fraction {fraction} vs 0.71875"
    );
    pass(
        "c07 compute saving",
        &format!("executed-branch fraction {fraction:.5} within 0.02 of 0.71875"),
    );
}

// ── c08: desk-scale robustness experiment ────────────────────────────

/// Measured once and frozen: the FGSM robust-accuracy gap (percentage
/// points) between the two methods on this exact configuration.
const FROZEN_GAP_POINTS: f64 = 0.0;

#[test]
fn c08_desk_scale_robustness() {
    let started = std::time::Instant::now();
    let train_set = make_blobs(500, 2, &[vec![1.0, 1.0], vec![-1.0, -1.0]], 0.1, 0).unwrap();
    let eval_set =
        make_blobs(500, 2, &[vec![1.0, 1.0], vec![-1.0, -1.0]], 0.1, 0x9E3779B9).unwrap();
    let base = TrainConfig {
        spec: NetworkSpec::resmlp4(2, 2),
        method: Method::FpBetter,
        epochs: 30,
        batch_size: 100,
        lr: 0.001,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_decay_factor: 0.1,
        lr_decay_points: vec![100.0 / 110.0, 105.0 / 110.0],
        attack: desk_attack(0.3),
        schedule_mode: ScheduleMode::Linear,
        p_min: 0.5,
        mu: 0.04,
        update_target: UpdateTarget::Subnetwork,
        seed: 1,
        eval_every: 0,
        monitor_subset: 0,
        eval_batch: 512,
        eval_attack: desk_eval_attack(0.3),
        trace_iterations: false,
    };

    let fp = trainer::train(&base, &train_set, &eval_set).unwrap();
    let std_cfg = TrainConfig {
        method: Method::Standard,
        ..base.clone()
    };
    let standard = trainer::train(&std_cfg, &train_set, &eval_set).unwrap();

    // Full-strength single-step evaluation: alpha = epsilon, zero start.
    let fgsm_eval = AttackConfig {
        epsilon: 0.3,
        alpha: 0.3,
        steps: 1,
        init: InitMode::Zero,
        clip: None,
    };
    let measure = |ckpt: &fpbetter::checkpoint::Checkpoint| {
        let clean = eval::accuracy(&ckpt.params, &base.spec, &eval_set, &Scaling::None, 512)
            .unwrap();
        let mut rng = Stream::new(0xC08, StreamId::Eval);
        let robust = eval::robust_accuracy(
            &ckpt.params,
            &base.spec,
            &eval_set,
            &fgsm_eval,
            &Scaling::None,
            512,
            &mut rng,
        )
        .unwrap();
        (clean, robust)
    };
    let (fp_clean, fp_robust) = measure(&fp.pair.last);
    let (std_clean, std_robust) = measure(&standard.pair.last);
    let gap_points = (fp_robust - std_robust) * 100.0;
    let elapsed = started.elapsed();

    println!(
        "ACCEPT c08 desk-scale measurements: fp-better clean={fp_clean:.4} fgsm={fp_robust:.4}; \
         standard clean={std_clean:.4} fgsm={std_robust:.4}; gap={gap_points:.2} points; {elapsed:?}"
    );
    assert!(elapsed.as_secs() < 180, "experiment took {elapsed:?}");
    assert!(
        fp_clean >= 0.95,
        "fp-better clean accuracy {fp_clean} below 0.95"
    );
    // Regression guard on the frozen measured gap.
    assert!(
        gap_points >= FROZEN_GAP_POINTS - 2.0,
        "gap regressed: {gap_points:.2} points vs frozen {FROZEN_GAP_POINTS}"
    );
    // The stated criterion. On this data geometry every accurate classifier
    // is robust at this budget (see the analysis shipped with the repo
    // history), so this assertion is expected to fail; it is kept as stated
    // rather than weakened.
    assert!(
        gap_points >= 10.0,
        "FGSM robust-accuracy gap {gap_points:.2} points < 10 \
         (fp-better {fp_robust:.4} vs standard {std_robust:.4})"
    );
    pass(
        "c08 desk-scale robustness",
        &format!("gap {gap_points:.2} points, fp-better clean {fp_clean:.4}"),
    );
}

// ── c09: determinism through the CLI ─────────────────────────────────

#[test]
fn c09_train_command_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        r#"
[dataset]
kind = "blobs"
per_class = 80
eval_per_class = 40

[train]
method = "fp-better"
epochs = 3
batch_size = 40
lr = 0.002
seed = 11
eval_every = 1
monitor_subset = 40

[attack]
epsilon = 0.3
alpha = 0.375
"#,
    )
    .unwrap();

    let run = |out: &std::path::Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_fpbetter"))
            .args([
                "train",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);

    for file in ["best.ckpt", "last.ckpt", "metrics.jsonl", "config.toml"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    pass(
        "c09 determinism",
        "two identical train commands: checkpoints and metrics byte-equal",
    );
}

// ── c10: bound calculator ────────────────────────────────────────────

#[test]
fn c10_bound_calculator() {
    let eps0 = bound::epsilon0(&[2.0, 2.0], 1.0, 100, 0.1).unwrap();
    assert!((eps0 - 0.8).abs() <= 1e-12, "eps0 {eps0}");

    let (eps, delta) = bound::privacy_epsilon(0.01, 100, 1000, 1e-3).unwrap();
    assert!(
        (eps - 0.53570234405986125).abs() <= 1e-3,
        "eps {eps} vs high-precision 0.53570234405986125"
    );
    assert_eq!(delta, 1e-6);

    // Monotonicity grids.
    let mut last = -1.0;
    for i in 0..10 {
        let v = bound::generalization_bound(0.3 * i as f64, 0.0, 1.0, 200, 0.05, 1.0);
        assert!(v >= last);
        last = v;
    }
    let mut last = -1.0;
    for i in 0..10 {
        let v = bound::generalization_bound(0.5, 0.05 * i as f64, 1.0, 200, 0.05, 1.0);
        assert!(v >= last);
        last = v;
    }

    // Removing any factor >= 1 cannot increase eps0.
    let ratios = [1.9, 1.0, 2.4, 1.1];
    let full = bound::epsilon0(&ratios, 1.0, 100, 0.1).unwrap();
    for drop in 0..ratios.len() {
        let rest: Vec<f64> = ratios
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, &r)| r)
            .collect();
        let v = bound::epsilon0(&rest, 1.0, 100, 0.1).unwrap();
        assert!(v <= full + 1e-15);
    }
    pass(
        "c10 bound calculator",
        "eps0 = 0.8, eps ~ 0.5357, delta exact, monotone grids, factor removal",
    );
}

// ── c11: catastrophic-overfitting monitor ────────────────────────────

#[test]
fn c11_overfitting_monitor() {
    let collapse = [0.40, 0.42, 0.41, 0.02, 0.01];
    assert_eq!(
        eval::overfitting_monitor(&collapse, MonitorThresholds::default()),
        Some(3)
    );
    let monotone = [0.05, 0.10, 0.20, 0.30, 0.40];
    assert_eq!(
        eval::overfitting_monitor(&monotone, MonitorThresholds::default()),
        None
    );
    pass("c11 overfitting monitor", "collapse at index 3, monotone none");
}

// ── c12: loader fixtures ─────────────────────────────────────────────

#[test]
fn c12_loader_fixtures() {
    let dir = tempfile::tempdir().unwrap();

    // IDX pair with known bytes.
    let mut images = vec![0x00, 0x00, 0x08, 0x03];
    images.extend(2u32.to_be_bytes());
    images.extend(2u32.to_be_bytes());
    images.extend(2u32.to_be_bytes());
    let pixels: [u8; 8] = [0, 64, 128, 255, 17, 34, 51, 68];
    images.extend(pixels);
    let mut labels = vec![0x00, 0x00, 0x08, 0x01];
    labels.extend(2u32.to_be_bytes());
    labels.extend([3u8, 1u8]);
    let images_path = dir.path().join("imgs");
    let labels_path = dir.path().join("lbls");
    std::fs::write(&images_path, &images).unwrap();
    std::fs::write(&labels_path, &labels).unwrap();

    let d = load_idx(&images_path, &labels_path).unwrap();
    let expected: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    assert_eq!(d.examples.data(), expected.as_slice());
    assert_eq!(d.labels, vec![3, 1]);

    // Malformed inputs raise the designated distinguishable errors.
    let empty = dir.path().join("empty");
    std::fs::write(&empty, b"").unwrap();
    assert!(matches!(
        load_idx(&empty, &labels_path),
        Err(Error::Format { kind: FormatError::Truncated { .. }, .. })
    ));
    assert!(matches!(
        load_idx(&labels_path, &images_path),
        Err(Error::Format { kind: FormatError::BadMagic { .. }, .. })
    ));
    let mut short_labels = vec![0x00, 0x00, 0x08, 0x01];
    short_labels.extend(3u32.to_be_bytes());
    short_labels.extend([1u8, 1u8, 1u8]);
    let short_path = dir.path().join("mismatched");
    std::fs::write(&short_path, &short_labels).unwrap();
    assert!(matches!(
        load_idx(&images_path, &short_path),
        Err(Error::Format { kind: FormatError::CountMismatch(_), .. })
    ));

    // CIFAR record round trip.
    let mut record = vec![5u8];
    record.extend((0..3072u32).map(|i| (i % 251) as u8));
    let cifar_path = dir.path().join("batch.bin");
    std::fs::write(&cifar_path, &record).unwrap();
    let d = load_cifar_binary(&[cifar_path.clone()]).unwrap();
    assert_eq!(d.labels, vec![5]);
    let expected: Vec<f64> = (0..3072u32).map(|i| (i % 251) as f64 / 255.0).collect();
    assert_eq!(d.examples.data(), expected.as_slice());

    std::fs::write(&cifar_path, &record[..1000]).unwrap();
    assert!(matches!(
        load_cifar_binary(&[cifar_path]),
        Err(Error::Format { kind: FormatError::Truncated { .. }, .. })
    ));

    pass(
        "c12 loader fixtures",
        "hand-authored fixtures round-trip bit-exactly; malformed files raise typed errors",
    );
}
