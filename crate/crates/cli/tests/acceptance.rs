//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use mscnn_core::analysis::count_parameters;
use mscnn_core::bench::{relative_improvement, rtf, BenchReport};
use mscnn_core::frontend::specaugment::{apply_masks, sample_masks, spec_augment, Axis, SpecAugmentPolicy};
use mscnn_core::frontend::stem::build_conv2d_stem;
use mscnn_core::kernels::ConvSpec1D;
use mscnn_core::layers::{Affine, BatchNorm, BatchNormConfig, Conv1d, Conv2d, Dropout, Layer, Mode, Relu};
use mscnn_core::model_config::{ModelConfig, StemSpec};
use mscnn_core::multistream::Model;
use mscnn_core::tdnnf::{TdnnfConfig, TdnnfLayer};
use mscnn_core::trainer::checkpoint::Checkpoint;
use mscnn_core::trainer::data::{synth_dataset, SynthSpec};
use mscnn_core::trainer::{evaluate, lr_at, TrainConfig, Trainer};
use mscnn_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- gradients

// The fourth-order stencil allows a step wide enough that cancellation stays
// well below the smallest gradients checked, yet narrow enough to rarely
// straddle a ReLU kink.
const FD_STEP: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn projected(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Five-point central difference of `f` at zero; truncation error is O(h⁴).
fn derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Worst relative error between backprop and finite differences of `Σ out ⊙ w`
/// over the input and every parameter scalar.
fn fd_check(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, seed: u64) -> f64 {
    let mode = Mode::Training { step: 7 };
    let probe = layer.forward(input, mode).unwrap();
    let w = random(probe.shape(), seed);
    layer.zero_grad();
    layer.forward(input, mode).unwrap();
    let gx = layer.backward(&w).unwrap();

    let mut worst: f64 = 0.0;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let numeric = derivative(|delta| {
            x.data_mut()[i] = orig + delta;
            projected(&layer.forward(&x, mode).unwrap(), &w)
        });
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(gx.data()[i], numeric));
    }

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |n, p| grads.push((n.to_string(), p.grad.data().to_vec())));
    for (name, analytic) in &grads {
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = derivative(|delta| {
                layer.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let v = projected(&layer.forward(input, mode).unwrap(), &w);
                layer.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] -= delta;
                    }
                });
                v
            });
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

fn tiny_two_stream() -> ModelConfig {
    let mut cfg = ModelConfig::from_notation(6, "1-2", 8)
        .unwrap()
        .with_stream_layers(2)
        .with_dropout(0.2);
    for s in &mut cfg.streams {
        s.bottleneck_dim = 4;
    }
    cfg.stem = StemSpec::tdnnf(1, 8);
    cfg.stem.bottleneck_dim = 3;
    cfg.stem.dropout_p = 0.2;
    cfg.head_dim = 6;
    cfg.output_dim = 4;
    cfg.seed = 5;
    cfg
}

fn criterion_gradients() -> Check {
    let mut cases: Vec<(&str, Box<dyn Layer<f64>>, Tensor<f64>)> = vec![
        ("affine", Box::new(Affine::new(5, 4, 1, "fc")), random(&[2, 3, 5], 1)),
        ("relu", Box::new(Relu::new()), random(&[2, 3, 5], 2)),
        (
            "batchnorm",
            Box::new(BatchNorm::new(4, BatchNormConfig::default())),
            random(&[2, 5, 4], 3),
        ),
        (
            "dropout",
            Box::new(Dropout::new(0.3, 9).unwrap()),
            random(&[2, 4, 5], 4),
        ),
        (
            "conv1d",
            Box::new(Conv1d::new(ConvSpec1D::dilated3(3, 4, 2).unwrap(), true, 2, "conv")),
            random(&[2, 9, 3], 5),
        ),
        (
            "conv2d",
            Box::new(Conv2d::new(2, 3, 2, 3, "conv2d").unwrap()),
            random(&[1, 6, 5, 2], 6),
        ),
        (
            "tdnnf",
            Box::new(TdnnfLayer::new(TdnnfConfig::square(6, 3, 2, 0.2), 4, "tdnnf").unwrap()),
            random(&[2, 10, 6], 7),
        ),
        (
            "conv2d_stem",
            Box::new(build_conv2d_stem(8, &[2, 2, 2, 2, 3], BatchNormConfig::default(), 5, "stem").unwrap()),
            random(&[2, 14, 8], 8),
        ),
    ];
    let model = Model::<f64>::new(tiny_two_stream()).map_err(|e| e.to_string())?;
    let need = model.config().min_frames();
    cases.push(("multistream model", Box::new(model), random(&[2, need + 2, 6], 9)));

    let start = Instant::now();
    let mut worst_all: f64 = 0.0;
    for (i, (name, layer, x)) in cases.iter_mut().enumerate() {
        let worst = fd_check(layer.as_mut(), x, 100 + i as u64);
        ensure(worst < 1e-4, || format!("{name}: max relative error {worst:.3e}"))?;
        worst_all = worst_all.max(worst);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} layer types + 2-stream model, worst rel err {worst_all:.2e}, {secs:.1}s",
        cases.len() - 1
    ))
}

// ------------------------------------------------------------ orthogonality

fn criterion_semi_orthogonal() -> Check {
    let mut layer = TdnnfLayer::<f64>::new(TdnnfConfig::square(128, 32, 1, 0.0), 0, "l").map_err(|e| e.to_string())?;
    let first = layer.ortho_defect();
    let mut prev = first;
    // Once converged the defect sits at the f64 rounding floor, where it may
    // wobble by a few ulps of the identity.
    let floor = 64.0 * f64::EPSILON;
    for step in 0..200 {
        layer.semi_orthogonal_step();
        let d = layer.ortho_defect();
        ensure(d <= prev || d < floor, || {
            format!("defect rose at step {step}: {prev:.3e} -> {d:.3e}")
        })?;
        prev = d;
    }
    ensure(prev < 1e-3, || format!("final defect {prev:.3e}"))?;
    Ok(format!(
        "defect {first:.3e} -> {prev:.3e} over 200 steps, non-increasing"
    ))
}

// ------------------------------------------------------------ grid alignment

fn grid_config(streams: &str) -> ModelConfig {
    let mut cfg = ModelConfig::from_notation(8, streams, 16).unwrap().with_dropout(0.0);
    cfg.stem.dropout_p = 0.0;
    cfg.head_dim = 16;
    cfg.output_dim = 5;
    cfg.seed = 3;
    cfg
}

/// Random running statistics so batch norm is not the identity.
fn randomize_buffers(model: &mut Model<f64>) {
    let mut k = 0;
    model.visit_buffers_mut(&mut |name, b| {
        k += 1;
        let r = random(b.shape(), 500 + k);
        *b = if name.ends_with("running_var") {
            r.map(|v| 0.5 + v.abs())
        } else {
            r
        };
    });
}

/// Overwrite branch frames whose index is not a multiple of `rate`.
fn corrupt_off_grid(h: &Tensor<f64>, rate: usize) -> Tensor<f64> {
    let d = h.dim(2);
    let t = h.dim(1);
    let mut out = h.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !(i / d % t).is_multiple_of(rate) {
            *v = 1e3;
        }
    }
    out
}

fn criterion_grid_alignment() -> Check {
    let rate = 3;
    let mut aligned = Model::<f64>::new(grid_config("3-6-9")).map_err(|e| e.to_string())?;
    randomize_buffers(&mut aligned);
    let frames = aligned.config().min_frames() + 3 * rate + 1;
    let x = random(&[2, frames, 8], 21);
    let full = aligned.infer(&x).map_err(|e| e.to_string())?;
    let sub = aligned.infer_subsampled(&x, rate).map_err(|e| e.to_string())?;
    ensure(sub == full.stride_time(rate), || {
        "3-6-9: subsampled output differs from strided output".into()
    })?;

    // The stem reads every frame, so off-grid corruption is applied where the
    // streams begin.
    let h = aligned.stem_infer(&x).map_err(|e| e.to_string())?;
    let hc = corrupt_off_grid(&h, rate);
    let a = aligned
        .infer_from_branch_subsampled(&h, rate)
        .map_err(|e| e.to_string())?;
    let b = aligned
        .infer_from_branch_subsampled(&hc, rate)
        .map_err(|e| e.to_string())?;
    ensure(a == b, || {
        "3-6-9: off-grid corruption changed subsampled outputs".into()
    })?;
    let strided_clean = aligned
        .infer_from_branch(&h)
        .map_err(|e| e.to_string())?
        .stride_time(rate);
    let strided_bad = aligned
        .infer_from_branch(&hc)
        .map_err(|e| e.to_string())?
        .stride_time(rate);
    ensure(strided_clean == strided_bad, || {
        "3-6-9: corruption reached on-grid full outputs".into()
    })?;

    let mut off = Model::<f64>::new(grid_config("1-2-3")).map_err(|e| e.to_string())?;
    randomize_buffers(&mut off);
    ensure(
        matches!(
            off.infer_subsampled(&x, rate),
            Err(Error::NotGridAligned { stream: 0, .. })
        ),
        || "1-2-3: subsampled inference was not refused".into(),
    )?;
    let h = off.stem_infer(&x).map_err(|e| e.to_string())?;
    let hc = corrupt_off_grid(&h, rate);
    let clean = off.infer_from_branch(&h).map_err(|e| e.to_string())?.stride_time(rate);
    let bad = off.infer_from_branch(&hc).map_err(|e| e.to_string())?.stride_time(rate);
    let diff = clean.max_abs_diff(&bad);
    ensure(diff > 0.0, || {
        "1-2-3: off-grid corruption left on-grid outputs unchanged".into()
    })?;
    Ok(format!(
        "3-6-9 bit-exact over {} output frames and corruption-blind; 1-2-3 on-grid outputs move by {diff:.2e}",
        sub.dim(1)
    ))
}

// ------------------------------------------------------------ parameter counts

fn criterion_parameters() -> Check {
    let mut lines = Vec::new();
    for (d, target) in [(512usize, 20.6e6), (1536, 73.2e6)] {
        let cfg = ModelConfig::from_notation(40, "6-9-12", d).map_err(|e| e.to_string())?;
        let n = count_parameters(&cfg).total as f64;
        let rel = (n - target) / target;
        ensure(rel.abs() <= 0.2, || {
            format!("d={d}: {n} params is {:+.1}% off {target}", 100.0 * rel)
        })?;
        lines.push(format!("d={d}: {:.2}M ({:+.1}%)", n / 1e6, 100.0 * rel));
    }
    let layer = TdnnfConfig::square(1536, 160, 1, 0.0).param_count();
    ensure(layer == 987_648, || format!("TDNN-F layer count {layer}"))?;
    let built = Model::<f32>::new(ModelConfig::from_notation(40, "6-9-12", 512).unwrap()).map_err(|e| e.to_string())?;
    let counted = count_parameters(built.config()).total;
    ensure(built.num_params() == counted, || {
        format!("built {} vs counted {counted}", built.num_params())
    })?;
    Ok(format!("{}, layer {layer}, built model agrees", lines.join(", ")))
}

// ------------------------------------------------------------ toy benefit

fn toy_config(streams: &str, d: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::from_notation(8, streams, d)
        .unwrap()
        .with_stream_layers(3)
        .with_dropout(0.0);
    cfg.stem = StemSpec::tdnnf(2, 16);
    cfg.stem.dropout_p = 0.0;
    cfg.head_dim = 32;
    cfg.output_dim = 3;
    cfg.seed = seed;
    cfg
}

fn heldout_accuracy(cfg: ModelConfig, seed: u64) -> Result<f64, String> {
    let spec = SynthSpec {
        num_utterances: 150,
        frames: 120,
        feature_dim: 8,
        periods: vec![5.0, 20.0, 80.0],
        noise: 0.8,
        pattern_spread: 0.1,
        seed,
        ..SynthSpec::default()
    };
    let train = synth_dataset(&spec).map_err(|e| e.to_string())?.data;
    let heldout = synth_dataset(&SynthSpec {
        num_utterances: 30,
        seed: seed + 1000,
        ..spec
    })
    .map_err(|e| e.to_string())?
    .data;
    let config = TrainConfig {
        lr_start: 2e-2,
        lr_end: 2e-3,
        epochs: 20,
        minibatch: 8,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::new(cfg).map_err(|e| e.to_string())?, config).map_err(|e| e.to_string())?;
    trainer.train(&train).map_err(|e| e.to_string())?;
    Ok(evaluate(&trainer.model, &heldout).map_err(|e| e.to_string())?.accuracy)
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn criterion_toy_benefit() -> Check {
    let start = Instant::now();
    let multi = count_parameters(&toy_config("3-6-9", 16, 0)).total;
    let single = count_parameters(&toy_config("3", 31, 0)).total;
    let gap = (multi as f64 - single as f64).abs() / multi as f64;
    ensure(gap < 0.05, || format!("budgets differ by {:.1}%", 100.0 * gap))?;
    let mut ms = Vec::new();
    let mut ss = Vec::new();
    for seed in 0..3 {
        ms.push(heldout_accuracy(toy_config("3-6-9", 16, seed), seed)?);
        ss.push(heldout_accuracy(toy_config("3", 31, seed), seed)?);
    }
    let (m, s) = (median3(ms.clone()), median3(ss.clone()));
    let secs = start.elapsed().as_secs_f64();
    ensure(m >= s, || {
        format!("multistream median {m:.4} < single-stream {s:.4} ({ms:?} vs {ss:?})")
    })?;
    Ok(format!(
        "3-6-9 ({multi} params) median {m:.4} vs r=3 ({single} params) median {s:.4}, {secs:.0}s"
    ))
}

// ------------------------------------------------------------ schedule

fn criterion_schedule() -> Check {
    let cfg = TrainConfig::default();
    let total = cfg.total_steps(1000);
    let first = lr_at(&cfg, 0, total).map_err(|e| e.to_string())?;
    let last = lr_at(&cfg, total, total).map_err(|e| e.to_string())?;
    ensure(first == 1e-3, || format!("step 0 gives {first:e}"))?;
    ensure(last == 1e-5, || format!("step {total} gives {last:e}"))?;
    let mid = lr_at(&cfg, total / 2, total).map_err(|e| e.to_string())?;
    ensure(mid < first && mid > last, || format!("midpoint {mid:e} outside range"))?;
    Ok(format!("lr(0) = {first:e}, lr({total}) = {last:e} exactly"))
}

// ------------------------------------------------------------ augmentation

fn criterion_spec_augment() -> Check {
    let x = Tensor::from_fn(&[300, 40], |i| (i as f32 * 0.37).sin());
    ensure(spec_augment(&x, &SpecAugmentPolicy::none()) == x, || {
        "zero-mask policy changed input".into()
    })?;

    let policy = SpecAugmentPolicy {
        seed: 17,
        mask_value: -7.5,
        ..SpecAugmentPolicy::default()
    };
    let y = spec_augment(&x, &policy);
    ensure(y == spec_augment(&x, &policy), || {
        "same seed gave different output".into()
    })?;
    ensure(
        y != spec_augment(
            &x,
            &SpecAugmentPolicy {
                seed: 18,
                ..policy.clone()
            },
        ),
        || "different seeds gave identical output".into(),
    )?;
    let masks = sample_masks(&policy, 300, 40);
    for t in 0..300 {
        for f in 0..40 {
            let covered = masks.iter().any(|m| {
                let i = if m.axis == Axis::Time { t } else { f };
                i >= m.start && i < m.start + m.width
            });
            let (a, b) = (x.data()[t * 40 + f], y.data()[t * 40 + f]);
            if covered {
                ensure(b == policy.mask_value, || format!("masked entry ({t},{f}) is {b}"))?;
            } else {
                ensure(a.to_bits() == b.to_bits(), || {
                    format!("untouched entry ({t},{f}) changed")
                })?;
            }
        }
    }
    let mut check = x.clone();
    apply_masks(&mut check, &masks, policy.mask_value);
    ensure(check == y, || "apply_masks disagrees with spec_augment".into())?;

    let draws = 10_000;
    let w = 20usize;
    let mut total = 0usize;
    for seed in 0..draws {
        let p = SpecAugmentPolicy {
            num_freq_masks: 0,
            num_time_masks: 1,
            max_time_width: w,
            seed,
            ..SpecAugmentPolicy::default()
        };
        total += sample_masks(&p, 1000, 40)[0].width;
    }
    let mean = total as f64 / draws as f64;
    let rel = (mean - w as f64 / 2.0).abs() / (w as f64 / 2.0);
    ensure(rel < 0.05, || format!("mean width {mean:.3} vs {}", w / 2))?;
    Ok(format!(
        "identity, bit-equality and seeding hold; mean width {mean:.3} vs {}",
        w / 2
    ))
}

// ------------------------------------------------------------ checkpoint

fn criterion_checkpoint() -> Check {
    let data = synth_dataset(&SynthSpec {
        num_utterances: 9,
        frames: 30,
        feature_dim: 6,
        seed: 8,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?
    .data;
    let cfg = tiny_two_stream().with_dropout(0.1);
    let train = TrainConfig {
        lr_start: 2e-2,
        lr_end: 1e-3,
        epochs: 3,
        minibatch: 2,
        constraint_interval: 2,
        seed: 12,
        ..TrainConfig::default()
    };
    let new = || Trainer::new(Model::new(cfg.clone()).unwrap(), train.clone()).unwrap();

    let mut full = new();
    let mut full_steps = Vec::new();
    let full_logs = full
        .train_until(&data, None, |s| full_steps.push(s))
        .map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let mut first = new();
    let mut steps = Vec::new();
    let mut logs = first
        .train_until(&data, Some(7), |s| steps.push(s))
        .map_err(|e| e.to_string())?;
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&loaded).map_err(|e| e.to_string())?;
    logs.extend(
        resumed
            .train_until(&data, None, |s| steps.push(s))
            .map_err(|e| e.to_string())?,
    );

    ensure(steps.len() == full_steps.len(), || {
        format!("{} vs {} steps", steps.len(), full_steps.len())
    })?;
    for (a, b) in steps.iter().zip(&full_steps) {
        ensure(
            a.loss.to_bits() == b.loss.to_bits() && a.lr.to_bits() == b.lr.to_bits(),
            || format!("step {} diverged: {a:?} vs {b:?}", a.step),
        )?;
    }
    ensure(logs == full_logs, || "epoch logs differ".into())?;
    let a = resumed.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    let b = full.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    ensure(a == b, || "final checkpoints differ".into())?;
    Ok(format!(
        "resume at step 7 of {} reproduces every step and the final {}-byte checkpoint",
        steps.len(),
        a.len()
    ))
}

// ------------------------------------------------------------ benchmark

fn criterion_benchmark() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let frames = rng.gen_range(100..100_000usize);
        let shift = rng.gen_range(0.005..0.03);
        let times: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..10.0)).collect();
        let r = BenchReport::from_times(frames, 1, shift, times.clone());
        let mut sorted = times;
        sorted.sort_by(f64::total_cmp);
        let expect = sorted[2] / (frames as f64 * shift);
        ensure(r.rtf == expect && rtf(sorted[2], frames, shift) == expect, || {
            format!("rtf {} vs {expect}", r.rtf)
        })?;
        let (base, new) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
        let imp = relative_improvement(base, new);
        ensure(
            (imp - (base - new) / base).abs() <= f64::EPSILON * imp.abs().max(1.0),
            || format!("improvement {imp} for {base}, {new}"),
        )?;
    }
    ensure(rtf(5.0, 1000, 0.01) == 0.5, || {
        "rtf(5 s, 1000 frames, 10 ms) != 0.5".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig::from_notation(40, "6-9-12", 512).map_err(|e| e.to_string())?;
    let frames = cfg.min_frames() + 31;
    let model = Model::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let params = model.num_params();
    let path = dir.path().join("20m.ckpt");
    Checkpoint::from_model(&model, TrainConfig::default())
        .save(&path)
        .map_err(|e| e.to_string())?;
    drop(model);
    let out = Command::new(env!("CARGO_BIN_EXE_mscnn"))
        .args([
            "bench",
            "--json",
            "--reps",
            "5",
            "--frames",
            &frames.to_string(),
            "--checkpoint",
        ])
        .arg(&path)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("bench failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let r = report["rtf"].as_f64().unwrap_or(f64::NAN);
    ensure(r.is_finite() && r > 0.0, || format!("rtf {r}"))?;
    Ok(format!(
        "formulas exact over 1000 random cases; {:.1}M-param model, {frames} frames: RTF {r:.4}",
        params as f64 / 1e6
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient correctness", criterion_gradients),
        ("semi-orthogonality", criterion_semi_orthogonal),
        ("grid alignment", criterion_grid_alignment),
        ("parameter accounting", criterion_parameters),
        ("multistream benefit at toy scale", criterion_toy_benefit),
        ("schedule endpoints", criterion_schedule),
        ("SpecAugment", criterion_spec_augment),
        ("checkpoint round-trip", criterion_checkpoint),
        ("benchmark formula", criterion_benchmark),
    ];
    // A filter argument (as passed by `cargo test <name>`) selects criteria by name.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
