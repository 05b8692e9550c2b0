//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tryflow::eval::{attention_localization, evaluate, select_probes, zero_head, EvalOptions};
use tryflow::flow::{
    draw_noise, euler_step, interpolate, predict_x0, target_velocity, temperature, training_loss_with, CorrectionPlan, LossSupport,
    NoiseSchedule, OptimizerConfig, TemperatureParams, TokenCounts, TrainItem,
};
use tryflow::layout::{apply_mask, build_mask, concat_pair, tokenize, Category, Codec, LatentGrid, Mode, TaskToken};
use tryflow::metrics::layer_update_report;
use tryflow::model::{forward, ModelConfig, ModelParams, Strategy};
use tryflow::numerics::{Array, Tape, Var};
use tryflow::synthwear::{gen_pair, DatasetSpec, SamplePair};
use tryflow::train::{train, TaskSelection, TrainConfig};

// Toy training recipe shared by criteria 5-10.
const TRAIN_PAIRS: usize = 256;
const VAL_PAIRS: usize = 16;
const VAL_SEED: u64 = 1000;
const BASE_STEPS: usize = 3000;
const BASE_LR: f32 = 5e-4;
const BASE_SEED: u64 = 0;
const FT_STEPS: usize = 2000;
const SUPPORT: LossSupport = LossSupport::Masked;
const SEEDS: [u64; 3] = [0, 1, 2];
const BRIEF_FULL_STEPS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LatentGrid {
    LatentGrid::new(h, w, c, (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn max_diff(a: &LatentGrid, b: &LatentGrid) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn flow_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_x0 = 0f32;
    for _ in 0..1000 {
        let (z0, z1) = (normal_grid(&mut rng, 4, 4, 3), normal_grid(&mut rng, 4, 4, 3));
        let t: f32 = rng.gen_range(0.0..=1.0);
        let zt = interpolate(&z0, &z1, t).unwrap();
        let v = target_velocity(&z0, &z1).unwrap();
        worst_x0 = worst_x0.max(max_diff(&predict_x0(&zt, &v, t).unwrap(), &z0));
    }
    let mut worst_euler = 0f32;
    for steps in [1, 4, 28] {
        let sched = NoiseSchedule::linear(steps).unwrap();
        for _ in 0..50 {
            let (z0, z1) = (normal_grid(&mut rng, 4, 4, 3), normal_grid(&mut rng, 4, 4, 3));
            let v = target_velocity(&z0, &z1).unwrap();
            let mut z = z1;
            for k in (1..=steps).rev() {
                z = euler_step(&z, &v, sched.sigma(k), sched.sigma(k - 1)).unwrap();
            }
            worst_euler = worst_euler.max(max_diff(&z, &z0));
        }
    }
    outcome(
        worst_x0 <= 1e-6 && worst_euler <= 1e-5,
        format!("predict_x0 max err {worst_x0:.2e} over 1000 draws; Euler T in {{1,4,28}} max err {worst_euler:.2e}"),
    )
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
}

/// Worst relative error between reverse-mode and central differences over
/// probes where the analytic gradient is non-negligible.
fn fd_check(inputs: Vec<Array>, build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> (f64, usize) {
    let h = 1e-3f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |xs: &[Array], w: Option<&Array>| -> (f64, Vec<usize>, Option<Vec<Array>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let Some(w) = w else { return (0.0, shape, None) };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv);
        let s = tape.sum(prod);
        (tape.value(s).item() as f64, shape, Some(tape.grad(s, &vars).unwrap()))
    };
    let (_, shape, _) = run(&inputs, None);
    let w = rand_array(&mut rng, &shape, 1.0);
    let grads = run(&inputs, Some(&w)).2.unwrap();
    let peak = grads.iter().flat_map(|g| g.data()).fold(0f32, |m, v| m.max(v.abs()));
    let eligible: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.data().iter().enumerate().filter(|(_, v)| v.abs() >= 0.1 * peak).map(move |(j, _)| (i, j)))
        .collect();
    let mut worst = 0f64;
    let probes = 24;
    for _ in 0..probes {
        let (i, j) = eligible[rng.gen_range(0..eligible.len())];
        let mut plus = inputs.clone();
        plus[i].data_mut()[j] += h;
        let mut minus = inputs.clone();
        minus[i].data_mut()[j] -= h;
        let num = (run(&plus, Some(&w)).0 - run(&minus, Some(&w)).0) / (2.0 * h as f64);
        let ana = grads[i].data()[j] as f64;
        worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
    }
    (worst, probes)
}

fn gradient_suite() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut a = |shape: &[usize], s: f32| rand_array(&mut r, shape, s);
    let positions = std::rc::Rc::new(vec![(0, 0), (1, 3), (2, 5), (4, 1)]);
    let index = std::rc::Rc::new(vec![3u32, 0, 0, 11, 7, 5]);
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Array>, Build)> = vec![
        ("matmul", vec![a(&[5, 4], 1.0), a(&[4, 6], 1.0)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_bt", vec![a(&[5, 4], 1.0), a(&[6, 4], 1.0)], Box::new(|t, v| t.matmul_t(v[0], v[1], false, true))),
        ("matmul_at", vec![a(&[4, 5], 1.0), a(&[4, 6], 1.0)], Box::new(|t, v| t.matmul_t(v[0], v[1], true, false))),
        ("add", vec![a(&[4, 6], 1.0), a(&[4, 6], 1.0)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![a(&[4, 6], 1.0), a(&[4, 6], 1.0)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a(&[4, 6], 1.0), a(&[1, 6], 1.0)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("gelu", vec![a(&[4, 6], 3.0)], Box::new(|t, v| t.gelu(v[0]))),
        ("silu", vec![a(&[4, 6], 3.0)], Box::new(|t, v| t.silu(v[0]))),
        ("layer_norm", vec![a(&[5, 8], 2.0)], Box::new(|t, v| t.layer_norm(v[0]))),
        ("softmax_scaled", vec![a(&[4, 7], 2.0)], Box::new(|t, v| t.softmax_scaled(v[0], 0.35))),
        ("rope", vec![a(&[4, 16], 1.0)], Box::new(move |t, v| t.rope(v[0], positions.clone(), 8, 10_000.0))),
        ("gather", vec![a(&[3, 4], 1.0)], Box::new(move |t, v| t.gather(v[0], index.clone(), &[2, 3]))),
        ("concat_slice", vec![a(&[3, 4], 1.0), a(&[3, 2], 1.0)], Box::new(|t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            t.slice_rows(c, 1, 2)
        })),
        ("sum_squares", vec![a(&[3, 4], 1.0)], Box::new(|t, v| t.sum_squares(v[0]))),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut probes_min = usize::MAX;
    for (k, (name, inputs, build)) in cases.into_iter().enumerate() {
        let (e, n) = fd_check(inputs, &*build, 100 + k as u64);
        probes_min = probes_min.min(n);
        worst.push((name.to_string(), e));
    }
    worst.push(("training_loss".into(), training_loss_check()));
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let (name, _) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    outcome(
        max < 1e-2 && probes_min >= 20,
        format!("{} checks, >= {probes_min} probes each, worst rel err {max:.2e} ({name})", worst.len()),
    )
}

fn training_loss_check() -> f64 {
    let cfg = ModelConfig { token_dim: 16, head_count: 2, head_dim: 8, block_count: 1, conditioning_dim: 8, n_max: 64, ..Default::default() };
    let mut params = ModelParams::init(&cfg, 11).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for t in &mut params.tensors {
        if t.label == "head" {
            let shape = t.value.shape().to_vec();
            t.value = rand_array(&mut r, &shape, 0.3);
        }
    }
    params.select_trainable(Strategy::Full);
    let mut batch = Vec::new();
    for (seed, mode) in [(1u64, Mode::On), (2, Mode::Off)] {
        let pair = gen_pair(seed, Category::Upper, 16, 16).unwrap();
        let task = TaskToken::new(mode, Category::Upper);
        let mask = build_mask(task, 16, 16, pair.person_mask.as_ref()).unwrap();
        batch.push(TrainItem { canvas: concat_pair(&pair.garment, &pair.person).unwrap(), mask, task });
    }
    let draws: Vec<_> = batch.iter().map(|_| draw_noise(&mut r, 8, 16, 12)).collect();
    let loss = |p: &ModelParams| training_loss_with(p, &batch, &draws, LossSupport::All).unwrap();
    let base = loss(&params);
    let grads: Vec<&Array> = base.grads.iter().map(|g| g.as_ref().unwrap()).collect();
    let peak = grads.iter().flat_map(|g| g.data()).fold(0f32, |m, v| m.max(v.abs()));
    let eligible: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.data().iter().enumerate().filter(|(_, v)| v.abs() >= 0.1 * peak).map(move |(j, _)| (i, j)))
        .collect();
    let h = 1e-2f32;
    let mut worst = 0f64;
    for _ in 0..24 {
        let (i, j) = eligible[r.gen_range(0..eligible.len())];
        let mut plus = params.clone();
        plus.tensors[i].value.data_mut()[j] += h;
        let mut minus = params.clone();
        minus.tensors[i].value.data_mut()[j] -= h;
        let num = (loss(&plus).loss as f64 - loss(&minus).loss as f64) / (2.0 * h as f64);
        let ana = grads[i].data()[j] as f64;
        worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
    }
    worst
}

/// Direct transcription of the temperature rule, independent of the library.
#[allow(clippy::too_many_arguments)]
fn temperature_oracle(d: f64, n_infer: f64, n_train: f64, n_mask: f64, n_garment: f64, alpha: f64, beta: f64, c: f64) -> f64 {
    (1.0 / d).sqrt() * (alpha * n_infer.ln() / n_train.ln()).sqrt() * ((n_mask + c).ln() / (beta * n_garment + c).ln()).sqrt()
}

fn temperature_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    let mut grid: Vec<(usize, TokenCounts, TemperatureParams)> = vec![
        (64, TokenCounts { n_infer: 8192, n_train: 4096, n_mask: 512, n_garment: 2048 }, TemperatureParams { alpha: 1.0, beta: 0.43, c: 1.0 }),
        (32, TokenCounts { n_infer: 300, n_train: 300, n_mask: 40, n_garment: 100 }, TemperatureParams { alpha: 1.0, beta: 0.4, c: 1.0 }),
    ];
    while grid.len() < 50 {
        let d = [8usize, 16, 32, 64, 128][rng.gen_range(0..5)];
        let counts = TokenCounts {
            n_infer: rng.gen_range(1..20_000),
            n_train: rng.gen_range(2..20_000),
            n_mask: rng.gen_range(1..4000),
            n_garment: rng.gen_range(1..4000),
        };
        let tp = TemperatureParams { alpha: rng.gen_range(0.25..2.0), beta: rng.gen_range(0.1..1.0), c: rng.gen_range(0.5..3.0) };
        grid.push((d, counts, tp));
    }
    let mut values = Vec::new();
    for (d, k, tp) in &grid {
        let got = temperature(*d, *k, tp).unwrap();
        let want = temperature_oracle(*d as f64, k.n_infer as f64, k.n_train as f64, k.n_mask as f64, k.n_garment as f64, tp.alpha, tp.beta, tp.c);
        worst = worst.max((got - want).abs());
        values.push(got);
    }
    let worked = values[0];
    let neutral_err = (values[1] - 1.0 / 32f64.sqrt()).abs();
    outcome(
        worst <= 1e-6 && (worked - 0.1248).abs() < 5e-5 && neutral_err <= 1e-12,
        format!("50-point grid max err {worst:.1e}; worked case {worked:.5}; neutral case err {neutral_err:.1e}"),
    )
}

fn layout_suite() -> Outcome {
    let codec = Codec::new(2).unwrap();
    let pairs = DatasetSpec { pair_count: 24, seed: 7, ..Default::default() }.generate().unwrap();
    let mut roundtrip = true;
    let mut algebra = true;
    let mut mass = true;
    for p in &pairs {
        let (h, w) = (p.height(), p.width());
        let canvas = concat_pair(&p.garment, &p.person).unwrap();
        let back = codec.decode(&codec.encode(&canvas).unwrap()).unwrap();
        roundtrip &= back.image().data().iter().zip(canvas.image().data()).all(|(a, b)| a.to_bits() == b.to_bits());

        let m_on = p.person_mask.as_ref().unwrap();
        for mode in Mode::ALL {
            let m = build_mask(TaskToken::new(mode, p.category), h, w, Some(m_on)).unwrap();
            let masked = apply_mask(&canvas, &m).unwrap();
            for y in 0..h {
                for x in 0..2 * w {
                    let hit = match mode {
                        Mode::On => x >= w && m_on.get(y, x - w),
                        Mode::Off => x < w,
                    };
                    let want = if hit { [0.0; 3] } else { canvas.image().pixel(y, x) };
                    algebra &= masked.image().pixel(y, x) == want && m.mask().get(y, x) == hit;
                }
            }
            let grid = codec.downsample_mask(&m).unwrap();
            mass &= grid.data().iter().map(|&v| v as f64).sum::<f64>() == m.mask().count() as f64;
        }
    }
    // Padding invariance of the forward pass on valid tokens.
    let cfg = ModelConfig::default();
    let mut params = ModelParams::init(&cfg, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for t in &mut params.tensors {
        if t.label == "head" {
            let shape = t.value.shape().to_vec();
            t.value = rand_array(&mut r, &shape, 0.1);
        }
    }
    let p = &pairs[0];
    let canvas = concat_pair(&p.garment, &p.person).unwrap();
    let task = TaskToken::new(Mode::On, p.category);
    let m = build_mask(task, p.height(), p.width(), p.person_mask.as_ref()).unwrap();
    let z_c = codec.encode(&apply_mask(&canvas, &m).unwrap()).unwrap();
    let m_c = codec.downsample_mask(&m).unwrap();
    let z_t = normal_grid(&mut r, z_c.height(), z_c.width(), z_c.channels());
    let tight = tokenize(&z_t, &z_c, &m_c, cfg.patch, (z_c.height() / 2) * (z_c.width() / 2)).unwrap();
    let padded = tokenize(&z_t, &z_c, &m_c, cfg.patch, cfg.n_max).unwrap();
    let a = forward(&params, &tight, task, 0.4, None).unwrap();
    let b = forward(&params, &padded, task, 0.4, None).unwrap();
    let mut pad_err = 0f32;
    for (i, j) in tight.valid_indices().into_iter().zip(padded.valid_indices()) {
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            pad_err = pad_err.max((x - y).abs());
        }
    }
    outcome(
        roundtrip && algebra && mass && pad_err <= 1e-5,
        format!(
            "codec bitwise {roundtrip}; mask algebra {algebra}; mask mass {mass}; padding {} vs {} tokens max diff {pad_err:.1e}",
            tight.n_max(),
            padded.n_max()
        ),
    )
}

/// Everything the training criteria share.
struct Trained {
    base: ModelParams,
    joint: Vec<ModelParams>,
    off_only: Vec<ModelParams>,
    val: Vec<SamplePair>,
    base_secs: f64,
    joint_secs: Vec<f64>,
}

fn train_from(base: &ModelParams, pairs: &[SamplePair], cfg: &TrainConfig) -> (ModelParams, f64) {
    let t = Instant::now();
    let mut p = base.clone();
    train(&mut p, pairs, cfg, |_| {}).unwrap();
    (p, t.elapsed().as_secs_f64())
}

fn fine_tune_config(seed: u64, task: TaskSelection) -> TrainConfig {
    TrainConfig { steps: FT_STEPS, strategy: Strategy::AttentionOnly, task, loss_support: SUPPORT, seed, ..Default::default() }
}

fn prepare() -> Trained {
    let pairs = DatasetSpec { pair_count: TRAIN_PAIRS, ..Default::default() }.generate().unwrap();
    let val = DatasetSpec { pair_count: VAL_PAIRS, seed: VAL_SEED, ..Default::default() }.generate().unwrap();
    let init = ModelParams::init(&ModelConfig::default(), BASE_SEED).unwrap();
    let base_cfg = TrainConfig {
        steps: BASE_STEPS,
        strategy: Strategy::Full,
        task: TaskSelection::Inpaint,
        loss_support: SUPPORT,
        optimizer: OptimizerConfig { lr: BASE_LR, ..OptimizerConfig::toy() },
        seed: BASE_SEED,
        ..Default::default()
    };
    let (base, base_secs) = train_from(&init, &pairs, &base_cfg);
    eprintln!("  base model: {BASE_STEPS} full inpainting steps in {base_secs:.0} s");
    let mut joint = Vec::new();
    let mut joint_secs = Vec::new();
    let mut off_only = Vec::new();
    for seed in SEEDS {
        let (p, s) = train_from(&base, &pairs, &fine_tune_config(seed, TaskSelection::Both));
        eprintln!("  seed {seed}: joint fine-tune {s:.0} s");
        joint.push(p);
        joint_secs.push(s);
        let (p, s) = train_from(&base, &pairs, &fine_tune_config(seed, TaskSelection::Off));
        eprintln!("  seed {seed}: try-off-only fine-tune {s:.0} s");
        off_only.push(p);
    }
    Trained { base, joint, off_only, val, base_secs, joint_secs }
}

fn val_mse(params: &ModelParams, val: &[SamplePair], mode: Mode) -> f64 {
    evaluate(params, val, mode, &EvalOptions::default()).unwrap().aggregate.masked_mse
}

fn convergence(tr: &Trained) -> Outcome {
    let zero = zero_head(&tr.base);
    let base_on = val_mse(&zero, &tr.val, Mode::On);
    let base_off = val_mse(&zero, &tr.val, Mode::Off);
    let baseline = (base_on + base_off) / 2.0;
    let mut parts = vec![format!("zero-head baseline {baseline:.4} (on {base_on:.4}, off {base_off:.4})")];
    let mut all = true;
    for (seed, p) in SEEDS.iter().zip(&tr.joint) {
        let on = val_mse(p, &tr.val, Mode::On);
        let off = val_mse(p, &tr.val, Mode::Off);
        let mse = (on + off) / 2.0;
        all &= mse < 0.25 * baseline;
        parts.push(format!("seed {seed}: {mse:.4} = {:.3}x (on {on:.4}, off {off:.4})", mse / baseline));
    }
    let total = tr.base_secs + tr.joint_secs.iter().sum::<f64>();
    all &= total < 30.0 * 60.0;
    parts.push(format!("training time {:.1} min", total / 60.0));
    outcome(all, parts.join("; "))
}

fn dual_task(tr: &Trained) -> Outcome {
    let joint: Vec<f64> = tr.joint.iter().map(|p| val_mse(p, &tr.val, Mode::Off)).collect();
    let single: Vec<f64> = tr.off_only.iter().map(|p| val_mse(p, &tr.val, Mode::Off)).collect();
    let (j, s) = (joint.iter().sum::<f64>() / 3.0, single.iter().sum::<f64>() / 3.0);
    outcome(j <= 1.05 * s, format!("try-off MSE joint {joint:.4?} mean {j:.4}; try-off-only {single:.4?} mean {s:.4}; ratio {:.3}", j / s))
}

fn frozen_integrity(tr: &Trained) -> Outcome {
    let mut checked = 0;
    let mut moved = Vec::new();
    for p in tr.joint.iter().chain(&tr.off_only) {
        for (a, b) in tr.base.tensors.iter().zip(&p.tensors) {
            if a.label.starts_with("attention.") {
                continue;
            }
            checked += 1;
            if a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                moved.push(a.name.clone());
            }
        }
    }
    let attn_moved = tr.joint.iter().all(|p| p.tensors.iter().zip(&tr.base.tensors).any(|(a, b)| a.label.starts_with("attention.") && a.value != b.value));
    outcome(moved.is_empty() && attn_moved, format!("{checked} frozen tensors compared over 6 runs; moved: {moved:?}; attention updated {attn_moved}"))
}

fn self_correction(tr: &Trained) -> Outcome {
    let p = &tr.joint[0];
    let plain = EvalOptions::default();
    let corrected = EvalOptions { correction: Some(CorrectionPlan::default()), ..Default::default() };
    let mut monotone = true;
    let mut traces = 0;
    let mut drops = Vec::new();
    let mut with = 0.0;
    let mut without = 0.0;
    for (i, pair) in tr.val.iter().enumerate() {
        let case = tryflow::eval::EvalCase::new(pair, Mode::On).unwrap();
        let seed = plain.seed.wrapping_add(i as u64);
        let a = tryflow::eval::run_case(p, pair, &case, &plain, seed).unwrap();
        let b = tryflow::eval::run_case(p, pair, &case, &corrected, seed).unwrap();
        without += case.score(i, &a.canvas).unwrap().masked_mse;
        with += case.score(i, &b.canvas).unwrap().masked_mse;
        for c in &b.corrections {
            traces += 1;
            monotone &= c.objective.len() == 6 && c.objective.windows(2).all(|w| w[1] <= w[0]);
            drops.push(c.objective[c.objective.len() - 1] / c.objective[0]);
        }
    }
    let n = tr.val.len() as f64;
    let (with, without) = (with / n, without / n);
    let mean_drop = drops.iter().map(|&d| d as f64).sum::<f64>() / drops.len().max(1) as f64;
    outcome(
        monotone && traces == 2 * tr.val.len() && with <= 1.02 * without,
        format!(
            "{traces} correction traces, objective non-increasing {monotone} (mean final/initial {mean_drop:.3}); try-on MSE {with:.4} with vs {without:.4} without ({:.3}x)",
            with / without
        ),
    )
}

fn localization(tr: &Trained) -> Outcome {
    let probes = select_probes(&tr.joint[0], &tr.val, 64, 0).unwrap();
    let trained = attention_localization(&tr.joint[0], &tr.val, &probes, None, 0).unwrap();
    let fresh = ModelParams::init(&ModelConfig::default(), BASE_SEED).unwrap();
    let untrained = attention_localization(&fresh, &tr.val, &probes, None, 0).unwrap();
    outcome(
        trained.mean > untrained.mean && trained.mean >= 2.0 * trained.uniform,
        format!(
            "{} queries: trained {:.4}, untrained {:.4}, uniform {:.4} (trained/uniform {:.2})",
            trained.queries,
            trained.mean,
            untrained.mean,
            trained.uniform,
            trained.mean / trained.uniform
        ),
    )
}

fn layer_deltas(tr: &Trained) -> Outcome {
    let pairs = DatasetSpec { pair_count: TRAIN_PAIRS, ..Default::default() }.generate().unwrap();
    let cfg = TrainConfig { steps: BRIEF_FULL_STEPS, strategy: Strategy::Full, loss_support: SUPPORT, seed: 9, ..Default::default() };
    let (after, _) = train_from(&tr.joint[0], &pairs, &cfg);
    let report = layer_update_report(&tr.joint[0], &after).unwrap();
    let top3 = report.layers.iter().take(3).any(|l| l.label.starts_with("attention."));
    let ranking: Vec<String> = report.layers.iter().map(|l| format!("{} {:.2e}", l.label, l.delta)).collect();
    outcome(top3, format!("{BRIEF_FULL_STEPS} full steps; ranking: {}", ranking.join(", ")))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_run(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_tryflow")).current_dir(cwd).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("`tryflow {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
    }
}

fn determinism() -> Outcome {
    let tiny = [
        "--model.token_dim", "32", "--model.head_count", "2", "--model.head_dim", "16",
        "--model.block_count", "1", "--model.conditioning_dim", "16",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let steps: Vec<Vec<&str>> = vec![
            vec!["gen-data", "--out", "data", "--data.spec.pair_count", "8", "--seed", "0"],
            [&["train", "--data-dir", "data", "--out", "run", "--seed", "3", "--train.steps", "6", "--train.batch_size", "2", "--strategy", "full"][..], &tiny[..]].concat(),
            [&["sample", "--data-dir", "data", "--checkpoint", "run/model.ckpt", "--out", "samples", "--seed", "1", "--sample.indices", "[0,1]"][..], &tiny[..]].concat(),
        ];
        for args in &steps {
            if let Err(e) = cli_run(dir.path(), args) {
                return outcome(false, e);
            }
        }
        runs.push(tree(dir.path()));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = a.keys().eq(b.keys());
    let pngs = a.keys().filter(|k| k.extension().is_some_and(|e| e == "png")).count();
    outcome(
        same_set && differing.is_empty() && a.contains_key(Path::new("run/model.ckpt")),
        format!("{} artifacts ({pngs} PNG) across gen-data/train/sample; differing: {differing:?}", a.len()),
    )
}

fn main() {
    // `TRYFLOW_CRITERIA=1,4,11` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("TRYFLOW_CRITERIA").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} criterion {id}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o, secs));
    };
    run(1, &mut flow_algebra);
    run(2, &mut gradient_suite);
    run(3, &mut temperature_suite);
    run(4, &mut layout_suite);
    if (5..=10).any(wanted) {
        eprintln!("training toy models for criteria 5-10");
        let t = Instant::now();
        let tr = prepare();
        eprintln!("  all training done in {:.1} min", t.elapsed().as_secs_f64() / 60.0);
        run(5, &mut || convergence(&tr));
        run(6, &mut || dual_task(&tr));
        run(7, &mut || frozen_integrity(&tr));
        run(8, &mut || self_correction(&tr));
        run(9, &mut || localization(&tr));
        run(10, &mut || layer_deltas(&tr));
    }
    run(11, &mut determinism);

    let limits = [(1, 5.0), (2, 120.0), (4, 10.0)];
    let mut failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    for (id, limit) in limits {
        if let Some(r) = results.iter().find(|r| r.0 == id) {
            if r.2 >= limit && !failed.contains(&id) {
                println!("FAIL criterion {id}: runtime {:.1} s exceeds {limit} s", r.2);
                failed.push(id);
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
