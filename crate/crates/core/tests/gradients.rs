//! Central finite differences against the tape's reverse pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryflow::flow::{draw_noise, training_loss_with, LossSupport, TrainItem};
use tryflow::layout::{build_mask, concat_pair, Category, Mode, TaskToken};
use tryflow::model::{ModelConfig, ModelParams, Strategy};
use tryflow::numerics::{Array, Tape, Var};
use tryflow::synthwear::gen_pair;

const PROBES: usize = 24;
const REL_TOL: f64 = 1e-2;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Probes are drawn among coordinates whose analytic gradient is at least a
/// tenth of the largest one, where f32 differences carry signal.
fn pick_probes(rng: &mut ChaCha8Rng, grads: &[Vec<f32>], count: usize) -> Vec<(usize, usize)> {
    let peak = grads.iter().flatten().fold(0f32, |m, g| m.max(g.abs()));
    assert!(peak > 0.0, "all gradients vanish");
    let eligible: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().enumerate().filter(|(_, v)| v.abs() >= 0.1 * peak).map(move |(j, _)| (i, j)))
        .collect();
    (0..count).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect()
}

/// `build` maps input vars to any array; the checked scalar is its
/// weighted sum with fixed random weights.
fn check(name: &str, inputs: Vec<Array>, build: impl Fn(&mut Tape, &[Var]) -> Var, h: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let eval = |xs: &[Array], weights: Option<&Array>| -> (f64, Array, Option<Vec<Array>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        match weights {
            None => (0.0, Array::zeros(&shape), None),
            Some(w) => {
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv);
                let s = tape.sum(prod);
                let val = tape.value(s).item() as f64;
                (val, Array::zeros(&shape), Some(tape.grad(s, &vars).unwrap()))
            }
        }
    };
    let (_, out_zero, _) = eval(&inputs, None);
    let weights = random(&mut rng, out_zero.shape(), 1.0);
    let (_, _, grads) = eval(&inputs, Some(&weights));
    let grads = grads.unwrap();
    let flat: Vec<Vec<f32>> = grads.iter().map(|g| g.data().to_vec()).collect();
    let probes = pick_probes(&mut rng, &flat, PROBES);
    let mut worst = 0f64;
    for (i, j) in probes {
        let mut plus = inputs.clone();
        plus[i].data_mut()[j] += h;
        let mut minus = inputs.clone();
        minus[i].data_mut()[j] -= h;
        let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h as f64);
        let e = rel_err(flat[i][j] as f64, numeric);
        worst = worst.max(e);
        assert!(e < REL_TOL, "{name}: input {i} coord {j}: analytic {} numeric {numeric} (rel {e:.2e})", flat[i][j]);
    }
    eprintln!("{name}: worst relative error {worst:.2e} over {PROBES} probes");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_variants() {
    let mut r = rng(1);
    let (a, b) = (random(&mut r, &[5, 4], 1.0), random(&mut r, &[4, 6], 1.0));
    check("matmul", vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]), 1e-3);
    let bt = random(&mut r, &[6, 4], 1.0);
    check("matmul_bt", vec![a.clone(), bt], |t, v| t.matmul_t(v[0], v[1], false, true), 1e-3);
    let at = random(&mut r, &[4, 5], 1.0);
    check("matmul_at", vec![at, b], |t, v| t.matmul_t(v[0], v[1], true, false), 1e-3);
}

#[test]
fn elementwise() {
    let mut r = rng(2);
    let (a, b) = (random(&mut r, &[4, 6], 1.0), random(&mut r, &[4, 6], 1.0));
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-3);
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-3);
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-3);
    let row = random(&mut r, &[1, 6], 1.0);
    check("add_row", vec![a.clone(), row], |t, v| t.add_row(v[0], v[1]), 1e-3);
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7), 1e-3);
    check("gelu", vec![random(&mut r, &[4, 6], 3.0)], |t, v| t.gelu(v[0]), 1e-3);
    check("silu", vec![random(&mut r, &[4, 6], 3.0)], |t, v| t.silu(v[0]), 1e-3);
    check("sum_squares", vec![a], |t, v| t.sum_squares(v[0]), 1e-3);
}

#[test]
fn normalization_and_attention() {
    let mut r = rng(3);
    check("layer_norm", vec![random(&mut r, &[5, 8], 2.0)], |t, v| t.layer_norm(v[0]), 1e-3);
    for lambda in [1.0, 0.35] {
        check("softmax_scaled", vec![random(&mut r, &[4, 7], 2.0)], move |t, v| t.softmax_scaled(v[0], lambda), 1e-3);
    }
    let positions = Rc::new(vec![(0, 0), (1, 3), (2, 5), (4, 1)]);
    check("rope", vec![random(&mut r, &[4, 16], 1.0)], move |t, v| t.rope(v[0], positions.clone(), 8, 10_000.0), 1e-3);
}

#[test]
fn structural() {
    let mut r = rng(4);
    let (a, b) = (random(&mut r, &[3, 4], 1.0), random(&mut r, &[2, 4], 1.0));
    check("concat_rows", vec![a.clone(), b], |t, v| t.concat_rows(&[v[0], v[1]]), 1e-3);
    let c = random(&mut r, &[3, 5], 1.0);
    check("concat_cols", vec![a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]]), 1e-3);
    check("slice_rows", vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2), 1e-3);
    check("slice_cols", vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2), 1e-3);
    let index = Rc::new(vec![3u32, 0, 0, 11, 7, 5]);
    check("gather", vec![a.clone()], move |t, v| t.gather(v[0], index.clone(), &[2, 3]), 1e-3);
    check("reshape", vec![a], |t, v| t.reshape(v[0], &[4, 3]), 1e-3);
}

/// GELU MLP under a squared loss.
#[test]
fn two_layer_network() {
    let mut r = rng(5);
    let x = random(&mut r, &[6, 5], 1.0);
    let w1 = random(&mut r, &[5, 8], 0.5);
    let w2 = random(&mut r, &[8, 3], 0.5);
    let y = random(&mut r, &[6, 3], 1.0);
    check(
        "two_layer",
        vec![w1, w2],
        move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, v[0]);
            let h = t.gelu(h);
            let o = t.matmul(h, v[1]);
            let yv = t.constant(y.clone());
            let d = t.sub(o, yv);
            t.sum_squares(d)
        },
        1e-3,
    );
}

fn tiny_config() -> ModelConfig {
    ModelConfig { token_dim: 16, head_count: 2, head_dim: 8, block_count: 1, conditioning_dim: 8, n_max: 64, ..Default::default() }
}

/// Randomizes the zero-initialized head so every parameter receives gradient.
fn live_params(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&tiny_config(), seed).unwrap();
    let mut r = rng(seed + 100);
    for t in &mut p.tensors {
        if t.label == "head" {
            let shape = t.value.shape().to_vec();
            t.value = random(&mut r, &shape, 0.3);
        }
    }
    p
}

#[test]
fn training_loss_end_to_end() {
    let mut params = live_params(11);
    params.select_trainable(Strategy::Full);
    let mut batch = Vec::new();
    for (seed, mode) in [(1u64, Mode::On), (2, Mode::Off)] {
        let pair = gen_pair(seed, Category::Upper, 16, 16).unwrap();
        let task = TaskToken::new(mode, Category::Upper);
        let mask = build_mask(task, 16, 16, pair.person_mask.as_ref()).unwrap();
        batch.push(TrainItem { canvas: concat_pair(&pair.garment, &pair.person).unwrap(), mask, task });
    }
    let mut r = rng(12);
    let draws: Vec<_> = batch.iter().map(|_| draw_noise(&mut r, 8, 16, 12)).collect();
    let loss_of = |p: &ModelParams| training_loss_with(p, &batch, &draws, LossSupport::All).unwrap();
    let base = loss_of(&params);
    let flat: Vec<Vec<f32>> = base.grads.iter().map(|g| g.as_ref().unwrap().data().to_vec()).collect();
    let probes = pick_probes(&mut r, &flat, PROBES);
    let h = 1e-2f32;
    let mut worst = 0f64;
    for (i, j) in probes {
        let mut plus = params.clone();
        plus.tensors[i].value.data_mut()[j] += h;
        let mut minus = params.clone();
        minus.tensors[i].value.data_mut()[j] -= h;
        let numeric = (loss_of(&plus).loss as f64 - loss_of(&minus).loss as f64) / (2.0 * h as f64);
        let e = rel_err(flat[i][j] as f64, numeric);
        worst = worst.max(e);
        assert!(e < REL_TOL, "{}[{j}]: analytic {} numeric {numeric} (rel {e:.2e})", params.tensors[i].name, flat[i][j]);
    }
    eprintln!("training_loss: worst relative error {worst:.2e}");
}
