use std::rc::Rc;

use super::{ModelParams, BLOCK_TENSORS, PRE_BLOCK_TENSORS};
use crate::error::{usage, Result};
use crate::layout::{Geometry, LatentGrid, TaskToken, TokenSequence};
use crate::numerics::{check_lambda, Array, Tape, Var};

/// Parameters recorded on a tape.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// With `differentiable`, trainable tensors are recorded as gradient
    /// sources; everything else is constant.
    pub fn bind(tape: &mut Tape, params: &ModelParams, differentiable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.value.clone(), differentiable && t.trainable))
            .collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn block(&self, b: usize, offset: usize) -> Var {
        self.vars[PRE_BLOCK_TENSORS + b * BLOCK_TENSORS + offset]
    }

    fn head(&self, offset: usize) -> Var {
        self.vars[self.vars.len() - 4 + offset]
    }
}

// Offsets inside one block, matching `tensor_specs`.
const MOD_W: usize = 0;
const Q_W: usize = 2;
const K_W: usize = 4;
const V_W: usize = 6;
const OUT_W: usize = 8;
const MLP_IN_W: usize = 10;
const MLP_OUT_W: usize = 12;

/// One canvas worth of valid tokens plus its conditioning.
pub struct SampleInput {
    /// `[N x token_in_dim]`, valid tokens only.
    pub tokens: Var,
    pub positions: Rc<Vec<(usize, usize)>>,
    pub task: TaskToken,
    pub t: f32,
}

impl SampleInput {
    /// Valid rows of an already tokenized sequence, as a constant.
    pub fn from_sequence(tape: &mut Tape, seq: &TokenSequence, task: TaskToken, t: f32) -> Self {
        let idx = seq.valid_indices();
        let dim = seq.tokens.cols();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in &idx {
            data.extend_from_slice(seq.tokens.row(i));
        }
        let tokens = tape.constant(Array::matrix(idx.len(), dim, data));
        let positions = Rc::new(idx.iter().map(|&i| seq.positions[i]).collect());
        Self { tokens, positions, task, t }
    }

    /// Differentiable tokenization of latent grids already on the tape
    /// (shapes `[h, w, c]`), equivalent to [`crate::layout::tokenize`] without
    /// padding.
    pub fn from_latents(tape: &mut Tape, geometry: &Geometry, z_t: Var, z_c: Var, m_c: Var, task: TaskToken, t: f32) -> Self {
        let cols: Vec<Var> = [z_t, z_c, m_c]
            .into_iter()
            .map(|v| {
                let n = tape.value(v).len();
                tape.reshape(v, &[n, 1])
            })
            .collect();
        let flat = tape.concat_rows(&cols);
        let tokens = tape.gather(flat, Rc::new(geometry.input_index()), &[geometry.token_count(), geometry.token_in_dim()]);
        Self { tokens, positions: Rc::new(geometry.positions()), task, t }
    }
}

/// Unpatchifies a `[N x token_out_dim]` velocity to `[h, w, c]` on the tape.
pub fn velocity_latent(tape: &mut Tape, geometry: &Geometry, tokens: Var) -> Var {
    tape.gather(
        tokens,
        Rc::new(geometry.output_index()),
        &[geometry.latent_height, geometry.latent_width, geometry.latent_channels],
    )
}

pub struct BatchOutput {
    /// Per sample `[N x token_out_dim]`.
    pub velocity: Vec<Var>,
    /// Per sample, per head `[N x N]` attention of the captured block.
    pub attention: Option<Vec<Vec<Array>>>,
}

/// Attention maps of one block, averaged over heads on request.
pub struct AttentionCapture {
    pub block: usize,
    pub per_head: Vec<Array>,
}

impl AttentionCapture {
    pub fn head_mean(&self) -> Array {
        let mut acc = self.per_head[0].clone();
        for h in &self.per_head[1..] {
            acc.add_assign(h);
        }
        let n = self.per_head.len() as f32;
        acc.map(|v| v / n)
    }
}

fn timestep_features(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let x = 1000.0 * t;
    let freqs = (0..half).map(|i| (-(10_000f32.ln()) * i as f32 / half as f32).exp());
    let (s, c): (Vec<f32>, Vec<f32>) = freqs.map(|w| ((x * w).sin(), (x * w).cos())).unzip();
    [s, c].concat()
}

/// Conditioning vector for `(t, tau)`: timestep projection plus the mode and
/// category embeddings.
pub fn conditioning_vector(params: &ModelParams, t: f32, task: TaskToken) -> Array {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let c = conditioning(&mut tape, params, &pv, &[(t, task)]);
    tape.value(c).clone()
}

fn conditioning(tape: &mut Tape, params: &ModelParams, pv: &ParamVars, items: &[(f32, TaskToken)]) -> Var {
    let cd = params.config.conditioning_dim;
    let b = items.len();
    let feats: Vec<f32> = items.iter().flat_map(|&(t, _)| timestep_features(t, cd)).collect();
    let feats = tape.constant(Array::matrix(b, cd, feats));
    let te = tape.matmul(feats, pv.get(2));
    let te = tape.add_row(te, pv.get(3));
    let one_hot = |n: usize, pick: &dyn Fn(&TaskToken) -> usize| {
        Array::from_fn(&[b, n], |i| if pick(&items[i / n].1) == i % n { 1.0 } else { 0.0 })
    };
    let mode = tape.constant(one_hot(2, &|t| t.mode.index()));
    let cat = tape.constant(one_hot(3, &|t| t.category.index()));
    let me = tape.matmul(mode, pv.get(4));
    let ce = tape.matmul(cat, pv.get(5));
    let c = tape.add(te, me);
    tape.add(c, ce)
}

/// Repeats row `s` of a `[B x k]` var once per token of sample `s`.
fn expand_rows(tape: &mut Tape, v: Var, counts: &[usize]) -> Var {
    let k = tape.value(v).cols();
    let total: usize = counts.iter().sum();
    let mut idx = Vec::with_capacity(total * k);
    for (s, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            idx.extend((0..k).map(|j| (s * k + j) as u32));
        }
    }
    tape.gather(v, Rc::new(idx), &[total, k])
}

fn modulate(tape: &mut Tape, x: Var, m: Var, shift_at: usize, scale_at: usize, width: usize) -> Var {
    let shift = tape.slice_cols(m, shift_at, width);
    let scale = tape.slice_cols(m, scale_at, width);
    let scale1 = tape.add_scalar(scale, 1.0);
    let y = tape.mul(x, scale1);
    tape.add(y, shift)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Batched forward pass on a tape.
///
/// Samples may have different token counts; attention never crosses samples.
/// `lambda` overrides the attention temperature of every layer.
pub fn forward_batch(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    batch: &[SampleInput],
    lambda: Option<f32>,
    capture_block: Option<usize>,
) -> Result<BatchOutput> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(usage!("empty batch"));
    }
    let lambda = lambda.unwrap_or_else(|| cfg.base_temperature());
    check_lambda(lambda)?;
    let mut counts = Vec::with_capacity(batch.len());
    for s in batch {
        let v = tape.value(s.tokens);
        if v.cols() != cfg.token_in_dim() {
            return Err(usage!("token width {} does not match model input width {}", v.cols(), cfg.token_in_dim()));
        }
        if v.rows() != s.positions.len() {
            return Err(usage!("{} tokens but {} positions", v.rows(), s.positions.len()));
        }
        if !(0.0..=1.0).contains(&s.t) {
            return Err(usage!("timestep {} outside [0, 1]", s.t));
        }
        counts.push(v.rows());
    }
    let (d, hd) = (cfg.token_dim, cfg.head_dim);
    let positions: Rc<Vec<(usize, usize)>> =
        Rc::new(batch.iter().flat_map(|s| s.positions.iter().copied()).collect());

    let parts: Vec<Var> = batch.iter().map(|s| s.tokens).collect();
    let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
    let mut h = linear(tape, x, pv.get(0), pv.get(1));

    let items: Vec<(f32, TaskToken)> = batch.iter().map(|s| (s.t, s.task)).collect();
    let c = conditioning(tape, params, pv, &items);
    let sc = tape.silu(c);

    let mut captured = None;
    for b in 0..cfg.block_count {
        let m = linear(tape, sc, pv.block(b, MOD_W), pv.block(b, MOD_W + 1));
        let m = expand_rows(tape, m, &counts);

        let a = tape.layer_norm(h);
        let a = modulate(tape, a, m, 0, d, d);
        let q = linear(tape, a, pv.block(b, Q_W), pv.block(b, Q_W + 1));
        let k = linear(tape, a, pv.block(b, K_W), pv.block(b, K_W + 1));
        let v = linear(tape, a, pv.block(b, V_W), pv.block(b, V_W + 1));
        let q = tape.rope(q, positions.clone(), hd, cfg.rope_base);
        let k = tape.rope(k, positions.clone(), hd, cfg.rope_base);

        let capture = capture_block == Some(b);
        let mut maps = Vec::new();
        let mut outs = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for &n in &counts {
            let (qs, ks, vs) = if counts.len() == 1 {
                (q, k, v)
            } else {
                (tape.slice_rows(q, offset, n), tape.slice_rows(k, offset, n), tape.slice_rows(v, offset, n))
            };
            let mut heads = Vec::with_capacity(cfg.head_count);
            let mut sample_maps = Vec::new();
            for j in 0..cfg.head_count {
                let qh = tape.slice_cols(qs, j * hd, hd);
                let kh = tape.slice_cols(ks, j * hd, hd);
                let vh = tape.slice_cols(vs, j * hd, hd);
                let logits = tape.matmul_t(qh, kh, false, true);
                let p = tape.softmax_scaled(logits, lambda);
                if capture {
                    sample_maps.push(tape.value(p).clone());
                }
                heads.push(tape.matmul(p, vh));
            }
            outs.push(tape.concat_cols(&heads));
            if capture {
                maps.push(sample_maps);
            }
            offset += n;
        }
        if capture {
            captured = Some(maps);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        let o = linear(tape, o, pv.block(b, OUT_W), pv.block(b, OUT_W + 1));
        h = tape.add(h, o);

        let a = tape.layer_norm(h);
        let a = modulate(tape, a, m, 2 * d, 3 * d, d);
        let f = linear(tape, a, pv.block(b, MLP_IN_W), pv.block(b, MLP_IN_W + 1));
        let f = tape.gelu(f);
        let f = linear(tape, f, pv.block(b, MLP_OUT_W), pv.block(b, MLP_OUT_W + 1));
        h = tape.add(h, f);
    }

    let m = linear(tape, sc, pv.head(0), pv.head(1));
    let m = expand_rows(tape, m, &counts);
    let a = tape.layer_norm(h);
    let a = modulate(tape, a, m, 0, d, d);
    let out = linear(tape, a, pv.head(2), pv.head(3));

    let velocity = if counts.len() == 1 {
        vec![out]
    } else {
        let mut offset = 0;
        counts
            .iter()
            .map(|&n| {
                let v = tape.slice_rows(out, offset, n);
                offset += n;
                v
            })
            .collect()
    };
    Ok(BatchOutput { velocity, attention: captured })
}

/// Velocity tokens `[n_max x token_out_dim]` for a padded sequence; padding
/// rows are zero and never attended to.
pub fn forward(params: &ModelParams, seq: &TokenSequence, task: TaskToken, t: f32, lambda_override: Option<f32>) -> Result<Array> {
    params.config.check_geometry(&seq.geometry)?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let input = SampleInput::from_sequence(&mut tape, seq, task, t);
    let out = forward_batch(&mut tape, params, &pv, &[input], lambda_override, None)?;
    let vel = tape.value(out.velocity[0]);
    let od = vel.cols();
    let mut data = vec![0.0; seq.n_max() * od];
    for (row, i) in seq.valid_indices().into_iter().enumerate() {
        data[i * od..(i + 1) * od].copy_from_slice(vel.row(row));
    }
    Ok(Array::matrix(seq.n_max(), od, data))
}

/// [`forward`] unpatchified to the latent grid.
pub fn forward_grid(params: &ModelParams, seq: &TokenSequence, task: TaskToken, t: f32, lambda_override: Option<f32>) -> Result<LatentGrid> {
    params.config.check_geometry(&seq.geometry)?;
    let tokens = forward(params, seq, task, t, lambda_override)?;
    let g = &seq.geometry;
    // Valid tokens of a tokenized sequence come first, in row-major order.
    let mut ordered = vec![0.0; g.token_count() * g.token_out_dim()];
    let od = g.token_out_dim();
    for i in seq.valid_indices() {
        let (r, c) = seq.positions[i];
        let n = r * g.token_cols() + c;
        ordered[n * od..(n + 1) * od].copy_from_slice(tokens.row(i));
    }
    let data = g.output_index().iter().map(|&i| ordered[i as usize]).collect();
    LatentGrid::new(g.latent_height, g.latent_width, g.latent_channels, data)
}
