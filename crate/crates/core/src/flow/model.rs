//! The conditional velocity network: Fourier positional encoding over a
//! 10-dim per-point vector, then DiT-style blocks alternating part-wise and
//! global attention with AdaLayerNorm time conditioning and RMS-normalized
//! queries/keys, ending in a linear head to per-point 3D velocities.

use std::ops::Range;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tape, Var};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub frequencies: usize,
    /// Feature dim of the frozen encoder whose outputs are concatenated to
    /// the positional encoding.
    pub encoder_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            heads: 4,
            frequencies: 4,
            encoder_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 || self.frequencies == 0 {
            return Err(Error::ConfigError("model dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::ConfigError(format!(
                "head count {} must divide hidden dim {}",
                self.heads, self.hidden
            )));
        }
        Ok(())
    }

    pub fn raw_dim(&self) -> usize {
        10
    }

    pub fn posenc_dim(&self) -> usize {
        self.raw_dim() * (2 * self.frequencies + 1)
    }

    pub fn token_dim(&self) -> usize {
        self.posenc_dim() + self.encoder_dim
    }
}

/// Encodes one 10-dim raw vector: the raw values followed by sin/cos at
/// geometric frequencies 2^k·π, k = 0..F.
pub fn positional_encode(raw: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len() * (2 * frequencies + 1));
    out.extend_from_slice(raw);
    for k in 0..frequencies {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        for &v in raw {
            out.push((freq * v).sin());
        }
        for &v in raw {
            out.push((freq * v).cos());
        }
    }
    out
}

/// Sinusoidal embedding of the timestep at the model's frequencies.
pub fn time_embedding(t: f64, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frequencies);
    for k in 0..frequencies {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
    out
}

fn attn_names(prefix: &str) -> [String; 10] {
    [
        format!("{prefix}.wq"),
        format!("{prefix}.bq"),
        format!("{prefix}.wk"),
        format!("{prefix}.bk"),
        format!("{prefix}.wv"),
        format!("{prefix}.bv"),
        format!("{prefix}.wo"),
        format!("{prefix}.bo"),
        format!("{prefix}.qg"),
        format!("{prefix}.kg"),
    ]
}

/// Fresh velocity-network parameters.
pub fn flow_init(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut p = ParamSet::new();
    let std_in = (1.0 / config.token_dim() as f64).sqrt();
    p.add_random("inproj.w", config.token_dim(), h, std_in, &mut rng);
    p.add_zeros("inproj.b", 1, h);

    let te = 2 * config.frequencies;
    p.add_random("temb.w1", te, h, (1.0 / te as f64).sqrt(), &mut rng);
    p.add_zeros("temb.b1", 1, h);
    p.add_random("temb.w2", h, h, (1.0 / h as f64).sqrt(), &mut rng);
    p.add_zeros("temb.b2", 1, h);

    let std_h = (1.0 / h as f64).sqrt();
    for b in 0..config.blocks {
        // small (but nonzero) modulation init keeps early training near
        // identity without killing gradient flow to the attention weights
        p.add_random(&format!("blk{b}.mod.w"), h, 9 * h, 0.02, &mut rng);
        p.add_zeros(&format!("blk{b}.mod.b"), 1, 9 * h);
        for attn in ["pattn", "gattn"] {
            let names = attn_names(&format!("blk{b}.{attn}"));
            for chunk in names.chunks(2).take(4) {
                p.add_random(&chunk[0], h, h, std_h, &mut rng);
                p.add_zeros(&chunk[1], 1, h);
            }
            p.add(&names[8], Array2::ones((1, h)));
            p.add(&names[9], Array2::ones((1, h)));
        }
        p.add_random(&format!("blk{b}.ff.w1"), h, 4 * h, std_h, &mut rng);
        p.add_zeros(&format!("blk{b}.ff.b1"), 1, 4 * h);
        p.add_random(&format!("blk{b}.ff.w2"), 4 * h, h, (1.0 / (4 * h) as f64).sqrt(), &mut rng);
        p.add_zeros(&format!("blk{b}.ff.b2"), 1, h);
    }
    p.add_random("out.w", h, 3, std_h, &mut rng);
    p.add_zeros("out.b", 1, 3);
    Ok(p)
}

/// Additive attention mask restricting rows/cols to the same part.
pub fn part_mask(segments: &[Range<usize>], n: usize) -> Array2<f64> {
    let mut mask = Array2::from_elem((n, n), -1e300);
    for seg in segments {
        mask.slice_mut(s![seg.clone(), seg.clone()]).fill(0.0);
    }
    mask
}

#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    params: &ParamSet,
    pvars: &[Var],
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> Var {
    let var = |name: &str| pvars[params.index_of(name).expect("known parameter")];
    let names = attn_names(prefix);
    let h = params.get(&names[0]).ncols();
    let dh = h / heads;
    let q = tape.matmul(x, var(&names[0]));
    let q = tape.add_row(q, var(&names[1]));
    let k = tape.matmul(x, var(&names[2]));
    let k = tape.add_row(k, var(&names[3]));
    let v = tape.matmul(x, var(&names[4]));
    let v = tape.add_row(v, var(&names[5]));
    let qg = var(&names[8]);
    let kg = var(&names[9]);

    let mut head_outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let r = head * dh..(head + 1) * dh;
        let qh = tape.slice_cols(q, r.clone());
        let kh = tape.slice_cols(k, r.clone());
        let vh = tape.slice_cols(v, r.clone());
        let qgh = tape.slice_cols(qg, r.clone());
        let kgh = tape.slice_cols(kg, r.clone());
        let qh = tape.rms_norm_rows(qh, 1e-8);
        let qh = tape.mul_row(qh, qgh);
        let kh = tape.rms_norm_rows(kh, 1e-8);
        let kh = tape.mul_row(kh, kgh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores, mask);
        head_outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&head_outs);
    let o = tape.matmul(cat, var(&names[6]));
    tape.add_row(o, var(&names[7]))
}

/// AdaLayerNorm entry: `layer_norm(x)·(1+scale) + shift`, with scale/shift
/// sliced out of the block's modulation vector.
fn modulate(tape: &mut Tape, x: Var, blockmod: Var, idx: usize, h: usize, ones: Var) -> Var {
    let shift = tape.slice_cols(blockmod, (3 * idx) * h..(3 * idx + 1) * h);
    let scale = tape.slice_cols(blockmod, (3 * idx + 1) * h..(3 * idx + 2) * h);
    let scale1 = tape.add(scale, ones);
    let xn = tape.layer_norm_rows(x, 1e-6);
    let xm = tape.mul_row(xn, scale1);
    tape.add_row(xm, shift)
}

fn gate(tape: &mut Tape, delta: Var, blockmod: Var, idx: usize, h: usize) -> Var {
    let g = tape.slice_cols(blockmod, (3 * idx + 2) * h..(3 * idx + 3) * h);
    tape.mul_row(delta, g)
}

/// Full forward pass on a tape. `tokens` is the n×token_dim input (positional
/// encoding ∥ encoder features), `temb_raw` the 1×2F time embedding, both as
/// tape leaves. Returns the n×3 velocity with anchor rows zeroed.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamSet,
    pvars: &[Var],
    tokens: Var,
    temb_raw: Var,
    segments: &[Range<usize>],
    anchor_mask: &[bool],
) -> Var {
    let var = |name: &str| pvars[params.index_of(name).expect("known parameter")];
    let h = config.hidden;
    let n = tape.value(tokens).nrows();
    let pmask = part_mask(segments, n);
    let ones = tape.leaf(Array2::ones((1, h)));

    let x = tape.matmul(tokens, var("inproj.w"));
    let mut x = tape.add_row(x, var("inproj.b"));

    let te = tape.matmul(temb_raw, var("temb.w1"));
    let te = tape.add_row(te, var("temb.b1"));
    let te = tape.silu(te);
    let te = tape.matmul(te, var("temb.w2"));
    let te = tape.add_row(te, var("temb.b2"));
    let te = tape.silu(te);

    for b in 0..config.blocks {
        let m = tape.matmul(te, var(&format!("blk{b}.mod.w")));
        let bm = tape.add_row(m, var(&format!("blk{b}.mod.b")));

        let xin = modulate(tape, x, bm, 0, h, ones);
        let a = attention(tape, params, pvars, &format!("blk{b}.pattn"), xin, config.heads, Some(&pmask));
        let a = gate(tape, a, bm, 0, h);
        x = tape.add(x, a);

        let xin = modulate(tape, x, bm, 1, h, ones);
        let a = attention(tape, params, pvars, &format!("blk{b}.gattn"), xin, config.heads, None);
        let a = gate(tape, a, bm, 1, h);
        x = tape.add(x, a);

        let xin = modulate(tape, x, bm, 2, h, ones);
        let f = tape.matmul(xin, var(&format!("blk{b}.ff.w1")));
        let f = tape.add_row(f, var(&format!("blk{b}.ff.b1")));
        let f = tape.silu(f);
        let f = tape.matmul(f, var(&format!("blk{b}.ff.w2")));
        let f = tape.add_row(f, var(&format!("blk{b}.ff.b2")));
        let f = gate(tape, f, bm, 2, h);
        x = tape.add(x, f);
    }

    let x = tape.layer_norm_rows(x, 1e-6);
    let v = tape.matmul(x, var("out.w"));
    let v = tape.add_row(v, var("out.b"));
    tape.zero_rows(v, anchor_mask)
}
