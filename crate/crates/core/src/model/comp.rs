//! Composition transformer over unique-element tokens.
//!
//! Each structure contributes one token per distinct element (plus one for the
//! mask token when atoms are masked). Attention inside a structure uses the
//! logit bias `ln c_s`, which makes every head equal to plain attention over
//! the expanded atom multiset while costing `O(T²)`. Because that bias is
//! invariant to scaling all counts, tokens additionally carry `ln c_t · w`
//! so absolute counts remain visible.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{biased_softmax, Binder, Mat, ParameterStore, Tape, Var};
use crate::error::{domain, Result};

use super::batch::{Batch, EMBEDDING_ROWS};
use super::config::CompStreamConfig;
use super::nn::{init_layer_norm, init_linear, layer_norm, linear, Mlp};

/// `softmax_s(logits[t,s] + ln counts[s])` for a `T × T` logit matrix.
pub fn count_weighted_attention(logits: &Mat, counts: &[u32]) -> Result<Mat> {
    let t = counts.len();
    if logits.dim() != (t, t) {
        return domain(format!("logits must be {t} × {t}, got {:?}", logits.dim()));
    }
    if counts.contains(&0) {
        return domain("token counts must be ≥ 1");
    }
    let bias: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let flat: Vec<f64> = logits.iter().copied().collect();
    let p = biased_softmax(&flat, t, &bias);
    Ok(Array2::from_shape_vec((t, t), p).expect("square"))
}

fn ff(prefix: &str, cfg: &CompStreamConfig) -> Mlp {
    Mlp::new(format!("{prefix}.ff"), vec![cfg.width, cfg.ff_width, cfg.width])
}

pub fn init<R: Rng + ?Sized>(cfg: &CompStreamConfig, store: &mut ParameterStore, rng: &mut R) {
    let d = cfg.width;
    store.init_normal("comp.embed", EMBEDDING_ROWS, d, (EMBEDDING_ROWS as f64).sqrt(), rng);
    store.init_normal("comp.count", 1, d, 1.0, rng);
    for l in 0..cfg.layers {
        let p = format!("comp.l{l}");
        init_layer_norm(store, &format!("{p}.ln1"), d);
        for m in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.{m}"), d, d, rng);
        }
        init_layer_norm(store, &format!("{p}.ln2"), d);
        ff(&p, cfg).init(store, rng);
    }
    init_layer_norm(store, "comp.ln_f", d);
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let (r, c) = tape.shape(x);
            let mask = Mat::from_shape_fn((r, c), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Returns the per-token outputs `T × d` for every token in the batch.
pub fn forward(
    cfg: &CompStreamConfig,
    tape: &mut Tape,
    bind: &mut Binder,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let table = bind.get(tape, "comp.embed");
    let mut x = tape.gather_rows(table, &batch.token_rows);
    let bias: Vec<f64> = if cfg.count_features {
        let logc = Mat::from_shape_fn((batch.num_tokens(), 1), |(t, _)| batch.token_counts[t].ln());
        let logc = tape.constant(logc);
        let w = bind.get(tape, "comp.count");
        let cf = tape.matmul(logc, w);
        x = tape.add(x, cf);
        batch.token_counts.iter().map(|c| c.ln()).collect()
    } else {
        vec![0.0; batch.num_tokens()]
    };
    for l in 0..cfg.layers {
        let p = format!("comp.l{l}");
        let h = layer_norm(tape, bind, &format!("{p}.ln1"), x);
        let q = linear(tape, bind, &format!("{p}.q"), h);
        let k = linear(tape, bind, &format!("{p}.k"), h);
        let v = linear(tape, bind, &format!("{p}.v"), h);
        let a = tape.segment_attention(q, k, v, cfg.heads, &batch.token_segments, &bias);
        let a = linear(tape, bind, &format!("{p}.o"), a);
        let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, a);
        let h = layer_norm(tape, bind, &format!("{p}.ln2"), x);
        let f = ff(&p, cfg).forward(tape, bind, h);
        let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, f);
    }
    layer_norm(tape, bind, "comp.ln_f", x)
}
