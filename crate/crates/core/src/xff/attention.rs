//! Token self-attention and transposed (channel) attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{DiffTensor, ParamStore, Real, Session, Var};

pub fn init_mhsa<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{name}.{p}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product self-attention over `[T, E]` tokens.
///
/// Returns the projected output and the `[T, T]` attention matrix of each
/// head (rows are queries, softmax over keys).
pub fn mhsa<T: Real>(s: &mut Session<'_, T>, name: &str, tokens: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let &[_, e] = s.tape.shape(tokens) else {
        return Err(Error::dim("mhsa", "tokens must be [T,E]"));
    };
    if heads == 0 || e % heads != 0 {
        return Err(Error::dim("mhsa", format!("dim {e} not divisible by {heads} heads")));
    }
    let dh = e / heads;
    let q = s.linear(&format!("{name}.q"), tokens)?;
    let k = s.linear(&format!("{name}.k"), tokens)?;
    let v = s.linear(&format!("{name}.v"), tokens)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.tape.slice(q, 1, h * dh, dh)?;
        let kh = s.tape.slice(k, 1, h * dh, dh)?;
        let vh = s.tape.slice(v, 1, h * dh, dh)?;
        let kt = s.tape.transpose(kh)?;
        let logits = s.tape.matmul(qh, kt)?;
        let logits = s.tape.scale(logits, scale);
        let a = s.tape.softmax(logits, 1)?;
        outs.push(s.tape.matmul(a, vh)?);
        attn.push(a);
    }
    let cat = s.tape.concat(&outs, 1)?;
    Ok((s.linear(&format!("{name}.o"), cat)?, attn))
}

pub fn init_channel_attention<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<()> {
    init_mhsa(store, name, dim, rng)?;
    store.insert(&format!("{name}.temp"), DiffTensor::full(&[heads], T::ONE))
}

/// Transposed attention over `[P, E]` pixels: per head, L2-normalised
/// queries/keys of shape `[E/heads, P]` give a channel-by-channel attention
/// matrix scaled by a learnable temperature, softmaxed over key channels.
pub fn channel_attention<T: Real>(s: &mut Session<'_, T>, name: &str, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let &[_, e] = s.tape.shape(x) else {
        return Err(Error::dim("channel_attention", "input must be [P,E]"));
    };
    if heads == 0 || e % heads != 0 {
        return Err(Error::dim("channel_attention", format!("dim {e} not divisible by {heads} heads")));
    }
    let dh = e / heads;
    let temp = s.param(&format!("{name}.temp"))?;
    let q = s.linear(&format!("{name}.q"), x)?;
    let k = s.linear(&format!("{name}.k"), x)?;
    let v = s.linear(&format!("{name}.v"), x)?;
    let (q, k, v) = (s.tape.transpose(q)?, s.tape.transpose(k)?, s.tape.transpose(v)?);
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.tape.slice(q, 0, h * dh, dh)?;
        let kh = s.tape.slice(k, 0, h * dh, dh)?;
        let vh = s.tape.slice(v, 0, h * dh, dh)?;
        let qn = s.tape.l2_normalize_rows(qh, 1e-12)?;
        let kn = s.tape.l2_normalize_rows(kh, 1e-12)?;
        let kt = s.tape.transpose(kn)?;
        let logits = s.tape.matmul(qn, kt)?;
        let th = s.tape.slice(temp, 0, h, 1)?;
        let logits = s.tape.scale_by(logits, th)?;
        let a = s.tape.softmax(logits, 1)?;
        outs.push(s.tape.matmul(a, vh)?);
        attn.push(a);
    }
    let cat = s.tape.concat(&outs, 0)?;
    let cat = s.tape.transpose(cat)?;
    Ok((s.linear(&format!("{name}.o"), cat)?, attn))
}
