//! Layers built on [`Graph`]: linear, layer norm, MLP, masked multi-head
//! attention and the pre-norm transformer block.
//!
//! Every layer owns a name prefix; its parameters live in [`Weights`] under
//! `<prefix>.<param>` and are looked up in the graph by that name.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use super::weights::{xavier_uniform, Weights};
use crate::error::{invalid, Error, Result};

/// Boolean `T x T` matrix; `true` marks an attendable key for a query row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
    blocks: Option<Vec<usize>>,
}

impl AttentionMask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(Error::shape("attention mask", &[size, size], &[allowed.len()]));
        }
        if let Some(r) = (0..size).find(|&r| !allowed[r * size..(r + 1) * size].iter().any(|&a| a)) {
            return Err(invalid(format!("attention mask row {r} has no attendable entry")));
        }
        Ok(AttentionMask {
            size,
            allowed,
            blocks: None,
        })
    }

    pub fn full(size: usize) -> Self {
        AttentionMask {
            size,
            allowed: vec![true; size * size],
            blocks: None,
        }
    }

    /// Tokens attend only within their own block; `blocks` lists block lengths.
    pub fn block_diagonal(blocks: &[usize]) -> Result<Self> {
        let size: usize = blocks.iter().sum();
        let mut allowed = vec![false; size * size];
        let mut start = 0;
        for &len in blocks {
            for r in start..start + len {
                allowed[r * size + start..r * size + start + len].fill(true);
            }
            start += len;
        }
        let mut mask = AttentionMask::new(size, allowed)?;
        mask.blocks = Some(blocks.to_vec());
        Ok(mask)
    }

    /// Block lengths when the mask was built block-diagonal.
    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    fn tiled(&self) -> &[bool] {
        &self.allowed
    }
}

/// Scaled dot-product attention over already-projected `q, k, v` (`T x d`),
/// split into `heads` heads and concatenated back to `T x d`.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (tq, d) = (g.shape(q)[0], g.value(q).cols());
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!("model width {d} is not divisible by {heads} heads")));
    }
    if g.shape(k) != g.shape(q) || g.shape(v) != g.shape(q) {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let mask = match mask {
        Some(m) if m.size() != tq => return Err(Error::shape("attention mask", &[tq, tq], &[m.size()])),
        Some(m) if m.is_full() => None,
        other => other,
    };
    if let Some(blocks) = mask.and_then(AttentionMask::blocks) {
        // attend block by block; identical to the masked product, minus the zeros
        let mut start = 0;
        let mut outs = Vec::with_capacity(blocks.len());
        for &len in blocks {
            let (qb, kb, vb) = (g.slice_rows(q, start, len)?, g.slice_rows(k, start, len)?, g.slice_rows(v, start, len)?);
            outs.push(attention(g, qb, kb, vb, heads, None)?);
            start += len;
        }
        return g.concat_rows(&outs);
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.softmax(scores, mask.map(AttentionMask::tiled))?;
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real, R: Rng>(&self, w: &mut Weights<T>, rng: &mut R) -> Result<()> {
        w.insert(&self.weight(), xavier_uniform(rng, self.d_in, self.d_out))?;
        w.insert(&self.bias(), Tensor::zeros(&[self.d_out]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (wt, b) = (g.p(&self.weight())?, g.p(&self.bias())?);
        let y = g.matmul(x, wt)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>) -> Result<()> {
        w.insert(&format!("{}.gamma", self.name), Tensor::full(&[self.dim], T::one()))?;
        w.insert(&format!("{}.beta", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.p(&format!("{}.gamma", self.name))?;
        let beta = g.p(&format!("{}.beta", self.name))?;
        g.layernorm(x, gamma, beta)
    }
}

/// `Linear -> GELU -> Linear`
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, w: &mut Weights<T>, rng: &mut R) -> Result<()> {
        self.fc1.init(w, rng)?;
        self.fc2.init(w, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(format!("{name}.q"), d, d),
            k: Linear::new(format!("{name}.k"), d, d),
            v: Linear::new(format!("{name}.v"), d, d),
            out: Linear::new(format!("{name}.out"), d, d),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, w: &mut Weights<T>, rng: &mut R) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(w, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = attention(g, q, k, v, self.heads, mask)?;
        self.out.forward(g, a)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, d: usize, heads: usize, mlp_hidden: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), d),
            mlp: Mlp::new(&format!("{name}.mlp"), d, mlp_hidden, d),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, w: &mut Weights<T>, rng: &mut R) -> Result<()> {
        self.ln1.init(w)?;
        self.attn.init(w, rng)?;
        self.ln2.init(w)?;
        self.mlp.init(w, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn input(w: &mut Weights<f64>, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        w.insert(name, Tensor::new(&[rows, cols], data).unwrap()).unwrap();
    }

    fn all_coords() -> GradCheckOptions {
        GradCheckOptions {
            max_coords: None,
            ..GradCheckOptions::default()
        }
    }

    /// Fixed random readout so the scalar depends on every output entry.
    fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let c = g.constant(Tensor::new(&shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
        let prod = g.mul(y, c)?;
        g.sum(prod)
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut w = Weights::new();
        let lin = Linear::new("lin", 4, 3);
        lin.init(&mut w, &mut r).unwrap();
        input(&mut w, "x", 5, 4, &mut r);
        let rep = grad_check(&w, |g| {
            let x = g.p("x")?;
            let y = lin.forward(g, x)?;
            readout(g, y, 1)
        }, &all_coords())
        .unwrap();
        assert!(rep.max_rel_err < 1e-7, "{rep:?}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let mut w = Weights::new();
        input(&mut w, "a", 3, 4, &mut r);
        input(&mut w, "b", 4, 2, &mut r);
        let rep = grad_check(&w, |g| {
            let (a, b) = (g.p("a")?, g.p("b")?);
            let y = g.matmul(a, b)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }, &all_coords())
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn layernorm_gradients() {
        let mut r = rng();
        let mut w = Weights::new();
        let ln = LayerNorm::new("ln", 6);
        ln.init(&mut w).unwrap();
        for v in w.get_mut("ln.gamma").unwrap().data_mut() {
            *v = r.random_range(0.5..1.5);
        }
        input(&mut w, "x", 3, 6, &mut r);
        let rep = grad_check(&w, |g| {
            let x = g.p("x")?;
            let y = ln.forward(g, x)?;
            readout(g, y, 2)
        }, &all_coords())
        .unwrap();
        assert!(rep.max_rel_err < 1e-7, "{rep:?}");
    }

    #[test]
    fn attention_gradients_two_heads() {
        let mut r = rng();
        let mut w = Weights::new();
        let mha = MultiHeadAttention::new("mha", 8, 2);
        mha.init(&mut w, &mut r).unwrap();
        input(&mut w, "x", 5, 8, &mut r);
        let mask = AttentionMask::block_diagonal(&[2, 3]).unwrap();
        let rep = grad_check(&w, |g| {
            let x = g.p("x")?;
            let y = mha.forward(g, x, Some(&mask))?;
            readout(g, y, 3)
        }, &all_coords())
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn block_path_matches_dense_masked_path() {
        let mut r = rng();
        let mut w = Weights::<f64>::new();
        let mha = MultiHeadAttention::new("mha", 8, 2);
        mha.init(&mut w, &mut r).unwrap();
        input(&mut w, "x", 5, 8, &mut r);
        let blocks = AttentionMask::block_diagonal(&[2, 3]).unwrap();
        let dense = AttentionMask::new(5, (0..25).map(|i| blocks.allows(i / 5, i % 5)).collect()).unwrap();
        assert!(dense.blocks().is_none());
        let mut g = Graph::new();
        g.bind(&w).unwrap();
        let x = g.p("x").unwrap();
        let a = mha.forward(&mut g, x, Some(&blocks)).unwrap();
        let b = mha.forward(&mut g, x, Some(&dense)).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_gradients() {
        let mut r = rng();
        let mut w = Weights::new();
        let mha = MultiHeadAttention::new("mha", 8, 2);
        mha.init(&mut w, &mut r).unwrap();
        input(&mut w, "x", 5, 8, &mut r);
        let mask = AttentionMask::new(5, (0..25).map(|i| i % 5 <= i / 5).collect()).unwrap();
        let rep = grad_check(&w, |g| {
            let x = g.p("x")?;
            let y = mha.forward(g, x, Some(&mask))?;
            readout(g, y, 4)
        }, &all_coords())
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn single_token_attention_is_value_chain() {
        let mut r = rng();
        let mut w = Weights::<f64>::new();
        let mha = MultiHeadAttention::new("mha", 4, 2);
        mha.init(&mut w, &mut r).unwrap();
        input(&mut w, "x", 1, 4, &mut r);
        let mut g = Graph::new();
        g.bind(&w).unwrap();
        let x = g.p("x").unwrap();
        let y = mha.forward(&mut g, x, None).unwrap();
        let v = mha.v.forward(&mut g, x).unwrap();
        let expect = mha.out.forward(&mut g, v).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn block_mask_isolates_blocks() {
        let mut r = rng();
        let mut w = Weights::<f64>::new();
        let mha = MultiHeadAttention::new("mha", 4, 2);
        mha.init(&mut w, &mut r).unwrap();
        let mask = AttentionMask::block_diagonal(&[3, 2]).unwrap();
        let run = |tail: [f64; 8]| {
            let mut data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
            data.extend_from_slice(&tail);
            let mut g = Graph::new();
            g.bind(&w).unwrap();
            let x = g.constant(Tensor::new(&[5, 4], data).unwrap());
            let y = mha.forward(&mut g, x, Some(&mask)).unwrap();
            g.value(y).data()[..12].to_vec()
        };
        assert_eq!(run([0.0; 8]), run([9.0, -3.0, 1.0, 2.0, 5.0, 5.0, -8.0, 0.5]));
    }

    #[test]
    fn masks_validate_rows() {
        assert!(AttentionMask::new(2, vec![true, false, false, false]).is_err());
        assert!(AttentionMask::new(2, vec![true; 3]).is_err());
        let m = AttentionMask::block_diagonal(&[1, 2]).unwrap();
        assert!(m.allows(1, 2) && !m.allows(0, 1));
    }

    #[test]
    fn constant_logit_shift_leaves_attention_unchanged() {
        // adding c to every key shifts each query's logits by q.c, a per-row constant
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(&[3, 2], vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1]).unwrap());
        let k = g.constant(Tensor::new(&[3, 2], vec![0.2, 0.4, -0.1, 0.9, 0.6, -0.3]).unwrap());
        let v = g.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let base = attention(&mut g, q, k, v, 1, None).unwrap();
        let scores = g.matmul_nt(q, k).unwrap();
        let shifted = g.constant(Tensor::new(&[3, 3], g.value(scores).data().iter().enumerate().map(|(i, s)| s + (i / 3) as f64 * 4.0).collect()).unwrap());
        let p1 = g.softmax(scores, None).unwrap();
        let p2 = g.softmax(shifted, None).unwrap();
        for (a, b) in g.value(p1).data().iter().zip(g.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.shape(base), &[3, 2]);
    }
}
