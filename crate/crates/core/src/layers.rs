//! Trainable building blocks with explicit caches for the backward pass.
//!
//! Gradients are stored in a value of the same type as the parameters
//! (see [`zeros_like`]); every `backward` accumulates into it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, LayerNormCache, Tensor};

/// Named traversal over the trainable tensors of a parameter group.
///
/// Both methods visit tensors in the same, fixed order.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_parameters<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn parameter_count<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> usize {
    named_parameters(p).iter().map(|(_, t)| t.len()).sum()
}

/// A copy of `p` with every tensor zeroed; used as a gradient accumulator.
pub fn zeros_like<T: Scalar, P: Parameters<T> + Clone>(p: &P) -> P {
    let mut out = p.clone();
    out.visit_mut("", &mut |_, t| t.fill(T::zero()));
    out
}

/// Concatenation of all parameter values in visit order.
pub fn flatten<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar, P: Parameters<T> + ?Sized>(p: &mut P, values: &[T]) -> Result<()> {
    let mut offset = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        if offset + n <= values.len() {
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
        }
        offset += n;
    });
    if offset != values.len() {
        return Err(Error::shape("unflatten", &[offset], &[values.len()]));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Gaussian weights with standard deviation `1/√fan_in`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn fan_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = tensor::matmul(x, &self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        grad.weight.add_assign(&tensor::matmul_at_b(x, dy)?)?;
        if let (Some(gb), Some(_)) = (grad.bias.as_mut(), self.bias.as_ref()) {
            gb.add_assign(&dy.sum_rows())?;
        }
        tensor::matmul_a_bt(dy, &self.weight)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        tensor::layer_norm(x, &self.gamma, &self.beta, T::of(LAYER_NORM_EPS))
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        tensor::layer_norm_backward(cache, &self.gamma, dy, &mut grad.gamma, &mut grad.beta)
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Single-head scaled dot-product attention, `softmax(Q·Kᵀ/√d_k)·V` followed by
/// an output projection. Queries and keys/values may come from different inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

pub struct AttentionCache<T> {
    queries_in: Tensor<T>,
    context_in: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Row-stochastic attention weights, `N_q × N_kv`.
    pub weights: Tensor<T>,
    mixed: Tensor<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(query_dim: usize, context_dim: usize, key_dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(query_dim, key_dim, false, rng),
            key: Linear::new(context_dim, key_dim, false, rng),
            value: Linear::new(context_dim, key_dim, false, rng),
            output: Linear::new(key_dim, query_dim, false, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.query.fan_out()
    }

    fn scale(&self) -> T {
        T::one() / T::of(self.key_dim() as f64).sqrt()
    }

    pub fn forward(&self, queries: &Tensor<T>, context: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (_, qd) = queries.dims2("attention")?;
        let (_, cd) = context.dims2("attention")?;
        if qd != self.query.fan_in() || cd != self.key.fan_in() {
            return Err(Error::shape("attention", queries.shape(), context.shape()));
        }
        let q = self.query.forward(queries)?;
        let k = self.key.forward(context)?;
        let v = self.value.forward(context)?;
        let scores = tensor::matmul_a_bt(&q, &k)?.scale(self.scale());
        let weights = tensor::softmax_rows(&scores)?;
        let mixed = tensor::matmul(&weights, &v)?;
        let y = self.output.forward(&mixed)?;
        Ok((
            y,
            AttentionCache {
                queries_in: queries.clone(),
                context_in: context.clone(),
                q,
                k,
                v,
                weights,
                mixed,
            },
        ))
    }

    /// Returns gradients with respect to the query input and the context input.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let dmixed = self.output.backward(&cache.mixed, dy, &mut grad.output)?;
        let dweights = tensor::matmul_a_bt(&dmixed, &cache.v)?;
        let dv = tensor::matmul_at_b(&cache.weights, &dmixed)?;
        let dscores = tensor::softmax_rows_backward(&cache.weights, &dweights)?.scale(self.scale());
        let dq = tensor::matmul(&dscores, &cache.k)?;
        let dk = tensor::matmul_at_b(&dscores, &cache.q)?;
        let dqueries = self.query.backward(&cache.queries_in, &dq, &mut grad.query)?;
        let mut dcontext = self.key.backward(&cache.context_in, &dk, &mut grad.key)?;
        dcontext.add_assign(&self.value.backward(&cache.context_in, &dv, &mut grad.value)?)?;
        Ok((dqueries, dcontext))
    }
}

impl<T: Scalar> Parameters<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub expand: Linear<T>,
    pub contract: Linear<T>,
}

pub struct FeedForwardCache<T> {
    input: Tensor<T>,
    pre_activation: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(dim, hidden, true, rng),
            contract: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeedForwardCache<T>)> {
        let pre_activation = self.expand.forward(x)?;
        let hidden = tensor::relu(&pre_activation);
        let y = self.contract.forward(&hidden)?;
        Ok((
            y,
            FeedForwardCache {
                input: x.clone(),
                pre_activation,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let dhidden = self.contract.backward(&cache.hidden, dy, &mut grad.contract)?;
        let dpre = tensor::relu_backward(&cache.pre_activation, &dhidden)?;
        self.expand.backward(&cache.input, &dpre, &mut grad.expand)
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.contract.visit(&join(prefix, "contract"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.contract.visit_mut(&join(prefix, "contract"), f);
    }
}

/// Pre-norm transformer block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub attn_norm: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

pub struct TransformerBlockCache<T> {
    attn_norm: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ffn_norm: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            attn_norm: LayerNorm::new(dim),
            attn: Attention::new(dim, dim, dim, rng),
            ffn_norm: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, TransformerBlockCache<T>)> {
        let (a, attn_norm) = self.attn_norm.forward(x)?;
        let (attn_out, attn) = self.attn.forward(&a, &a)?;
        let h = x.add(&attn_out)?;
        let (b, ffn_norm) = self.ffn_norm.forward(&h)?;
        let (ffn_out, ffn) = self.ffn.forward(&b)?;
        let y = h.add(&ffn_out)?;
        Ok((
            y,
            TransformerBlockCache {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            },
        ))
    }

    pub fn backward(&self, cache: &TransformerBlockCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let db = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn)?;
        let mut dh = self.ffn_norm.backward(&cache.ffn_norm, &db, &mut grad.ffn_norm)?;
        dh.add_assign(dy)?;
        let (dq, dctx) = self.attn.backward(&cache.attn, &dh, &mut grad.attn)?;
        let da = dq.add(&dctx)?;
        let mut dx = self.attn_norm.backward(&cache.attn_norm, &da, &mut grad.attn_norm)?;
        dx.add_assign(&dh)?;
        Ok(dx)
    }
}

impl<T: Scalar> Parameters<T> for TransformerBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Runs `blocks` in sequence, keeping each cache.
pub fn run_blocks<T: Scalar>(
    blocks: &[TransformerBlock<T>],
    x: Tensor<T>,
) -> Result<(Tensor<T>, Vec<TransformerBlockCache<T>>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for block in blocks {
        let (next, cache) = block.forward(&h)?;
        caches.push(cache);
        h = next;
    }
    Ok((h, caches))
}

pub fn run_blocks_backward<T: Scalar>(
    blocks: &[TransformerBlock<T>],
    caches: &[TransformerBlockCache<T>],
    dy: Tensor<T>,
    grads: &mut [TransformerBlock<T>],
) -> Result<Tensor<T>> {
    let mut d = dy;
    for ((block, cache), grad) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = block.backward(cache, &d, grad)?;
    }
    Ok(d)
}
