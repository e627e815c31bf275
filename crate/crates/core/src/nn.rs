//! Layer building blocks on top of [`Graph`], plus parameter layouts.
//!
//! A layout is the list of named parameter shapes a module owns. Models are
//! materialized from layouts, and parameter counts for large presets are read
//! off the layout without allocating anything.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{self, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        });
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.weight"), fan_in, fan_out, Init::Xavier);
        self.push(format!("{prefix}.bias"), 1, fan_out, Init::Zeros);
    }

    /// Linear layers `dims[0] → dims[1] → …`, named `{prefix}.{i}`.
    pub fn mlp(&mut self, prefix: &str, dims: &[usize]) {
        for (i, w) in dims.windows(2).enumerate() {
            self.linear(&format!("{prefix}.{i}"), w[0], w[1]);
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.gamma"), 1, dim, Init::Ones);
        self.push(format!("{prefix}.beta"), 1, dim, Init::Zeros);
    }

    pub fn extend(&mut self, other: Layout) {
        self.specs.extend(other.specs);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_elements(&self) -> usize {
        self.specs.iter().map(|s| s.rows * s.cols).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.rows * s.cols)
            .sum()
    }

    /// Draws initial values in layout order.
    pub fn materialize<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for s in &self.specs {
            let t = match s.init {
                Init::Xavier => params::xavier(rng, s.rows, s.cols),
                Init::Normal(std) => params::normal(rng, s.rows, s.cols, std),
                Init::Zeros => Tensor::zeros(s.rows, s.cols),
                Init::Ones => Tensor::full(s.rows, s.cols, T::one()),
                Init::Const(v) => Tensor::full(s.rows, s.cols, T::of(v)),
            };
            store.insert(s.name.clone(), t);
        }
        store
    }
}

/// `x · W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Var {
    let w = g.param(p, &format!("{prefix}.weight"));
    let b = g.param(p, &format!("{prefix}.bias"));
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// `layers` linear maps with GELU between them (none after the last).
pub fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Var {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{prefix}.{i}"), h);
        if i + 1 < layers {
            h = g.gelu(h);
        }
    }
    h
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Var {
    let gamma = g.param(p, &format!("{prefix}.gamma"));
    let beta = g.param(p, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Scaled dot-product attention of already-projected `q`, `k`, `v`, split
/// into `heads` column blocks. Returns the merged output and the per-head
/// attention probability matrices.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> (Var, Vec<Var>) {
    let dim = g.shape(q).1;
    let head_dim = dim / heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
        probs.push(attn);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    (merged, probs)
}

/// Transformer block hyper-parameters shared by encoder and decoder stacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub layerscale: Option<f64>,
}

impl BlockShape {
    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

pub fn self_attention_block_layout(l: &mut Layout, prefix: &str, s: &BlockShape) {
    l.layer_norm(&format!("{prefix}.norm1"), s.dim);
    l.linear(&format!("{prefix}.attn.qkv"), s.dim, 3 * s.dim);
    l.linear(&format!("{prefix}.attn.proj"), s.dim, s.dim);
    if let Some(init) = s.layerscale {
        l.push(format!("{prefix}.ls1.gamma"), 1, s.dim, Init::Const(init));
    }
    l.layer_norm(&format!("{prefix}.norm2"), s.dim);
    l.linear(&format!("{prefix}.mlp.fc1"), s.dim, s.hidden());
    l.linear(&format!("{prefix}.mlp.fc2"), s.hidden(), s.dim);
    if let Some(init) = s.layerscale {
        l.push(format!("{prefix}.ls2.gamma"), 1, s.dim, Init::Const(init));
    }
}

fn residual<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    ls_name: Option<String>,
    x: Var,
    branch: Var,
) -> Var {
    let branch = match ls_name {
        Some(name) => {
            let gamma = g.param(p, &name);
            g.mul_row(branch, gamma)
        }
        None => branch,
    };
    g.add(x, branch)
}

fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    s: &BlockShape,
    x: Var,
) -> Var {
    let n = layer_norm(g, p, &format!("{prefix}.norm2"), x);
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), n);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h);
    let ls = s.layerscale.map(|_| format!("{prefix}.ls2.gamma"));
    residual(g, p, ls, x, h)
}

/// Pre-norm self-attention block. Returns the output and attention maps.
pub fn self_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    s: &BlockShape,
    x: Var,
) -> (Var, Vec<Var>) {
    let n = layer_norm(g, p, &format!("{prefix}.norm1"), x);
    let qkv = linear(g, p, &format!("{prefix}.attn.qkv"), n);
    let q = g.slice_cols(qkv, 0, s.dim);
    let k = g.slice_cols(qkv, s.dim, s.dim);
    let v = g.slice_cols(qkv, 2 * s.dim, s.dim);
    let (a, probs) = multi_head_attention(g, q, k, v, s.heads);
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a);
    let ls = s.layerscale.map(|_| format!("{prefix}.ls1.gamma"));
    let x = residual(g, p, ls, x, a);
    (feed_forward(g, p, prefix, s, x), probs)
}

pub fn cross_attention_block_layout(l: &mut Layout, prefix: &str, s: &BlockShape) {
    l.layer_norm(&format!("{prefix}.norm_q"), s.dim);
    l.layer_norm(&format!("{prefix}.norm_kv"), s.dim);
    l.linear(&format!("{prefix}.attn.q"), s.dim, s.dim);
    l.linear(&format!("{prefix}.attn.kv"), s.dim, 2 * s.dim);
    l.linear(&format!("{prefix}.attn.proj"), s.dim, s.dim);
    l.layer_norm(&format!("{prefix}.norm2"), s.dim);
    l.linear(&format!("{prefix}.mlp.fc1"), s.dim, s.hidden());
    l.linear(&format!("{prefix}.mlp.fc2"), s.hidden(), s.dim);
}

/// Pre-norm cross-attention block: `queries` attend to `context`.
pub fn cross_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    s: &BlockShape,
    queries: Var,
    context: Var,
) -> (Var, Vec<Var>) {
    let nq = layer_norm(g, p, &format!("{prefix}.norm_q"), queries);
    let nkv = layer_norm(g, p, &format!("{prefix}.norm_kv"), context);
    let q = linear(g, p, &format!("{prefix}.attn.q"), nq);
    let kv = linear(g, p, &format!("{prefix}.attn.kv"), nkv);
    let k = g.slice_cols(kv, 0, s.dim);
    let v = g.slice_cols(kv, s.dim, s.dim);
    let (a, probs) = multi_head_attention(g, q, k, v, s.heads);
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a);
    let x = g.add(queries, a);
    let s_no_ls = BlockShape {
        layerscale: None,
        ..*s
    };
    (feed_forward(g, p, prefix, &s_no_ls, x), probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts_match_materialized_store() {
        let mut l = Layout::new();
        let s = BlockShape {
            dim: 8,
            heads: 2,
            mlp_ratio: 4.0,
            layerscale: Some(0.1),
        };
        self_attention_block_layout(&mut l, "b", &s);
        let store: ParamStore<f32> = l.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.num_elements(), l.num_elements());
        // 12·C² + 13·C for a block with LayerScale adding 2·C more.
        assert_eq!(l.num_elements(), 12 * 64 + 13 * 8 + 2 * 8);
        assert_eq!(store.get("b.ls1.gamma").unwrap().data(), &[0.1f32; 8]);
    }
}
