//! Transformer building blocks expressed over [`Graph`].
//!
//! Every layer is a thin descriptor holding its parameter-name prefix; the
//! weights live in a [`ParamSet`]. `init` registers freshly initialised
//! parameters, `forward` records the computation on a graph.

use rand::Rng;

use super::autograd::{Graph, Var};
use super::ops::LAYER_NORM_EPS;
use super::params::{init, ParamSet};
use super::tensor::Tensor;
use crate::error::{ensure_arg, MovError, Result};

/// `y = x W + b`, `W: d_in x d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        ps.insert(
            self.weight_name(),
            init::normal(&[self.d_in, self.d_out], init::WEIGHT_STD, rng),
            true,
        );
        ps.insert(self.bias_name(), init::zeros(&[self.d_out]), true);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    /// Sets weight and bias to zero (used for residual-identity checks).
    pub fn zero(&self, ps: &mut ParamSet) -> Result<()> {
        for name in [self.weight_name(), self.bias_name()] {
            let p = ps.get_mut(&name)?;
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.insert(format!("{}.gain", self.prefix), init::ones(&[self.dim]), true);
        ps.insert(format!("{}.bias", self.prefix), init::zeros(&[self.dim]), true);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{}.gain", self.prefix))?;
        let bias = g.param(&format!("{}.bias", self.prefix))?;
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
///
/// Serves self-attention when queries and keys come from the same tensor and
/// cross-attention otherwise.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MovError::config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let prefix = prefix.into();
        Ok(Self {
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            k: Linear::new(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            out: Linear::new(format!("{prefix}.o"), dim, dim),
            prefix,
            dim,
            heads,
        })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(ps, rng);
        }
    }

    /// Returns the projected output and the raw attention node (for weights).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query_in: Var,
        kv_in: Var,
        q_seg: &[usize],
        kv_seg: &[usize],
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, query_in)?;
        let k = self.k.forward(g, kv_in)?;
        let v = self.v.forward(g, kv_in)?;
        let att = g.attention(q, k, v, self.heads, q_seg, kv_seg)?;
        Ok((self.out.forward(g, att)?, att))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query_in: Var,
        kv_in: Var,
        q_seg: &[usize],
        kv_seg: &[usize],
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, query_in, kv_in, q_seg, kv_seg)?.0)
    }
}

/// Two linear layers with a tanh-GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{prefix}.fc1"), dim, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.fc1.init(ps, rng);
        self.fc2.init(ps, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer:
/// `y = MSA(LN(z)) + z`, `z' = MLP(LN(y)) + y`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub prefix: String,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            ln1: LayerNorm::new(format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), dim, heads)?,
            ln2: LayerNorm::new(format!("{prefix}.ln2"), dim),
            mlp: Mlp::new(&format!("{prefix}.mlp"), dim, hidden),
            prefix,
        })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.ln1.init(ps);
        self.attn.init(ps, rng);
        self.ln2.init(ps);
        self.mlp.init(ps, rng);
    }

    /// `seg` gives the token count of each independent sequence stacked in `z`.
    pub fn forward(&self, g: &mut Graph, z: Var, seg: &[usize]) -> Result<Var> {
        let h = self.ln1.forward(g, z)?;
        let a = self.attn.forward(g, h, h, seg, seg)?;
        let y = g.add(a, z)?;
        let h = self.ln2.forward(g, y)?;
        let m = self.mlp.forward(g, h)?;
        g.add(m, y)
    }

    /// Zeroes the attention and MLP output projections, making the block an identity.
    pub fn zero_output_projections(&self, ps: &mut ParamSet) -> Result<()> {
        self.attn.out.zero(ps)?;
        self.mlp.fc2.zero(ps)
    }
}

/// Multi-head attention on plain tensors (`query_in: n_q x d`, `kv_in: n_kv x d`).
///
/// `params` must hold `{prefix}.{q,k,v,o}.{w,b}`.
pub fn multi_head_attention(
    query_in: &Tensor,
    kv_in: &Tensor,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let (nq, d) = query_in.expect_matrix("attention query")?;
    let (nk, d2) = kv_in.expect_matrix("attention key/value")?;
    ensure_arg!(d == d2, "query width {d} vs key width {d2}");
    let mha = MultiHeadAttention::new(prefix, d, heads)?;
    let mut g = Graph::new(params);
    let q = g.constant(query_in.clone().reshape(&[nq, d])?);
    let kv = g.constant(kv_in.clone().reshape(&[nk, d])?);
    let out = mha.forward(&mut g, q, kv, &[nq], &[nk])?;
    let t = g.value(out).clone();
    t.ensure_finite("multi_head_attention")?;
    Ok(t)
}

/// Two-layer GELU MLP on a plain tensor; `params` holds `{prefix}.fc1/.fc2`.
pub fn mlp_block(x: &Tensor, params: &ParamSet, prefix: &str) -> Result<Tensor> {
    let (n, d) = x.expect_matrix("mlp input")?;
    let w1 = params.value(&format!("{prefix}.fc1.w"))?;
    ensure_arg!(
        w1.rank() == 2 && w1.shape()[0] == d,
        "mlp first layer expects width {}, got {d}",
        w1.shape()[0]
    );
    let hidden = w1.shape()[1];
    let mlp = Mlp::new(prefix, d, hidden);
    let mut g = Graph::new(params);
    let xv = g.constant(x.clone().reshape(&[n, d])?);
    let out = mlp.forward(&mut g, xv)?;
    let t = g.value(out).clone();
    t.ensure_finite("mlp_block")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::gelu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indivisible_heads_is_config_error() {
        let err = MultiHeadAttention::new("a", 10, 4).unwrap_err();
        assert!(matches!(err, MovError::Config(_)));
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", 4, 8);
        mlp.init(&mut ps, &mut rng);
        mlp.fc1.zero(&mut ps).unwrap();
        mlp.fc2.zero(&mut ps).unwrap();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        assert_eq!(mlp_block(&x, &ps, "m").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn mlp_identity_layers_apply_gelu() {
        let mut ps = ParamSet::new();
        ps.insert("m.fc1.w", Tensor::eye(4), false);
        ps.insert("m.fc1.b", Tensor::zeros(&[4]), false);
        ps.insert("m.fc2.w", Tensor::eye(4), false);
        ps.insert("m.fc2.b", Tensor::zeros(&[4]), false);
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 * 0.5 - 2.0);
        let y = mlp_block(&x, &ps, "m").unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - gelu(*b)).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_matches_matrix_chain() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new("m", 6, 10);
        mlp.init(&mut ps, &mut rng);
        for name in ["m.fc1.b", "m.fc2.b"] {
            let p = ps.get_mut(name).unwrap();
            p.value = Tensor::from_fn(p.value.shape(), |i| 0.01 * i as f64);
        }
        let x = Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.7).sin());
        let y = mlp_block(&x, &ps, "m").unwrap();
        // explicit loops
        let w1 = ps.value("m.fc1.w").unwrap();
        let b1 = ps.value("m.fc1.b").unwrap();
        let w2 = ps.value("m.fc2.w").unwrap();
        let b2 = ps.value("m.fc2.b").unwrap();
        for r in 0..5 {
            let h: Vec<f64> = (0..10)
                .map(|j| gelu((0..6).map(|i| x.at2(r, i) * w1.at2(i, j)).sum::<f64>() + b1.data()[j]))
                .collect();
            for c in 0..6 {
                let want = (0..10).map(|j| h[j] * w2.at2(j, c)).sum::<f64>() + b2.data()[c];
                assert!((y.at2(r, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new("a", 8, 2).unwrap();
        mha.init(&mut ps, &mut rng);
        let mut g = Graph::new(&ps);
        let q = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64).cos()));
        let kv = g.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1));
        let (out, att) = mha.forward_with_weights(&mut g, q, kv, &[3], &[1]).unwrap();
        for w in g.attention_weights(att).unwrap() {
            assert!(w.iter().all(|&x| x == 1.0));
        }
        // every query row receives the same value row
        let o = g.value(out);
        for r in 1..3 {
            assert_eq!(o.row(r), o.row(0));
        }
    }

    #[test]
    fn matching_key_gets_largest_weight() {
        let d = 4;
        let mut ps = ParamSet::new();
        for l in ["q", "k", "v", "o"] {
            ps.insert(format!("a.{l}.w"), Tensor::eye(d), false);
            ps.insert(format!("a.{l}.b"), Tensor::zeros(&[d]), false);
        }
        let mha = MultiHeadAttention::new("a", d, 1).unwrap();
        let keys = Tensor::eye(d).scale(3.0);
        for target in 0..d {
            let mut g = Graph::new(&ps);
            let q = g.constant(keys.slice_rows(target, 1).unwrap());
            let kv = g.constant(keys.clone());
            let (_, att) = mha.forward_with_weights(&mut g, q, kv, &[1], &[d]).unwrap();
            let w = &g.attention_weights(att).unwrap()[0];
            let best = crate::numcore::tensor::argmax(w);
            assert_eq!(best, target);
            assert!(w.iter().enumerate().all(|(j, &x)| j == target || x < w[target]));
        }
    }

    #[test]
    fn attention_matches_per_head_loop() {
        let (n, d, h) = (4, 16, 4);
        let dh = d / h;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mha = MultiHeadAttention::new("a", d, h).unwrap();
        mha.init(&mut ps, &mut rng);
        for l in ["q", "k", "v", "o"] {
            let p = ps.get_mut(&format!("a.{l}.w")).unwrap();
            p.value = p.value.scale(20.0);
        }
        let xq = init::normal(&[n, d], 1.0, &mut rng);
        let xk = init::normal(&[n + 1, d], 1.0, &mut rng);
        let got = multi_head_attention(&xq, &xk, &ps, "a", h).unwrap();

        let proj = |x: &Tensor, l: &str| {
            let w = ps.value(&format!("a.{l}.w")).unwrap();
            let b = ps.value(&format!("a.{l}.b")).unwrap();
            let mut out = Tensor::zeros(&[x.rows(), d]);
            for r in 0..x.rows() {
                for c in 0..d {
                    out.row_mut(r)[c] = (0..d).map(|i| x.at2(r, i) * w.at2(i, c)).sum::<f64>() + b.data()[c];
                }
            }
            out
        };
        let (q, k, v) = (proj(&xq, "q"), proj(&xk, "k"), proj(&xk, "v"));
        let mut concat = Tensor::zeros(&[n, d]);
        for head in 0..h {
            for r in 0..n {
                let scores: Vec<f64> = (0..n + 1)
                    .map(|j| (0..dh).map(|c| q.at2(r, head * dh + c) * k.at2(j, head * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    concat.row_mut(r)[head * dh + c] = (0..n + 1).map(|j| e[j] / z * v.at2(j, head * dh + c)).sum();
                }
            }
        }
        let want = proj(&concat, "o");
        assert!(got.max_abs_diff(&want) < 1e-6, "diff {}", got.max_abs_diff(&want));
    }
}
