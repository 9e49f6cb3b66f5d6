//! Trainable parameter storage and the small transformer layers shared by
//! the descriptor extractor, the encoder and the decoder.

use std::collections::HashMap;

use rand::Rng as _;

use crate::autograd::{Mat, Tape, UnOp, Var};
use crate::tensors_io::rng::{labeled_stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.param(v.clone())).collect() }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a tape, in parameter-store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initialiser; each parameter draws from its own named stream.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> Rng {
        labeled_stream(self.seed, &format!("init/{name}"), 0)
    }

    pub fn uniform(&self, name: &str, rows: usize, cols: usize, bound: f64) -> Mat {
        let mut rng = self.rng(name);
        Mat::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
    }

    pub fn xavier(&self, name: &str, fan_in: usize, fan_out: usize) -> Mat {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, fan_in, fan_out, bound)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(&format!("{name}.weight"), fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        tape.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm_rows(x);
        let scaled = tape.mul(n, p.var(self.gamma));
        tape.add(scaled, p.var(self.beta))
    }
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            dim,
        }
    }

    /// `queries` attend over `context`. With `uniform` set the attention
    /// weights are replaced by `1/len(context)`.
    pub fn forward(&self, tape: &Tape, p: &Bound, queries: Var, context: Var, uniform: bool) -> Var {
        let v = self.value.forward(tape, p, context);
        let (nq, _) = tape.shape(queries);
        let (nk, _) = tape.shape(context);
        let weights = if uniform {
            tape.constant(Mat::filled(nq, nk, 1.0 / nk as f64))
        } else {
            let q = self.query.forward(tape, p, queries);
            let k = self.key.forward(tape, p, context);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
            tape.softmax_rows(scores)
        };
        let mixed = tape.matmul(weights, v);
        self.out.forward(tape, p, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(tape, p, x);
        let h = tape.unary(UnOp::Gelu, h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfBlock {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, hidden),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = self.norm1.forward(tape, p, x);
        let a = self.attn.forward(tape, p, h, h, false);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, p, x);
        let m = self.mlp.forward(tape, p, h);
        tape.add(x, m)
    }
}

/// Pre-norm cross-attention block: queries attend over a token sequence.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, hidden),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, q: Var, tokens: Var, uniform: bool) -> Var {
        let hq = self.norm_q.forward(tape, p, q);
        let hk = self.norm_kv.forward(tape, p, tokens);
        let a = self.attn.forward(tape, p, hq, hk, uniform);
        let q = tape.add(q, a);
        let h = self.norm2.forward(tape, p, q);
        let m = self.mlp.forward(tape, p, h);
        tape.add(q, m)
    }
}

/// Fixed 2-D sine/cosine position encodings, `(gh·gw) × dim`; the first
/// half of each row encodes the grid row, the second half the column.
pub fn sincos_position_encoding(grid_height: usize, grid_width: usize, dim: usize) -> Mat {
    assert!(dim % 4 == 0, "position encoding dim must be a multiple of 4");
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Mat::zeros(grid_height * grid_width, dim);
    for y in 0..grid_height {
        for x in 0..grid_width {
            let row = out.row_mut(y * grid_width + x);
            for (i, f) in freqs.iter().enumerate() {
                row[i] = (y as f64 * f).sin();
                row[quarter + i] = (y as f64 * f).cos();
                row[2 * quarter + i] = (x as f64 * f).sin();
                row[3 * quarter + i] = (x as f64 * f).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = Init::new(3).xavier("w", 4, 5);
        assert_eq!(a, Init::new(3).xavier("w", 4, 5));
        assert_ne!(a, Init::new(3).xavier("v", 4, 5));
        assert_ne!(a, Init::new(4).xavier("w", 4, 5));
    }

    #[test]
    fn position_encodings_are_distinct() {
        let pe = sincos_position_encoding(4, 4, 8);
        for i in 0..16 {
            for j in 0..i {
                let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }

    #[test]
    fn uniform_attention_returns_mean_value() {
        let mut store = ParamStore::new();
        let init = Init::new(0);
        let attn = Attention::new(&mut store, &init, "a", 4);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(init.uniform("q", 2, 4, 1.0));
        let ctx_m = init.uniform("ctx", 3, 4, 1.0);
        let ctx = tape.constant(ctx_m.clone());
        let out = tape.value(attn.forward(&tape, &p, q, ctx, true));
        let v = ctx_m.matmul(store.get(attn.value.weight));
        let mut mean = Mat::zeros(1, 4);
        for r in 0..3 {
            for c in 0..4 {
                mean.data[c] += v.get(r, c) / 3.0;
            }
        }
        let expected = mean.matmul(store.get(attn.out.weight));
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.get(r, c) - expected.data[c]).abs() < 1e-12);
            }
        }
    }
}
