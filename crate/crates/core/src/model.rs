//! Siamese binary Tree-LSTM with a Manhattan distance head and a
//! first-transformation classifier.
//!
//! Both input trees are embedded by the same Tree-LSTM. The L1 distance
//! between the two root hidden states estimates the rewrite distance; the
//! concatenated root states feed a stack of ReLU layers ending in eight
//! logits, one per transformation.
//!
//! Input matrices `W` are stored as `M x I` and applied as `W x`. Unary focus
//! nodes put their child in slot 1 and a zero state in slot 2.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{Expr, PostOrderSeq, Symbol, SYMBOL_COUNT};
use crate::numerics::{self, matvec_acc, sigmoid, NumericsError, Tape, Tensor, VarId};
use crate::rewrite::{Transformation, TRANSFORMATION_COUNT};

pub const FORMAT_MAGIC: &str = "eqprove-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model format error: {0}")]
    Format(String),
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub branching: usize,
    pub memory_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(memory_dim: usize) -> Self {
        ModelConfig {
            input_dim: SYMBOL_COUNT,
            branching: 2,
            memory_dim,
            hidden: vec![128, 64, 32],
            classes: TRANSFORMATION_COUNT,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim != SYMBOL_COUNT || self.branching != 2 || self.classes != TRANSFORMATION_COUNT {
            return Err(ModelError::Format(format!(
                "unsupported dimensions I={} N={} classes={}",
                self.input_dim, self.branching, self.classes
            )));
        }
        if self.memory_dim == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Format("zero-sized layer".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (m, i) = (self.memory_dim, self.input_dim);
        let mut out = Vec::new();
        for g in ["i", "o", "u", "f"] {
            out.push((format!("W_{g}"), vec![m, i]));
        }
        for g in ["i", "o", "u"] {
            for l in 1..=2 {
                out.push((format!("U_{g}{l}"), vec![m, m]));
            }
        }
        for k in 1..=2 {
            for l in 1..=2 {
                out.push((format!("U_f{k}{l}"), vec![m, m]));
            }
        }
        for g in ["i", "o", "u", "f"] {
            out.push((format!("b_{g}"), vec![m]));
        }
        let mut fan_in = 2 * m;
        for (k, &h) in self.hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
            out.push((format!("dense{k}.weight"), vec![h, fan_in]));
            out.push((format!("dense{k}.bias"), vec![h]));
            fan_in = h;
        }
        out
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(32)
    }
}

// Parameter slots.
const W_I: usize = 0;
const W_O: usize = 1;
const W_U: usize = 2;
const W_F: usize = 3;
const U_I: [usize; 2] = [4, 5];
const U_O: [usize; 2] = [6, 7];
const U_U: [usize; 2] = [8, 9];
/// `U_F[k][l]`: forget gate of child `k` reading the hidden state of child `l`.
const U_F: [[usize; 2]; 2] = [[10, 11], [12, 13]];
const B_I: usize = 14;
const B_O: usize = 15;
const B_U: usize = 16;
const B_F: usize = 17;
const DENSE_START: usize = 18;

/// Memory cell and hidden state of one tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    /// Uniform weights in `[-1/sqrt(M), 1/sqrt(M)]`, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let bound = 1.0 / (config.memory_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(_, shape)| {
                let mut t = Tensor::zeros(&shape);
                if shape.len() == 2 {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|x| *x = rng.gen_range(-bound..=bound));
                }
                t
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let params = config.layout().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Model, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len()
            || layout.iter().zip(&params).any(|((_, s), t)| s.as_slice() != t.shape())
        {
            return Err(ModelError::Format("parameter shapes do not match the configuration".into()));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Zero tensors shaped like the parameters, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn dense_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    /// One Tree-LSTM step. `children` holds at most two states; absent
    /// children contribute zero memory and hidden state.
    pub fn tree_lstm_unit(&self, x: &[f64], children: &[&NodeState]) -> Result<NodeState, ModelError> {
        let m = self.config.memory_dim;
        if x.len() != self.config.input_dim
            || children.len() > 2
            || children.iter().any(|s| s.c.len() != m || s.h.len() != m)
        {
            return Err(NumericsError::ShapeMismatch(format!(
                "unit input of length {} with {} children",
                x.len(),
                children.len()
            ))
            .into());
        }
        Ok(self.unit(x, children))
    }

    fn unit(&self, x: &[f64], children: &[&NodeState]) -> NodeState {
        let m = self.config.memory_dim;
        let p = &self.params;
        let pre = |w: usize, us: [usize; 2], b: usize| -> Vec<f64> {
            let mut z = vec![0.0; m];
            matvec_acc(p[w].data(), self.config.input_dim, x, &mut z);
            for (l, child) in children.iter().enumerate() {
                matvec_acc(p[us[l]].data(), m, &child.h, &mut z);
            }
            z.iter_mut().zip(p[b].data()).for_each(|(z, b)| *z += b);
            z
        };
        let i = pre(W_I, U_I, B_I);
        let o = pre(W_O, U_O, B_O);
        let u = pre(W_U, U_U, B_U);
        let mut c: Vec<f64> = i
            .iter()
            .zip(&u)
            .map(|(&i, &u)| sigmoid(i) * u.tanh())
            .collect();
        for (k, child) in children.iter().enumerate() {
            let f = pre(W_F, U_F[k], B_F);
            c.iter_mut()
                .zip(f.iter().zip(&child.c))
                .for_each(|(c, (&f, &ck))| *c += sigmoid(f) * ck);
        }
        let h = o.iter().zip(&c).map(|(&o, &c)| sigmoid(o) * c.tanh()).collect();
        NodeState { c, h }
    }

    fn node_state(&self, e: &Expr) -> NodeState {
        let x = e.symbol().one_hot();
        match e {
            Expr::Var(_) => self.unit(&x, &[]),
            Expr::Focus(a) => {
                let sa = self.node_state(a);
                self.unit(&x, &[&sa])
            }
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                let sa = self.node_state(a);
                let sb = self.node_state(b);
                self.unit(&x, &[&sa, &sb])
            }
        }
    }

    /// Root hidden state of the Tree-LSTM folded bottom-up over `e`.
    pub fn embed(&self, e: &Expr) -> Vec<f64> {
        self.node_state(e).h
    }

    /// Embeds many trees at once with the two-stack recurrent executor.
    pub fn batch_embed(&self, exprs: &[Expr]) -> Vec<Vec<f64>> {
        let mut exec = BatchExecutor::new(self, exprs);
        while exec.step() {}
        exec.finish()
    }

    pub fn distance_between(a: &[f64], b: &[f64]) -> f64 {
        numerics::manhattan(a, b)
    }

    pub fn predict_distance(&self, e1: &Expr, e2: &Expr) -> f64 {
        Self::distance_between(&self.embed(e1), &self.embed(e2))
    }

    /// Classifier logits from two embeddings.
    pub fn classify(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = a.iter().chain(b).copied().collect();
        let layers = self.dense_layers();
        for k in 0..layers {
            let w = &self.params[DENSE_START + 2 * k];
            let b = &self.params[DENSE_START + 2 * k + 1];
            let mut out = vec![0.0; w.rows()];
            matvec_acc(w.data(), w.cols(), &v, &mut out);
            out.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
            if k + 1 < layers {
                out.iter_mut().for_each(|o| *o = numerics::relu(*o));
            }
            v = out;
        }
        v
    }

    pub fn predict_first_transformation(&self, e1: &Expr, e2: &Expr) -> Vec<f64> {
        self.classify(&self.embed(e1), &self.embed(e2))
    }

    pub fn predict(&self, e1: &Expr, e2: &Expr) -> Prediction {
        let (a, b) = (self.embed(e1), self.embed(e2));
        Prediction {
            distance: Self::distance_between(&a, &b),
            logits: self.classify(&a, &b),
        }
    }

    /// Records the embedding of `e` on `tape`, returning the root hidden state.
    pub fn embed_on_tape(&self, tape: &mut Tape<'_>, e: &Expr) -> Result<VarId, NumericsError> {
        Ok(self.record_node(tape, e)?.1)
    }

    fn record_node(&self, tape: &mut Tape<'_>, e: &Expr) -> Result<(VarId, VarId), NumericsError> {
        let children: Vec<(VarId, VarId)> = match e {
            Expr::Var(_) => vec![],
            Expr::Focus(a) => vec![self.record_node(tape, a)?],
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                vec![self.record_node(tape, a)?, self.record_node(tape, b)?]
            }
        };
        let x = tape.input(e.symbol().one_hot().to_vec())?;
        let gate = |tape: &mut Tape<'_>, w: usize, us: [usize; 2], b: usize| {
            let mut terms = vec![(w, x)];
            for (l, &(_, h)) in children.iter().enumerate() {
                terms.push((us[l], h));
            }
            tape.affine(&terms, Some(b))
        };
        let zi = gate(tape, W_I, U_I, B_I)?;
        let zo = gate(tape, W_O, U_O, B_O)?;
        let zu = gate(tape, W_U, U_U, B_U)?;
        let i = tape.sigmoid(zi)?;
        let u = tape.tanh(zu)?;
        let mut parts = vec![tape.mul(i, u)?];
        for (k, &(ck, _)) in children.iter().enumerate() {
            let zf = gate(tape, W_F, U_F[k], B_F)?;
            let f = tape.sigmoid(zf)?;
            parts.push(tape.mul(f, ck)?);
        }
        let c = if parts.len() == 1 { parts[0] } else { tape.sum(&parts)? };
        let o = tape.sigmoid(zo)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((c, h))
    }

    /// Records both heads for a pair; returns (distance, logits).
    pub fn record_pair(
        &self,
        tape: &mut Tape<'_>,
        e1: &Expr,
        e2: &Expr,
    ) -> Result<(VarId, VarId), NumericsError> {
        let a = self.embed_on_tape(tape, e1)?;
        let b = self.embed_on_tape(tape, e2)?;
        let dist = tape.manhattan(a, b)?;
        let mut v = tape.concat(a, b)?;
        let layers = self.dense_layers();
        for k in 0..layers {
            let z = tape.affine(&[(DENSE_START + 2 * k, v)], Some(DENSE_START + 2 * k + 1))?;
            v = if k + 1 < layers { tape.relu(z)? } else { z };
        }
        Ok((dist, v))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let f = std::fs::File::open(path)?;
        Model::read_from(io::BufReader::new(f))
    }

    /// Text format: a header with the dimensions, then each tensor as a
    /// `tensor <name> <dims..>` line followed by one line per row. Values are
    /// printed in shortest round-trip form.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let c = &self.config;
        writeln!(w, "{FORMAT_MAGIC} {FORMAT_VERSION}")?;
        writeln!(w, "input_dim {}", c.input_dim)?;
        writeln!(w, "branching {}", c.branching)?;
        writeln!(w, "memory_dim {}", c.memory_dim)?;
        let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(w, "hidden {}", hidden.join(" "))?;
        writeln!(w, "classes {}", c.classes)?;
        let mut line = String::new();
        for ((name, shape), t) in c.layout().iter().zip(&self.params) {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {name} {}", dims.join(" "))?;
            let row_len = if shape.len() > 1 { shape[1] } else { shape[0] };
            for row in t.data().chunks(row_len) {
                line.clear();
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        line.push(' ');
                    }
                    let _ = write!(line, "{v:?}");
                }
                writeln!(w, "{line}")?;
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Model, ModelError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, ModelError> {
            match lines.next() {
                Some(l) => Ok(l?),
                None => Err(ModelError::Format(format!("truncated file: expected {what}"))),
            }
        };
        let fmt = |m: String| ModelError::Format(m);

        let magic = next("header")?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(FORMAT_MAGIC) {
            return Err(fmt("missing format header".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt("bad format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(ModelError::VersionMismatch { found: version });
        }

        let mut field = |key: &str| -> Result<Vec<usize>, ModelError> {
            let line = next(key)?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(fmt(format!("expected `{key}` line, found `{line}`")));
            }
            it.map(|v| v.parse().map_err(|_| fmt(format!("bad value in `{line}`"))))
                .collect()
        };
        let single = |v: Vec<usize>, key: &str| -> Result<usize, ModelError> {
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(fmt(format!("`{key}` takes one value"))),
            }
        };
        let config = ModelConfig {
            input_dim: single(field("input_dim")?, "input_dim")?,
            branching: single(field("branching")?, "branching")?,
            memory_dim: single(field("memory_dim")?, "memory_dim")?,
            hidden: field("hidden")?,
            classes: single(field("classes")?, "classes")?,
        };
        config.validate()?;

        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let head = next("tensor header")?;
            let mut it = head.split_whitespace();
            if it.next() != Some("tensor") || it.next() != Some(name.as_str()) {
                return Err(fmt(format!("expected tensor `{name}`, found `{head}`")));
            }
            let dims: Vec<usize> = it
                .map(|d| d.parse().map_err(|_| fmt(format!("bad dims in `{head}`"))))
                .collect::<Result<_, _>>()?;
            if dims != shape {
                return Err(fmt(format!(
                    "tensor `{name}` has dims {dims:?}, header implies {shape:?}"
                )));
            }
            let rows = shape[0];
            let cols = if shape.len() > 1 { shape[1] } else { rows };
            let n_lines = if shape.len() > 1 { rows } else { 1 };
            let mut data = Vec::with_capacity(rows * cols.max(1));
            for _ in 0..n_lines {
                let line = next("tensor row")?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| fmt(format!("bad number `{v}` in `{name}`"))))
                    .collect::<Result<_, _>>()?;
                if row.len() != cols {
                    return Err(fmt(format!("row of `{name}` has {} values, expected {cols}", row.len())));
                }
                data.extend(row);
            }
            let t = Tensor::from_vec(&shape, data)?;
            if !t.is_finite() {
                return Err(fmt(format!("tensor `{name}` holds non-finite values")));
            }
            params.push(t);
        }
        match next("end marker")?.trim() {
            "end" => {}
            other => return Err(fmt(format!("expected `end`, found `{other}`"))),
        }
        Ok(Model { config, params })
    }
}

/// Both model outputs for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distance: f64,
    pub logits: Vec<f64>,
}

/// Transformations sorted by decreasing logit; ties keep canonical order.
pub fn likelihood_order(logits: &[f64]) -> [Transformation; TRANSFORMATION_COUNT] {
    let mut order = Transformation::ALL;
    order.sort_by(|a, b| logits[b.index()].total_cmp(&logits[a.index()]));
    order
}

/// Lockstep emulation of the recursive network over post-order encodings.
///
/// Each lane keeps a value stack of node states and a pointer stack into it.
/// Sequences shorter than the longest are padded at the front with inert
/// steps, so every lane finishes on the same step.
pub struct BatchExecutor<'m> {
    model: &'m Model,
    lanes: Vec<Lane>,
    steps: usize,
    t: usize,
}

struct Lane {
    seq: PostOrderSeq,
    padding: usize,
    values: Vec<NodeState>,
    pointers: Vec<usize>,
}

impl<'m> BatchExecutor<'m> {
    pub fn new(model: &'m Model, exprs: &[Expr]) -> Self {
        let seqs: Vec<PostOrderSeq> = exprs.iter().map(Expr::encode_postorder).collect();
        let steps = seqs.iter().map(PostOrderSeq::len).max().unwrap_or(0);
        let lanes = seqs
            .into_iter()
            .map(|seq| Lane {
                padding: steps - seq.len(),
                values: Vec::with_capacity(seq.len()),
                pointers: Vec::new(),
                seq,
            })
            .collect();
        BatchExecutor {
            model,
            lanes,
            steps,
            t: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps
    }

    /// Processes one post-order position in every lane. Returns false once
    /// all steps are done.
    pub fn step(&mut self) -> bool {
        if self.t >= self.steps {
            return false;
        }
        let t = self.t;
        let model = self.model;
        self.lanes.par_iter_mut().with_min_len(16).for_each(|lane| {
            if t < lane.padding {
                return;
            }
            let k = t - lane.padding;
            let sym: Symbol = lane.seq.values[k];
            let arity = lane.seq.arities[k] as usize;
            let top = lane.pointers.len() - arity;
            let state = {
                let children: Vec<&NodeState> =
                    lane.pointers[top..].iter().map(|&p| &lane.values[p]).collect();
                model.unit(&sym.one_hot(), &children)
            };
            lane.values.push(state);
            lane.pointers.truncate(top);
            lane.pointers.push(lane.values.len() - 1);
        });
        self.t += 1;
        self.t < self.steps
    }

    /// The value stack of `lane`.
    pub fn value_stack(&self, lane: usize) -> &[NodeState] {
        &self.lanes[lane].values
    }

    /// The pointer stack of `lane`, indexing into its value stack.
    pub fn pointer_stack(&self, lane: usize) -> &[usize] {
        &self.lanes[lane].pointers
    }

    /// Root hidden state of every lane.
    pub fn finish(mut self) -> Vec<Vec<f64>> {
        while self.step() {}
        self.lanes
            .into_iter()
            .map(|lane| {
                let root = lane.pointers[0];
                lane.values.into_iter().nth(root).unwrap().h
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{gen_random_expr, parse};
    use crate::numerics::softmax;

    fn small_model(m: usize, seed: u64) -> Model {
        let mut cfg = ModelConfig::new(m);
        cfg.hidden = vec![5, 4];
        Model::init(cfg, seed).unwrap()
    }

    // Straight-line transcription of the six unit equations, N = 2.
    fn reference_unit(model: &Model, x: &[f64], kids: [(&[f64], &[f64]); 2]) -> (Vec<f64>, Vec<f64>) {
        let p = model.params();
        let m = model.config().memory_dim;
        let mv = |t: &Tensor, v: &[f64], r: usize| -> f64 {
            (0..v.len()).map(|j| t.data()[r * v.len() + j] * v[j]).sum()
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut c = vec![0.0; m];
        let mut h = vec![0.0; m];
        for r in 0..m {
            let (h1, h2) = (kids[0].1, kids[1].1);
            let i = sig(mv(&p[W_I], x, r) + mv(&p[U_I[0]], h1, r) + mv(&p[U_I[1]], h2, r) + p[B_I].data()[r]);
            let o = sig(mv(&p[W_O], x, r) + mv(&p[U_O[0]], h1, r) + mv(&p[U_O[1]], h2, r) + p[B_O].data()[r]);
            let u = (mv(&p[W_U], x, r) + mv(&p[U_U[0]], h1, r) + mv(&p[U_U[1]], h2, r) + p[B_U].data()[r]).tanh();
            let f1 = sig(mv(&p[W_F], x, r) + mv(&p[U_F[0][0]], h1, r) + mv(&p[U_F[0][1]], h2, r) + p[B_F].data()[r]);
            let f2 = sig(mv(&p[W_F], x, r) + mv(&p[U_F[1][0]], h1, r) + mv(&p[U_F[1][1]], h2, r) + p[B_F].data()[r]);
            c[r] = i * u + f1 * kids[0].0[r] + f2 * kids[1].0[r];
            h[r] = o * c[r].tanh();
        }
        (c, h)
    }

    fn randomize_biases(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
        }
    }

    #[test]
    fn zero_params_give_zero_hidden_state() {
        let model = Model::zeros(ModelConfig::new(4)).unwrap();
        let leaf = model.tree_lstm_unit(&Symbol::A.one_hot(), &[]).unwrap();
        assert_eq!(leaf.h, vec![0.0; 4]);
        assert_eq!(leaf.c, vec![0.0; 4]);

        let k1 = NodeState { c: vec![1.0, -2.0, 0.5, 4.0], h: vec![0.3; 4] };
        let k2 = NodeState { c: vec![2.0, 2.0, -1.0, 0.0], h: vec![-0.7; 4] };
        let s = model.tree_lstm_unit(&Symbol::Add.one_hot(), &[&k1, &k2]).unwrap();
        assert_eq!(s.c, vec![1.5, 0.0, -0.25, 2.0]);

        let e = gen_random_expr(3..=5, 4).unwrap();
        assert_eq!(model.embed(&e), vec![0.0; 4]);
    }

    #[test]
    fn unit_matches_reference_transcription() {
        let mut model = small_model(3, 17);
        randomize_biases(&mut model, 3);
        let x = Symbol::Mul.one_hot();
        let k1 = NodeState { c: vec![0.4, -1.1, 0.2], h: vec![0.1, 0.5, -0.3] };
        let k2 = NodeState { c: vec![-0.6, 0.9, 1.3], h: vec![-0.2, 0.05, 0.45] };
        let got = model.tree_lstm_unit(&x, &[&k1, &k2]).unwrap();
        let (c, h) = reference_unit(&model, &x, [(&k1.c, &k1.h), (&k2.c, &k2.h)]);
        for r in 0..3 {
            assert!((got.c[r] - c[r]).abs() < 1e-14);
            assert!((got.h[r] - h[r]).abs() < 1e-14);
        }
        // one child: slot 2 is a zero state
        let got = model.tree_lstm_unit(&Symbol::Focus.one_hot(), &[&k1]).unwrap();
        let z = [0.0; 3];
        let (c, h) = reference_unit(&model, &Symbol::Focus.one_hot(), [(&k1.c, &k1.h), (&z, &z)]);
        for r in 0..3 {
            assert!((got.c[r] - c[r]).abs() < 1e-14);
            assert!((got.h[r] - h[r]).abs() < 1e-14);
        }
        assert!(model.tree_lstm_unit(&[1.0; 3], &[]).is_err());
        assert!(model.tree_lstm_unit(&x, &[&k1, &k1, &k1]).is_err());
    }

    #[test]
    fn executor_stack_trace() {
        let model = small_model(4, 1);
        let e = parse("(* a (F (+ b c)))").unwrap();
        let short = parse("(F a)").unwrap();
        let batch = [short, e.clone()];
        let mut exec = BatchExecutor::new(&model, &batch);
        assert_eq!(exec.total_steps(), 6);
        for _ in 0..3 {
            exec.step();
        }
        // a, b, c computed; '+' is next
        let ptr = exec.pointer_stack(1).to_vec();
        assert_eq!(ptr, vec![0, 1, 2]);
        let vals = exec.value_stack(1);
        let leaf = |s: Symbol| model.tree_lstm_unit(&s.one_hot(), &[]).unwrap();
        assert_eq!(vals[ptr[1]], leaf(Symbol::B));
        assert_eq!(vals[ptr[2]], leaf(Symbol::C));
        exec.step();
        assert_eq!(exec.pointer_stack(1), &[0, 3]);
        let plus = model
            .tree_lstm_unit(&Symbol::Add.one_hot(), &[&leaf(Symbol::B), &leaf(Symbol::C)])
            .unwrap();
        assert_eq!(exec.value_stack(1)[3], plus);
        // the short lane is still inside its front padding
        assert!(exec.pointer_stack(0).is_empty());
        exec.step();
        assert_eq!(exec.pointer_stack(0), &[0]);
        let out = exec.finish();
        assert_eq!(out[1], model.embed(&e));
    }

    #[test]
    fn batch_matches_serial_and_ignores_padding() {
        let mut model = small_model(6, 9);
        randomize_biases(&mut model, 9);
        let exprs: Vec<Expr> = (0..40).map(|s| gen_random_expr(1..=6, s).unwrap()).collect();
        let batch = model.batch_embed(&exprs);
        for (e, b) in exprs.iter().zip(&batch) {
            assert_eq!(&model.embed(e), b);
        }
        let mut padded = exprs.clone();
        padded.push(gen_random_expr(9..=9, 1).unwrap());
        let again = model.batch_embed(&padded);
        assert_eq!(&again[..40], &batch[..]);
        assert_eq!(model.batch_embed(&exprs[..1])[0], model.embed(&exprs[0]));
    }

    #[test]
    fn zero_model_predicts_uniform_transformations() {
        let model = Model::zeros(ModelConfig::new(4)).unwrap();
        let a = parse("(F (+ a b))").unwrap();
        let b = parse("(F (* b a))").unwrap();
        let logits = model.predict_first_transformation(&a, &b);
        assert_eq!(logits, vec![0.0; 8]);
        assert!(softmax(&logits).iter().all(|p| (p - 0.125).abs() < 1e-15));
        assert_eq!(likelihood_order(&logits), Transformation::ALL);
    }

    #[test]
    fn distance_head_is_a_pseudometric() {
        let model = small_model(5, 2);
        let es: Vec<Expr> = (0..6).map(|s| gen_random_expr(2..=4, s).unwrap()).collect();
        for x in &es {
            assert_eq!(model.predict_distance(x, x), 0.0);
            for y in &es {
                let dxy = model.predict_distance(x, y);
                assert!(dxy >= 0.0);
                assert_eq!(dxy, model.predict_distance(y, x));
                for z in &es {
                    assert!(model.predict_distance(x, z) <= dxy + model.predict_distance(y, z) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shared_weights_move_both_embeddings() {
        let mut model = small_model(4, 5);
        let a = parse("(F (+ a b))").unwrap();
        let b = parse("(* c (F a))").unwrap();
        let (ea, eb) = (model.embed(&a), model.embed(&b));
        model.params_mut()[W_I].data_mut()[0] += 0.5;
        model.params_mut()[W_U].data_mut()[3] += 0.5;
        assert_ne!(model.embed(&a), ea);
        assert_ne!(model.embed(&b), eb);
    }

    #[test]
    fn tape_forward_matches_inference() {
        let mut model = small_model(5, 8);
        randomize_biases(&mut model, 8);
        for s in 0..20 {
            let a = gen_random_expr(2..=5, s).unwrap();
            let b = gen_random_expr(2..=5, 100 + s).unwrap();
            let mut tape = Tape::new(model.params());
            let (d, logits) = model.record_pair(&mut tape, &a, &b).unwrap();
            let pred = model.predict(&a, &b);
            assert_eq!(tape.scalar(d), pred.distance);
            assert_eq!(tape.value(logits), &pred.logits[..]);
        }
    }

    #[test]
    fn likelihood_order_breaks_ties_canonically() {
        let logits = [0.0, 2.0, 0.0, -1.0, 2.0, 0.5, 0.0, 0.0];
        use Transformation::*;
        assert_eq!(
            likelihood_order(&logits),
            [AssocToRight, Factor, FocusUp, Commute, AssocToLeft, FocusLeft, FocusRight, Distribute]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let mut model = small_model(4, 12);
        randomize_biases(&mut model, 12);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = Model::read_from(&buf[..]).unwrap();
        assert_eq!(back, model);
        let a = gen_random_expr(3..=4, 1).unwrap();
        let b = gen_random_expr(3..=4, 2).unwrap();
        assert_eq!(back.predict(&a, &b), model.predict(&a, &b));
    }

    #[test]
    fn load_rejects_bad_files() {
        let model = small_model(3, 1);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let truncated = &text[..text.len() / 2];
        assert!(matches!(Model::read_from(truncated.as_bytes()), Err(ModelError::Format(_))));
        let no_end = text.trim_end().trim_end_matches("end");
        assert!(matches!(Model::read_from(no_end.as_bytes()), Err(ModelError::Format(_))));

        let wrong_dims = text.replacen("memory_dim 3", "memory_dim 4", 1);
        assert!(matches!(Model::read_from(wrong_dims.as_bytes()), Err(ModelError::Format(_))));
        let wrong_hidden = text.replacen("hidden 5 4", "hidden 5 3", 1);
        assert!(matches!(Model::read_from(wrong_hidden.as_bytes()), Err(ModelError::Format(_))));
        let wrong_input = text.replacen("input_dim 6", "input_dim 7", 1);
        assert!(matches!(Model::read_from(wrong_input.as_bytes()), Err(ModelError::Format(_))));

        let v2 = text.replacen("eqprove-model 1", "eqprove-model 2", 1);
        assert!(matches!(
            Model::read_from(v2.as_bytes()),
            Err(ModelError::VersionMismatch { found: 2 })
        ));
    }
}
