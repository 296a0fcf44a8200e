use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by [`Tape::bce_soft`] to keep `log` finite.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Normalized over the last axis.
    Softmax,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Softmax => softmax_rows(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let width = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[m×n] + b[n]` broadcast over rows.
    AddBias(Var, Var),
    /// `x[m×n] * c[m×1]` broadcast over columns.
    MulColumn(Var, Var),
    Scale(Var, f64),
    Act(Activation, Var),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    BceSoft(Var, Var),
    Mse(Var, Var),
    SoftCrossEntropy(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a single reverse sweep visits each node once.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one optional gradient per tape node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Record a differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (m, n) = xv.dims2()?;
        if bv.len() != n {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), out, rg))
    }

    pub fn mul_column(&mut self, x: Var, col: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(col);
        let (m, n) = xv.dims2()?;
        if cv.len() != m {
            return Err(Error::Shape {
                op: "mul_column",
                left: xv.shape().to_vec(),
                right: cv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..m {
            let c = cv.data()[i];
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o *= c;
            }
        }
        let rg = self.rg(&[x, col]);
        Ok(self.push(Op::MulColumn(x, col), out, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), out, rg)
    }

    pub fn act(&mut self, kind: Activation, x: Var) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = kind.apply(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Act(kind, x), out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.act(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.act(Activation::Softmax, x)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), out, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), out, rg)
    }

    /// Mean binary cross-entropy against soft targets in `[0, 1]`.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the clamp has
    /// zero derivative outside that range.
    pub fn bce_soft(&mut self, prob: Var, target: Var) -> Result<Var> {
        let p = self.value(prob);
        let t = self.value(target);
        p.check_same_shape(t, "bce_soft")?;
        let n = p.len().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let rg = self.rg(&[prob, target]);
        Ok(self.push(Op::BceSoft(prob, target), Tensor::scalar(total / n), rg))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.check_same_shape(t, "mse")?;
        let n = p.len().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Op::Mse(pred, target), Tensor::scalar(total / n), rg))
    }

    /// Row-mean of `-Σ target · log_softmax(logits)`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let l = self.value(logits);
        let t = self.value(target);
        l.check_same_shape(t, "soft_cross_entropy")?;
        let width = l.shape().last().copied().unwrap_or(1).max(1);
        let rows = l.len() / width;
        let mut total = 0.0;
        for (lr, tr) in l.data().chunks(width).zip(t.data().chunks(width)) {
            let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total -= lr.iter().zip(tr).map(|(lv, tv)| tv * (lv - lse)).sum::<f64>();
        }
        let rg = self.rg(&[logits, target]);
        Ok(self.push(
            Op::SoftCrossEntropy(logits, target),
            Tensor::scalar(total / rows.max(1) as f64),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(self.value(loss).shape(), 1.0))])
    }

    /// Reverse sweep with explicit output cotangents (vector–Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, seed) in seeds {
            self.value(*v).check_same_shape(seed, "backward seed")?;
            accumulate(&mut grads, &self.nodes, *v, seed.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2()?;
                let (_, n) = val(b).dims2()?;
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g.data(), val(b).data(), &mut da, m, n, k);
                    accumulate(grads, nodes, a, Tensor::new(vec![m, k], da)?);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(val(a).data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, nodes, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, a, g.clone());
                accumulate(grads, nodes, b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, a, g.clone());
                accumulate(grads, nodes, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, nodes, a, g.zip_map(val(b), |x, y| x * y)?);
                }
                if needs(b) {
                    accumulate(grads, nodes, b, g.zip_map(val(a), |x, y| x * y)?);
                }
            }
            Op::AddBias(x, b) => {
                accumulate(grads, nodes, x, g.clone());
                if needs(b) {
                    let (_, n) = g.dims2()?;
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, nodes, b, Tensor::new(val(b).shape().to_vec(), db)?);
                }
            }
            Op::MulColumn(x, c) => {
                let (m, n) = g.dims2()?;
                if needs(x) {
                    let mut dx = g.clone();
                    for i in 0..m {
                        let s = val(c).data()[i];
                        for v in &mut dx.data_mut()[i * n..(i + 1) * n] {
                            *v *= s;
                        }
                    }
                    accumulate(grads, nodes, x, dx);
                }
                if needs(c) {
                    let xd = val(x).data();
                    let dc: Vec<f64> = (0..m)
                        .map(|i| {
                            g.data()[i * n..(i + 1) * n]
                                .iter()
                                .zip(&xd[i * n..(i + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, nodes, c, Tensor::new(val(c).shape().to_vec(), dc)?);
                }
            }
            Op::Scale(x, c) => accumulate(grads, nodes, x, g.scale(c)),
            Op::Act(kind, x) => {
                let y = &node.value;
                let dx = match kind {
                    Activation::Identity => g.clone(),
                    Activation::Relu => g.zip_map(y, |g, y| if y > 0.0 { g } else { 0.0 })?,
                    Activation::Tanh => g.zip_map(y, |g, y| g * (1.0 - y * y))?,
                    Activation::Sigmoid => g.zip_map(y, |g, y| g * y * (1.0 - y))?,
                    Activation::Softmax => {
                        let width = y.shape().last().copied().unwrap_or(1).max(1);
                        let mut dx = g.clone();
                        for (dr, yr) in dx.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                            let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for (d, yv) in dr.iter_mut().zip(yr) {
                                *d = yv * (*d - dot);
                            }
                        }
                        dx
                    }
                };
                accumulate(grads, nodes, x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (m, wa) = val(a).dims2()?;
                let (_, wb) = val(b).dims2()?;
                let w = wa + wb;
                let mut da = Vec::with_capacity(m * wa);
                let mut db = Vec::with_capacity(m * wb);
                for row in g.data().chunks(w) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                accumulate(grads, nodes, a, Tensor::new(vec![m, wa], da)?);
                accumulate(grads, nodes, b, Tensor::new(vec![m, wb], db)?);
            }
            Op::Sum(x) => {
                let s = g.item()?;
                accumulate(grads, nodes, x, Tensor::full(val(x).shape(), s));
            }
            Op::Mean(x) => {
                let s = g.item()? / val(x).len().max(1) as f64;
                accumulate(grads, nodes, x, Tensor::full(val(x).shape(), s));
            }
            Op::BceSoft(p, t) => {
                let s = g.item()? / val(p).len().max(1) as f64;
                if needs(p) {
                    let dp = val(p).zip_map(val(t), |p, t| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            s * (p - t) / (p * (1.0 - p))
                        }
                    })?;
                    accumulate(grads, nodes, p, dp);
                }
                if needs(t) {
                    let dt = val(p).map(|p| {
                        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        s * ((1.0 - pc).ln() - pc.ln())
                    });
                    accumulate(grads, nodes, t, dt);
                }
            }
            Op::Mse(a, b) => {
                let s = 2.0 * g.item()? / val(a).len().max(1) as f64;
                let diff = val(a).sub(val(b))?;
                if needs(a) {
                    accumulate(grads, nodes, a, diff.scale(s));
                }
                if needs(b) {
                    accumulate(grads, nodes, b, diff.scale(-s));
                }
            }
            Op::SoftCrossEntropy(l, t) => {
                let lv = val(l);
                let tv = val(t);
                let width = lv.shape().last().copied().unwrap_or(1).max(1);
                let rows = (lv.len() / width).max(1) as f64;
                let s = g.item()? / rows;
                let sm = softmax_rows(lv);
                if needs(l) {
                    let mut dl = sm.clone();
                    for (dr, tr) in dl.data_mut().chunks_mut(width).zip(tv.data().chunks(width)) {
                        let mass: f64 = tr.iter().sum();
                        for (d, tv) in dr.iter_mut().zip(tr) {
                            *d = s * (*d * mass - tv);
                        }
                    }
                    accumulate(grads, nodes, l, dl);
                }
                if needs(t) {
                    let mut dt = lv.clone();
                    for row in dt.data_mut().chunks_mut(width) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        for v in row.iter_mut() {
                            *v = -s * (*v - lse);
                        }
                    }
                    accumulate(grads, nodes, t, dt);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::row(&[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn activations_basic_values() {
        let x = Tensor::row(&[-1.0, 0.0, 2.0]);
        assert_eq!(Activation::Relu.apply(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Tanh.apply(&Tensor::scalar(0.0)).data(), &[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::randn(&[6, 5], 3.0, &mut rng);
        let s = Activation::Softmax.apply(&r);
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn nan_propagates_through_activations() {
        let x = Tensor::scalar(f64::NAN);
        assert!(Activation::Tanh.apply(&x).data()[0].is_nan());
        assert!(Activation::Sigmoid.apply(&x).data()[0].is_nan());
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(1.0 - BCE_EPS));
        let t = tape.constant(Tensor::scalar(1.0));
        let l = tape.bce_soft(p, t).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        let p = tape.constant(Tensor::scalar(0.5));
        let t = tape.constant(Tensor::scalar(0.5));
        let l = tape.bce_soft(p, t).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let x = tape.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let l = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn bce_is_finite_at_exact_zero_and_one() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::row(&[0.0, 1.0]));
        let t = tape.constant(Tensor::row(&[1.0, 0.0]));
        let l = tape.bce_soft(p, t).unwrap();
        assert!(tape.value(l).item().unwrap().is_finite());
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().is_finite());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.5, -0.5]));
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
