//! Minimal reverse-mode autodiff over small `f64` vectors.
//!
//! Every forward pass builds a fresh [`Tape`]: nodes hold their value, their
//! gradient buffer, and the op that produced them, so one backward sweep in
//! reverse construction order yields exact derivatives of a scalar output
//! with respect to every leaf. The op set is exactly what the attention
//! model needs — dense mat-vec, attention mixing, softmax, cosine — plus
//! fused, numerically stable loss heads (`KL vs softmax logits`, `BCE with
//! logits`) whose backward rules are the textbook `p - q` forms.
//!
//! Shapes are checked with assertions: a shape mismatch is a bug in the
//! calling model code, not a runtime condition to recover from.

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Epsilon inside the cosine norms so zero vectors cannot divide by zero.
/// Forward and backward use the same stabilized function, so gradient
/// checks remain exact.
const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    ScaleConst(NodeId, f64),
    ScaleByScalar { v: NodeId, s: NodeId },
    MatVec { m: NodeId, x: NodeId, rows: usize, cols: usize },
    Dot(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Gather(Vec<NodeId>),
    Attend { weights: NodeId, values: Vec<NodeId> },
    Softmax(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Mean(NodeId),
    Cosine(NodeId, NodeId),
    KlVsSoftmax { target: Vec<f64>, logits: NodeId },
    BceWithLogits { labels: Vec<f64>, logits: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Growable computation graph; dropped after each forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { value, grad, op });
        self.nodes.len() - 1
    }

    /// Input node (parameters or constants).
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].value.len(), 1, "node {id} is not a scalar");
        self.nodes[id].value[0]
    }

    /// Gradient accumulated in the last [`Tape::backward`] call.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    /// Number of nodes (diagnostics).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no node has been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `a + b`, elementwise.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = zip_same(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// `a - b`, elementwise.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = zip_same(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// `a * b`, elementwise (Hadamard product).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = zip_same(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + c` for a fixed vector `c` (no gradient into `c`).
    pub fn add_const(&mut self, a: NodeId, c: &[f64]) -> NodeId {
        let v: Vec<f64> = zip_same(self.value(a), c, |x, y| x + y);
        self.push(v, Op::AddConst(a))
    }

    /// `a * c` for a fixed scalar `c`.
    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.push(v, Op::ScaleConst(a, c))
    }

    /// Vector `v` times 1-element node `s`.
    pub fn scale_by_scalar(&mut self, v: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1, "scale factor must be scalar");
        let sv = self.nodes[s].value[0];
        let out: Vec<f64> = self.value(v).iter().map(|x| x * sv).collect();
        self.push(out, Op::ScaleByScalar { v, s })
    }

    /// `M x` for a row-major `rows x cols` matrix node and a `cols` vector.
    pub fn matvec(&mut self, m: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.nodes[m].value.len(), rows * cols, "matrix shape");
        assert_eq!(self.nodes[x].value.len(), cols, "vector shape");
        let mv = &self.nodes[m].value;
        let xv = &self.nodes[x].value;
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &mv[i * cols..(i + 1) * cols];
            out[i] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { m, x, rows, cols })
    }

    /// Inner product, yielding a 1-element node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_same(self.value(a), self.value(b), |x, y| x * y)
            .iter()
            .sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    /// Concatenation `[a; b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    /// Collects 1-element nodes into one vector node.
    pub fn gather(&mut self, parts: &[NodeId]) -> NodeId {
        let v: Vec<f64> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.nodes[p].value.len(), 1, "gather expects scalars");
                self.nodes[p].value[0]
            })
            .collect();
        self.push(v, Op::Gather(parts.to_vec()))
    }

    /// Attention mix `sum_i w_i v_i` over equally sized value vectors.
    pub fn attend(&mut self, weights: NodeId, values: &[NodeId]) -> NodeId {
        assert_eq!(self.nodes[weights].value.len(), values.len(), "1 weight per value");
        assert!(!values.is_empty(), "attend needs at least one value");
        let d = self.nodes[values[0]].value.len();
        let mut out = vec![0.0; d];
        for (i, &vid) in values.iter().enumerate() {
            let w = self.nodes[weights].value[i];
            for (o, x) in out.iter_mut().zip(&self.nodes[vid].value) {
                *o += w * x;
            }
        }
        self.push(
            out,
            Op::Attend {
                weights,
                values: values.to_vec(),
            },
        )
    }

    /// Numerically stable softmax.
    pub fn softmax(&mut self, z: NodeId) -> NodeId {
        let v = softmax_vec(self.value(z));
        self.push(v, Op::Softmax(z))
    }

    /// Elementwise `tanh`.
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(x).iter().map(|a| a.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(x).iter().map(|a| sigmoid(*a)).collect();
        self.push(v, Op::Sigmoid(x))
    }

    /// Mean of the entries, yielding a 1-element node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let v = xs.iter().sum::<f64>() / xs.len() as f64;
        self.push(vec![v], Op::Mean(x))
    }

    /// Cosine similarity with epsilon-stabilized norms, yielding a 1-element
    /// node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "cosine shape");
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let na2 = av.iter().map(|x| x * x).sum::<f64>() + COS_EPS;
        let nb2 = bv.iter().map(|x| x * x).sum::<f64>() + COS_EPS;
        let v = dot / (na2 * nb2).sqrt();
        self.push(vec![v], Op::Cosine(a, b))
    }

    /// `KL(target || softmax(logits))` with the `0 ln 0 = 0` convention,
    /// yielding a 1-element node. `target` must be a probability vector.
    pub fn kl_vs_softmax(&mut self, target: &[f64], logits: NodeId) -> NodeId {
        let z = self.value(logits);
        assert_eq!(target.len(), z.len(), "kl shape");
        let lse = log_sum_exp(z);
        let mut v = 0.0;
        for (&q, &zi) in target.iter().zip(z) {
            if q > 0.0 {
                v += q * (q.ln() - zi + lse);
            }
        }
        self.push(
            vec![v],
            Op::KlVsSoftmax {
                target: target.to_vec(),
                logits,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against labels,
    /// computed in the stable `softplus(z) - y z` form, yielding a
    /// 1-element node.
    pub fn bce_with_logits(&mut self, labels: &[f64], logits: NodeId) -> NodeId {
        let z = self.value(logits);
        assert_eq!(labels.len(), z.len(), "bce shape");
        let n = z.len() as f64;
        let v = labels
            .iter()
            .zip(z)
            .map(|(&y, &zi)| softplus(zi) - y * zi)
            .sum::<f64>()
            / n;
        self.push(
            vec![v],
            Op::BceWithLogits {
                labels: labels.to_vec(),
                logits,
            },
        )
    }

    /// Runs one reverse sweep from the scalar node `loss`, accumulating
    /// gradients into every node (read them with [`Tape::grad`]).
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;
        for id in (0..=loss).rev() {
            // Detach the output gradient to appease the borrow checker; it
            // is re-read, never written, below.
            let g = std::mem::take(&mut self.nodes[id].grad);
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut self.nodes[a].grad, &g, 1.0);
                    add_into(&mut self.nodes[b].grad, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut self.nodes[a].grad, &g, 1.0);
                    add_into(&mut self.nodes[b].grad, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b].value.clone();
                    for (j, (ga, &gj)) in self.nodes[a].grad.iter_mut().zip(&g).enumerate() {
                        *ga += gj * bv[j];
                    }
                    let av = self.nodes[a].value.clone();
                    for (j, (gb, &gj)) in self.nodes[b].grad.iter_mut().zip(&g).enumerate() {
                        *gb += gj * av[j];
                    }
                }
                Op::AddConst(a) => add_into(&mut self.nodes[a].grad, &g, 1.0),
                Op::ScaleConst(a, c) => add_into(&mut self.nodes[a].grad, &g, c),
                Op::ScaleByScalar { v, s } => {
                    let sv = self.nodes[s].value[0];
                    add_into(&mut self.nodes[v].grad, &g, sv);
                    let vv = &self.nodes[v].value;
                    self.nodes[s].grad[0] += g.iter().zip(vv).map(|(gi, vi)| gi * vi).sum::<f64>();
                }
                Op::MatVec { m, x, rows, cols } => {
                    let xv = self.nodes[x].value.clone();
                    let mv = self.nodes[m].value.clone();
                    for i in 0..rows {
                        let gi = g[i];
                        let mg = &mut self.nodes[m].grad[i * cols..(i + 1) * cols];
                        for (j, mgj) in mg.iter_mut().enumerate() {
                            *mgj += gi * xv[j];
                        }
                    }
                    for j in 0..cols {
                        let mut acc = 0.0;
                        for i in 0..rows {
                            acc += g[i] * mv[i * cols + j];
                        }
                        self.nodes[x].grad[j] += acc;
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let bv = self.nodes[b].value.clone();
                    add_into(&mut self.nodes[a].grad, &bv, g0);
                    let av = self.nodes[a].value.clone();
                    add_into(&mut self.nodes[b].grad, &av, g0);
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a].value.len();
                    add_into(&mut self.nodes[a].grad, &g[..na], 1.0);
                    add_into(&mut self.nodes[b].grad, &g[na..], 1.0);
                }
                Op::Gather(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        self.nodes[*p].grad[0] += g[i];
                    }
                }
                Op::Attend { weights, values } => {
                    for (i, &vid) in values.iter().enumerate() {
                        let w = self.nodes[weights].value[i];
                        let dv = self.nodes[vid]
                            .value
                            .iter()
                            .zip(&g)
                            .map(|(v, gi)| v * gi)
                            .sum::<f64>();
                        self.nodes[weights].grad[i] += dv;
                        add_into(&mut self.nodes[vid].grad, &g, w);
                    }
                }
                Op::Softmax(z) => {
                    let y = self.nodes[id].value.clone();
                    let inner: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    for (j, (gj, yj)) in g.iter().zip(&y).enumerate() {
                        self.nodes[z].grad[j] += yj * (gj - inner);
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[id].value.clone();
                    for (j, (gj, yj)) in g.iter().zip(&y).enumerate() {
                        self.nodes[x].grad[j] += gj * (1.0 - yj * yj);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[id].value.clone();
                    for (j, (gj, yj)) in g.iter().zip(&y).enumerate() {
                        self.nodes[x].grad[j] += gj * yj * (1.0 - yj);
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[x].value.len() as f64;
                    let gi = g[0] / n;
                    for gx in &mut self.nodes[x].grad {
                        *gx += gi;
                    }
                }
                Op::Cosine(a, b) => {
                    let g0 = g[0];
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let na2 = av.iter().map(|x| x * x).sum::<f64>() + COS_EPS;
                    let nb2 = bv.iter().map(|x| x * x).sum::<f64>() + COS_EPS;
                    let denom = (na2 * nb2).sqrt();
                    let c = self.nodes[id].value[0];
                    for j in 0..av.len() {
                        self.nodes[a].grad[j] += g0 * (bv[j] / denom - c * av[j] / na2);
                        self.nodes[b].grad[j] += g0 * (av[j] / denom - c * bv[j] / nb2);
                    }
                }
                Op::KlVsSoftmax { target, logits } => {
                    let g0 = g[0];
                    let p = softmax_vec(&self.nodes[logits].value);
                    for (j, (pj, qj)) in p.iter().zip(&target).enumerate() {
                        self.nodes[logits].grad[j] += g0 * (pj - qj);
                    }
                }
                Op::BceWithLogits { labels, logits } => {
                    let g0 = g[0];
                    let n = labels.len() as f64;
                    let zv = self.nodes[logits].value.clone();
                    for (j, (&y, &z)) in labels.iter().zip(&zv).enumerate() {
                        self.nodes[logits].grad[j] += g0 * (sigmoid(z) - y) / n;
                    }
                }
            }
            self.nodes[id].grad = g;
        }
    }
}

fn zip_same(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "shape mismatch: {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar function of one flat input.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel < tol, "entry {i}: analytic {x} vs fd {y} (rel {rel})");
        }
    }

    /// Composite touching matvec, add_const, tanh, softmax, attend, concat,
    /// cosine, mul, scale_by_scalar, gather, mean and the KL head: if this
    /// matches finite differences for every input, each op's backward rule
    /// is right.
    fn composite(flat: &[f64]) -> f64 {
        let (m, rest) = flat.split_at(6);
        let (x, rest) = rest.split_at(3);
        let (y, s) = rest.split_at(2);
        let mut t = Tape::new();
        let m = t.leaf(m.to_vec());
        let x = t.leaf(x.to_vec());
        let y = t.leaf(y.to_vec());
        let s = t.leaf(s.to_vec());
        let h = t.matvec(m, x, 2, 3); // [2]
        let h = t.add_const(h, &[0.1, -0.2]);
        let th = t.tanh(h);
        let w = t.softmax(h);
        let mix = t.attend(w, &[th, y]); // [2]
        let cat = t.concat(mix, th); // [4]
        let cs = t.cosine(mix, y);
        let d = t.dot(th, y);
        let pr = t.mul(mix, y); // [2]
        let sc = t.scale_by_scalar(pr, cs); // [2]
        let sg = t.sigmoid(sc);
        let mn = t.mean(cat);
        let z = t.gather(&[cs, d, mn]);
        let z = t.scale_by_scalar(z, s);
        let kl = t.kl_vs_softmax(&[0.2, 0.5, 0.3], z);
        let bce = t.bce_with_logits(&[1.0, 0.0], sg);
        let sum = t.add(kl, bce);
        t.scalar(sum)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let flat: Vec<f64> = vec![
            0.3, -0.5, 0.8, 0.2, -0.1, 0.4, // m
            0.7, -0.3, 0.5, // x
            -0.6, 0.9, // y
            1.3, // s
        ];
        let fd = fd_grad(&composite, &flat, 1e-6);

        // Re-run recording node ids so we can read analytic grads.
        let mut t = Tape::new();
        let m = t.leaf(flat[0..6].to_vec());
        let x = t.leaf(flat[6..9].to_vec());
        let y = t.leaf(flat[9..11].to_vec());
        let s = t.leaf(flat[11..12].to_vec());
        let h0 = t.matvec(m, x, 2, 3);
        let h = t.add_const(h0, &[0.1, -0.2]);
        let th = t.tanh(h);
        let w = t.softmax(h);
        let mix = t.attend(w, &[th, y]);
        let cat = t.concat(mix, th);
        let cs = t.cosine(mix, y);
        let d = t.dot(th, y);
        let pr = t.mul(mix, y);
        let sc = t.scale_by_scalar(pr, cs);
        let sg = t.sigmoid(sc);
        let mn = t.mean(cat);
        let z0 = t.gather(&[cs, d, mn]);
        let z = t.scale_by_scalar(z0, s);
        let kl = t.kl_vs_softmax(&[0.2, 0.5, 0.3], z);
        let bce = t.bce_with_logits(&[1.0, 0.0], sg);
        let sum = t.add(kl, bce);
        t.backward(sum);

        let analytic: Vec<f64> = [m, x, y, s]
            .iter()
            .flat_map(|&id| t.grad(id).to_vec())
            .collect();
        assert_close(&analytic, &fd, 1e-6);
    }

    #[test]
    fn kl_head_matches_hand_values() {
        // KL((1,0) || (0.5,0.5)) = ln 2; logits (0,0) give the uniform.
        let mut t = Tape::new();
        let z = t.leaf(vec![0.0, 0.0]);
        let kl = t.kl_vs_softmax(&[1.0, 0.0], z);
        assert!((t.scalar(kl) - std::f64::consts::LN_2).abs() < 1e-15);
        t.backward(kl);
        // d/dz = p - q = (0.5 - 1, 0.5 - 0).
        assert!((t.grad(z)[0] + 0.5).abs() < 1e-15);
        assert!((t.grad(z)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bce_head_matches_hand_values() {
        // p = sigmoid(0) = 0.5 against either label costs ln 2.
        let mut t = Tape::new();
        let z = t.leaf(vec![0.0, 0.0]);
        let bce = t.bce_with_logits(&[1.0, 0.0], z);
        assert!((t.scalar(bce) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sub_and_scale_backward() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let b = t.leaf(vec![0.5, -0.5]);
        let d = t.sub(a, b);
        let d = t.scale_const(d, 3.0);
        let loss = t.mean(d);
        t.backward(loss);
        assert_eq!(t.grad(a), &[1.5, 1.5]);
        assert_eq!(t.grad(b), &[-1.5, -1.5]);
    }

    #[test]
    fn gradients_accumulate_across_shared_nodes() {
        // x used twice: d(x.x)/dx = 2x.
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, -2.0]);
        let d = t.dot(x, x);
        t.backward(d);
        assert_eq!(t.grad(x), &[6.0, -4.0]);
    }

    #[test]
    fn attend_of_point_mass_selects_value() {
        let mut t = Tape::new();
        let w = t.leaf(vec![0.0, 1.0]);
        let v0 = t.leaf(vec![1.0, 1.0]);
        let v1 = t.leaf(vec![5.0, -7.0]);
        let out = t.attend(w, &[v0, v1]);
        assert_eq!(t.value(out), &[5.0, -7.0]);
    }
}
