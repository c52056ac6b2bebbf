//! Reverse-mode accumulation over a fixed set of vector primitives.
//!
//! Every node stores its forward value; `backward` walks the recorded
//! applications once in reverse order and applies each primitive's
//! vector-Jacobian product. Nodes that do not depend on a parameter are
//! never visited.

use std::sync::Arc;

use super::{dot, norm, softmax_raw, Matrix, EPS_LOG, EPS_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    MatVec(Arc<Matrix>, Var),
    Dot(Var, Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    Normalize { x: Var, n: f64 },
    Softmax { x: Var, tau: f64 },
    Log(Var),
    Relu(Var),
    /// Output with zero gradient (degenerate norm guard).
    Blocked,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate: usize,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros if `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of degenerate norm guards triggered while recording.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * k).collect();
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    /// Elementwise sum of equal-length nodes. An empty list yields scalar 0.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let Some(first) = parts.first() else {
            return self.constant_scalar(0.0);
        };
        let mut value = self.value(*first).to_vec();
        for p in &parts[1..] {
            debug_assert_eq!(self.value(*p).len(), value.len());
            for (acc, x) in value.iter_mut().zip(self.value(*p)) {
                *acc += x;
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::Sum(parts.to_vec()), tracked)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x)[start..start + len].to_vec();
        let tracked = self.tracked(x);
        self.push(value, Op::Slice { x, start }, tracked)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::Concat(parts.to_vec()), tracked)
    }

    /// `m · x` for a frozen matrix `m`.
    pub fn matvec(&mut self, m: &Arc<Matrix>, x: Var) -> Var {
        let value = m.matvec(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::MatVec(Arc::clone(m), x), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = vec![dot(self.value(a), self.value(b))];
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Dot(a, b), tracked)
    }

    /// Cosine similarity with the same guard as [`super::cosine`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.len(), vb.len());
        let na = norm(va);
        let nb = norm(vb);
        if na <= EPS_NORM || nb <= EPS_NORM {
            self.degenerate += 1;
            return self.push(vec![0.0], Op::Blocked, false);
        }
        let value = vec![(dot(va, vb) / (na * nb + EPS_NORM)).clamp(-1.0, 1.0)];
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Cosine { a, b, na, nb }, tracked)
    }

    /// Unit-normalizes `x`; degenerate input yields a zero vector with no
    /// gradient. Returns the node and the degeneracy flag.
    pub fn normalize(&mut self, x: Var) -> (Var, bool) {
        let vx = self.value(x);
        let n = norm(vx);
        if n <= EPS_NORM {
            let len = vx.len();
            self.degenerate += 1;
            return (self.push(vec![0.0; len], Op::Blocked, false), true);
        }
        let value = vx.iter().map(|v| v / n).collect();
        let tracked = self.tracked(x);
        (self.push(value, Op::Normalize { x, n }, tracked), false)
    }

    pub fn softmax(&mut self, x: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "softmax temperature must be positive");
        let value = softmax_raw(self.value(x), tau);
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax { x, tau }, tracked)
    }

    /// `ln(max(x, ε))`
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.max(EPS_LOG).ln()).collect();
        let tracked = self.tracked(x);
        self.push(value, Op::Log(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    /// `KL(target ‖ p)` assembled from `log` and `dot`; zero-mass target
    /// entries contribute nothing.
    pub fn kl_div(&mut self, target: &[f64], p: Var) -> Var {
        let self_term: f64 = target
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.ln())
            .sum();
        let t = self.constant(target.to_vec());
        let log_p = self.log(p);
        let cross = self.dot(t, log_p);
        let neg_cross = self.scale(cross, -1.0);
        let c = self.constant_scalar(self_term);
        self.add(neg_cross, c)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let lens = self.nodes.iter().map(|node| node.value.len()).collect();
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, lens }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(usize) -> f64| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += contrib(i);
            }
        };
        match &node.op {
            Op::Leaf | Op::Blocked => {}
            Op::Add(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| -g[i]);
            }
            Op::Scale(a, k) => acc(*a, &|i| k * g[i]),
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, &|i| g[i]);
                }
            }
            Op::Slice { x, start } => {
                let (start, len) = (*start, g.len());
                acc(*x, &|i| {
                    if i >= start && i < start + len {
                        g[i - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(*p, &|i| g[offset + i]);
                    offset += len;
                }
            }
            Op::MatVec(m, x) => {
                let gx = m.matvec_transposed(g);
                acc(*x, &|i| gx[i]);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &|i| g[0] * vb[i]);
                acc(*b, &|i| g[0] * va[i]);
            }
            Op::Cosine { a, b, na, nb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let denom = na * nb + EPS_NORM;
                let d = dot(va, vb);
                let k = d / (denom * denom);
                let (na, nb) = (*na, *nb);
                acc(*a, &|i| g[0] * (vb[i] / denom - k * nb * va[i] / na));
                acc(*b, &|i| g[0] * (va[i] / denom - k * na * vb[i] / nb));
            }
            Op::Normalize { x, n } => {
                let y = &node.value;
                let yg = dot(y, g);
                acc(*x, &|i| (g[i] - y[i] * yg) / n);
            }
            Op::Softmax { x, tau } => {
                let y = &node.value;
                let yg = dot(y, g);
                acc(*x, &|i| y[i] * (g[i] - yg) / tau);
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                acc(*x, &|i| if vx[i] > EPS_LOG { g[i] / vx[i] } else { 0.0 });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_start_at_zero_and_untracked_nodes_get_none() {
        let mut t = Tape::new();
        let p = t.param(vec![1.0, 2.0]);
        let c = t.constant(vec![3.0, 4.0]);
        let d = t.dot(p, c);
        let g = t.backward(d);
        assert_eq!(g.wrt(p), vec![3.0, 4.0]);
        assert_eq!(g.wrt(c), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let p = t.param(vec![3.0]);
        let sq = t.dot(p, p);
        let twice = t.add(sq, sq);
        let g = t.backward(twice);
        assert_eq!(g.wrt(p), vec![12.0]);
    }

    #[test]
    fn degenerate_normalize_blocks_gradient() {
        let mut t = Tape::new();
        let p = t.param(vec![0.0, 0.0]);
        let (n, flagged) = t.normalize(p);
        assert!(flagged);
        assert_eq!(t.value(n), &[0.0, 0.0]);
        let c = t.constant(vec![1.0, 1.0]);
        let d = t.dot(n, c);
        assert_eq!(t.backward(d).wrt(p), vec![0.0, 0.0]);
        assert_eq!(t.degenerate_count(), 1);
    }

    #[test]
    fn kl_div_matches_kernel() {
        let mut t = Tape::new();
        let p = t.constant(vec![0.9, 0.1]);
        let kl = t.kl_div(&[0.5, 0.5], p);
        assert!((t.scalar(kl) - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
    }
}
