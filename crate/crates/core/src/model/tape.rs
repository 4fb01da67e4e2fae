//! Reverse-mode automatic differentiation over a linear tape of matrix ops.
//!
//! A tape is built fresh for every forward pass of a single instance. Parameter
//! leaves are registered through [`Tape::param`], which caches one leaf per
//! parameter so gradients accumulate in one place.

use super::tensor::{dot, matmul, matmul_at, matmul_bt, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Concat { top: Var, bottom: Var },
    Add { a: Var, b: Var },
    /// A constant was added; the gradient passes straight through.
    Shift { a: Var },
    Scale { a: Var, s: f64 },
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gelu { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new(num_params: usize) -> Self {
        Self { nodes: Vec::with_capacity(256), params: vec![None; num_params] }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params[id] = Some(v);
        v
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Var {
        let (t, b) = (self.value(top), self.value(bottom));
        assert_eq!(t.cols, b.cols);
        let mut data = t.data.clone();
        data.extend_from_slice(&b.data);
        let m = Matrix::from_vec(t.rows + b.rows, t.cols, data);
        self.push(m, Op::Concat { top, bottom })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        self.push(m, Op::Add { a, b })
    }

    pub fn shift(&mut self, a: Var, c: &Matrix) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(c);
        self.push(m, Op::Shift { a })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut m = self.value(a).clone();
        m.scale(s);
        self.push(m, Op::Scale { a, s })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut m = self.value(x).clone();
        let b = self.value(bias);
        for r in 0..m.rows {
            for (v, bv) in m.row_mut(r).iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        self.push(m, Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = matmul(self.value(a), self.value(b));
        self.push(m, Op::MatMul { a, b })
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let m = matmul_bt(self.value(a), self.value(b));
        self.push(m, Op::MatMulBt { a, b })
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols as f64;
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * inv;
                xhat.data[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut m = self.value(x).clone();
        for v in m.data.iter_mut() {
            let u = *v;
            *v = 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh());
        }
        self.push(m, Op::Gelu { x })
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `[n × d]`, keys and values `[m × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(qv.rows, kv.rows);
            for i in 0..qv.rows {
                let qi = &qv.row(i)[off..off + dh];
                let limit = if causal { (i + 1).min(kv.rows) } else { kv.rows };
                let row = p.row_mut(i);
                for j in 0..limit {
                    row[j] = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                }
                softmax_in_place(&mut row[..limit]);
                for r in row[limit..].iter_mut() {
                    *r = 0.0;
                }
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for (j, &pij) in row[..limit].iter().enumerate() {
                    for (o, &vj) in orow.iter_mut().zip(&vv.row(j)[off..off + dh]) {
                        *o += pij * vj;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Mean token cross-entropy of `logits [T × V]` against `targets`; a 1×1 result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let row = probs.row_mut(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Backpropagates from scalar `root` seeded with `seed`; returns
    /// `(param id, gradient)` for every parameter that received a gradient.
    pub fn backward(&self, root: Var, seed: f64) -> Vec<(usize, Matrix)> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(seed));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Concat { top, bottom } => {
                    let split = self.value(*top).rows;
                    accumulate(&mut grads, *top, g.slice_rows(0, split));
                    accumulate(&mut grads, *bottom, g.slice_rows(split, g.rows));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Shift { a } => accumulate(&mut grads, *a, g),
                Op::Scale { a, s } => {
                    let mut g = g;
                    g.scale(*s);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias { x, bias } => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, gv) in db.data.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::MatMul { a, b } => {
                    let da = matmul_bt(&g, self.value(*b));
                    let db = matmul_at(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt { a, b } => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = matmul(&g, self.value(*b));
                    let db = matmul_at(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(g.rows, cols);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            dgain.data[c] += gr[c] * hr[c];
                            dbias.data[c] += gr[c];
                            let dh = gr[c] * gv.data[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let dh = gr[c] * gv.data[c];
                            dx.data[r * cols + c] = inv / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &u) in dx.data.iter_mut().zip(&xv.data) {
                        let inner = GELU_C * (u + 0.044715 * u * u * u);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                        *d *= 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.rows, d);
                    let mut dk = Matrix::zeros(kv.rows, d);
                    let mut dv = Matrix::zeros(vv.rows, d);
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..qv.rows {
                            let go = &g.row(i)[off..off + dh];
                            let prow = p.row(i);
                            // dP_ij = go · v_j ; dV_j += P_ij go
                            let mut dp = vec![0.0; kv.rows];
                            for j in 0..kv.rows {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                dp[j] = dot(go, &vv.row(j)[off..off + dh]);
                                for (dvv, &gov) in dv.data[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                    *dvv += prow[j] * gov;
                                }
                            }
                            let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = &qv.row(i)[off..off + dh];
                            for j in 0..kv.rows {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                let kj = &kv.row(j)[off..off + dh];
                                for (a, &b) in dq.data[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                    *a += ds * b;
                                }
                                for (a, &b) in dk.data[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data[0] / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (t, &y) in targets.iter().enumerate() {
                        dl.data[t * dl.cols + y] -= 1.0;
                    }
                    dl.scale(s);
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        self.params
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| {
                let v = (*v)?;
                grads[v.0].take().map(|g| (pid, g))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(param 0) for a tape builder.
    fn check<F>(p0: Matrix, extra: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Tape, &[Matrix]) -> Var,
    {
        let mut params = vec![p0];
        params.extend(extra);
        let loss_at = |ps: &[Matrix]| {
            let mut t = Tape::new(ps.len());
            let root = build(&mut t, ps);
            t.value(root).data[0]
        };
        let mut t = Tape::new(params.len());
        let root = build(&mut t, &params);
        let grads = t.backward(root, 1.0);
        for (pid, g) in grads {
            for i in 0..params[pid].data.len() {
                let h = 1e-6;
                let mut plus = params.clone();
                plus[pid].data[i] += h;
                let mut minus = params.clone();
                minus[pid].data[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = g.data[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pid}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn attention_layernorm_gelu_gradients() {
        check(m(3, 4, 1), vec![m(4, 4, 2), m(1, 4, 3), m(1, 4, 4)], |t, ps| {
            let x = t.param(0, &ps[0]);
            let w = t.param(1, &ps[1]);
            let g = t.param(2, &ps[2]);
            let b = t.param(3, &ps[3]);
            let n = t.layer_norm(x, g, b);
            let q = t.matmul(n, w);
            let a = t.attention(q, n, x, 2, true);
            let a2 = t.attention(a, x, q, 2, false);
            let h = t.gelu(a2);
            let logits = t.matmul_bt(h, w);
            t.cross_entropy(logits, &[0, 3, 1])
        });
    }

    #[test]
    fn gather_concat_bias_scale_gradients() {
        check(m(5, 3, 7), vec![m(2, 3, 8), m(1, 3, 9)], |t, ps| {
            let table = t.param(0, &ps[0]);
            let prefix = t.param(1, &ps[1]);
            let bias = t.param(2, &ps[2]);
            let e = t.gather(table, &[4, 1, 4]);
            let e = t.scale(e, 1.7);
            let x = t.concat_rows(prefix, e);
            let x = t.shift(x, &Matrix::filled(5, 3, 0.3));
            let x = t.add_bias(x, bias);
            let y = t.add(x, x);
            let logits = t.matmul_bt(y, table);
            t.cross_entropy(logits, &[0, 1, 2, 3, 4])
        });
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut t = Tape::new(0);
        let l = t.constant(Matrix::zeros(2, 7));
        let ce = t.cross_entropy(l, &[3, 5]);
        assert!((t.value(ce).data[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_set_two_token_loss() {
        // Oracle: -(1/2)[log softmax([2,0,-1])_0 + log softmax([0.5,1.5,0])_1]
        let l0 = [2.0f64, 0.0, -1.0];
        let l1 = [0.5f64, 1.5, 0.0];
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expected = -0.5 * ((l0[0] - lse(&l0)) + (l1[1] - lse(&l1)));
        let mut t = Tape::new(0);
        let l = t.constant(Matrix::from_vec(2, 3, [l0, l1].concat()));
        let ce = t.cross_entropy(l, &[0, 1]);
        assert!((t.value(ce).data[0] - expected).abs() < 1e-12);
        assert!((expected - 0.317_107_401_832_115_3).abs() < 1e-9);
    }
}
