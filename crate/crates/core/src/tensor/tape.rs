use rand::Rng;

use super::kernels::gemm_acc;
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        row: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<(usize, usize)>,
    },
    Slice {
        a: usize,
        start: usize,
        width: usize,
    },
    Reshape {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    BceLogits {
        logits: usize,
        targets: Vec<f64>,
        row_weights: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every operation's inputs precede
/// it and a single reverse sweep visits each operation exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0].as_ref().map(|g| Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn shape_of_rows(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / last, last)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a[..., k] · b[k, n] -> [..., n]`. Leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ -> [..., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() != 2 {
            return Err(err());
        }
        let (m, k) = shape_of_rows(&sa);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out,
            m,
            k,
            n,
            false,
            trans_b,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = &self.nodes[a.0].value.data;
            let bd = &self.nodes[b.0].value.data;
            for i in 0..batch {
                gemm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data: out,
            },
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Adds a length-`n` vector to every last-axis slice of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(row) != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = &self.nodes[row.0].value.data;
        let data = self.nodes[a.0]
            .value
            .data
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(
            Tensor { shape, data },
            Op::AddRow { a: a.0, row: row.0 },
            rg,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale { a: a.0, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Relu { a: a.0 }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Sigmoid { a: a.0 }, rg)
    }

    /// Max-stabilised softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = v.last_dim();
        let mut data = Vec::with_capacity(v.data.len());
        for chunk in v.data.chunks(n) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &x in chunk {
                let e = (x - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Softmax { a: a.0 }, rg)
    }

    /// Normalises each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if d < 2 {
            return Err(Error::contract(
                "layer_norm over a last axis of extent 1 is degenerate",
            ));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let v = &self.nodes[a.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let rows = v.data.len() / d;
        let mut xhat = Vec::with_capacity(v.data.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(v.data.len());
        for chunk in v.data.chunks(d) {
            let mean = chunk.iter().sum::<f64>() / d as f64;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &x) in chunk.iter().enumerate() {
                let h = (x - mean) * is;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: ids.into_iter().zip(widths).collect(),
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let width = *s.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::Dimension {
                op: "slice_last",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let data = self.nodes[a.0]
            .value
            .data
            .chunks(width)
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                a: a.0,
                start,
                width,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let v = &self.nodes[a.0].value;
        let mask: Vec<f64> = (0..v.data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Dropout { a: a.0, mask }, rg))
    }

    /// Stacks `table[indices[i]]` into a `[indices.len(), D]` matrix.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let (rows, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        let t = &self.nodes[table.0].value.data;
        for &ix in indices {
            if ix >= rows {
                return Err(Error::Lookup { index: ix, rows });
            }
            data.extend_from_slice(&t[ix * d..(ix + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, rg)
    }

    /// `scale · Σ_r w_r Σ_j [softplus(z_rj) − y_rj z_rj]`, the binary
    /// cross-entropy of `σ(z)` against `y`, weighted per row.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
        row_weights: &[f64],
        scale: f64,
    ) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (rows, n) = shape_of_rows(self.shape(logits));
        if row_weights.len() != rows {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: vec![rows, n],
                rhs: vec![row_weights.len()],
            });
        }
        let z = &self.nodes[logits.0].value.data;
        let mut total = 0.0;
        for r in 0..rows {
            let w = row_weights[r];
            if w == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for j in 0..n {
                let x = z[r * n + j];
                let y = targets.data[r * n + j];
                s += x.max(0.0) - y * x + (-x.abs()).exp().ln_1p();
            }
            total += w * s;
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::BceLogits {
                logits: logits.0,
                targets: targets.data.clone(),
                row_weights: row_weights.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[idx].requires_grad {
                return;
            }
            let buf = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.data.len()]);
            f(buf);
        };
        let val = |idx: usize| -> &[f64] { &nodes[idx].value.data };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                // dA = dC · op(B)ᵀ
                acc(a, &mut |ga| {
                    gemm_acc(g, val(b), ga, m, n, k, false, !trans_b)
                });
                // dB = Aᵀ · dC  (or dCᵀ · A when B is stored transposed)
                if trans_b {
                    acc(b, &mut |gb| gemm_acc(g, val(a), gb, n, m, k, true, false));
                } else {
                    acc(b, &mut |gb| gemm_acc(val(a), g, gb, k, m, n, true, false));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (sa, sb, sc) = (m * k, k * n, m * n);
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        gemm_acc(
                            &g[t * sc..(t + 1) * sc],
                            &val(b)[t * sb..(t + 1) * sb],
                            &mut ga[t * sa..(t + 1) * sa],
                            m,
                            n,
                            k,
                            false,
                            !trans_b,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let gt = &g[t * sc..(t + 1) * sc];
                        let at = &val(a)[t * sa..(t + 1) * sa];
                        let out = &mut gb[t * sb..(t + 1) * sb];
                        if trans_b {
                            gemm_acc(gt, at, out, n, m, k, true, false);
                        } else {
                            gemm_acc(at, gt, out, k, m, n, true, false);
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                for idx in [a, b] {
                    acc(idx, &mut |ga| add_into(ga, g));
                }
            }
            &Op::AddRow { a, row } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(row, &mut |gr| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                acc(a, &mut |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *o += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *o += gi * x;
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |ga| {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * factor;
                }
            }),
            &Op::Relu { a } => acc(a, &mut |ga| {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                    if x > 0.0 {
                        *o += gi;
                    }
                }
            }),
            &Op::Sigmoid { a } => {
                let y = val(i);
                acc(a, &mut |ga| {
                    for ((o, &gi), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * s * (1.0 - s);
                    }
                })
            }
            &Op::Softmax { a } => {
                let y = val(i);
                let n = nodes[i].value.last_dim();
                acc(a, &mut |ga| {
                    for ((oc, gc), yc) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gc.iter().zip(yc).map(|(x, y)| x * y).sum();
                        for ((o, &gi), &yi) in oc.iter_mut().zip(gc).zip(yc) {
                            *o += yi * (gi - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[*gain].value.data.len();
                let gv = val(*gain);
                acc(*a, &mut |ga| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let out = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += is / d as f64 * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gc, xc) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gc[j] * xc[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gc in g.chunks(d) {
                        add_into(gb, gc);
                    }
                });
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { a, start, width } => {
                let len = nodes[i].value.last_dim();
                acc(a, &mut |ga| {
                    for (oc, gc) in ga.chunks_mut(width).zip(g.chunks(len)) {
                        add_into(&mut oc[start..start + len], gc);
                    }
                })
            }
            &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            Op::Dropout { a, mask } => acc(*a, &mut |ga| {
                for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::Gather { table, indices } => {
                let d = nodes[i].value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut gt[ix * d..(ix + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            &Op::Sum { a } => acc(a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::BceLogits {
                logits,
                targets,
                row_weights,
                scale,
            } => {
                let n = nodes[*logits].value.last_dim();
                let z = val(*logits);
                acc(*logits, &mut |gz| {
                    for (r, &w) in row_weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * scale * w;
                        for j in r * n..(r + 1) * n {
                            gz[j] += c * (sigmoid(z[j]) - targets[j]);
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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
