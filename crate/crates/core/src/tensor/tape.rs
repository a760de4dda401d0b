use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        d: usize,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: usize,
        n: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    MeanAxis {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        c: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
    op: Op,
}

/// Ordered record of differentiable ops.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. `backward` may run once per recording; call [`Tape::reset`]
/// before reusing the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    /// Records a copy of `t`; tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            tracked: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a gradient-free value.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            tracked: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::dim("item", format!("shape {:?} is not scalar", n.shape)));
        }
        Ok(n.data[0])
    }

    /// Gradient of the last `backward` loss with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[usize], op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        // Untracked nodes never propagate gradients, so drop their caches.
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            data,
            tracked,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(
            "matmul",
            vec![m, n],
            out,
            &[a.0, b.0],
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        )
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            mm(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            &[a.0, b.0],
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
        )
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, &[a.0, b.0], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, &[x.0], Op::Scale { x: x.0, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, &[x.0], Op::AddScalar { x: x.0 })
    }

    /// Adds a `[d]` vector along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().ok_or_else(|| Error::dim("add_bias", "scalar input"))?;
        if sb != [d] {
            return Err(Error::dim("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = sx.to_vec();
        self.push(
            "add_bias",
            shape,
            out,
            &[x.0, bias.0],
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                d,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, &[x.0], Op::Relu { x: x.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, &[x.0], Op::Gelu { x: x.0 })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            out,
            &[x.0],
            Op::Softmax {
                x: x.0,
                outer,
                n,
                inner,
            },
        )
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        let out = self.value(x).chunks(n).flat_map(log_softmax_row).collect();
        self.push("log_softmax", shape, out, &[x.0], Op::LogSoftmax { x: x.0, n })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!(
                "layer_norm epsilon must be positive, got {eps}"
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            &[x.0, gain.0, bias.0],
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                d,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of a `[rows, dim]` table; output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::dim("embedding", format!("table must be 2-D, got {st:?}")));
        }
        let (rows, dim) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(Error::dim("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {rows}"
            )));
        }
        let tv = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| tv[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            &[table.0],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                dim,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x);
        if numel(shape) != numel(from) || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{from:?} -> {shape:?}")));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, &[x.0], Op::Reshape { x: x.0 })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("permutation {perm:?} for shape {shape:?}"),
            ));
        }
        let (out, out_shape) = permute_data(self.value(x), &shape, perm);
        self.push(
            "permute",
            out_shape,
            out,
            &[x.0],
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected matrix, got {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(
            "mean_axis",
            out_shape,
            out,
            &[x.0],
            Op::MeanAxis {
                x: x.0,
                outer,
                n,
                inner,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], &[x.0], Op::SumAll { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![s], &[x.0], Op::MeanAll { x: x.0 })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// `logits` is `[n, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(shape[0] * c);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).chunks(c).zip(labels) {
            let lp = log_softmax_row(row);
            loss -= lp[label];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        loss /= labels.len() as f64;
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                c,
            },
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        self.push("mse", Vec::new(), vec![s], &[a.0, b.0], Op::Mse { a: a.0, b: b.0 })
    }

    /// Propagates d`loss`/d(node) back through the tape. Leaf gradients are
    /// then available through [`Tape::grad`]. A second call without
    /// [`Tape::reset`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !ln.tracked {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let mut send = |target: usize, contrib: Vec<f64>| {
                if nodes[target].tracked {
                    accumulate(&mut grads[target], contrib);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a].tracked {
                        let mut da = vec![0.0; m * k];
                        mm_nt(&g, &nodes[b].data, m, n, k, &mut da);
                        send(a, da);
                    }
                    if nodes[b].tracked {
                        let mut db = vec![0.0; k * n];
                        mm_tn(&nodes[a].data, &g, m, k, n, &mut db);
                        send(b, db);
                    }
                }
                &Op::BatchMatMul { a, b, batch, m, k, n } => {
                    if nodes[a].tracked {
                        let mut da = vec![0.0; batch * m * k];
                        for t in 0..batch {
                            mm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &nodes[b].data[t * k * n..(t + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                        send(a, da);
                    }
                    if nodes[b].tracked {
                        let mut db = vec![0.0; batch * k * n];
                        for t in 0..batch {
                            mm_tn(
                                &nodes[a].data[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[t * k * n..(t + 1) * k * n],
                            );
                        }
                        send(b, db);
                    }
                }
                &Op::Add { a, b } => {
                    send(a, g.clone());
                    send(b, g);
                }
                &Op::Sub { a, b } => {
                    send(b, g.iter().map(|v| -v).collect());
                    send(a, g);
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a].data, &nodes[b].data);
                    send(a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    send(b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                &Op::Scale { x, factor } => send(x, g.iter().map(|v| v * factor).collect()),
                &Op::AddScalar { x } => send(x, g),
                &Op::AddBias { x, bias, d } => {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(bias, db);
                    send(x, g);
                }
                &Op::Relu { x } => {
                    let xv = &nodes[x].data;
                    send(
                        x,
                        g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                &Op::Gelu { x } => {
                    let xv = &nodes[x].data;
                    send(x, g.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect());
                }
                &Op::Softmax { x, outer, n, inner } => {
                    let y = &node.data;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    send(x, dx);
                }
                &Op::LogSoftmax { x, n } => {
                    let y = &node.data;
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    send(x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    d,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias, d) = (*x, *gain, *bias, *d);
                    let gv = &nodes[gain].data;
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = s * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    send(gain, dgain);
                    send(bias, dbias);
                    send(x, dx);
                }
                Op::Embedding { table, ids, dim } => {
                    let (table, dim) = (*table, *dim);
                    let mut dt = vec![0.0; nodes[table].data.len()];
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    send(table, dt);
                }
                &Op::Reshape { x } => send(x, g),
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (dx, _) = permute_data(&g, &node.shape, &inv);
                    send(*x, dx);
                }
                &Op::MeanAxis { x, outer, n, inner } => {
                    let mut dx = vec![0.0; outer * n * inner];
                    let scale = 1.0 / n as f64;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                        }
                    }
                    send(x, dx);
                }
                &Op::SumAll { x } => send(x, vec![g[0]; nodes[x].data.len()]),
                &Op::MeanAll { x } => {
                    let len = nodes[x].data.len();
                    send(x, vec![g[0] / len as f64; len]);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    c,
                } => {
                    let scale = g[0] / labels.len() as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * c + l] -= scale;
                    }
                    send(*logits, dx);
                }
                &Op::Mse { a, b } => {
                    let (av, bv) = (&nodes[a].data, &nodes[b].data);
                    let scale = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| (x - y) * scale).collect();
                    if nodes[b].tracked {
                        send(b, diff.iter().map(|v| -v).collect());
                    }
                    send(a, diff);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.shape(d), &[1, 1]);
        assert_eq!(tape.value(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(tape.value(y)[1] < 1e-300);
    }

    #[test]
    fn softmax_over_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 5.0, 2.0, -1.0, 0.5, 0.5]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        for col in 0..3 {
            assert!((v[col] + v[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[2.5, 2.5, 2.5]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        for (got, want) in tape.value(y).iter().zip([1.0, -1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_input_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let y = tape.leaf(&t(&[2], &[3.0, 4.0]).tracked());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_results_are_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(tape.value(y)[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), &data[..]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embedding(table, &[0, 4]), Err(Error::Input(_))));
    }
}
