//! Wengert tape: forward ops append to a list, `backward` replays it in
//! reverse, accumulating gradients so DAG-shared nodes sum contributions.

use super::{Array, Scalar};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

enum Op<S> {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    /// out = a * b^T
    MatmulTB { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    /// Broadcast a 1 x c row onto every row of a.
    AddRow { a: NodeId, v: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { a: NodeId, c: S, out: NodeId },
    Softmax { a: NodeId, out: NodeId },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        xhat: Vec<S>,
        inv: Vec<S>,
    },
    Gelu { x: NodeId, out: NodeId },
    Dropout { x: NodeId, out: NodeId, mask: Vec<S> },
    MeanRows { x: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    GatherRows { x: NodeId, out: NodeId, idx: Vec<usize> },
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    SliceCols { x: NodeId, out: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId>, out: NodeId },
    ScatterAddRows { x: NodeId, out: NodeId, dst: Vec<usize> },
    RowScale { x: NodeId, out: NodeId, factors: Vec<S> },
    /// out[i] = table[map[i]], table is a single row.
    GatherTable { table: NodeId, out: NodeId, map: Vec<usize> },
    CrossEntropy {
        logits: NodeId,
        out: NodeId,
        label: usize,
        probs: Vec<S>,
    },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Register an array's current contents as a graph input.
    pub fn leaf(&mut self, a: &Array<S>) -> NodeId {
        let (rows, cols) = a.dims();
        self.push(rows, cols, a.data().to_vec())
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Gradient of the backward target w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { rows, cols, data });
        NodeId(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by backward".into(),
            ));
        }
        Ok(())
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: {}x{} by {}x{}",
                m, ka, kb, n
            )));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m, ka, n,
            S::one(),
            &self.nodes[a.0].data, ka as isize, 1,
            &self.nodes[b.0].data, n as isize, 1,
            S::zero(),
            &mut out, n as isize, 1,
        );
        let id = self.push(m, n, out);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    /// a (m x k) times b^T where b is n x k.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_tb: {}x{} by ({}x{})^T",
                m, ka, n, kb
            )));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m, ka, n,
            S::one(),
            &self.nodes[a.0].data, ka as isize, 1,
            &self.nodes[b.0].data, 1, ka as isize,
            S::zero(),
            &mut out, n as isize, 1,
        );
        let id = self.push(m, n, out);
        self.ops.push(Op::MatmulTB { a, b, out: id });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let id = self.push(r, c, data);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != c {
            return Err(Error::Shape(format!(
                "add_row: {}x{} plus {}x{}",
                r, c, vr, vc
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[v.0].data[j];
            }
        }
        let id = self.push(r, c, data);
        self.ops.push(Op::AddRow { a, v, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let id = self.push(r, c, data);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.check_open()?;
        let (r, cols) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let id = self.push(r, cols, data);
        self.ops.push(Op::Scale { a, c, out: id });
        Ok(id)
    }

    /// Row-wise softmax. Rejects non-finite inputs.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].data;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / sum;
            }
        }
        let id = self.push(r, c, data);
        self.ops.push(Op::Softmax { a, out: id });
        Ok(id)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let (pr, pc) = self.dims(p);
            if pr != 1 || pc != c {
                return Err(Error::Shape(format!(
                    "layernorm {}: expected 1x{}, got {}x{}",
                    name, c, pr, pc
                )));
            }
        }
        let eps = S::of(eps);
        let cn = S::of(c as f64);
        let xs = &self.nodes[x.0].data;
        let mut xhat = vec![S::zero(); r * c];
        let mut inv = vec![S::zero(); r];
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().cloned().sum::<S>() / cn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / cn;
            let iv = S::one() / (var + eps).sqrt();
            inv[i] = iv;
            for j in 0..c {
                let h = (row[j] - mean) * iv;
                xhat[i * c + j] = h;
                data[i * c + j] =
                    h * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        let id = self.push(r, c, data);
        self.ops.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            out: id,
            xhat,
            inv,
        });
        Ok(id)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        let c0 = S::of(0.7978845608028654);
        let a = S::of(0.044715);
        let half = S::of(0.5);
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let u = c0 * (v + a * v * v * v);
                half * v * (S::one() + u.tanh())
            })
            .collect();
        let id = self.push(r, c, data);
        self.ops.push(Op::Gelu { x, out: id });
        Ok(id)
    }

    /// Inverted dropout: identity when not training or rate is 0.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        self.check_open()?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0,1)", rate)));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..r * c)
            .map(|_| {
                if S::uniform01(rng).to_f64_lossy() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let id = self.push(r, c, data);
        self.ops.push(Op::Dropout { x, out: id, mask });
        Ok(id)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        let rn = S::of(r as f64);
        let mut data = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.nodes[x.0].data[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v / rn;
        }
        let id = self.push(1, c, data);
        self.ops.push(Op::MeanRows { x, out: id });
        Ok(id)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let total = self.nodes[x.0].data.iter().cloned().sum();
        let id = self.push(1, 1, vec![total]);
        self.ops.push(Op::SumAll { x, out: id });
        Ok(id)
    }

    /// Select rows by index; repeats are allowed and their gradients sum.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Layout(format!(
                "gather_rows: index {} out of {} rows",
                bad, r
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.nodes[x.0].data[i * c..(i + 1) * c]);
        }
        let id = self.push(idx.len(), c, data);
        self.ops.push(Op::GatherRows {
            x,
            out: id,
            idx: idx.to_vec(),
        });
        Ok(id)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty part list".into()));
        }
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {} vs {}",
                    pc, c
                )));
            }
            rows += pr;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let id = self.push(rows, c, data);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out: id,
        });
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{}, {}) of {} columns",
                start,
                start + len,
                c
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        let id = self.push(r, len, data);
        self.ops.push(Op::SliceCols { x, out: id, start });
        Ok(id)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty part list".into()));
        }
        let (r, _) = self.dims(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {} vs {}",
                    pr, r
                )));
            }
            cols += pc;
        }
        let mut data = vec![S::zero(); r * cols];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc]
                    .copy_from_slice(&self.nodes[p.0].data[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let id = self.push(r, cols, data);
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// out[dst[k], :] += x[k, :] into a zero matrix with `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        x: NodeId,
        dst: &[usize],
        out_rows: usize,
    ) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        if dst.len() != r {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {} rows",
                dst.len(),
                r
            )));
        }
        if let Some(&bad) = dst.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Layout(format!(
                "scatter_add_rows: index {} out of {} rows",
                bad, out_rows
            )));
        }
        let mut data = vec![S::zero(); out_rows * c];
        for (k, &d) in dst.iter().enumerate() {
            for j in 0..c {
                data[d * c + j] += self.nodes[x.0].data[k * c + j];
            }
        }
        let id = self.push(out_rows, c, data);
        self.ops.push(Op::ScatterAddRows {
            x,
            out: id,
            dst: dst.to_vec(),
        });
        Ok(id)
    }

    /// Multiply each row by a fixed (non-differentiated) factor.
    pub fn row_scale(&mut self, x: NodeId, factors: &[S]) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(x);
        if factors.len() != r {
            return Err(Error::Shape(format!(
                "row_scale: {} factors for {} rows",
                factors.len(),
                r
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= factors[i];
            }
        }
        let id = self.push(r, c, data);
        self.ops.push(Op::RowScale {
            x,
            out: id,
            factors: factors.to_vec(),
        });
        Ok(id)
    }

    /// Expand a single-row table into an r x c matrix via an index map.
    pub fn gather_table(
        &mut self,
        table: NodeId,
        map: &[usize],
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        self.check_open()?;
        let (tr, tc) = self.dims(table);
        if tr != 1 {
            return Err(Error::Shape(format!("gather_table: table is {}x{}", tr, tc)));
        }
        if map.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather_table: map has {} entries for {}x{}",
                map.len(),
                rows,
                cols
            )));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= tc) {
            return Err(Error::Layout(format!(
                "gather_table: index {} out of {} entries",
                bad, tc
            )));
        }
        let data = map.iter().map(|&i| self.nodes[table.0].data[i]).collect();
        let id = self.push(rows, cols, data);
        self.ops.push(Op::GatherTable {
            table,
            out: id,
            map: map.to_vec(),
        });
        Ok(id)
    }

    /// Cross entropy of a single-row logit vector against an integer label.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.check_open()?;
        let (r, c) = self.dims(logits);
        if r != 1 {
            return Err(Error::Shape(format!("cross_entropy: logits are {}x{}", r, c)));
        }
        if label >= c {
            return Err(Error::Contract(format!(
                "cross_entropy: label {} out of {} classes",
                label, c
            )));
        }
        let x = &self.nodes[logits.0].data;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross_entropy input is not finite".into()));
        }
        let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        let mut probs = vec![S::zero(); c];
        for j in 0..c {
            let e = (x[j] - max).exp();
            probs[j] = e;
            sum += e;
        }
        for p in probs.iter_mut() {
            *p = *p / sum;
        }
        let loss = sum.ln() + max - x[label];
        let id = self.push(1, 1, vec![loss]);
        self.ops.push(Op::CrossEntropy {
            logits,
            out: id,
            label,
            probs,
        });
        Ok(id)
    }

    // ---- backward ----

    /// Reverse replay from a scalar node. Each op is visited exactly once;
    /// a second call is a contract error.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already run on this tape".into()));
        }
        let (r, c) = self.dims(target);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got {}x{}",
                r, c
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(vec![S::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        self.ops = ops;
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(
        grads: &'g mut [Option<Vec<S>>],
        id: NodeId,
        numel: usize,
    ) -> &'g mut Vec<S> {
        grads[id.0].get_or_insert_with(|| vec![S::zero(); numel])
    }

    fn backward_op(&self, op: &Op<S>, grads: &mut [Option<Vec<S>>]) {
        // Output gradient; absent means nothing downstream depended on it.
        let gout = |grads: &[Option<Vec<S>>], out: NodeId| grads[out.0].clone();
        match *op {
            Op::Matmul { a, b, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                {
                    let ga = Self::acc(grads, a, m * k);
                    S::gemm(
                        m, n, k,
                        S::one(),
                        &g, n as isize, 1,
                        &self.nodes[b.0].data, 1, n as isize,
                        S::one(),
                        ga, k as isize, 1,
                    );
                }
                let gb = Self::acc(grads, b, k * n);
                S::gemm(
                    k, m, n,
                    S::one(),
                    &self.nodes[a.0].data, 1, k as isize,
                    &g, n as isize, 1,
                    S::one(),
                    gb, n as isize, 1,
                );
            }
            Op::MatmulTB { a, b, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (m, k) = self.dims(a);
                let (n, _) = self.dims(b);
                {
                    let ga = Self::acc(grads, a, m * k);
                    S::gemm(
                        m, n, k,
                        S::one(),
                        &g, n as isize, 1,
                        &self.nodes[b.0].data, k as isize, 1,
                        S::one(),
                        ga, k as isize, 1,
                    );
                }
                let gb = Self::acc(grads, b, n * k);
                S::gemm(
                    n, m, k,
                    S::one(),
                    &g, 1, n as isize,
                    &self.nodes[a.0].data, k as isize, 1,
                    S::one(),
                    gb, k as isize, 1,
                );
            }
            Op::Add { a, b, out } => {
                let Some(g) = gout(grads, out) else { return };
                for (ga, &v) in Self::acc(grads, a, g.len()).iter_mut().zip(&g) {
                    *ga += v;
                }
                for (gb, &v) in Self::acc(grads, b, g.len()).iter_mut().zip(&g) {
                    *gb += v;
                }
            }
            Op::AddRow { a, v, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(a);
                for (ga, &x) in Self::acc(grads, a, r * c).iter_mut().zip(&g) {
                    *ga += x;
                }
                let gv = Self::acc(grads, v, c);
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g[i * c + j];
                    }
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = gout(grads, out) else { return };
                let n = g.len();
                {
                    let ga = Self::acc(grads, a, n);
                    for i in 0..n {
                        ga[i] += g[i] * self.nodes[b.0].data[i];
                    }
                }
                let gb = Self::acc(grads, b, n);
                for i in 0..n {
                    gb[i] += g[i] * self.nodes[a.0].data[i];
                }
            }
            Op::Scale { a, c, out } => {
                let Some(g) = gout(grads, out) else { return };
                let ga = Self::acc(grads, a, g.len());
                for (x, &v) in ga.iter_mut().zip(&g) {
                    *x += v * c;
                }
            }
            Op::Softmax { a, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(a);
                let y = &self.nodes[out.0].data;
                let ga = Self::acc(grads, a, r * c);
                for i in 0..r {
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                out,
                ref xhat,
                ref inv,
            } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let cn = S::of(c as f64);
                {
                    let gb = Self::acc(grads, beta, c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                {
                    let gg = Self::acc(grads, gamma, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                let gam = &self.nodes[gamma.0].data;
                let gx = Self::acc(grads, x, r * c);
                for i in 0..r {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..c {
                        let dh = g[i * c + j] * gam[j];
                        m1 += dh;
                        m2 += dh * xhat[i * c + j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for j in 0..c {
                        let dh = g[i * c + j] * gam[j];
                        gx[i * c + j] += inv[i] * (dh - m1 - xhat[i * c + j] * m2);
                    }
                }
            }
            Op::Gelu { x, out } => {
                let Some(g) = gout(grads, out) else { return };
                let c0 = S::of(0.7978845608028654);
                let a = S::of(0.044715);
                let half = S::of(0.5);
                let three = S::of(3.0);
                let gx = Self::acc(grads, x, g.len());
                for (i, &v) in self.nodes[x.0].data.iter().enumerate() {
                    let u = c0 * (v + a * v * v * v);
                    let t = u.tanh();
                    let sech2 = S::one() - t * t;
                    let du = c0 * (S::one() + three * a * v * v);
                    let d = half * (S::one() + t) + half * v * sech2 * du;
                    gx[i] += g[i] * d;
                }
            }
            Op::Dropout { x, out, ref mask } => {
                let Some(g) = gout(grads, out) else { return };
                let gx = Self::acc(grads, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::MeanRows { x, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let rn = S::of(r as f64);
                let gx = Self::acc(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j] / rn;
                    }
                }
            }
            Op::SumAll { x, out } => {
                let Some(g) = gout(grads, out) else { return };
                let gx = Self::acc(grads, x, self.nodes[x.0].data.len());
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::GatherRows { x, out, ref idx } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let gx = Self::acc(grads, x, r * c);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
            }
            Op::ConcatRows { ref parts, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (_, c) = self.dims(out);
                let mut row = 0;
                for &p in parts {
                    let (pr, _) = self.dims(p);
                    let gp = Self::acc(grads, p, pr * c);
                    for (dst, &src) in gp.iter_mut().zip(&g[row * c..(row + pr) * c]) {
                        *dst += src;
                    }
                    row += pr;
                }
            }
            Op::SliceCols { x, out, start } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let (_, len) = self.dims(out);
                let gx = Self::acc(grads, x, r * c);
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols { ref parts, out } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, cols) = self.dims(out);
                let mut off = 0;
                for &p in parts {
                    let (_, pc) = self.dims(p);
                    let gp = Self::acc(grads, p, r * pc);
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] += g[i * cols + off + j];
                        }
                    }
                    off += pc;
                }
            }
            Op::ScatterAddRows { x, out, ref dst } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let gx = Self::acc(grads, x, r * c);
                for (k, &d) in dst.iter().enumerate() {
                    for j in 0..c {
                        gx[k * c + j] += g[d * c + j];
                    }
                }
            }
            Op::RowScale { x, out, ref factors } => {
                let Some(g) = gout(grads, out) else { return };
                let (r, c) = self.dims(x);
                let gx = Self::acc(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] * factors[i];
                    }
                }
            }
            Op::GatherTable { table, out, ref map } => {
                let Some(g) = gout(grads, out) else { return };
                let (_, e) = self.dims(table);
                let gt = Self::acc(grads, table, e);
                for (k, &i) in map.iter().enumerate() {
                    gt[i] += g[k];
                }
            }
            Op::CrossEntropy {
                logits,
                out,
                label,
                ref probs,
            } => {
                let Some(g) = gout(grads, out) else { return };
                let gl = Self::acc(grads, logits, probs.len());
                for (j, &p) in probs.iter().enumerate() {
                    let ind = if j == label { S::one() } else { S::zero() };
                    gl[j] += g[0] * (p - ind);
                }
            }
        }
    }

}
