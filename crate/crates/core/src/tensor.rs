//! Dense f32 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations during a forward pass; [`Tape::backward`]
//! replays them in reverse to produce gradients for every tracked tensor.
//! Tensors without a tape node are constants: operations whose inputs are
//! all constants record nothing and cost nothing extra. Gradient buffers
//! accumulate in f64 and are exposed as f32.

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Dense row-major f32 tensor, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], node: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![1.0; n], node: None }
    }

    pub fn scalar(x: f32) -> Self {
        Tensor { shape: vec![1], data: vec![x], node: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// (rows, cols) view: rank-2 as-is, rank-1 as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Dimension(format!(
                "expected rank <= 2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ── raw matmul kernels (matrixmultiply-backed) ───────────────────────

/// C[m,n] = A[m,k] * B[k,n], row-major.
pub fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// C[m,n] = A[m,k] * B^T where B is stored row-major [n,k].
pub fn matmul_nt_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// C[m,n] = A^T * B where A is stored row-major [k,m].
pub fn matmul_tn_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

// ── tape ─────────────────────────────────────────────────────────────

enum Op {
    Leaf,
    Matmul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        // saved only when the opposite side is tracked
        a_data: Vec<f32>,
        b_data: Vec<f32>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_data: Vec<f32>,
        b_data: Vec<f32>,
    },
    Silu {
        x: NodeId,
        x_data: Vec<f32>,
    },
    Softmax {
        x: NodeId,
        y: Vec<f32>,
        rows: usize,
        cols: usize,
        axis: usize,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
        table_rows: usize,
        cols: usize,
    },
    ScaleByScalar {
        t: Option<NodeId>,
        s: Option<NodeId>,
        t_data: Vec<f32>,
        s_val: f32,
    },
    MulRowVector {
        t: Option<NodeId>,
        v: Option<NodeId>,
        t_data: Vec<f32>,
        v_data: Vec<f32>,
        rows: usize,
        cols: usize,
    },
    RmsNorm {
        x: NodeId,
        gain: Option<NodeId>,
        x_data: Vec<f32>,
        gain_data: Vec<f32>,
        inv_rms: Vec<f32>,
        rows: usize,
        cols: usize,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Sum {
        x: NodeId,
        len: usize,
    },
    SelectColsPerRow {
        x: NodeId,
        indices: Vec<usize>,
        cols: usize,
    },
    CausalAttention {
        q: Option<NodeId>,
        k: Option<NodeId>,
        v: Option<NodeId>,
        q_data: Vec<f32>,
        k_data: Vec<f32>,
        v_data: Vec<f32>,
        probs: Vec<f32>, // blocks * heads * seq * seq
        blocks: usize,
        seq: usize,
        n_heads: usize,
        d: usize,
    },
    CrossEntropyMean {
        logits: NodeId,
        probs: Vec<f32>,
        targets: Vec<usize>,
        rows: usize,
        cols: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Append-only record of one forward pass. Rebuilt per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a backward pass, keyed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `t` as f32. Tracked-but-untouched
    /// tensors get zeros; untracked tensors get `None`.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node?;
        let shape = self.shapes[id].clone();
        let n: usize = shape.iter().product();
        let data = match &self.grads[id] {
            Some(g) => g.iter().map(|&x| x as f32).collect(),
            None => vec![0.0; n],
        };
        Some(Tensor { shape, data, node: None })
    }

    /// f64 view of the accumulated gradient buffer.
    pub fn get_f64(&self, t: &Tensor) -> Option<Vec<f64>> {
        let id = t.node?;
        let n: usize = self.shapes[id].iter().product();
        Some(match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; n],
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    /// Register a tracked leaf variable.
    pub fn var(&mut self, t: Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape.clone());
        Tensor { node: Some(id), ..t }
    }

    /// Track an existing tensor's data as a fresh leaf.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        self.var(Tensor::new(t.shape.clone(), t.data.clone()))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: lhs {:?} vs rhs {:?}",
                a.shape, b.shape
            )));
        }
        let data = matmul_raw(&a.data, &b.data, m, ka, n);
        let mut out = Tensor::new(vec![m, n], data);
        if a.node.is_some() || b.node.is_some() {
            let a_data = if b.node.is_some() { a.data.clone() } else { Vec::new() };
            let b_data = if a.node.is_some() { b.data.clone() } else { Vec::new() };
            out.node = Some(self.push(
                Op::Matmul { a: a.node, b: b.node, a_data, b_data, m, k: ka, n },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let mut out = Tensor::new(a.shape.clone(), data);
        if a.node.is_some() || b.node.is_some() {
            out.node = Some(self.push(Op::Add { a: a.node, b: b.node }, out.shape.clone()));
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let mut out = Tensor::new(a.shape.clone(), data);
        if a.node.is_some() || b.node.is_some() {
            let a_data = if b.node.is_some() { a.data.clone() } else { Vec::new() };
            let b_data = if a.node.is_some() { b.data.clone() } else { Vec::new() };
            out.node = Some(self.push(
                Op::Mul { a: a.node, b: b.node, a_data, b_data },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    pub fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data.iter().map(|&v| silu_scalar(v)).collect();
        let mut out = Tensor::new(x.shape.clone(), data);
        if let Some(id) = x.node {
            out.node = Some(self.push(
                Op::Silu { x: id, x_data: x.data.clone() },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    /// Softmax over `axis` of a rank-2 tensor (rank-1 is treated as one row).
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if axis >= 2 || (x.shape.len() == 1 && axis != 0) {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape
            )));
        }
        // Normalize so that `axis` designates the dimension reduced over:
        // for rank-2, axis=1 reduces along each row; axis=0 along each column.
        // Rank-1 input reduces over its only axis.
        let row_axis = x.shape.len() == 1 || axis == 1;
        let mut y = vec![0.0f32; rows * cols];
        if row_axis {
            for r in 0..rows {
                softmax_row(&x.data[r * cols..(r + 1) * cols], &mut y[r * cols..(r + 1) * cols]);
            }
        } else {
            let mut col_in = vec![0.0f32; rows];
            let mut col_out = vec![0.0f32; rows];
            for c in 0..cols {
                for r in 0..rows {
                    col_in[r] = x.data[r * cols + c];
                }
                softmax_row(&col_in, &mut col_out);
                for r in 0..rows {
                    y[r * cols + c] = col_out[r];
                }
            }
        }
        let mut out = Tensor::new(x.shape.clone(), y.clone());
        if let Some(id) = x.node {
            let (srows, scols) = if row_axis { (rows, cols) } else { (cols, rows) };
            // For column softmax, backward works on the transposed layout.
            let ysaved = if row_axis {
                y
            } else {
                let mut t = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        t[c * rows + r] = y[r * cols + c];
                    }
                }
                t
            };
            out.node = Some(self.push(
                Op::Softmax { x: id, y: ysaved, rows: srows, cols: scols, axis: if row_axis { 1 } else { 0 } },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    /// Gather rows of a rank-2 table: out[i] = table[indices[i]].
    pub fn gather_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = table.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Input(format!(
                    "gather_rows index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&table.data[i * cols..(i + 1) * cols]);
        }
        let mut out = Tensor::new(vec![indices.len(), cols], data);
        if let Some(id) = table.node {
            out.node = Some(self.push(
                Op::GatherRows {
                    table: id,
                    indices: indices.to_vec(),
                    table_rows: rows,
                    cols,
                },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    /// Multiply a whole tensor by a scalar tape variable (or constant).
    pub fn scale_by_scalar(&mut self, t: &Tensor, s: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::Dimension(format!(
                "scale_by_scalar expects scalar, got shape {:?}",
                s.shape
            )));
        }
        let sv = s.scalar_value();
        let data = t.data.iter().map(|&x| x * sv).collect();
        let mut out = Tensor::new(t.shape.clone(), data);
        if t.node.is_some() || s.node.is_some() {
            let t_data = if s.node.is_some() { t.data.clone() } else { Vec::new() };
            out.node = Some(self.push(
                Op::ScaleByScalar { t: t.node, s: s.node, t_data, s_val: sv },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    pub fn scale_const(&mut self, t: &Tensor, c: f32) -> Result<Tensor> {
        self.scale_by_scalar(t, &Tensor::scalar(c))
    }

    /// out[r, c] = t[r, c] * v[c] for a rank-2 `t` and length-`cols` vector `v`.
    pub fn mul_row_vector(&mut self, t: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = t.dims2()?;
        if v.numel() != cols {
            return Err(Error::Dimension(format!(
                "mul_row_vector: vector of len {} against {} columns",
                v.numel(),
                cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(t.data[r * cols + c] * v.data[c]);
            }
        }
        let mut out = Tensor::new(t.shape.clone(), data);
        if t.node.is_some() || v.node.is_some() {
            let t_data = if v.node.is_some() { t.data.clone() } else { Vec::new() };
            let v_data = if t.node.is_some() { v.data.clone() } else { Vec::new() };
            out.node = Some(self.push(
                Op::MulRowVector { t: t.node, v: v.node, t_data, v_data, rows, cols },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    /// Row-wise RMS normalization with learned gain: y = x / rms(x) * gain.
    pub fn rms_norm(&mut self, x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if gain.numel() != cols {
            return Err(Error::Dimension(format!(
                "rms_norm gain len {} vs {} columns",
                gain.numel(),
                cols
            )));
        }
        let mut inv_rms = vec![0.0f32; rows];
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x.data[r * cols..(r + 1) * cols];
            let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / cols as f64;
            let ir = (1.0 / (ms + eps as f64).sqrt()) as f32;
            inv_rms[r] = ir;
            for c in 0..cols {
                data[r * cols + c] = row[c] * ir * gain.data[c];
            }
        }
        let mut out = Tensor::new(x.shape.clone(), data);
        if x.node.is_some() || gain.node.is_some() {
            let xid = match x.node {
                Some(id) => id,
                // gain tracked but x constant: register x as an implicit leaf-free case,
                // handled by storing data and skipping dx.
                None => usize::MAX,
            };
            out.node = Some(self.push(
                Op::RmsNorm {
                    x: xid,
                    gain: gain.node,
                    x_data: x.data.clone(),
                    gain_data: gain.data.clone(),
                    inv_rms,
                    rows,
                    cols,
                },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x.data[r * cols + c];
            }
        }
        let mut out = Tensor::new(vec![cols, rows], data);
        if let Some(id) = x.node {
            out.node = Some(self.push(Op::Transpose { x: id, rows, cols }, out.shape.clone()));
        }
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data.iter().map(|&v| v as f64).sum();
        let mut out = Tensor::scalar(s as f32);
        if let Some(id) = x.node {
            out.node = Some(self.push(Op::Sum { x: id, len: x.numel() }, vec![1]));
        }
        Ok(out)
    }

    /// out[r] = x[r, indices[r]].
    pub fn select_cols_per_row(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if indices.len() != rows {
            return Err(Error::Dimension(format!(
                "select_cols_per_row: {} indices for {} rows",
                indices.len(),
                rows
            )));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::Input(format!(
                    "column index {c} out of range for {cols} columns"
                )));
            }
            data.push(x.data[r * cols + c]);
        }
        let mut out = Tensor::new(vec![rows], data);
        if let Some(id) = x.node {
            out.node = Some(self.push(
                Op::SelectColsPerRow { x: id, indices: indices.to_vec(), cols },
                out.shape.clone(),
            ));
        }
        Ok(out)
    }

    /// Multi-head causal self-attention over `blocks` independent segments of
    /// `seq` rows each. q/k/v are [blocks*seq, d]; attention never crosses a
    /// block boundary.
    pub fn causal_attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        blocks: usize,
        seq: usize,
        n_heads: usize,
    ) -> Result<Tensor> {
        let (rq, d) = q.dims2()?;
        if k.shape != q.shape || v.shape != q.shape {
            return Err(Error::Dimension(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                q.shape, k.shape, v.shape
            )));
        }
        if rq != blocks * seq || d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "attention layout mismatch: rows {rq} vs blocks {blocks} * seq {seq}, d {d}, heads {n_heads}"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0f32; rq * d];
        let mut probs = vec![0.0f32; blocks * n_heads * seq * seq];
        let mut scores = vec![0.0f32; seq];
        for b in 0..blocks {
            let base = b * seq;
            for h in 0..n_heads {
                let hoff = h * dh;
                let pbase = (b * n_heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &q.data[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                    for (j, score) in scores.iter_mut().enumerate().take(i + 1) {
                        let krow = &k.data[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                        let mut s = 0.0f32;
                        for t in 0..dh {
                            s += qrow[t] * krow[t];
                        }
                        *score = s * scale;
                    }
                    let p = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    softmax_row(&scores[..i + 1], p);
                    let orow = &mut out[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                    for j in 0..=i {
                        let pj = probs[pbase + i * seq + j];
                        let vrow = &v.data[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                        for t in 0..dh {
                            orow[t] += pj * vrow[t];
                        }
                    }
                }
            }
        }
        let mut outt = Tensor::new(vec![rq, d], out);
        if q.node.is_some() || k.node.is_some() || v.node.is_some() {
            outt.node = Some(self.push(
                Op::CausalAttention {
                    q: q.node,
                    k: k.node,
                    v: v.node,
                    q_data: q.data.clone(),
                    k_data: k.data.clone(),
                    v_data: v.data.clone(),
                    probs,
                    blocks,
                    seq,
                    n_heads,
                    d,
                },
                outt.shape.clone(),
            ));
        }
        Ok(outt)
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy_mean(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (rows, cols) = logits.dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            if targets[r] >= cols {
                return Err(Error::Input(format!(
                    "target {} out of range for {} classes",
                    targets[r], cols
                )));
            }
            softmax_row(
                &logits.data[r * cols..(r + 1) * cols],
                &mut probs[r * cols..(r + 1) * cols],
            );
            let p = probs[r * cols + targets[r]] as f64;
            // f64::max would silently drop a NaN; keep it so divergence is visible
            loss -= if p.is_nan() { p } else { p.max(1e-45) }.ln();
        }
        loss /= rows as f64;
        let mut out = Tensor::scalar(loss as f32);
        if let Some(id) = logits.node {
            out.node = Some(self.push(
                Op::CrossEntropyMean {
                    logits: id,
                    probs,
                    targets: targets.to_vec(),
                    rows,
                    cols,
                },
                vec![1],
            ));
        }
        Ok(out)
    }

    /// Reverse pass from a scalar root. Returns gradients for every tracked
    /// tensor; tracked tensors the root does not depend on get zeros.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = root.node.ok_or_else(|| {
            Error::Contract("backward root is not tracked on this tape".into())
        })?;
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let g64 = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let g: Vec<f32> = g64.iter().map(|&x| x as f32).collect();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g64);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: NodeId, g: &[f32], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl Iterator<Item = f32>, len: usize) {
            let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
            for (slot, c) in buf.iter_mut().zip(contrib) {
                *slot += c as f64;
            }
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, a_data, b_data, m, k, n } => {
                if let Some(aid) = a {
                    let da = matmul_nt_raw(g, b_data, *m, *n, *k);
                    acc(grads, *aid, da.into_iter(), m * k);
                }
                if let Some(bid) = b {
                    let db = matmul_tn_raw(a_data, g, *k, *m, *n);
                    acc(grads, *bid, db.into_iter(), k * n);
                }
            }
            Op::Add { a, b } => {
                if let Some(aid) = a {
                    acc(grads, *aid, g.iter().copied(), g.len());
                }
                if let Some(bid) = b {
                    acc(grads, *bid, g.iter().copied(), g.len());
                }
            }
            Op::Mul { a, b, a_data, b_data } => {
                if let Some(aid) = a {
                    acc(grads, *aid, g.iter().zip(b_data).map(|(gv, bv)| gv * bv), g.len());
                }
                if let Some(bid) = b {
                    acc(grads, *bid, g.iter().zip(a_data).map(|(gv, av)| gv * av), g.len());
                }
            }
            Op::Silu { x, x_data } => {
                let contrib = g.iter().zip(x_data).map(|(gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * (s * (1.0 + xv * (1.0 - s)))
                });
                acc(grads, *x, contrib, g.len());
            }
            Op::Softmax { x, y, rows, cols, axis } => {
                // `y` is stored so each softmax group is contiguous.
                let mut dx = vec![0.0f32; rows * cols];
                let gview: Vec<f32> = if *axis == 1 {
                    g.to_vec()
                } else {
                    // transpose upstream grad into the saved layout
                    let mut t = vec![0.0f32; rows * cols];
                    for r in 0..*cols {
                        for c in 0..*rows {
                            t[c * cols + r] = g[r * *rows + c];
                        }
                    }
                    t
                };
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gview[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv as f64 * gv as f64).sum();
                    for c in 0..*cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot as f32);
                    }
                }
                if *axis == 0 {
                    let mut t = vec![0.0f32; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            t[c * rows + r] = dx[r * cols + c];
                        }
                    }
                    dx = t;
                }
                acc(grads, *x, dx.into_iter(), rows * cols);
            }
            Op::GatherRows { table, indices, table_rows, cols } => {
                let mut dt = vec![0.0f32; table_rows * cols];
                for (i, &row) in indices.iter().enumerate() {
                    for c in 0..*cols {
                        dt[row * cols + c] += g[i * cols + c];
                    }
                }
                acc(grads, *table, dt.into_iter(), table_rows * cols);
            }
            Op::ScaleByScalar { t, s, t_data, s_val } => {
                if let Some(tid) = t {
                    acc(grads, *tid, g.iter().map(|gv| gv * s_val), g.len());
                }
                if let Some(sid) = s {
                    let ds: f64 = g.iter().zip(t_data).map(|(&gv, &tv)| gv as f64 * tv as f64).sum();
                    acc(grads, *sid, std::iter::once(ds as f32), 1);
                }
            }
            Op::MulRowVector { t, v, t_data, v_data, rows, cols } => {
                if let Some(tid) = t {
                    let contrib = (0..rows * cols).map(|i| g[i] * v_data[i % cols]);
                    acc(grads, *tid, contrib, rows * cols);
                }
                if let Some(vid) = v {
                    let mut dv = vec![0.0f64; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dv[c] += g[r * cols + c] as f64 * t_data[r * cols + c] as f64;
                        }
                    }
                    acc(grads, *vid, dv.into_iter().map(|x| x as f32), *cols);
                }
            }
            Op::RmsNorm { x, gain, x_data, gain_data, inv_rms, rows, cols } => {
                if *x != usize::MAX {
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..*rows {
                        let ir = inv_rms[r] as f64;
                        let xr = &x_data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut t = 0.0f64;
                        for c in 0..*cols {
                            t += gr[c] as f64 * gain_data[c] as f64 * xr[c] as f64;
                        }
                        let coef = ir * ir * ir * t / *cols as f64;
                        for c in 0..*cols {
                            dx[r * cols + c] =
                                (gr[c] as f64 * gain_data[c] as f64 * ir - xr[c] as f64 * coef) as f32;
                        }
                    }
                    acc(grads, *x, dx.into_iter(), rows * cols);
                }
                if let Some(gid) = gain {
                    let mut dg = vec![0.0f64; *cols];
                    for r in 0..*rows {
                        let ir = inv_rms[r] as f64;
                        for c in 0..*cols {
                            dg[c] += g[r * cols + c] as f64 * x_data[r * cols + c] as f64 * ir;
                        }
                    }
                    acc(grads, *gid, dg.into_iter().map(|x| x as f32), *cols);
                }
            }
            Op::Transpose { x, rows, cols } => {
                // out was [cols, rows]; g is in out layout
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                acc(grads, *x, dx.into_iter(), rows * cols);
            }
            Op::Sum { x, len } => {
                acc(grads, *x, std::iter::repeat(g[0]).take(*len), *len);
            }
            Op::SelectColsPerRow { x, indices, cols } => {
                let mut dx = vec![0.0f32; indices.len() * cols];
                for (r, &c) in indices.iter().enumerate() {
                    dx[r * cols + c] = g[r];
                }
                acc(grads, *x, dx.into_iter(), indices.len() * cols);
            }
            Op::CausalAttention {
                q, k, v, q_data, k_data, v_data, probs, blocks, seq, n_heads, d,
            } => {
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let rows = blocks * seq;
                let mut dq = vec![0.0f32; rows * d];
                let mut dk = vec![0.0f32; rows * d];
                let mut dv = vec![0.0f32; rows * d];
                let mut dp = vec![0.0f32; *seq];
                let mut ds = vec![0.0f32; *seq];
                for b in 0..*blocks {
                    let base = b * seq;
                    for h in 0..*n_heads {
                        let hoff = h * dh;
                        let pbase = (b * n_heads + h) * seq * seq;
                        for i in 0..*seq {
                            let go = &g[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            // dV and dP
                            for j in 0..=i {
                                let vrow = &v_data[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                                let mut s = 0.0f32;
                                for t in 0..dh {
                                    s += go[t] * vrow[t];
                                }
                                dp[j] = s;
                                let dvrow = &mut dv[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                                for t in 0..dh {
                                    dvrow[t] += prow[j] * go[t];
                                }
                            }
                            // softmax backward
                            let dot: f64 = prow
                                .iter()
                                .zip(dp.iter())
                                .map(|(&p, &dpv)| p as f64 * dpv as f64)
                                .sum();
                            for j in 0..=i {
                                ds[j] = prow[j] * (dp[j] - dot as f32) * scale;
                            }
                            // dQ and dK
                            let qrow = &q_data[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                            for j in 0..=i {
                                let krow = &k_data[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                                let dkrow = &mut dk[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                                let dqrow = &mut dq[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                                for t in 0..dh {
                                    dqrow[t] += ds[j] * krow[t];
                                    dkrow[t] += ds[j] * qrow[t];
                                }
                            }
                        }
                    }
                }
                if let Some(qid) = q {
                    acc(grads, *qid, dq.into_iter(), rows * d);
                }
                if let Some(kid) = k {
                    acc(grads, *kid, dk.into_iter(), rows * d);
                }
                if let Some(vid) = v {
                    acc(grads, *vid, dv.into_iter(), rows * d);
                }
            }
            Op::CrossEntropyMean { logits, probs, targets, rows, cols } => {
                let gr = g[0] / *rows as f32;
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        let delta = if targets[r] == c { 1.0 } else { 0.0 };
                        dx[r * cols + c] = gr * (probs[r * cols + c] - delta);
                    }
                }
                acc(grads, *logits, dx.into_iter(), rows * cols);
            }
        }
    }
}

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let mx = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - mx).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilator() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![1, 1], vec![2.0]);
        let b = Tensor::new(vec![1, 1], vec![0.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let c = tape
            .matmul(&Tensor::new(vec![3, 4], a.clone()), &Tensor::new(vec![4, 2], b.clone()))
            .unwrap();
        let want = naive_matmul(&a, &b, 3, 4, 2);
        for (x, y) in c.data.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn backward_of_dot_is_other_vector() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]));
        let x = Tensor::new(vec![3, 1], vec![1.0, 4.0, -2.0]);
        let y = tape.matmul(&w, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get(&w).unwrap().data, vec![1.0, 4.0, -2.0]);
    }

    #[test]
    fn backward_untouched_tracked_tensor_gets_zeros() {
        let mut tape = Tape::new();
        let unused = tape.var(Tensor::new(vec![2], vec![5.0, 6.0]));
        let x = tape.var(Tensor::scalar(3.0));
        let s = tape.sum(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&unused).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2], vec![0.0, 0.0]);
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![2, 2]);
        assert!(matches!(tape.softmax(&x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn scale_by_scalar_zero_and_gradient() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let s = tape.var(Tensor::scalar(0.0));
        let y = tape.scale_by_scalar(&t, &s).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 0.0]);
        let root = tape.sum(&y).unwrap();
        let grads = tape.backward(&root).unwrap();
        // d(sum(t*s))/ds = sum(t) with upstream all-ones
        assert_eq!(grads.get(&s).unwrap().data, vec![6.0]);
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(&a, &b).unwrap();
        let d = tape.silu(&c).unwrap();
        let _ = tape.add(&c, &d).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn determinism_repeat_run_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.var(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.9, 0.01]));
            let w = tape.var(Tensor::new(vec![2, 2], vec![1.5, 0.2, -0.4, 0.9]));
            let h = tape.matmul(&x, &w).unwrap();
            let a = tape.silu(&h).unwrap();
            let s = tape.sum(&a).unwrap();
            let grads = tape.backward(&s).unwrap();
            (s.data.clone(), grads.get(&w).unwrap().data)
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(
            v1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            g1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn backward_is_linear_in_root() {
        // backward(a*f + b*g) = a*backward(f) + b*backward(g)
        let build = |wa: f32, wb: f32| {
            let mut tape = Tape::new();
            let x = tape.var(Tensor::new(vec![2], vec![0.7, -1.3]));
            let sq = tape.mul(&x, &x).unwrap();
            let f = tape.sum(&sq).unwrap();
            let si = tape.silu(&x).unwrap();
            let g = tape.sum(&si).unwrap();
            let fa = tape.scale_const(&f, wa).unwrap();
            let gb = tape.scale_const(&g, wb).unwrap();
            let root = tape.add(&fa, &gb).unwrap();
            let grads = tape.backward(&root).unwrap();
            grads.get(&x).unwrap().data
        };
        let gf = build(1.0, 0.0);
        let gg = build(0.0, 1.0);
        let combined = build(2.0, -3.0);
        for i in 0..2 {
            let want = 2.0 * gf[i] - 3.0 * gg[i];
            assert!((combined[i] - want).abs() < 1e-5, "{} vs {}", combined[i], want);
        }
    }
}
