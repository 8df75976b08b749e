//! Dense matrices and a small reverse-mode tape.
//!
//! Everything is a row-major `f64` matrix. A forward pass pushes nodes onto a
//! [`Tape`]; `backward` walks the tape in reverse and accumulates gradients
//! for every node that needs them. The op set is exactly what the correction
//! network requires, nothing more.

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Option<Mat> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return None;
        }
        Some(Mat { rows: n_rows, cols: n_cols, data: rows.into_iter().flatten().collect() })
    }

    pub fn row_vector(values: Vec<f64>) -> Mat {
        Mat { rows: 1, cols: values.len(), data: values }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Mat {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    /// Glorot-uniform init for projection weights.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, k: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self @ other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self @ other.T`
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `self.T @ other`
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..self.rows).map(|r| self.row(r)).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        Mat::from_rows(rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

/// Boolean mask over a matrix; `true` marks an allowed entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl BoolMask {
    pub fn full(rows: usize, cols: usize) -> BoolMask {
        BoolMask { rows, cols, allowed: vec![true; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allowed[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of this node on its tape; indexes the output of
    /// [`Tape::backward`].
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    HadamardConst(Var, Mat),
    Relu(Var),
    LayerNorm(Var),
    MaskedSoftmax(Var, Option<BoolMask>),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, row_mask: Vec<bool> },
    SoftKl { student: Var, teacher_probs: Mat, row_mask: Vec<bool> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;

/// Reverse-mode tape. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    /// `a @ b.T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Broadcast-add a `[1 x c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        debug_assert_eq!(self.value(row).shape(), (1, c));
        let mut value = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                value.data[i * c + j] += self.value(row).data[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    /// Broadcast-multiply every row of `a` by a `[1 x c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        debug_assert_eq!(self.value(row).shape(), (1, c));
        let mut value = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                value.data[i * c + j] *= self.value(row).data[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v *= k;
        }
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn hadamard_const(&mut self, a: Var, mask: Mat) -> Var {
        debug_assert_eq!(self.value(a).shape(), mask.shape());
        let mut value = self.value(a).clone();
        for (v, m) in value.data.iter_mut().zip(&mask.data) {
            *v *= m;
        }
        let needs = self.needs(a);
        self.push(value, Op::HadamardConst(a, mask), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v = v.max(0.0);
        }
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    /// Row-wise layer normalization (no affine part; compose with
    /// `mul_row`/`add_row` for gain and bias).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let mut value = Mat::zeros(r, c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let denom = (var + LN_EPS).sqrt();
            for j in 0..c {
                value.data[i * c + j] = (row[j] - mean) / denom;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::LayerNorm(a), needs)
    }

    /// Row-wise softmax; entries disallowed by `mask` get probability exactly
    /// zero. A row with nothing allowed becomes all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<BoolMask>) -> Var {
        if let Some(m) = &mask {
            debug_assert_eq!(self.value(a).shape(), (m.rows, m.cols));
        }
        let value = masked_softmax_value(self.value(a), mask.as_ref());
        let needs = self.needs(a);
        self.push(value, Op::MaskedSoftmax(a, mask), needs)
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let cols = self.value(table).cols;
        let mut value = Mat::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            value.data[i * cols..(i + 1) * cols].copy_from_slice(self.value(table).row(id));
        }
        let needs = self.needs(table);
        self.push(value, Op::Gather(table, ids), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape();
        debug_assert!(start + len <= c);
        let mut value = Mat::zeros(r, len);
        for i in 0..r {
            value.data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push(value, Op::SliceCols(a, start, len), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Mat::zeros(r, total);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            debug_assert_eq!(m.rows, r);
            for i in 0..r {
                value.data[i * total + offset..i * total + offset + m.cols]
                    .copy_from_slice(m.row(i));
            }
            offset += m.cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape();
        debug_assert!(start + len <= r);
        let mut value = Mat::zeros(len, c);
        value.data.copy_from_slice(&self.value(a).data[start * c..(start + len) * c]);
        let needs = self.needs(a);
        self.push(value, Op::SliceRows(a, start, len), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols;
        let total: usize = parts.iter().map(|p| self.value(*p).rows).sum();
        let mut value = Mat::zeros(total, c);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            debug_assert_eq!(m.cols, c);
            value.data[offset..offset + m.data.len()].copy_from_slice(&m.data);
            offset += m.data.len();
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Mean cross-entropy over unmasked rows, from raw logits. With zero
    /// unmasked rows the loss is defined as 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, row_mask: Vec<bool>) -> Var {
        let m = self.value(logits);
        debug_assert_eq!(m.rows, targets.len());
        debug_assert_eq!(m.rows, row_mask.len());
        let n = row_mask.iter().filter(|&&b| b).count();
        let mut total = 0.0;
        if n > 0 {
            for i in 0..m.rows {
                if !row_mask[i] {
                    continue;
                }
                let logp = log_softmax_row(m.row(i));
                total -= logp[targets[i]];
            }
            total /= n as f64;
        }
        let needs = self.needs(logits);
        self.push(
            Mat { rows: 1, cols: 1, data: vec![total] },
            Op::CrossEntropy { logits, targets, row_mask },
            needs,
        )
    }

    /// Mean KL divergence `KL(teacher || student)` over unmasked rows;
    /// `student` holds raw (already temperature-scaled) logits and
    /// `teacher_probs` a constant distribution per row.
    pub fn soft_kl(&mut self, student: Var, teacher_probs: Mat, row_mask: Vec<bool>) -> Var {
        let m = self.value(student);
        debug_assert_eq!(m.shape(), teacher_probs.shape());
        let n = row_mask.iter().filter(|&&b| b).count();
        let mut total = 0.0;
        if n > 0 {
            for i in 0..m.rows {
                if !row_mask[i] {
                    continue;
                }
                let logp = log_softmax_row(m.row(i));
                for (j, &pt) in teacher_probs.row(i).iter().enumerate() {
                    if pt > 0.0 {
                        total += pt * (pt.ln() - logp[j]);
                    }
                }
            }
            total /= n as f64;
        }
        let needs = self.needs(student);
        self.push(
            Mat { rows: 1, cols: 1, data: vec![total] },
            Op::SoftKl { student, teacher_probs, row_mask },
            needs,
        )
    }

    /// Gradients of `loss` (a `[1 x 1]` node) with respect to every node.
    /// Entries are `None` for nodes that do not need gradients.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.value(loss).shape(), (1, 1));
        grads[loss.0] = Some(Mat { rows: 1, cols: 1, data: vec![1.0] });

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate_parents(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |grads: &mut [Option<Mat>], v: Var, delta: Mat| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                add_to(grads, *a, g.matmul_nt(self.value(*b)));
                add_to(grads, *b, self.value(*a).matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                add_to(grads, *a, g.matmul(self.value(*b)));
                add_to(grads, *b, g.matmul_tn(self.value(*a)));
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                let av = self.value(*a);
                let mut da = g.clone();
                for i in 0..da.rows {
                    for j in 0..da.cols {
                        da.data[i * da.cols + j] *= rv.data[j];
                    }
                }
                add_to(grads, *a, da);
                let mut ga = g.clone();
                for (x, y) in ga.data.iter_mut().zip(&av.data) {
                    *x *= y;
                }
                add_to(grads, *row, col_sums(&ga));
            }
            Op::Scale(a, k) => {
                let mut da = g.clone();
                for v in &mut da.data {
                    *v *= k;
                }
                add_to(grads, *a, da);
            }
            Op::HadamardConst(a, mask) => {
                let mut da = g.clone();
                for (x, m) in da.data.iter_mut().zip(&mask.data) {
                    *x *= m;
                }
                add_to(grads, *a, da);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut da = g.clone();
                for (x, v) in da.data.iter_mut().zip(&av.data) {
                    if *v <= 0.0 {
                        *x = 0.0;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LayerNorm(a) => {
                let av = self.value(*a);
                let yv = &self.nodes[id].value;
                let (r, c) = av.shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let x = av.row(i);
                    let y = yv.row(i);
                    let gr = g.row(i);
                    let mean = x.iter().sum::<f64>() / c as f64;
                    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let denom = (var + LN_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean =
                        gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da.data[i * c + j] = (gr[j] - g_mean - y[j] * gy_mean) / denom;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MaskedSoftmax(a, _mask) => {
                let pv = &self.nodes[id].value;
                let (r, c) = pv.shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let p = pv.row(i);
                    let gr = g.row(i);
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da.data[i * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let mut dt = Mat::zeros(tv.rows, tv.cols);
                for (i, &idx) in ids.iter().enumerate() {
                    for j in 0..tv.cols {
                        dt.data[idx * tv.cols + j] += g.data[i * tv.cols + j];
                    }
                }
                add_to(grads, *table, dt);
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    for j in 0..*len {
                        da.data[i * av.cols + start + j] = g.data[i * len + j];
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols;
                    let pr = self.value(*p).rows;
                    let mut dp = Mat::zeros(pr, pc);
                    for i in 0..pr {
                        dp.data[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    add_to(grads, *p, dp);
                    offset += pc;
                }
            }
            Op::SliceRows(a, start, len) => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                da.data[start * av.cols..(start + len) * av.cols].copy_from_slice(&g.data);
                add_to(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.value(*p).shape();
                    let mut dp = Mat::zeros(pr, pc);
                    dp.data.copy_from_slice(&g.data[offset..offset + pr * pc]);
                    add_to(grads, *p, dp);
                    offset += pr * pc;
                }
            }
            Op::CrossEntropy { logits, targets, row_mask } => {
                let lv = self.value(*logits);
                let n = row_mask.iter().filter(|&&b| b).count();
                let mut dl = Mat::zeros(lv.rows, lv.cols);
                if n > 0 {
                    let scale = g.scalar() / n as f64;
                    for i in 0..lv.rows {
                        if !row_mask[i] {
                            continue;
                        }
                        let p = softmax_row(lv.row(i));
                        for j in 0..lv.cols {
                            let onehot = f64::from(j == targets[i]);
                            dl.data[i * lv.cols + j] = scale * (p[j] - onehot);
                        }
                    }
                }
                add_to(grads, *logits, dl);
            }
            Op::SoftKl { student, teacher_probs, row_mask } => {
                let sv = self.value(*student);
                let n = row_mask.iter().filter(|&&b| b).count();
                let mut ds = Mat::zeros(sv.rows, sv.cols);
                if n > 0 {
                    let scale = g.scalar() / n as f64;
                    for i in 0..sv.rows {
                        if !row_mask[i] {
                            continue;
                        }
                        let p = softmax_row(sv.row(i));
                        for j in 0..sv.cols {
                            ds.data[i * sv.cols + j] =
                                scale * (p[j] - teacher_probs.data[i * sv.cols + j]);
                        }
                    }
                }
                add_to(grads, *student, ds);
            }
        }
    }
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..chunks {
        let i = k * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn col_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for i in 0..m.rows {
        for j in 0..m.cols {
            out.data[j] += m.data[i * m.cols + j];
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    let lse = m + z.ln();
    row.iter().map(|x| x - lse).collect()
}

fn masked_softmax_value(a: &Mat, mask: Option<&BoolMask>) -> Mat {
    let (r, c) = a.shape();
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let row = a.row(i);
        let allowed = |j: usize| mask.is_none_or(|m| m.at(i, j));
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if allowed(j) {
                max = max.max(row[j]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // nothing allowed: the row stays exactly zero
        }
        let mut z = 0.0;
        for j in 0..c {
            if allowed(j) {
                let e = (row[j] - max).exp();
                out.data[i * c + j] = e;
                z += e;
            }
        }
        for j in 0..c {
            out.data[i * c + j] /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of a scalar-valued graph with respect to one
    /// leaf matrix.
    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, init: Mat, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(init.clone(), true);
        let loss = build(&mut tape, x);
        assert_eq!(tape.value(loss).shape(), (1, 1));
        let grads = tape.backward(loss);
        let analytic = grads[x.id()].clone().expect("leaf gradient");

        let h = 1e-5;
        for k in 0..init.data.len() {
            let mut plus = init.clone();
            plus.data[k] += h;
            let mut minus = init.clone();
            minus.data[k] -= h;
            let f = |m: Mat| {
                let mut t = Tape::new();
                let v = t.leaf(m, false);
                let l = build(&mut t, v);
                t.value(l).scalar()
            };
            let numeric = (f(plus) - f(minus)) / (2.0 * h);
            let a = analytic.data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < tol,
                "entry {k}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    /// Reduce to a scalar through a fixed random linear functional so the
    /// full Jacobian of the op under test is exercised.
    fn weighted_sum(tape: &mut Tape, v: Var, weights: &Mat) -> Var {
        let (r, c) = tape.value(v).shape();
        assert_eq!(weights.shape(), (r, c));
        let weighted = tape.hadamard_const(v, weights.clone());
        let ones_r = tape.constant(Mat { rows: 1, cols: r, data: vec![1.0; r] });
        let ones_c = tape.constant(Mat { rows: c, cols: 1, data: vec![1.0; c] });
        let rowsum = tape.matmul(ones_r, weighted);
        tape.matmul(rowsum, ones_c)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Mat::randn(3, 4, 1.0, &mut rng);
        let c = Mat::randn(2, 4, 1.0, &mut rng);
        let x0 = Mat::randn(2, 3, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv);
                weighted_sum(t, y, &c)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Mat::randn(4, 3, 1.0, &mut rng);
        let c = Mat::randn(2, 4, 1.0, &mut rng);
        let x0 = Mat::randn(2, 3, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul_nt(x, wv);
                weighted_sum(t, y, &c)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Mat::randn(3, 5, 1.0, &mut rng);
        let c = Mat::randn(3, 5, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let y = t.layer_norm(x);
                weighted_sum(t, y, &c)
            },
            x0,
            1e-4,
        );
    }

    #[test]
    fn masked_softmax_gradients_and_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Mat::randn(2, 4, 1.0, &mut rng);
        let mut mask = BoolMask::full(2, 4);
        mask.set(0, 1, false);
        mask.set(1, 3, false);
        let mask2 = mask.clone();

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), false);
        let p = tape.masked_softmax(x, Some(mask.clone()));
        let pv = tape.value(p);
        assert_eq!(pv.at(0, 1), 0.0);
        assert_eq!(pv.at(1, 3), 0.0);
        for i in 0..2 {
            let s: f64 = pv.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(31);
        let c = Mat::randn(2, 4, 1.0, &mut rng2);
        fd_check(
            move |t, x| {
                let p = t.masked_softmax(x, Some(mask2.clone()));
                weighted_sum(t, p, &c)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_empty_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::row_vector(vec![1.0, 2.0]), false);
        let mask = BoolMask { rows: 1, cols: 2, allowed: vec![false, false] };
        let p = tape.masked_softmax(x, Some(mask));
        assert_eq!(tape.value(p).data, vec![0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Mat::randn(3, 5, 1.0, &mut rng);
        fd_check(
            |t, x| t.cross_entropy(x, vec![0, 2, 4], vec![true, true, false]),
            x0,
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::zeros(2, 4), false);
        let l = tape.cross_entropy(x, vec![1, 3], vec![true, true]);
        assert!((tape.value(l).scalar() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::zeros(2, 4), true);
        let l = tape.cross_entropy(x, vec![1, 3], vec![false, false]);
        assert_eq!(tape.value(l).scalar(), 0.0);
        let grads = tape.backward(l);
        assert_eq!(grads[x.id()].as_ref().unwrap().data, vec![0.0; 8]);
    }

    #[test]
    fn soft_kl_gradients_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Mat::randn(2, 4, 1.0, &mut rng);
        let teacher = {
            let logits = Mat::randn(2, 4, 1.0, &mut rng);
            let mut p = Mat::zeros(2, 4);
            for i in 0..2 {
                let sm = softmax_row(logits.row(i));
                p.data[i * 4..(i + 1) * 4].copy_from_slice(&sm);
            }
            p
        };
        let t2 = teacher.clone();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), false);
        let kl = tape.soft_kl(x, teacher, vec![true, true]);
        assert!(tape.value(kl).scalar() >= 0.0);
        fd_check(move |t, x| t.soft_kl(x, t2.clone(), vec![true, true]), x0, 1e-6);
    }

    #[test]
    fn gather_slice_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Mat::randn(4, 6, 1.0, &mut rng);
        let c = Mat::randn(3, 6, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let g = t.gather(x, vec![1, 1, 3]);
                let a = t.slice_cols(g, 0, 3);
                let b = t.slice_cols(g, 3, 3);
                let cat = t.concat_cols(&[b, a]);
                weighted_sum(t, cat, &c)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Mat::randn(4, 3, 1.0, &mut rng);
        let c = Mat::randn(3, 3, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let top = t.slice_rows(x, 0, 1);
                let mid = t.slice_rows(x, 1, 2);
                let stack = t.concat_rows(&[mid, top]);
                weighted_sum(t, stack, &c)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn relu_add_row_mul_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Mat::randn(3, 4, 1.0, &mut rng);
        let row = Mat::randn(1, 4, 1.0, &mut rng);
        let gain = Mat::randn(1, 4, 1.0, &mut rng);
        let c = Mat::randn(3, 4, 1.0, &mut rng);
        fd_check(
            move |t, x| {
                let r = t.constant(row.clone());
                let g = t.constant(gain.clone());
                let y = t.add_row(x, r);
                let z = t.relu(y);
                let w = t.mul_row(z, g);
                weighted_sum(t, w, &c)
            },
            x0,
            1e-4,
        );
    }
}
