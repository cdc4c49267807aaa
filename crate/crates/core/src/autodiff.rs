//! Dense row-major matrices and a small reverse-mode tape over them.
//!
//! Only the operations the policy network needs are provided. Parameters are
//! leaves borrowed from a slice; every other value lives on the tape.

use std::rc::Rc;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c += a * b[b_off..b_off + a.cols, :]`.
fn matmul_acc(a: &Matrix, b: &Matrix, b_off: usize, c: &mut Matrix) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let block = &b.data[b_off * n..(b_off + k) * n];
    // SAFETY: every operand slice covers the strided extents passed.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.data.as_ptr(), k as isize, 1,
            block.as_ptr(), n as isize, 1,
            1.0, c.data.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `da += dc * b[b_off.., :]^T`.
fn matmul_grad_a(dc: &Matrix, b: &Matrix, b_off: usize, da: &mut Matrix) {
    let (m, k, n) = (da.rows, da.cols, b.cols);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let block = &b.data[b_off * n..(b_off + k) * n];
    // SAFETY: as above; the block is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            dc.data.as_ptr(), n as isize, 1,
            block.as_ptr(), 1, n as isize,
            1.0, da.data.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `db[b_off.., :] += a^T * dc`.
fn matmul_grad_b(a: &Matrix, dc: &Matrix, b_off: usize, db: &mut Matrix) {
    let (m, k, n) = (a.rows, a.cols, dc.cols);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let block = &mut db.data[b_off * n..(b_off + k) * n];
    // SAFETY: as above; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.data.as_ptr(), 1, k as isize,
            dc.data.as_ptr(), n as isize, 1,
            1.0, block.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Handle to a tape value or a parameter leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Param(usize),
    Node(usize),
}

#[derive(Debug)]
enum Op {
    Const,
    MatMul(Var, Var),
    /// `a * w[offset..offset + a.cols, :]`
    MatMulRows { a: Var, w: Var, offset: usize },
    /// Adds a `1 x cols` row to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Gather(Var, Rc<[u32]>),
    ScatterAdd(Var, Rc<[u32]>),
    Concat(Vec<Var>),
    Tanh(Var),
    LeakyRelu(Var, f64),
    /// Per-head dot product of row blocks with a `1 x (heads * width)` vector.
    HeadDot { a: Var, w: Var, heads: usize },
    /// Column-wise softmax over rows sharing a segment id.
    SegmentSoftmax { a: Var, seg: Rc<[u32]> },
    /// Scales each head block of `a` by the matching column of `s`.
    ScaleHeads { a: Var, s: Var },
    EdgeMessage {
        from_src: Var,
        from_edge: Var,
        from_dst: Var,
        bias: Var,
        src: Rc<[u32]>,
        dst: Rc<[u32]>,
    },
    Attend {
        v: Var,
        alpha: Var,
        src: Rc<[u32]>,
        dst: Rc<[u32]>,
    },
}

/// Records a computation for one backward pass.
pub struct Tape<'p> {
    params: &'p [Matrix],
    vals: Vec<Matrix>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Tape {
            params,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match v {
            Var::Param(i) => &self.params[i],
            Var::Node(i) => &self.vals[i],
        }
    }

    fn push(&mut self, m: Matrix, op: Op) -> Var {
        self.vals.push(m);
        self.ops.push(op);
        Var::Node(self.vals.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.rows, "matmul shape mismatch");
        let mut c = Matrix::zeros(am.rows, bm.cols);
        matmul_acc(am, bm, 0, &mut c);
        self.push(c, Op::MatMul(a, b))
    }

    /// `a` times the row block of `w` starting at `offset`.
    pub fn matmul_rows(&mut self, a: Var, w: Var, offset: usize) -> Var {
        let (am, wm) = (self.value(a), self.value(w));
        assert!(offset + am.cols <= wm.rows, "row block out of range");
        let mut c = Matrix::zeros(am.rows, wm.cols);
        matmul_acc(am, wm, offset, &mut c);
        self.push(c, Op::MatMulRows { a, w, offset })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((rm.rows, rm.cols), (1, am.cols), "row broadcast shape mismatch");
        let mut c = am.clone();
        for r in 0..c.rows {
            for (x, b) in c.row_mut(r).iter_mut().zip(&rm.data) {
                *x += b;
            }
        }
        self.push(c, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut c = self.value(a).clone();
        let bm = self.value(b);
        assert_eq!((c.rows, c.cols), (bm.rows, bm.cols), "add shape mismatch");
        c.add_assign(bm);
        self.push(c, Op::Add(a, b))
    }

    /// Row `r` of the result is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Rc<[u32]>) -> Var {
        let am = self.value(a);
        let mut c = Matrix::zeros(idx.len(), am.cols);
        for (r, &i) in idx.iter().enumerate() {
            c.row_mut(r).copy_from_slice(am.row(i as usize));
        }
        self.push(c, Op::Gather(a, idx))
    }

    /// Sums row `r` of `a` into row `idx[r]` of a `rows x cols` result.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[u32]>, rows: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows, idx.len(), "scatter index length mismatch");
        let mut c = Matrix::zeros(rows, am.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (x, y) in c.row_mut(i as usize).iter_mut().zip(am.row(r)) {
                *x += y;
            }
        }
        self.push(c, Op::ScatterAdd(a, idx))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut c = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows, rows, "concat row mismatch");
            for r in 0..rows {
                c.row_mut(r)[off..off + pm.cols].copy_from_slice(pm.row(r));
            }
            off += pm.cols;
        }
        self.push(c, Op::Concat(parts.to_vec()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut c = self.value(a).clone();
        c.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(c, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut c = self.value(a).clone();
        c.data.iter_mut().for_each(|x| {
            if *x < 0.0 {
                *x *= slope
            }
        });
        self.push(c, Op::LeakyRelu(a, slope))
    }

    /// `out[r, k] = sum_c a[r, k*w + c] * v[k*w + c]` with `w = a.cols / heads`.
    pub fn head_dot(&mut self, a: Var, w: Var, heads: usize) -> Var {
        let (am, wm) = (self.value(a), self.value(w));
        assert_eq!((wm.rows, wm.cols), (1, am.cols), "head vector shape mismatch");
        let width = am.cols / heads;
        let mut c = Matrix::zeros(am.rows, heads);
        for r in 0..am.rows {
            let row = am.row(r);
            for k in 0..heads {
                let s = k * width..(k + 1) * width;
                c.data[r * heads + k] = row[s.clone()].iter().zip(&wm.data[s]).map(|(x, y)| x * y).sum();
            }
        }
        self.push(c, Op::HeadDot { a, w, heads })
    }

    /// Softmax of each column over the rows that share a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<[u32]>, segments: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows, seg.len(), "segment index length mismatch");
        let cols = am.cols;
        let mut max = vec![f64::NEG_INFINITY; segments * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s as usize * cols + c];
                *m = m.max(am.data[r * cols + c]);
            }
        }
        let mut c = Matrix::zeros(am.rows, cols);
        let mut sum = vec![0.0; segments * cols];
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..cols {
                let e = (am.data[r * cols + k] - max[s as usize * cols + k]).exp();
                c.data[r * cols + k] = e;
                sum[s as usize * cols + k] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..cols {
                c.data[r * cols + k] /= sum[s as usize * cols + k];
            }
        }
        self.push(c, Op::SegmentSoftmax { a, seg })
    }

    /// `out[r, k*w + c] = a[r, k*w + c] * s[r, k]`.
    pub fn scale_heads(&mut self, a: Var, s: Var) -> Var {
        let (am, sm) = (self.value(a), self.value(s));
        assert_eq!(am.rows, sm.rows, "scale_heads row mismatch");
        let heads = sm.cols;
        let width = am.cols / heads;
        let mut c = am.clone();
        for r in 0..c.rows {
            for k in 0..heads {
                let f = sm.data[r * heads + k];
                c.row_mut(r)[k * width..(k + 1) * width].iter_mut().for_each(|x| *x *= f);
            }
        }
        self.push(c, Op::ScaleHeads { a, s })
    }

    /// Per-edge message `from_src[src[e]] + from_edge[e] + from_dst[dst[e]] + bias`.
    pub fn edge_message(
        &mut self,
        from_src: Var,
        from_edge: Var,
        from_dst: Var,
        bias: Var,
        src: Rc<[u32]>,
        dst: Rc<[u32]>,
    ) -> Var {
        let (ms, me, md, mb) = (
            self.value(from_src),
            self.value(from_edge),
            self.value(from_dst),
            self.value(bias),
        );
        let cols = me.cols;
        assert!(ms.cols == cols && md.cols == cols && mb.cols == cols && mb.rows == 1);
        assert!(src.len() == me.rows && dst.len() == me.rows);
        let mut c = me.clone();
        for e in 0..me.rows {
            let row = c.row_mut(e);
            let (a, b) = (ms.row(src[e] as usize), md.row(dst[e] as usize));
            for (k, x) in row.iter_mut().enumerate() {
                *x += a[k] + b[k] + mb.data[k];
            }
        }
        self.push(
            c,
            Op::EdgeMessage {
                from_src,
                from_edge,
                from_dst,
                bias,
                src,
                dst,
            },
        )
    }

    /// Attention-weighted sum of source values into destinations.
    ///
    /// `out[dst[e], k*w + c] += alpha[e, k] * v[src[e], k*w + c]` where
    /// `alpha` has one column per head.
    pub fn attend(&mut self, v: Var, alpha: Var, src: Rc<[u32]>, dst: Rc<[u32]>, rows: usize) -> Var {
        let (vm, am) = (self.value(v), self.value(alpha));
        let heads = am.cols;
        let width = vm.cols / heads;
        assert_eq!(am.rows, src.len());
        let mut c = Matrix::zeros(rows, vm.cols);
        for e in 0..src.len() {
            let (sv, d) = (src[e] as usize, dst[e] as usize);
            for k in 0..heads {
                let w = am.data[e * heads + k];
                let from = &vm.data[sv * vm.cols + k * width..sv * vm.cols + (k + 1) * width];
                let to = &mut c.data[d * vm.cols + k * width..d * vm.cols + (k + 1) * width];
                for (x, y) in to.iter_mut().zip(from) {
                    *x += w * y;
                }
            }
        }
        self.push(c, Op::Attend { v, alpha, src, dst })
    }

    /// Propagates `seeds` (d loss / d value) back through the tape and adds
    /// the parameter gradients into `grads`, which is shaped like the params.
    pub fn backward(&self, seeds: &[(Var, Matrix)], grads: &mut [Matrix]) {
        let mut g: Vec<Option<Matrix>> = (0..self.vals.len()).map(|_| None).collect();
        let acc = |g: &mut Vec<Option<Matrix>>, grads: &mut [Matrix], v: Var, d: Matrix| match v {
            Var::Param(i) => grads[i].add_assign(&d),
            Var::Node(i) => match &mut g[i] {
                Some(m) => m.add_assign(&d),
                slot @ None => *slot = Some(d),
            },
        };
        for (v, d) in seeds {
            acc(&mut g, grads, *v, d.clone());
        }

        for i in (0..self.ops.len()).rev() {
            let Some(dc) = g[i].take() else { continue };
            let out = &self.vals[i];
            match &self.ops[i] {
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    if !self.is_const(*a) {
                        let mut da = Matrix::zeros(am.rows, am.cols);
                        matmul_grad_a(&dc, bm, 0, &mut da);
                        acc(&mut g, grads, *a, da);
                    }
                    let mut db = Matrix::zeros(bm.rows, bm.cols);
                    matmul_grad_b(am, &dc, 0, &mut db);
                    acc(&mut g, grads, *b, db);
                }
                Op::MatMulRows { a, w, offset } => {
                    let (am, wm) = (self.value(*a), self.value(*w));
                    if !self.is_const(*a) {
                        let mut da = Matrix::zeros(am.rows, am.cols);
                        matmul_grad_a(&dc, wm, *offset, &mut da);
                        acc(&mut g, grads, *a, da);
                    }
                    match *w {
                        Var::Param(p) => matmul_grad_b(am, &dc, *offset, &mut grads[p]),
                        Var::Node(_) => {
                            let mut dw = Matrix::zeros(wm.rows, wm.cols);
                            matmul_grad_b(am, &dc, *offset, &mut dw);
                            acc(&mut g, grads, *w, dw);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, dc.cols);
                    for r in 0..dc.rows {
                        for (x, y) in dr.data.iter_mut().zip(dc.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut g, grads, *row, dr);
                    acc(&mut g, grads, *a, dc);
                }
                Op::Add(a, b) => {
                    acc(&mut g, grads, *b, dc.clone());
                    acc(&mut g, grads, *a, dc);
                }
                Op::Gather(a, idx) => {
                    let am = self.value(*a);
                    let mut da = Matrix::zeros(am.rows, am.cols);
                    for (r, &j) in idx.iter().enumerate() {
                        for (x, y) in da.row_mut(j as usize).iter_mut().zip(dc.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut g, grads, *a, da);
                }
                Op::ScatterAdd(a, idx) => {
                    let am = self.value(*a);
                    let mut da = Matrix::zeros(am.rows, am.cols);
                    for (r, &j) in idx.iter().enumerate() {
                        da.row_mut(r).copy_from_slice(dc.row(j as usize));
                    }
                    acc(&mut g, grads, *a, da);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut dp = Matrix::zeros(dc.rows, cols);
                        for r in 0..dc.rows {
                            dp.row_mut(r).copy_from_slice(&dc.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut g, grads, p, dp);
                    }
                }
                Op::Tanh(a) => {
                    let mut da = dc;
                    for (d, y) in da.data.iter_mut().zip(&out.data) {
                        *d *= 1.0 - y * y;
                    }
                    acc(&mut g, grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let am = self.value(*a);
                    let mut da = dc;
                    for (d, x) in da.data.iter_mut().zip(&am.data) {
                        if *x < 0.0 {
                            *d *= slope;
                        }
                    }
                    acc(&mut g, grads, *a, da);
                }
                Op::HeadDot { a, w, heads } => {
                    let (am, wm) = (self.value(*a), self.value(*w));
                    let width = am.cols / heads;
                    let mut da = Matrix::zeros(am.rows, am.cols);
                    let mut dw = Matrix::zeros(1, wm.cols);
                    for r in 0..am.rows {
                        for k in 0..*heads {
                            let d = dc.data[r * heads + k];
                            for c in k * width..(k + 1) * width {
                                da.data[r * am.cols + c] += d * wm.data[c];
                                dw.data[c] += d * am.data[r * am.cols + c];
                            }
                        }
                    }
                    acc(&mut g, grads, *w, dw);
                    acc(&mut g, grads, *a, da);
                }
                Op::SegmentSoftmax { a, seg } => {
                    let cols = out.cols;
                    let segments = seg.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
                    let mut dot = vec![0.0; segments * cols];
                    for (r, &s) in seg.iter().enumerate() {
                        for k in 0..cols {
                            dot[s as usize * cols + k] += out.data[r * cols + k] * dc.data[r * cols + k];
                        }
                    }
                    let mut da = Matrix::zeros(out.rows, cols);
                    for (r, &s) in seg.iter().enumerate() {
                        for k in 0..cols {
                            let y = out.data[r * cols + k];
                            da.data[r * cols + k] = y * (dc.data[r * cols + k] - dot[s as usize * cols + k]);
                        }
                    }
                    acc(&mut g, grads, *a, da);
                }
                Op::ScaleHeads { a, s } => {
                    let (am, sm) = (self.value(*a), self.value(*s));
                    let heads = sm.cols;
                    let width = am.cols / heads;
                    let mut da = Matrix::zeros(am.rows, am.cols);
                    let mut ds = Matrix::zeros(sm.rows, heads);
                    for r in 0..am.rows {
                        for k in 0..heads {
                            let f = sm.data[r * heads + k];
                            let mut acc_s = 0.0;
                            for c in k * width..(k + 1) * width {
                                let d = dc.data[r * am.cols + c];
                                da.data[r * am.cols + c] = d * f;
                                acc_s += d * am.data[r * am.cols + c];
                            }
                            ds.data[r * heads + k] = acc_s;
                        }
                    }
                    acc(&mut g, grads, *s, ds);
                    acc(&mut g, grads, *a, da);
                }
                Op::EdgeMessage {
                    from_src,
                    from_edge,
                    from_dst,
                    bias,
                    src,
                    dst,
                } => {
                    let cols = dc.cols;
                    let mut ds = Matrix::zeros(self.value(*from_src).rows, cols);
                    let mut dd = Matrix::zeros(self.value(*from_dst).rows, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for e in 0..dc.rows {
                        let g_row = dc.row(e);
                        for (x, y) in ds.row_mut(src[e] as usize).iter_mut().zip(g_row) {
                            *x += y;
                        }
                        for (x, y) in dd.row_mut(dst[e] as usize).iter_mut().zip(g_row) {
                            *x += y;
                        }
                        for (x, y) in db.data.iter_mut().zip(g_row) {
                            *x += y;
                        }
                    }
                    acc(&mut g, grads, *bias, db);
                    acc(&mut g, grads, *from_dst, dd);
                    acc(&mut g, grads, *from_src, ds);
                    acc(&mut g, grads, *from_edge, dc);
                }
                Op::Attend { v, alpha, src, dst } => {
                    let (vm, am) = (self.value(*v), self.value(*alpha));
                    let heads = am.cols;
                    let cols = vm.cols;
                    let width = cols / heads;
                    let mut dv = Matrix::zeros(vm.rows, cols);
                    let mut da = Matrix::zeros(am.rows, heads);
                    for e in 0..src.len() {
                        let (sv, d) = (src[e] as usize, dst[e] as usize);
                        for k in 0..heads {
                            let span = k * width..(k + 1) * width;
                            let gd = &dc.data[d * cols..(d + 1) * cols][span.clone()];
                            let vs = &vm.data[sv * cols..(sv + 1) * cols][span.clone()];
                            da.data[e * heads + k] = gd.iter().zip(vs).map(|(x, y)| x * y).sum();
                            let w = am.data[e * heads + k];
                            let to = &mut dv.data[sv * cols..(sv + 1) * cols][span];
                            for (x, y) in to.iter_mut().zip(gd) {
                                *x += w * y;
                            }
                        }
                    }
                    acc(&mut g, grads, *alpha, da);
                    acc(&mut g, grads, *v, dv);
                }
            }
        }
    }

    fn is_const(&self, v: Var) -> bool {
        matches!(v, Var::Node(i) if matches!(self.ops[i], Op::Const))
    }
}
