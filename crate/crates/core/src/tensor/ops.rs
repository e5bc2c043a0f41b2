use super::graph::{accumulate, adjoint_mut, Graph, Node, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Target distribution for one row of [`Graph::softmax_cross_entropy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Index(usize),
    Probs(Vec<f64>),
}

impl Target {
    pub fn uniform(k: usize) -> Self {
        Target::Probs(vec![1.0 / k as f64; k])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Option<Var>, rows: usize, din: usize, dout: usize },
    Relu { input: Var },
    Mean { input: Var, outer: usize, len: usize, inner: usize },
    SumAll { input: Var },
    SqDist { a: Var, bs: Var, groups: usize, m: usize, k: usize, d: usize },
    SqrtEps { input: Var },
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
    Scale { input: Var, factor: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Reshape { input: Var },
    Gather { input: Var, map: Vec<usize> },
    Concat { inputs: Vec<Var> },
    L2Normalize { input: Var, norms: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::Mean { .. } => "mean_over_axis",
            Op::SumAll { .. } => "sum",
            Op::SqDist { .. } => "pairwise_sq_euclidean",
            Op::SqrtEps { .. } => "sqrt",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Linear { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Mean { input, .. }
            | Op::SumAll { input }
            | Op::SqrtEps { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input }
            | Op::Gather { input, .. }
            | Op::L2Normalize { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SqDist { a, bs, .. } => vec![*a, *bs],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
        }
    }

    /// Propagates `upstream` (d loss / d output) into the adjoints of this
    /// op's inputs.
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        upstream: &[f64],
        adjoints: &mut [Option<Vec<f64>>],
    ) {
        let val = |v: &Var| nodes[v.0].value.data();
        match self {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                conv2d_backward(nodes, adjoints, *input, *weight, *bias, geom, upstream)
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(g) = adjoint_mut(adjoints, nodes, *input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src] += upstream[o];
                    }
                }
            }
            Op::Linear { input, weight, bias, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                let x = val(input);
                let w = val(weight);
                if let Some(gx) = adjoint_mut(adjoints, nodes, *input) {
                    // gx[rows, din] += g[rows, dout] . w[dout, din]
                    gemm(rows, dout, din, (upstream, dout, 1), (w, din, 1), (gx, din, 1));
                }
                if let Some(gw) = adjoint_mut(adjoints, nodes, *weight) {
                    // gw[dout, din] += g^T[dout, rows] . x[rows, din]
                    gemm(dout, rows, din, (upstream, 1, dout), (x, din, 1), (gw, din, 1));
                }
                if let Some(b) = bias {
                    if let Some(gb) = adjoint_mut(adjoints, nodes, *b) {
                        for r in 0..rows {
                            for o in 0..dout {
                                gb[o] += upstream[r * dout + o];
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = val(input);
                let delta: Vec<f64> = x
                    .iter()
                    .zip(upstream)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(adjoints, nodes, *input, &delta);
            }
            Op::Mean { input, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(g) = adjoint_mut(adjoints, nodes, *input) {
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                g[(o * len + l) * inner + i] += upstream[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll { input } => {
                if let Some(g) = adjoint_mut(adjoints, nodes, *input) {
                    g.iter_mut().for_each(|v| *v += upstream[0]);
                }
            }
            Op::SqDist { a, bs, groups, m, k, d } => {
                let (groups, m, k, d) = (*groups, *m, *k, *d);
                let av = val(a);
                let bv = val(bs);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for gi in 0..groups {
                    for mi in 0..m {
                        let arow = (gi * m + mi) * d;
                        for ki in 0..k {
                            let brow = (gi * k + ki) * d;
                            let g = 2.0 * upstream[(gi * m + mi) * k + ki];
                            if g == 0.0 {
                                continue;
                            }
                            for di in 0..d {
                                let diff = g * (av[arow + di] - bv[brow + di]);
                                ga[arow + di] += diff;
                                gb[brow + di] -= diff;
                            }
                        }
                    }
                }
                accumulate(adjoints, nodes, *a, &ga);
                accumulate(adjoints, nodes, *bs, &gb);
            }
            Op::SqrtEps { input, .. } => {
                let delta: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(upstream)
                    .map(|(&y, &g)| g * 0.5 / y)
                    .collect();
                accumulate(adjoints, nodes, *input, &delta);
            }
            Op::CrossEntropy { logits, dlogits } => {
                let delta: Vec<f64> = dlogits.iter().map(|&d| d * upstream[0]).collect();
                accumulate(adjoints, nodes, *logits, &delta);
            }
            Op::Scale { input, factor } => {
                let delta: Vec<f64> = upstream.iter().map(|&g| g * factor).collect();
                accumulate(adjoints, nodes, *input, &delta);
            }
            Op::Add { a, b } => {
                accumulate(adjoints, nodes, *a, upstream);
                accumulate(adjoints, nodes, *b, upstream);
            }
            Op::Sub { a, b } => {
                accumulate(adjoints, nodes, *a, upstream);
                let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
                accumulate(adjoints, nodes, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = upstream.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = upstream.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                accumulate(adjoints, nodes, *a, &da);
                accumulate(adjoints, nodes, *b, &db);
            }
            Op::Reshape { input } => accumulate(adjoints, nodes, *input, upstream),
            Op::Gather { input, map } => {
                if let Some(g) = adjoint_mut(adjoints, nodes, *input) {
                    for (o, &src) in map.iter().enumerate() {
                        g[src] += upstream[o];
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let n = nodes[v.0].value.numel();
                    accumulate(adjoints, nodes, *v, &upstream[offset..offset + n]);
                    offset += n;
                }
            }
            Op::L2Normalize { input, norms } => {
                let x = val(input);
                let d = x.len() / norms.len();
                let mut delta = vec![0.0; x.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &upstream[r * d..(r + 1) * d];
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let n3 = n * n * n;
                    for i in 0..d {
                        delta[r * d + i] = gr[i] / n - xr[i] * dot / n3;
                    }
                }
                accumulate(adjoints, nodes, *input, &delta);
            }
        }
    }
}

fn conv2d_backward(
    nodes: &[Node],
    adjoints: &mut [Option<Vec<f64>>],
    input: Var,
    weight: Var,
    bias: Var,
    g: &ConvGeom,
    upstream: &[f64],
) {
    let x = nodes[input.0].value.data();
    let w = nodes[weight.0].value.data();
    let out_plane = g.oh * g.ow;

    if let Some(gb) = adjoint_mut(adjoints, nodes, bias) {
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let base = (b * g.cout + co) * out_plane;
                *acc += upstream[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }

    let want_x = nodes[input.0].value.requires_grad();
    let want_w = nodes[weight.0].value.requires_grad();
    if !want_x && !want_w {
        return;
    }
    let k = g.cin * g.kh * g.kw;
    let in_len = g.cin * g.h * g.w;
    let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
    let chunk = conv_chunk(g);
    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let cols = nb * out_plane;
        // Upstream gradient as [Cout, nb*P].
        let mut gout = vec![0.0; g.cout * cols];
        for b in 0..nb {
            for co in 0..g.cout {
                gout[co * cols + b * out_plane..][..out_plane]
                    .copy_from_slice(&upstream[((start + b) * g.cout + co) * out_plane..][..out_plane]);
            }
        }
        if want_w {
            let col = im2col(&x[start * in_len..][..nb * in_len], nb, g);
            // gw[cout, k] += gout[cout, cols] . col^T
            gemm(g.cout, cols, k, (&gout, cols, 1), (&col, 1, cols), (&mut gw, k, 1));
        }
        if want_x {
            let mut gcol = vec![0.0; k * cols];
            // gcol[k, cols] = w^T[k, cout] . gout[cout, cols]
            gemm(k, g.cout, cols, (w, 1, k), (&gout, cols, 1), (&mut gcol, cols, 1));
            col2im(&gcol, nb, g, &mut gx[start * in_len..][..nb * in_len]);
        }
    }
    if want_x {
        accumulate(adjoints, nodes, input, &gx);
    }
    if want_w {
        accumulate(adjoints, nodes, weight, &gw);
    }
}

/// Images per im2col block, keeping the column buffer near 8 MB.
fn conv_chunk(g: &ConvGeom) -> usize {
    let per_image = (g.cin * g.kh * g.kw * g.oh * g.ow).max(1);
    ((1 << 20) / per_image).clamp(1, g.batch.max(1))
}

/// `c += a . b` for an `m x k` by `k x n` product. Each operand is a slice
/// with its (row stride, column stride).
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: (&mut [f64], usize, usize)) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2));
    }
    assert!(c.0.len() >= span(m, n, c.1, c.2));
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Unfolds `nb` images `[Cin, H, W]` into patch columns `[Cin*kh*kw, nb*oh*ow]`;
/// padded positions are zero.
fn im2col(x: &[f64], nb: usize, g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let cols = nb * out_plane;
    let mut col = vec![0.0; g.cin * g.kh * g.kw * cols];
    for b in 0..nb {
        for ci in 0..g.cin {
            let plane = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (ci * g.kh + ki) * g.kw + kj;
                    let dst = &mut col[r * cols + b * out_plane..][..out_plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst[oy * g.ow..][..g.ow].iter_mut().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the images.
fn col2im(col: &[f64], nb: usize, g: &ConvGeom, x: &mut [f64]) {
    let out_plane = g.oh * g.ow;
    let cols = nb * out_plane;
    for b in 0..nb {
        for ci in 0..g.cin {
            let plane = &mut x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (ci * g.kh + ki) * g.kw + kj;
                    let src = &col[r * cols + b * out_plane..][..out_plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                drow[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

impl Graph {
    /// 2-D cross-correlation plus per-channel bias. `input` is `[Cin,H,W]` or
    /// a batch `[B,Cin,H,W]`; `weight` is `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        let (batch, batched) = match ishape.len() {
            3 => (1, false),
            4 => (ishape[0], true),
            _ => return Err(Error::dim("conv2d", &ishape, &wshape)),
        };
        let off = usize::from(batched);
        if wshape.len() != 4 || wshape[1] != ishape[off] {
            return Err(Error::dim("conv2d", &ishape, &wshape));
        }
        if bshape != [wshape[0]] {
            return Err(Error::dim("conv2d", &wshape, &bshape));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (cin, h, w) = (ishape[off], ishape[off + 1], ishape[off + 2]);
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return Err(Error::dim("conv2d", &ishape, &wshape));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: (h + 2 * padding.0 - kh) / stride.0 + 1,
            ow: (w + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let out = conv2d_forward(self.data(input), self.data(weight), self.data(bias), &geom);
        let mut oshape = vec![cout, geom.oh, geom.ow];
        if batched {
            oshape.insert(0, batch);
        }
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }))
    }

    /// Non-overlapping max pooling with a square window over the last two
    /// axes. Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || window == 0 || shape[shape.len() - 2] < window || shape[shape.len() - 1] < window {
            return Err(Error::Contract(format!("max_pool2d window {window} on shape {shape:?}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / window, w / window);
        let planes: usize = shape[..r - 2].iter().product();
        let x = self.data(input);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape[..r - 2].to_vec();
        oshape.extend([oh, ow]);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    /// Affine map over the trailing axis: `x @ weight^T + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.is_empty() || wshape.len() != 2 || *ishape.last().unwrap() != wshape[1] {
            return Err(Error::dim("linear", &ishape, &wshape));
        }
        let (dout, din) = (wshape[0], wshape[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear", &wshape, self.shape(b)));
            }
        }
        let rows = self.value(input).numel() / din;
        let x = self.data(input);
        let w = self.data(weight);
        let b = bias.map(|b| self.data(b));
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            out.chunks_mut(dout).for_each(|row| row.copy_from_slice(b));
        }
        // out[rows, dout] += x[rows, din] . w^T
        gemm(rows, din, dout, (x, din, 1), (w, 1, din), (&mut out, dout, 1));
        let mut oshape = ishape[..ishape.len() - 1].to_vec();
        oshape.push(dout);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias, rows, din, dout }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        self.push(value, Op::Relu { input })
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(input);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Mean { input, outer, len, inner }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { input })
    }

    /// Squared Euclidean distances from each query row to each candidate row.
    ///
    /// Accepted layouts: `a[D]` vs `bs[K,D]` → `[K]`; `a[M,D]` vs `bs[K,D]`
    /// → `[M,K]`; batched `a[G,M,D]` vs `bs[G,K,D]` → `[G,M,K]`.
    pub fn pairwise_sq_euclidean(&mut self, a: Var, bs: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(bs).to_vec();
        let err = || Error::dim("pairwise_sq_euclidean", &ashape, &bshape);
        let (groups, m, k, d, oshape) = match (ashape.len(), bshape.len()) {
            (1, 2) => (1, 1, bshape[0], ashape[0], vec![bshape[0]]),
            (2, 2) => (1, ashape[0], bshape[0], ashape[1], vec![ashape[0], bshape[0]]),
            (3, 3) if ashape[0] == bshape[0] => (
                ashape[0],
                ashape[1],
                bshape[1],
                ashape[2],
                vec![ashape[0], ashape[1], bshape[1]],
            ),
            _ => return Err(err()),
        };
        if *bshape.last().unwrap() != d {
            return Err(err());
        }
        let av = self.data(a);
        let bv = self.data(bs);
        let mut out = Vec::with_capacity(groups * m * k);
        for gi in 0..groups {
            for mi in 0..m {
                let ar = &av[(gi * m + mi) * d..][..d];
                for ki in 0..k {
                    let br = &bv[(gi * k + ki) * d..][..d];
                    out.push(ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
        }
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::SqDist { a, bs, groups, m, k, d }))
    }

    /// Elementwise `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, input: Var, eps: f64) -> Var {
        let t = self.value(input);
        let value = Tensor::from_fn(t.shape(), |i| (t.data()[i] + eps).sqrt());
        self.push(value, Op::SqrtEps { input })
    }

    /// Mean over rows of `-Σ_k t_k log softmax(logits)_k`. The last axis of
    /// `logits` holds the K classes; `targets` has one entry per row, or a
    /// single entry applied to every row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Target]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let k = *shape.last().ok_or_else(|| Error::Contract("cross entropy on a scalar".into()))?;
        if k < 2 {
            return Err(Error::Degenerate(format!("cross entropy needs K >= 2, got {k}")));
        }
        let rows = self.value(logits).numel() / k;
        if targets.len() != 1 && targets.len() != rows {
            return Err(Error::Contract(format!(
                "{} targets for {rows} rows of logits",
                targets.len()
            )));
        }
        let mut dense = vec![0.0; rows * k];
        for r in 0..rows {
            let t = if targets.len() == 1 { &targets[0] } else { &targets[r] };
            let row = &mut dense[r * k..(r + 1) * k];
            match t {
                Target::Index(i) => {
                    if *i >= k {
                        return Err(Error::Contract(format!("target index {i} >= {k} classes")));
                    }
                    row[*i] = 1.0;
                }
                Target::Probs(p) => {
                    if p.len() != k {
                        return Err(Error::dim("softmax_cross_entropy", &shape, &[p.len()]));
                    }
                    let s: f64 = p.iter().sum();
                    if (s - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
                        return Err(Error::Contract(format!(
                            "probability target must be non-negative and sum to 1, sums to {s}"
                        )));
                    }
                    row.copy_from_slice(p);
                }
            }
        }

        let x = self.data(logits);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows * k];
        let inv_rows = 1.0 / rows as f64;
        for r in 0..rows {
            let lr = &x[r * k..(r + 1) * k];
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = lr.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for j in 0..k {
                let t = dense[r * k + j];
                let logp = lr[j] - lse;
                loss -= t * logp;
                dlogits[r * k + j] = (logp.exp() - t) * inv_rows;
            }
        }
        let value = Tensor::scalar(loss * inv_rows);
        Ok(self.push(value, Op::CrossEntropy { logits, dlogits }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let t = self.value(input);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        self.push(value, Op::Scale { input, factor })
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.scale(input, -1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i], tb.data()[i]));
        Ok(self.push(value, op(a, b)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Contract(format!("invalid permutation {axes:?} for rank {r}")));
        }
        let mut in_strides = vec![1; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; r];
        for _ in 0..numel {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < oshape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather_with_map(input, oshape, map)
    }

    /// Selects rows along the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return Err(Error::Contract("gather_rows on a scalar".into()));
        }
        let stride = self.value(input).numel() / shape[0];
        let mut map = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= shape[0] {
                return Err(Error::Contract(format!("row {i} out of range for shape {shape:?}")));
            }
            map.extend(i * stride..(i + 1) * stride);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        self.gather_with_map(input, oshape, map)
    }

    fn gather_with_map(&mut self, input: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let x = self.data(input);
        let data = map.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { input, map }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in inputs {
            let s = self.shape(*v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(*v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }))
    }

    /// Scales each trailing-axis vector to unit norm, `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Result<Var> {
        let t = self.value(input);
        let d = *t.shape().last().ok_or_else(|| Error::Contract("l2_normalize on a scalar".into()))?;
        let rows = t.numel() / d.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let xr = &t.data()[r * d..(r + 1) * d];
            let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(n);
            data.extend(xr.iter().map(|v| v / n));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { input, norms }))
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.cout * out_plane];
    let chunk = conv_chunk(g);
    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let cols = nb * out_plane;
        let col = im2col(&x[start * in_len..][..nb * in_len], nb, g);
        let mut acc = vec![0.0; g.cout * cols];
        for (co, row) in acc.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(g.cout, k, cols, (w, k, 1), (&col, cols, 1), (&mut acc, cols, 1));
        for co in 0..g.cout {
            for b in 0..nb {
                out[((start + b) * g.cout + co) * out_plane..][..out_plane]
                    .copy_from_slice(&acc[co * cols + b * out_plane..][..out_plane]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn conv2d_scalar_kernel_scales_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 3, 3], &[1.0; 9]);
        let w = leaf(&mut g, &[1, 1, 1, 1], &[2.0]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let y = g.conv2d(x, w, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.data(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_zero_weights_give_zero_output() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 4, 4], &(0..32).map(|i| i as f64).collect::<Vec<_>>());
        let w = leaf(&mut g, &[3, 2, 3, 3], &[0.0; 54]);
        let b = leaf(&mut g, &[3], &[0.0; 3]);
        let y = g.conv2d(x, w, b, (1, 1), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 4]);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 4, 4], &[0.0; 32]);
        let w = leaf(&mut g, &[1, 3, 3, 3], &[0.0; 27]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let err = g.conv2d(x, w, b, (1, 1), (0, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_output_geometry() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 7, 6], &[1.0; 42]);
        let w = leaf(&mut g, &[1, 1, 3, 2], &[1.0; 6]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let y = g.conv2d(x, w, b, (2, 3), (1, 0)).unwrap();
        // (7 + 2 - 3) / 2 + 1 = 4, (6 - 2) / 3 + 1 = 2
        assert_eq!(g.shape(y), &[1, 4, 2]);
    }

    #[test]
    fn linear_hand_values() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let w = leaf(&mut g, &[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        let b = leaf(&mut g, &[2], &[0.0, 0.0]);
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[3.0, -1.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let w = leaf(&mut g, &[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn linear_trailing_mismatch() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let w = leaf(&mut g, &[2, 2], &[0.0; 4]);
        assert!(matches!(g.linear(x, w, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[4], &[-1.0, -0.5, -3.0, -0.1]);
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_over_axis_values() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let m0 = g.mean_over_axis(x, 0).unwrap();
        assert_eq!(g.data(m0), &[3.0, 5.0]);
        let m1 = g.mean_over_axis(x, 1).unwrap();
        assert_eq!(g.data(m1), &[2.0, 6.0]);
        assert!(g.mean_over_axis(x, 2).is_err());

        let y = leaf(&mut g, &[1, 3], &[4.0, 5.0, 6.0]);
        let m = g.mean_over_axis(y, 0).unwrap();
        assert_eq!(g.data(m), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn sq_euclidean_hand_values() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[0.0, 0.0]);
        let bs = leaf(&mut g, &[1, 2], &[3.0, 4.0]);
        let d = g.pairwise_sq_euclidean(a, bs).unwrap();
        assert_eq!(g.data(d), &[25.0]);

        let a = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let bs = leaf(&mut g, &[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let d = g.pairwise_sq_euclidean(a, bs).unwrap();
        assert_eq!(g.data(d)[0], 0.0);

        let bad = leaf(&mut g, &[2, 2], &[0.0; 4]);
        assert!(g.pairwise_sq_euclidean(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[4], &[0.7; 4]);
        let l = g.softmax_cross_entropy(x, &[Target::Index(2)]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[30.0, -30.0]);
        let l = g.softmax_cross_entropy(x, &[Target::Index(0)]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        assert!(g.softmax_cross_entropy(x, &[Target::Probs(vec![0.5, 0.4, 0.0])]).is_err());
        assert!(g.softmax_cross_entropy(x, &[Target::Index(3)]).is_err());
        let one = leaf(&mut g, &[1], &[1.0]);
        assert!(matches!(
            g.softmax_cross_entropy(one, &[Target::Index(0)]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let data = [1.0, -2.0, 0.5, 3.0, 0.0, -1.5];
        let x = leaf(&mut g, &[2, 3], &data);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), &data);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn permute_transposes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let t = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            &[1, 4, 4],
            &[1., 2., 0., 0., 3., 4., 0., 9., 0., 0., 5., 0., -1., 0., 0., 6.],
        );
        let y = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.data(y), &[4., 9., 0., 6.]);
    }
}
