//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! the chosen output (summed over its elements) with respect to every node
//! that requires one. Nodes are addressed by the copyable [`Var`] handle.

use std::ops::Range;

use super::gemm::{gemm, Trans};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

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
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Affine {
        x: Var,
        scale: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Softmax(Var),
    Bilinear {
        fmap: Var,
        coords: Var,
    },
    GatherCells {
        fmap: Var,
        cells: Vec<usize>,
    },
    ScatterCells {
        x: Var,
        cells: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Focal {
        p: Var,
        target: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    WeightedSum {
        x: Var,
        weights: Option<Vec<f64>>,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.col_cols();
        let mut col = vec![0.0; self.col_rows() * n];
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.col_cols();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn bilinear_corner(coord: f64, size: usize) -> (usize, usize, f64, bool) {
    let max = (size - 1) as f64;
    let clamped = coord < 0.0 || coord > max;
    let c = coord.clamp(0.0, max);
    if size == 1 {
        return (0, 0, 0.0, true);
    }
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

fn focal_value(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    let (pt, at) = if y > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

fn focal_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pc, inside) = clamp_prob(p);
    if !inside {
        return 0.0;
    }
    let (pt, at, sign) = if y > 0.5 { (pc, alpha, 1.0) } else { (1.0 - pc, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let dpow = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    // d/dpt of -at * q^gamma * ln(pt)
    let d = -at * (-dpow * pt.ln() + q.powf(gamma) / pt);
    d * sign
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a named parameter; its gradient is routed back to the
    /// store by [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(store.get(idx).value.clone(), true);
        self.nodes[v.0].param = Some(idx);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear", format!("bias {:?}, out {m}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bd);
            }
        }
        gemm(n, k, m, self.data(x), Trans::No, self.data(w), Trans::Yes, &mut out, true);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Linear { x, w, b }, &inputs))
    }

    /// Zero-padded 2-D cross-correlation of a `[C_in, H, W]` map with
    /// `[C_out, C_in, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}, stride {stride}")));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?}, out {c_out}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            k,
            stride,
            pad,
            h_out: (xs[1] + 2 * pad - k) / stride + 1,
            w_out: (xs[2] + 2 * pad - k) / stride + 1,
        };
        let n = geom.col_cols();
        let mut out = vec![0.0; c_out * n];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(n).zip(self.data(b)) {
                row.fill(bv);
            }
        }
        {
            let col_owned;
            let col: &[f64] = if geom.is_pointwise() {
                self.data(x)
            } else {
                col_owned = geom.im2col(self.data(x));
                &col_owned
            };
            gemm(c_out, geom.col_rows(), n, self.data(w), Trans::No, col, Trans::No, &mut out, true);
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("x {xs:?}, factor {factor}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let srow = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let drow = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Same values under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat0(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat0", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat0", format!("{s:?} vs tail {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.data(v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat0(inputs.to_vec()), inputs))
    }

    /// Concatenation of 2-D inputs along columns.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape("concat_cols", format!("{s:?} with {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &wd) in inputs.iter().zip(&widths) {
            let src = self.data(v);
            for r in 0..n {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(inputs.to_vec()), inputs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |a| a.clamp(lo, hi))
    }

    /// `scale * x + shift`, element-wise. Each of `scale` and `shift` is
    /// either a single value broadcast to every element or one per element.
    pub fn affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if v.len() != 1 && v.len() != n {
                return Err(Error::shape("affine", format!("{name} has {} values for {n}", v.len())));
            }
        }
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| pick(scale, i) * a + pick(shift, i))
            .collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::Affine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, &[s], &[0.0]).expect("broadcast affine")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = v.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in row.iter_mut() {
                    *a = (*a - m).exp();
                    s += *a;
                }
                for a in row.iter_mut() {
                    *a /= s;
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Samples a `[C, H, W]` map at `[M, 2]` continuous `(col, row)`
    /// coordinates, where integer coordinates address cell centers.
    /// Coordinates are clamped to `[0, W-1] x [0, H-1]`. Output `[M, C]`.
    pub fn bilinear_sample(&mut self, fmap: Var, coords: Var) -> Result<Var> {
        let (fs, cs) = (self.shape(fmap).to_vec(), self.shape(coords).to_vec());
        if fs.len() != 3 || cs.len() != 2 || cs[1] != 2 || fs[1] == 0 || fs[2] == 0 {
            return Err(Error::shape("bilinear_sample", format!("fmap {fs:?}, coords {cs:?}")));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let m = cs[0];
        let f = self.data(fmap);
        let xy = self.data(coords);
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let (x0, x1, fx, _) = bilinear_corner(xy[2 * i], w);
            let (y0, y1, fy, _) = bilinear_corner(xy[2 * i + 1], h);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                let base = ch * h * w;
                out[i * c + ch] = w00 * f[base + y0 * w + x0]
                    + w01 * f[base + y0 * w + x1]
                    + w10 * f[base + y1 * w + x0]
                    + w11 * f[base + y1 * w + x1];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, c], out), Op::Bilinear { fmap, coords }, &[fmap, coords]))
    }

    /// Reads the channel vectors of a `[C, H, W]` map at flat cell indices
    /// `row * W + col`. Output `[N, C]`.
    pub fn gather_cells(&mut self, fmap: Var, cells: &[usize]) -> Result<Var> {
        let fs = self.shape(fmap).to_vec();
        if fs.len() != 3 {
            return Err(Error::shape("gather_cells", format!("fmap {fs:?}")));
        }
        let (c, hw) = (fs[0], fs[1] * fs[2]);
        if let Some(&bad) = cells.iter().find(|&&i| i >= hw) {
            return Err(Error::shape("gather_cells", format!("cell {bad} outside {hw}")));
        }
        let f = self.data(fmap);
        let mut out = vec![0.0; cells.len() * c];
        for (n, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[n * c + ch] = f[ch * hw + cell];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![cells.len(), c], out),
            Op::GatherCells {
                fmap,
                cells: cells.to_vec(),
            },
            &[fmap],
        ))
    }

    /// Writes `[N, C]` rows into a zero `[C, H, W]` map at distinct flat
    /// cell indices.
    pub fn scatter_cells(&mut self, x: Var, cells: &[usize], h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != cells.len() {
            return Err(Error::shape("scatter_cells", format!("x {xs:?}, {} cells", cells.len())));
        }
        let (c, hw) = (xs[1], h * w);
        let mut seen = vec![false; hw];
        for &cell in cells {
            if cell >= hw || std::mem::replace(&mut seen[cell], true) {
                return Err(Error::shape("scatter_cells", format!("cell {cell} out of range or repeated")));
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; c * hw];
        for (n, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[ch * hw + cell] = src[n * c + ch];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::ScatterCells {
                x,
                cells: cells.to_vec(),
            },
            &[x],
        ))
    }

    /// Row gather (with repetition) from a 2-D input.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("gather_rows", format!("x {xs:?}")));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xs[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} outside {}", xs[0])));
        }
        let d = xs[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || cols.iter().any(|&c| c >= xs[1]) {
            return Err(Error::shape("select_cols", format!("x {xs:?}, cols {cols:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            out.extend(cols.iter().map(|&c| src[r * d + c]));
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, cols.len()], out),
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Column-wise max over contiguous row segments of a 2-D input.
    /// Ties resolve to the earliest row. Output `[segments, C]`.
    pub fn segment_max(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("segment_max", format!("x {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let src = self.data(x);
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > n {
                return Err(Error::shape("segment_max", format!("segment {seg:?} of {n} rows")));
            }
            for ch in 0..c {
                let mut best = seg.start;
                for r in seg.clone() {
                    if src[r * c + ch] > src[best * c + ch] {
                        best = r;
                    }
                }
                out[s * c + ch] = src[best * c + ch];
                argmax[s * c + ch] = best;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), c], out),
            Op::SegmentMax { x, argmax },
            &[x],
        ))
    }

    fn check_target(&self, p: Var, target: &[f64], op: &'static str) -> Result<()> {
        if self.value(p).len() != target.len() {
            return Err(Error::shape(op, format!("{} predictions vs {} targets", self.value(p).len(), target.len())));
        }
        Ok(())
    }

    /// Element-wise binary focal loss `-a_t (1 - p_t)^gamma ln p_t` with
    /// `p` clamped to `[PROB_EPS, 1 - PROB_EPS]` and hard targets in {0, 1}.
    pub fn focal_elems(&mut self, p: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        self.check_target(p, target, "focal_loss")?;
        let v = self.value(p);
        let data = v
            .data()
            .iter()
            .zip(target)
            .map(|(&pi, &yi)| focal_value(pi, yi, alpha, gamma))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::Focal {
                p,
                target: target.to_vec(),
                alpha,
                gamma,
            },
            &[p],
        ))
    }

    /// Element-wise binary cross-entropy; targets may be soft, in `[0, 1]`.
    pub fn bce_elems(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        self.check_target(p, target, "bce")?;
        let v = self.value(p);
        let data = v
            .data()
            .iter()
            .zip(target)
            .map(|(&pi, &yi)| {
                let (pc, _) = clamp_prob(pi);
                -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
            })
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            &[p],
        ))
    }

    pub fn smooth_l1_elems(&mut self, x: Var, target: &[f64], beta: f64) -> Result<Var> {
        self.check_target(x, target, "smooth_l1")?;
        if beta <= 0.0 {
            return Err(Error::Invalid(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &t)| {
                let d = (a - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                beta,
            },
            &[x],
        ))
    }

    /// `scale * sum_i w_i x_i` as a scalar; `weights = None` means all ones.
    pub fn weighted_sum(&mut self, x: Var, weights: Option<&[f64]>, scale: f64) -> Result<Var> {
        let v = self.value(x);
        if let Some(w) = weights {
            if w.len() != v.len() {
                return Err(Error::shape("weighted_sum", format!("{} weights for {}", w.len(), v.len())));
            }
        }
        let s: f64 = match weights {
            Some(w) => v.data().iter().zip(w).map(|(a, b)| a * b).sum(),
            None => v.data().iter().sum(),
        };
        Ok(self.push(
            Tensor::scalar(scale * s),
            Op::WeightedSum {
                x,
                weights: weights.map(<[f64]>::to_vec),
                scale,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.weighted_sum(x, None, 1.0).expect("unweighted sum")
    }

    /// Mean over all elements; zero for an empty input.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        self.weighted_sum(x, None, s).expect("unweighted mean")
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return Ok(self.constant(Tensor::scalar(0.0))),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass seeded with ones at `output` (the gradient of the sum of
    /// its elements).
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            // Keep intermediate gradients inspectable for debugging and tests.
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds parameter-leaf gradients into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(idx), Some(g)) = (node.param, g) {
                for (acc, v) in store.get_mut(idx).grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if self.wants(*x) {
                    let dx = acc_buf(grads, *x, n * k);
                    gemm(n, m, k, g, Trans::No, self.data(*w), Trans::No, dx, true);
                }
                if self.wants(*w) {
                    let dw = acc_buf(grads, *w, m * k);
                    gemm(m, n, k, g, Trans::Yes, self.data(*x), Trans::No, dw, true);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db = acc_buf(grads, b, m);
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = self.shape(*w)[0];
                let (rows, n) = (geom.col_rows(), geom.col_cols());
                if self.wants(*w) {
                    let col_owned;
                    let col: &[f64] = if geom.is_pointwise() {
                        self.data(*x)
                    } else {
                        col_owned = geom.im2col(self.data(*x));
                        &col_owned
                    };
                    let dw = acc_buf(grads, *w, c_out * rows);
                    gemm(c_out, n, rows, g, Trans::No, col, Trans::Yes, dw, true);
                }
                if self.wants(*x) {
                    let len = geom.c_in * geom.h * geom.w;
                    if geom.is_pointwise() {
                        let dx = acc_buf(grads, *x, len);
                        gemm(rows, c_out, n, self.data(*w), Trans::Yes, g, Trans::No, dx, true);
                    } else {
                        let mut dcol = vec![0.0; rows * n];
                        gemm(rows, c_out, n, self.data(*w), Trans::Yes, g, Trans::No, &mut dcol, false);
                        let dx = acc_buf(grads, *x, len);
                        geom.col2im_add(&dcol, dx);
                    }
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db = acc_buf(grads, b, c_out);
                    for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h * factor, w * factor);
                let dx = acc_buf(grads, *x, c * h * w);
                for ch in 0..c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            dx[(ch * h + y / factor) * w + xo / factor] += g[(ch * ho + y) * wo + xo];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(acc_buf(grads, *x, g.len()), g),
            Op::Concat0(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    if self.wants(v) {
                        add_into(acc_buf(grads, v, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(inputs) => {
                let n = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for &v in inputs {
                    let wd = self.shape(v)[1];
                    if self.wants(v) {
                        let d = acc_buf(grads, v, n * wd);
                        for r in 0..n {
                            add_into(&mut d[r * wd..(r + 1) * wd], &g[r * total + off..r * total + off + wd]);
                        }
                    }
                    off += wd;
                }
            }
            Op::Relu(x) => self.elementwise_back(*x, g, grads, |a, _| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(x) => {
                let y = out.data();
                let d = acc_buf(grads, *x, y.len());
                for i in 0..y.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                let d = acc_buf(grads, *x, y.len());
                for i in 0..y.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Square(x) => self.elementwise_back(*x, g, grads, |a, _| 2.0 * a),
            Op::Abs(x) => self.elementwise_back(*x, g, grads, |a, _| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*x, g, grads, |a, _| if a >= lo && a <= hi { 1.0 } else { 0.0 })
            }
            Op::Affine { x, scale } => {
                let s = scale.clone();
                self.elementwise_back(*x, g, grads, move |_, i| if s.len() == 1 { s[0] } else { s[i] })
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(acc_buf(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let d = acc_buf(grads, *b, g.len());
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.data(*b);
                    let d = acc_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let va = self.data(*a);
                    let d = acc_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Softmax(x) => {
                let d_last = *out.shape().last().unwrap();
                if d_last == 0 {
                    return;
                }
                let y = out.data();
                let dx = acc_buf(grads, *x, y.len());
                for ((yr, gr), dr) in y.chunks(d_last).zip(g.chunks(d_last)).zip(dx.chunks_mut(d_last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d_last {
                        dr[k] += yr[k] * (gr[k] - dot);
                    }
                }
            }
            Op::Bilinear { fmap, coords } => {
                let fs = self.shape(*fmap);
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let xy = self.data(*coords);
                let m = xy.len() / 2;
                let f = self.data(*fmap);
                let want_f = self.wants(*fmap);
                let want_c = self.wants(*coords);
                let mut df = if want_f { vec![0.0; c * h * w] } else { Vec::new() };
                let mut dc = if want_c { vec![0.0; 2 * m] } else { Vec::new() };
                for i in 0..m {
                    let (x0, x1, fx, cx) = bilinear_corner(xy[2 * i], w);
                    let (y0, y1, fy, cy) = bilinear_corner(xy[2 * i + 1], h);
                    let gi = &g[i * c..(i + 1) * c];
                    if want_f {
                        let w00 = (1.0 - fx) * (1.0 - fy);
                        let w01 = fx * (1.0 - fy);
                        let w10 = (1.0 - fx) * fy;
                        let w11 = fx * fy;
                        for ch in 0..c {
                            let base = ch * h * w;
                            df[base + y0 * w + x0] += w00 * gi[ch];
                            df[base + y0 * w + x1] += w01 * gi[ch];
                            df[base + y1 * w + x0] += w10 * gi[ch];
                            df[base + y1 * w + x1] += w11 * gi[ch];
                        }
                    }
                    if want_c {
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let base = ch * h * w;
                            let f00 = f[base + y0 * w + x0];
                            let f01 = f[base + y0 * w + x1];
                            let f10 = f[base + y1 * w + x0];
                            let f11 = f[base + y1 * w + x1];
                            gx += gi[ch] * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
                            gy += gi[ch] * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
                        }
                        if !cx {
                            dc[2 * i] += gx;
                        }
                        if !cy {
                            dc[2 * i + 1] += gy;
                        }
                    }
                }
                if want_f {
                    add_into(acc_buf(grads, *fmap, c * h * w), &df);
                }
                if want_c {
                    add_into(acc_buf(grads, *coords, 2 * m), &dc);
                }
            }
            Op::GatherCells { fmap, cells } => {
                if !self.wants(*fmap) {
                    return;
                }
                let fs = self.shape(*fmap);
                let (c, hw) = (fs[0], fs[1] * fs[2]);
                let d = acc_buf(grads, *fmap, c * hw);
                for (n, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        d[ch * hw + cell] += g[n * c + ch];
                    }
                }
            }
            Op::ScatterCells { x, cells } => {
                if !self.wants(*x) {
                    return;
                }
                let c = self.shape(*x)[1];
                let hw = out.shape()[1] * out.shape()[2];
                let d = acc_buf(grads, *x, cells.len() * c);
                for (n, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        d[n * c + ch] += g[ch * hw + cell];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let dcols = xs[1];
                let d = acc_buf(grads, *x, xs[0] * dcols);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * dcols..(r + 1) * dcols], &g[i * dcols..(i + 1) * dcols]);
                }
            }
            Op::SelectCols { x, cols } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let (n, dcols) = (xs[0], xs[1]);
                let d = acc_buf(grads, *x, n * dcols);
                for r in 0..n {
                    for (j, &c) in cols.iter().enumerate() {
                        d[r * dcols + c] += g[r * cols.len() + j];
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let c = xs[1];
                let d = acc_buf(grads, *x, xs[0] * c);
                for (i, &r) in argmax.iter().enumerate() {
                    d[r * c + i % c] += g[i];
                }
            }
            Op::Focal { p, target, alpha, gamma } => {
                let (a, gm) = (*alpha, *gamma);
                self.elementwise_back(*p, g, grads, |pi, i| focal_grad(pi, target[i], a, gm))
            }
            Op::Bce { p, target } => self.elementwise_back(*p, g, grads, |pi, i| {
                let (pc, inside) = clamp_prob(pi);
                if !inside {
                    return 0.0;
                }
                let y = target[i];
                -y / pc + (1.0 - y) / (1.0 - pc)
            }),
            Op::SmoothL1 { x, target, beta } => {
                let b = *beta;
                self.elementwise_back(*x, g, grads, |a, i| {
                    let d = a - target[i];
                    if d.abs() < b {
                        d / b
                    } else {
                        d.signum()
                    }
                })
            }
            Op::WeightedSum { x, weights, scale } => {
                let n = self.value(*x).len();
                let d = acc_buf(grads, *x, n);
                match weights {
                    Some(w) => {
                        for i in 0..n {
                            d[i] += g[0] * scale * w[i];
                        }
                    }
                    None => {
                        for di in d.iter_mut() {
                            *di += g[0] * scale;
                        }
                    }
                }
            }
        }
    }

    /// `dx[i] += g[i] * local(x[i], i)`.
    fn elementwise_back(&self, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], local: impl Fn(f64, usize) -> f64) {
        if !self.wants(x) {
            return;
        }
        let xv = self.data(x);
        let d = acc_buf(grads, x, xv.len());
        for i in 0..xv.len() {
            d[i] += g[i] * local(xv[i], i);
        }
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
