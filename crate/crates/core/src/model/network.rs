//! Sequential networks over flat parameter vectors.
//!
//! Convolutional activations are kept channel-major (`c × n × h × w`) so a
//! whole batch turns into a single GEMM per layer; dense activations are
//! sample-major (`n × d`). Besides the usual forward/backward passes the
//! network offers a tangent pass: the directional derivative of every
//! activation and every backward delta along a parameter direction `u`. Its
//! input component is `∇ₓ ⟨u, ∇_θ loss⟩`, the exact mixed second derivative
//! that gradient inversion needs.

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Conv { cin: usize, cout: usize, k: usize, h: usize, w: usize, w_off: usize, b_off: usize },
    Relu,
    Pool { h: usize, w: usize },
    Flatten { c: usize, hw: usize },
    Dense { din: usize, dout: usize, w_off: usize, b_off: usize },
}

impl Op {
    fn conv_out(h: usize, w: usize, k: usize) -> (usize, usize) {
        (h + 1 - k, w + 1 - k)
    }
}

/// Named contiguous range of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub(crate) ops: Vec<Op>,
    num_params: usize,
    in_channels: usize,
    in_size: usize,
    outputs: usize,
    feature_op: Option<usize>,
    blocks: Vec<ParamBlock>,
}

/// Cached forward state for one batch.
#[derive(Debug, Clone)]
pub struct Trace {
    pub n: usize,
    /// `acts[0]` is the input in internal layout, `acts[i + 1]` the output of op `i`.
    pub acts: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grad: Vec<f64>,
    /// `deltas[i]` is the loss gradient w.r.t. `acts[i]`; `deltas[0]` is empty
    /// unless the input gradient was requested.
    pub deltas: Vec<Vec<f64>>,
}

struct Builder {
    ops: Vec<Op>,
    blocks: Vec<ParamBlock>,
    offset: usize,
}

impl Builder {
    fn block(&mut self, name: String, len: usize) -> usize {
        let start = self.offset;
        self.blocks.push(ParamBlock { name, start, len });
        self.offset += len;
        start
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, h: usize, w: usize) {
        let i = self.ops.len();
        let w_off = self.block(format!("layer{i}.conv.weight"), cout * cin * k * k);
        let b_off = self.block(format!("layer{i}.conv.bias"), cout);
        self.ops.push(Op::Conv { cin, cout, k, h, w, w_off, b_off });
    }

    fn dense(&mut self, din: usize, dout: usize) {
        let i = self.ops.len();
        let w_off = self.block(format!("layer{i}.dense.weight"), dout * din);
        let b_off = self.block(format!("layer{i}.dense.bias"), dout);
        self.ops.push(Op::Dense { din, dout, w_off, b_off });
    }
}

impl Network {
    /// Multinomial logistic regression on flattened inputs.
    pub fn logreg(input_size: usize, classes: usize) -> Self {
        Self::mlp(input_size, &[], classes)
    }

    /// Fully connected ReLU network.
    pub fn mlp(input_size: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut b = Builder { ops: vec![], blocks: vec![], offset: 0 };
        let mut din = input_size;
        for &h in hidden {
            b.dense(din, h);
            b.ops.push(Op::Relu);
            din = h;
        }
        b.dense(din, outputs);
        let feature_op = (!hidden.is_empty()).then(|| b.ops.len() - 2);
        Self {
            ops: b.ops,
            num_params: b.offset,
            in_channels: 1,
            in_size: input_size,
            outputs,
            feature_op,
            blocks: b.blocks,
        }
    }

    /// conv(c1,3×3)+relu+pool2 → conv(c2,3×3)+relu+pool2 → dense(features)+relu → dense(classes).
    pub fn cnn(
        channels: usize,
        height: usize,
        width: usize,
        conv: [usize; 2],
        features: usize,
        classes: usize,
    ) -> Result<Self> {
        let mut b = Builder { ops: vec![], blocks: vec![], offset: 0 };
        let (mut c, mut h, mut w) = (channels, height, width);
        for &cout in &conv {
            if h < 4 || w < 4 {
                return Err(Error::InvalidArgument(format!("input {height}x{width} too small for the cnn")));
            }
            b.conv(c, cout, 3, h, w);
            b.ops.push(Op::Relu);
            let (ho, wo) = Op::conv_out(h, w, 3);
            b.ops.push(Op::Pool { h: ho, w: wo });
            c = cout;
            h = ho / 2;
            w = wo / 2;
        }
        b.ops.push(Op::Flatten { c, hw: h * w });
        b.dense(c * h * w, features);
        b.ops.push(Op::Relu);
        let feature_op = Some(b.ops.len() - 1);
        b.dense(features, classes);
        Ok(Self {
            ops: b.ops,
            num_params: b.offset,
            in_channels: channels,
            in_size: channels * height * width,
            outputs: classes,
            feature_op,
            blocks: b.blocks,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_size(&self) -> usize {
        self.in_size
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Width of the penultimate (feature) activation, if the network has one.
    pub fn feature_width(&self) -> Option<usize> {
        self.feature_op.map(|i| match self.ops[i - 1] {
            Op::Dense { dout, .. } => dout,
            _ => unreachable!("feature op follows a dense layer"),
        })
    }

    pub(crate) fn feature_op(&self) -> Option<usize> {
        self.feature_op
    }

    fn conv_first(&self) -> bool {
        matches!(self.ops.first(), Some(Op::Conv { .. }))
    }

    /// (fan_in, weight range, bias range) for each parametrised layer.
    pub(crate) fn init_layout(&self) -> Vec<(usize, std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                Op::Conv { cin, cout, k, w_off, b_off, .. } => {
                    Some((cin * k * k, w_off..w_off + cout * cin * k * k, b_off..b_off + cout))
                }
                Op::Dense { din, dout, w_off, b_off } => Some((din, w_off..w_off + dout * din, b_off..b_off + dout)),
                _ => None,
            })
            .collect()
    }

    fn to_internal(&self, x: &[f64], n: usize) -> Vec<f64> {
        if self.conv_first() && self.in_channels > 1 {
            transpose_01(x, n, self.in_channels, self.in_size / self.in_channels)
        } else {
            x.to_vec()
        }
    }

    fn internal_to_input(&self, x: Vec<f64>, n: usize) -> Vec<f64> {
        if self.conv_first() && self.in_channels > 1 {
            transpose_01(&x, self.in_channels, n, self.in_size / self.in_channels)
        } else {
            x
        }
    }

    /// Runs ops `0..=last` (all ops when `last` is `None`).
    pub fn forward_until(&self, params: &[f64], inputs: &[f64], n: usize, last: Option<usize>) -> Trace {
        assert_eq!(params.len(), self.num_params, "parameter length");
        assert_eq!(inputs.len(), n * self.in_size, "input length");
        let stop = last.map_or(self.ops.len(), |l| l + 1);
        let mut acts = vec![self.to_internal(inputs, n)];
        let mut cols = vec![Vec::new(); stop];
        let mut argmax = vec![Vec::new(); stop];
        for (i, op) in self.ops[..stop].iter().enumerate() {
            let a = &acts[i];
            let out = match *op {
                Op::Conv { cin, cout, k, h, w, w_off, b_off } => {
                    let (ho, wo) = Op::conv_out(h, w, k);
                    let c = im2col(a, cin, n, h, w, k);
                    let out =
                        conv_apply(&params[w_off..], &params[b_off..b_off + cout], &c, cout, cin * k * k, n * ho * wo);
                    cols[i] = c;
                    out
                }
                Op::Relu => a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
                Op::Pool { h, w } => {
                    let planes = a.len() / (h * w);
                    let (out, idx) = maxpool(a, planes, h, w);
                    argmax[i] = idx;
                    out
                }
                Op::Flatten { c, hw } => transpose_01(a, c, n, hw),
                Op::Dense { din, dout, w_off, b_off } => {
                    dense_apply(&params[w_off..w_off + din * dout], &params[b_off..b_off + dout], a, n, din, dout)
                }
            };
            acts.push(out);
        }
        Trace { n, acts, cols, argmax }
    }

    pub fn forward(&self, params: &[f64], inputs: &[f64], n: usize) -> Trace {
        self.forward_until(params, inputs, n, None)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output).
    pub fn backward(&self, params: &[f64], trace: &Trace, d_out: Vec<f64>, input_grad: bool) -> Backward {
        assert_eq!(trace.acts.len(), self.ops.len() + 1, "backward needs a full trace");
        let n = trace.n;
        let mut grad = vec![0.0; self.num_params];
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); self.ops.len() + 1];
        deltas[self.ops.len()] = d_out;
        for i in (0..self.ops.len()).rev() {
            let need_input = i > 0 || input_grad;
            let d = &deltas[i + 1];
            let a = &trace.acts[i];
            let din_vec = match self.ops[i] {
                Op::Conv { cin, cout, k, h, w, w_off, b_off } => {
                    let (ho, wo) = Op::conv_out(h, w, k);
                    let (ckk, cols_n) = (cin * k * k, n * ho * wo);
                    let dmat = MatRef::new(d, cout, cols_n);
                    gemm(
                        1.0,
                        dmat,
                        MatRef::new(&trace.cols[i], ckk, cols_n).t(),
                        0.0,
                        &mut grad[w_off..w_off + cout * ckk],
                    );
                    for (co, g) in grad[b_off..b_off + cout].iter_mut().enumerate() {
                        *g = d[co * cols_n..(co + 1) * cols_n].iter().sum();
                    }
                    if need_input {
                        let mut dcols = vec![0.0; ckk * cols_n];
                        gemm(
                            1.0,
                            MatRef::new(&params[w_off..w_off + cout * ckk], cout, ckk).t(),
                            dmat,
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, cin, n, h, w, k)
                    } else {
                        Vec::new()
                    }
                }
                Op::Relu => {
                    let out = &trace.acts[i + 1];
                    d.iter().zip(out).map(|(&g, &o)| if o > 0.0 { g } else { 0.0 }).collect()
                }
                Op::Pool { .. } => unpool(d, &trace.argmax[i], a.len()),
                Op::Flatten { c, hw } => transpose_01(d, n, c, hw),
                Op::Dense { din, dout, w_off, b_off } => {
                    let dmat = MatRef::new(d, n, dout);
                    gemm(1.0, dmat.t(), MatRef::new(a, n, din), 0.0, &mut grad[w_off..w_off + dout * din]);
                    for (o, g) in grad[b_off..b_off + dout].iter_mut().enumerate() {
                        *g = (0..n).map(|r| d[r * dout + o]).sum();
                    }
                    if need_input {
                        let mut dx = vec![0.0; n * din];
                        gemm(1.0, dmat, MatRef::new(&params[w_off..w_off + dout * din], dout, din), 0.0, &mut dx);
                        dx
                    } else {
                        Vec::new()
                    }
                }
            };
            deltas[i] = din_vec;
        }
        if input_grad {
            let d0 = std::mem::take(&mut deltas[0]);
            deltas[0] = self.internal_to_input(d0, n);
        }
        Backward { grad, deltas }
    }

    /// Directional derivatives of every activation along parameter direction
    /// `dir` (inputs held fixed). Entry `i` matches `trace.acts[i]`; entry 0 is
    /// empty (the input does not move).
    pub fn tangent_forward(&self, params: &[f64], dir: &[f64], trace: &Trace) -> Vec<Vec<f64>> {
        assert_eq!(dir.len(), self.num_params, "direction length");
        let n = trace.n;
        let mut tan: Vec<Vec<f64>> = vec![Vec::new()];
        for (i, op) in self.ops.iter().enumerate() {
            let t_in = &tan[i];
            let a = &trace.acts[i];
            let out = match *op {
                Op::Conv { cin, cout, k, h, w, w_off, b_off } => {
                    let (ho, wo) = Op::conv_out(h, w, k);
                    let (ckk, cols_n) = (cin * k * k, n * ho * wo);
                    // U·cols(a) + u_b
                    let mut out =
                        conv_apply(&dir[w_off..], &dir[b_off..b_off + cout], &trace.cols[i], cout, ckk, cols_n);
                    if !t_in.is_empty() {
                        let tc = im2col(t_in, cin, n, h, w, k);
                        gemm(
                            1.0,
                            MatRef::new(&params[w_off..w_off + cout * ckk], cout, ckk),
                            MatRef::new(&tc, ckk, cols_n),
                            1.0,
                            &mut out,
                        );
                    }
                    out
                }
                Op::Relu => {
                    let out = &trace.acts[i + 1];
                    if t_in.is_empty() {
                        Vec::new()
                    } else {
                        t_in.iter().zip(out).map(|(&t, &o)| if o > 0.0 { t } else { 0.0 }).collect()
                    }
                }
                Op::Pool { .. } => {
                    if t_in.is_empty() {
                        Vec::new()
                    } else {
                        trace.argmax[i].iter().map(|&j| t_in[j as usize]).collect()
                    }
                }
                Op::Flatten { c, hw } => {
                    if t_in.is_empty() {
                        Vec::new()
                    } else {
                        transpose_01(t_in, c, n, hw)
                    }
                }
                Op::Dense { din, dout, w_off, b_off } => {
                    let mut out =
                        dense_apply(&dir[w_off..w_off + din * dout], &dir[b_off..b_off + dout], a, n, din, dout);
                    if !t_in.is_empty() {
                        gemm(
                            1.0,
                            MatRef::new(t_in, n, din),
                            MatRef::new(&params[w_off..w_off + din * dout], dout, din).t(),
                            1.0,
                            &mut out,
                        );
                    }
                    out
                }
            };
            tan.push(out);
        }
        tan
    }

    /// Tangent of the input gradient along `dir`, given the plain backward
    /// deltas and the tangent of the output delta. Returns sample-major input
    /// layout.
    pub fn tangent_backward(
        &self,
        params: &[f64],
        dir: &[f64],
        trace: &Trace,
        back: &Backward,
        d_out_tangent: Vec<f64>,
    ) -> Vec<f64> {
        let n = trace.n;
        let mut td = d_out_tangent;
        for i in (0..self.ops.len()).rev() {
            let d = &back.deltas[i + 1];
            td = match self.ops[i] {
                Op::Conv { cin, cout, k, h, w, w_off, .. } => {
                    let (ho, wo) = Op::conv_out(h, w, k);
                    let (ckk, cols_n) = (cin * k * k, n * ho * wo);
                    let mut dcols = vec![0.0; ckk * cols_n];
                    gemm(
                        1.0,
                        MatRef::new(&params[w_off..w_off + cout * ckk], cout, ckk).t(),
                        MatRef::new(&td, cout, cols_n),
                        0.0,
                        &mut dcols,
                    );
                    gemm(
                        1.0,
                        MatRef::new(&dir[w_off..w_off + cout * ckk], cout, ckk).t(),
                        MatRef::new(d, cout, cols_n),
                        1.0,
                        &mut dcols,
                    );
                    col2im(&dcols, cin, n, h, w, k)
                }
                Op::Relu => {
                    let out = &trace.acts[i + 1];
                    td.iter().zip(out).map(|(&g, &o)| if o > 0.0 { g } else { 0.0 }).collect()
                }
                Op::Pool { .. } => unpool(&td, &trace.argmax[i], trace.acts[i].len()),
                Op::Flatten { c, hw } => transpose_01(&td, n, c, hw),
                Op::Dense { din, dout, w_off, .. } => {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        1.0,
                        MatRef::new(&td, n, dout),
                        MatRef::new(&params[w_off..w_off + dout * din], dout, din),
                        0.0,
                        &mut dx,
                    );
                    gemm(
                        1.0,
                        MatRef::new(d, n, dout),
                        MatRef::new(&dir[w_off..w_off + dout * din], dout, din),
                        1.0,
                        &mut dx,
                    );
                    dx
                }
            };
        }
        self.internal_to_input(td, n)
    }

    /// Returns the name of the first parameter block holding a non-finite value.
    pub fn first_non_finite_block(&self, values: &[f64]) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| values[b.start..b.start + b.len].iter().any(|x| !x.is_finite()))
            .map(|b| b.name.as_str())
    }
}

/// Swaps the two leading axes of an `a × b × rest` array.
fn transpose_01(x: &[f64], a: usize, b: usize, rest: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), a * b * rest);
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * rest;
            let dst = (j * a + i) * rest;
            out[dst..dst + rest].copy_from_slice(&x[src..src + rest]);
        }
    }
    out
}

/// Channel-major input `cin × n × h × w` → `(cin·k·k) × (n·ho·wo)`.
fn im2col(a: &[f64], cin: usize, n: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = Op::conv_out(h, w, k);
    let cols_n = n * ho * wo;
    let mut cols = vec![0.0; cin * k * k * cols_n];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                for img in 0..n {
                    let plane = &a[(ci * n + img) * h * w..(ci * n + img + 1) * h * w];
                    for oy in 0..ho {
                        let src = &plane[(oy + ky) * w + kx..(oy + ky) * w + kx + wo];
                        row[(img * ho + oy) * wo..(img * ho + oy + 1) * wo].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, n: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = Op::conv_out(h, w, k);
    let cols_n = n * ho * wo;
    let mut a = vec![0.0; cin * n * h * w];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &cols[r * cols_n..(r + 1) * cols_n];
                for img in 0..n {
                    let plane = &mut a[(ci * n + img) * h * w..(ci * n + img + 1) * h * w];
                    for oy in 0..ho {
                        let dst = &mut plane[(oy + ky) * w + kx..(oy + ky) * w + kx + wo];
                        let src = &row[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
    a
}

fn conv_apply(weight: &[f64], bias: &[f64], cols: &[f64], cout: usize, ckk: usize, cols_n: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * cols_n];
    for (co, &b) in bias.iter().enumerate() {
        out[co * cols_n..(co + 1) * cols_n].fill(b);
    }
    gemm(1.0, MatRef::new(&weight[..cout * ckk], cout, ckk), MatRef::new(cols, ckk, cols_n), 1.0, &mut out);
    out
}

fn dense_apply(weight: &[f64], bias: &[f64], a: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for row in out.chunks_mut(dout) {
        row.copy_from_slice(bias);
    }
    gemm(1.0, MatRef::new(a, n, din), MatRef::new(weight, dout, din).t(), 1.0, &mut out);
    out
}

/// 2×2 stride-2 max pooling (floor) over `planes` independent `h × w` planes.
fn maxpool(a: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if a[j] > a[best] {
                        best = j;
                    }
                }
                out.push(a[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn unpool(d: &[f64], argmax: &[u32], in_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; in_len];
    for (&j, &g) in argmax.iter().zip(d) {
        out[j as usize] += g;
    }
    out
}
