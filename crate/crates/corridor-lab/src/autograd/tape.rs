//! The tape: forward value storage plus an ordered op record for backward.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    ConcatChannels(Vec<TensorId>),
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId },
    Conv1x1 { input: TensorId, kernel: TensorId, bias: TensorId },
    LeakyRelu(TensorId),
    Sigmoid(TensorId),
    AvgPool2(TensorId),
    BilinearUp2(TensorId),
    Sum(TensorId),
    BceWithLogitsSum { logits: TensorId, targets: TensorId },
    Outer { u: TensorId, v: TensorId },
    AddChannels { input: TensorId, grid: TensorId, mask: Vec<bool> },
    MulChannels { input: TensorId, grid: TensorId, mask: Vec<bool> },
    Linear { input: TensorId, weight: TensorId, bias: TensorId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1x1 { .. } => "conv2d_1x1",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::AvgPool2(..) => "avg_pool2",
            Op::BilinearUp2(..) => "bilinear_up2",
            Op::Sum(..) => "sum",
            Op::BceWithLogitsSum { .. } => "bce_with_logits_sum",
            Op::Outer { .. } => "outer",
            Op::AddChannels { .. } => "add_channels",
            Op::MulChannels { .. } => "mul_channels",
            Op::Linear { .. } => "linear",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    track: bool,
}

/// Gradients for every tracked tensor, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

pub const LEAKY_RELU_SLOPE: f64 = 0.1;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    corrupt_leaky_relu: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test harness hook: scales the leaky_relu backward by 2 so gradient
    /// oracles can prove they detect a wrong derivative.
    #[doc(hidden)]
    pub fn corrupt_leaky_relu_backward(&mut self) {
        self.corrupt_leaky_relu = true;
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "leaf shape/value mismatch");
        self.push(Op::Leaf, shape.to_vec(), values, requires_grad)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].track
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, track: bool) -> Result<TensorId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, shape, values, track });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutogradError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let vals: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let track = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), self.shape(a).to_vec(), vals, track)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let vals: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        let track = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), self.shape(a).to_vec(), vals, track)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let vals: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let track = self.tracked(a) || self.tracked(b);
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), vals, track)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| x * factor).collect();
        let track = self.tracked(a);
        self.push(Op::Scale(a, factor), self.shape(a).to_vec(), vals, track)
    }

    /// Concatenate [C_i, h, w] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (h, w) = chw_spatial(self.shape(parts[0])).ok_or(AutogradError::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} is not [C, h, w]", self.shape(parts[0])),
        })?;
        let mut channels = 0usize;
        let mut vals = Vec::new();
        for &p in parts {
            let shape = self.shape(p);
            if chw_spatial(shape) != Some((h, w)) {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{:?} incompatible with spatial {h}x{w}", shape),
                });
            }
            channels += shape[0];
            vals.extend_from_slice(self.values(p));
        }
        let track = parts.iter().any(|&p| self.tracked(p));
        self.push(Op::ConcatChannels(parts.to_vec()), vec![channels, h, w], vals, track)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// input [Cin, h, w], kernel [Cout, Cin, 3, 3], bias [Cout].
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let ok = ishape.len() == 3
            && kshape.len() == 4
            && kshape[1] == ishape[0]
            && kshape[2] == 3
            && kshape[3] == 3
            && self.shape(bias) == [kshape[0]];
        if !ok {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    ishape,
                    kshape,
                    self.shape(bias)
                ),
            });
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let cout = kshape[0];
        let vals = conv2d_forward(self.values(input), self.values(kernel), self.values(bias), cin, cout, h, w);
        let track = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        self.push(Op::Conv2d { input, kernel, bias }, vec![cout, h, w], vals, track)
    }

    /// 1x1 convolution. kernel [Cout, Cin], bias [Cout].
    pub fn conv2d_1x1(&mut self, input: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let ok = ishape.len() == 3 && kshape.len() == 2 && kshape[1] == ishape[0]
            && self.shape(bias) == [kshape[0]];
        if !ok {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d_1x1",
                detail: format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    ishape,
                    kshape,
                    self.shape(bias)
                ),
            });
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let cout = kshape[0];
        let hw = h * w;
        let mut vals = vec![0.0; cout * hw];
        for co in 0..cout {
            let out = &mut vals[co * hw..(co + 1) * hw];
            out.fill(self.values(bias)[co]);
            for ci in 0..cin {
                let k = self.values(kernel)[co * cin + ci];
                let inp = &self.values(input)[ci * hw..(ci + 1) * hw];
                for (o, &x) in out.iter_mut().zip(inp) {
                    *o += k * x;
                }
            }
        }
        let track = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        self.push(Op::Conv1x1 { input, kernel, bias }, vec![cout, h, w], vals, track)
    }

    pub fn leaky_relu(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self
            .values(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { LEAKY_RELU_SLOPE * x })
            .collect();
        let track = self.tracked(a);
        self.push(Op::LeakyRelu(a), self.shape(a).to_vec(), vals, track)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|&x| sigmoid(x)).collect();
        let track = self.tracked(a);
        self.push(Op::Sigmoid(a), self.shape(a).to_vec(), vals, track)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (c, h, w) = match shape.as_slice() {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => (*c, *h, *w),
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op: "avg_pool2",
                    detail: format!("{shape:?} must be [C, even, even]"),
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut vals = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let inp = &self.values(a)[ch * h * w..(ch + 1) * h * w];
            let out = &mut vals[ch * oh * ow..(ch + 1) * oh * ow];
            for r in 0..oh {
                for col in 0..ow {
                    let base = 2 * r * w + 2 * col;
                    out[r * ow + col] =
                        0.25 * (inp[base] + inp[base + 1] + inp[base + w] + inp[base + w + 1]);
                }
            }
        }
        let track = self.tracked(a);
        self.push(Op::AvgPool2(a), vec![c, oh, ow], vals, track)
    }

    /// 2x bilinear upsampling, align-corners-false convention.
    pub fn bilinear_up2(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (c, h, w) = match shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op: "bilinear_up2",
                    detail: format!("{shape:?} must be [C, h, w]"),
                })
            }
        };
        let (oh, ow) = (2 * h, 2 * w);
        let rt = up2_taps(h);
        let ct = up2_taps(w);
        let mut vals = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let inp = &self.values(a)[ch * h * w..(ch + 1) * h * w];
            let out = &mut vals[ch * oh * ow..(ch + 1) * oh * ow];
            for or in 0..oh {
                let (r0, r1, fr) = rt[or];
                for oc in 0..ow {
                    let (c0, c1, fc) = ct[oc];
                    out[or * ow + oc] = (1.0 - fr) * (1.0 - fc) * inp[r0 * w + c0]
                        + (1.0 - fr) * fc * inp[r0 * w + c1]
                        + fr * (1.0 - fc) * inp[r1 * w + c0]
                        + fr * fc * inp[r1 * w + c1];
                }
            }
        }
        let track = self.tracked(a);
        self.push(Op::BilinearUp2(a), vec![c, oh, ow], vals, track)
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.values(a).iter().sum();
        let track = self.tracked(a);
        self.push(Op::Sum(a), vec![1], vec![total], track)
    }

    /// Numerically stable sum of binary cross entropy with logits:
    /// sum over elements of max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits_sum(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        self.same_shape("bce_with_logits_sum", logits, targets)?;
        let total: f64 = self
            .values(logits)
            .iter()
            .zip(self.values(targets))
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let track = self.tracked(logits) || self.tracked(targets);
        self.push(Op::BceWithLogitsSum { logits, targets }, vec![1], vec![total], track)
    }

    /// Outer product of vectors u (len h) and v (len w) -> [h, w].
    pub fn outer(&mut self, u: TensorId, v: TensorId) -> Result<TensorId> {
        let (hu, wv) = match (self.shape(u), self.shape(v)) {
            ([h], [w]) => (*h, *w),
            (a, b) => {
                return Err(AutogradError::ShapeMismatch {
                    op: "outer",
                    detail: format!("{a:?} and {b:?} must both be vectors"),
                })
            }
        };
        let mut vals = Vec::with_capacity(hu * wv);
        for &uv in self.values(u) {
            // self.values(v) borrow is fine: vals built first, pushed after.
            for &vv in self.values(v) {
                vals.push(uv * vv);
            }
        }
        let track = self.tracked(u) || self.tracked(v);
        self.push(Op::Outer { u, v }, vec![hu, wv], vals, track)
    }

    /// Adds `grid` [h, w] to each channel of `input` [C, h, w] selected by
    /// `mask` (len C); unselected channels pass through.
    pub fn add_channels(&mut self, input: TensorId, grid: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (c, h, w) = self.check_channel_op("add_channels", input, grid, mask)?;
        let hw = h * w;
        let mut vals = self.values(input).to_vec();
        for (ch, &on) in mask.iter().enumerate().take(c) {
            if on {
                for (o, &g) in vals[ch * hw..(ch + 1) * hw].iter_mut().zip(self.values(grid)) {
                    *o += g;
                }
            }
        }
        let track = self.tracked(input) || self.tracked(grid);
        self.push(Op::AddChannels { input, grid, mask: mask.to_vec() }, vec![c, h, w], vals, track)
    }

    /// Multiplies selected channels of `input` elementwise by `grid`.
    pub fn mul_channels(&mut self, input: TensorId, grid: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (c, h, w) = self.check_channel_op("mul_channels", input, grid, mask)?;
        let hw = h * w;
        let mut vals = self.values(input).to_vec();
        for (ch, &on) in mask.iter().enumerate().take(c) {
            if on {
                for (o, &g) in vals[ch * hw..(ch + 1) * hw].iter_mut().zip(self.values(grid)) {
                    *o *= g;
                }
            }
        }
        let track = self.tracked(input) || self.tracked(grid);
        self.push(Op::MulChannels { input, grid, mask: mask.to_vec() }, vec![c, h, w], vals, track)
    }

    fn check_channel_op(
        &self,
        op: &'static str,
        input: TensorId,
        grid: TensorId,
        mask: &[bool],
    ) -> Result<(usize, usize, usize)> {
        match (self.shape(input), self.shape(grid)) {
            ([c, h, w], [gh, gw]) if gh == h && gw == w && mask.len() == *c => Ok((*c, *h, *w)),
            (a, b) => Err(AutogradError::ShapeMismatch {
                op,
                detail: format!("input {a:?}, grid {b:?}, mask len {}", mask.len()),
            }),
        }
    }

    /// Affine map: weight [out, in] * input [in] + bias [out].
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n_out, n_in) = match (self.shape(input), self.shape(weight), self.shape(bias)) {
            ([ni], [no, wi], [nb]) if wi == ni && nb == no => (*no, *ni),
            (a, b, c) => {
                return Err(AutogradError::ShapeMismatch {
                    op: "linear",
                    detail: format!("input {a:?}, weight {b:?}, bias {c:?}"),
                })
            }
        };
        let mut vals = self.values(bias).to_vec();
        for (o, val) in vals.iter_mut().enumerate() {
            let row = &self.values(weight)[o * n_in..(o + 1) * n_in];
            *val += row.iter().zip(self.values(input)).map(|(w, x)| w * x).sum::<f64>();
        }
        let track = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        self.push(Op::Linear { input, weight, bias }, vec![n_out], vals, track)
    }

    /// Reverse pass from a scalar root. Fails on a non-scalar root or a
    /// second call on the same tape.
    pub fn backward(&mut self, root: TensorId) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutogradError::BackwardTwice);
        }
        if self.nodes[root.0].values.len() != 1 {
            return Err(AutogradError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].track || grads[i].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let gout = rest[0].as_ref().unwrap();
            self.propagate(i, gout, before);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        fn ensure(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len_of = |id: TensorId| self.nodes[id.0].values.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.tracked(p) {
                        let g = ensure(grads, p, len_of(p));
                        for (gp, &go) in g.iter_mut().zip(gout) {
                            *gp += go;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    let g = ensure(grads, *a, len_of(*a));
                    for (gp, &go) in g.iter_mut().zip(gout) {
                        *gp += go;
                    }
                }
                if self.tracked(*b) {
                    let g = ensure(grads, *b, len_of(*b));
                    for (gp, &go) in g.iter_mut().zip(gout) {
                        *gp -= go;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let bvals = &self.nodes[b.0].values;
                    let g = ensure(grads, *a, len_of(*a));
                    for ((gp, &go), &bv) in g.iter_mut().zip(gout).zip(bvals) {
                        *gp += go * bv;
                    }
                }
                if self.tracked(*b) {
                    let avals = &self.nodes[a.0].values;
                    let g = ensure(grads, *b, len_of(*b));
                    for ((gp, &go), &av) in g.iter_mut().zip(gout).zip(avals) {
                        *gp += go * av;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.tracked(*a) {
                    let g = ensure(grads, *a, len_of(*a));
                    for (gp, &go) in g.iter_mut().zip(gout) {
                        *gp += go * factor;
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let n = len_of(p);
                    if self.tracked(p) {
                        let g = ensure(grads, p, n);
                        for (gp, &go) in g.iter_mut().zip(&gout[offset..offset + n]) {
                            *gp += go;
                        }
                    }
                    offset += n;
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let ishape = &self.nodes[input.0].shape;
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let cout = self.nodes[kernel.0].shape[0];
                if self.tracked(*input) {
                    let kvals = &self.nodes[kernel.0].values;
                    let g = ensure(grads, *input, len_of(*input));
                    conv2d_backward_input(g, gout, kvals, cin, cout, h, w);
                }
                if self.tracked(*kernel) {
                    let ivals = &self.nodes[input.0].values;
                    let g = ensure(grads, *kernel, len_of(*kernel));
                    conv2d_backward_kernel(g, gout, ivals, cin, cout, h, w);
                }
                if self.tracked(*bias) {
                    let g = ensure(grads, *bias, len_of(*bias));
                    let hw = h * w;
                    for co in 0..cout {
                        g[co] += gout[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1x1 { input, kernel, bias } => {
                let ishape = &self.nodes[input.0].shape;
                let (cin, hw) = (ishape[0], ishape[1] * ishape[2]);
                let cout = self.nodes[kernel.0].shape[0];
                if self.tracked(*input) {
                    let kvals = &self.nodes[kernel.0].values;
                    let g = ensure(grads, *input, len_of(*input));
                    for ci in 0..cin {
                        for co in 0..cout {
                            let k = kvals[co * cin + ci];
                            let go = &gout[co * hw..(co + 1) * hw];
                            for (gp, &gv) in g[ci * hw..(ci + 1) * hw].iter_mut().zip(go) {
                                *gp += k * gv;
                            }
                        }
                    }
                }
                if self.tracked(*kernel) {
                    let ivals = &self.nodes[input.0].values;
                    let g = ensure(grads, *kernel, len_of(*kernel));
                    for co in 0..cout {
                        let go = &gout[co * hw..(co + 1) * hw];
                        for ci in 0..cin {
                            let inp = &ivals[ci * hw..(ci + 1) * hw];
                            g[co * cin + ci] +=
                                go.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.tracked(*bias) {
                    let g = ensure(grads, *bias, len_of(*bias));
                    for co in 0..cout {
                        g[co] += gout[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu(a) => {
                if self.tracked(*a) {
                    let scale = if self.corrupt_leaky_relu { 2.0 } else { 1.0 };
                    let avals = &self.nodes[a.0].values;
                    let g = ensure(grads, *a, len_of(*a));
                    for ((gp, &go), &x) in g.iter_mut().zip(gout).zip(avals) {
                        let d = if x >= 0.0 { 1.0 } else { LEAKY_RELU_SLOPE };
                        *gp += scale * go * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.tracked(*a) {
                    let svals = &node.values;
                    let g = ensure(grads, *a, len_of(*a));
                    for ((gp, &go), &s) in g.iter_mut().zip(gout).zip(svals) {
                        *gp += go * s * (1.0 - s);
                    }
                }
            }
            Op::AvgPool2(a) => {
                if self.tracked(*a) {
                    let ishape = &self.nodes[a.0].shape;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let g = ensure(grads, *a, len_of(*a));
                    for ch in 0..c {
                        let go = &gout[ch * oh * ow..(ch + 1) * oh * ow];
                        let gi = &mut g[ch * h * w..(ch + 1) * h * w];
                        for r in 0..oh {
                            for col in 0..ow {
                                let q = 0.25 * go[r * ow + col];
                                let base = 2 * r * w + 2 * col;
                                gi[base] += q;
                                gi[base + 1] += q;
                                gi[base + w] += q;
                                gi[base + w + 1] += q;
                            }
                        }
                    }
                }
            }
            Op::BilinearUp2(a) => {
                if self.tracked(*a) {
                    let ishape = &self.nodes[a.0].shape;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let rt = up2_taps(h);
                    let ct = up2_taps(w);
                    let g = ensure(grads, *a, len_of(*a));
                    for ch in 0..c {
                        let go = &gout[ch * oh * ow..(ch + 1) * oh * ow];
                        let gi = &mut g[ch * h * w..(ch + 1) * h * w];
                        for or in 0..oh {
                            let (r0, r1, fr) = rt[or];
                            for oc in 0..ow {
                                let (c0, c1, fc) = ct[oc];
                                let gv = go[or * ow + oc];
                                gi[r0 * w + c0] += (1.0 - fr) * (1.0 - fc) * gv;
                                gi[r0 * w + c1] += (1.0 - fr) * fc * gv;
                                gi[r1 * w + c0] += fr * (1.0 - fc) * gv;
                                gi[r1 * w + c1] += fr * fc * gv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.tracked(*a) {
                    let g = ensure(grads, *a, len_of(*a));
                    for gp in g.iter_mut() {
                        *gp += gout[0];
                    }
                }
            }
            Op::BceWithLogitsSum { logits, targets } => {
                if self.tracked(*logits) {
                    let z = &self.nodes[logits.0].values;
                    let y = &self.nodes[targets.0].values;
                    let g = ensure(grads, *logits, len_of(*logits));
                    for (gp, (&zv, &yv)) in g.iter_mut().zip(z.iter().zip(y)) {
                        *gp += gout[0] * (sigmoid(zv) - yv);
                    }
                }
                if self.tracked(*targets) {
                    let z = &self.nodes[logits.0].values;
                    let g = ensure(grads, *targets, len_of(*targets));
                    for (gp, &zv) in g.iter_mut().zip(z) {
                        *gp += gout[0] * (-zv);
                    }
                }
            }
            Op::Outer { u, v } => {
                let (hu, wv) = (len_of(*u), len_of(*v));
                if self.tracked(*u) {
                    let vvals = &self.nodes[v.0].values;
                    let g = ensure(grads, *u, hu);
                    for r in 0..hu {
                        g[r] += gout[r * wv..(r + 1) * wv]
                            .iter()
                            .zip(vvals)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if self.tracked(*v) {
                    let uvals = &self.nodes[u.0].values;
                    let g = ensure(grads, *v, wv);
                    for (r, &uv) in uvals.iter().enumerate() {
                        for (gp, &go) in g.iter_mut().zip(&gout[r * wv..(r + 1) * wv]) {
                            *gp += uv * go;
                        }
                    }
                }
            }
            Op::AddChannels { input, grid, mask } => {
                let hw = len_of(*grid);
                if self.tracked(*input) {
                    let g = ensure(grads, *input, len_of(*input));
                    for (gp, &go) in g.iter_mut().zip(gout) {
                        *gp += go;
                    }
                }
                if self.tracked(*grid) {
                    let g = ensure(grads, *grid, hw);
                    for (ch, &on) in mask.iter().enumerate() {
                        if on {
                            for (gp, &go) in g.iter_mut().zip(&gout[ch * hw..(ch + 1) * hw]) {
                                *gp += go;
                            }
                        }
                    }
                }
            }
            Op::MulChannels { input, grid, mask } => {
                let hw = len_of(*grid);
                if self.tracked(*input) {
                    let gvals = &self.nodes[grid.0].values;
                    let g = ensure(grads, *input, len_of(*input));
                    for (ch, &on) in mask.iter().enumerate() {
                        let gi = &mut g[ch * hw..(ch + 1) * hw];
                        let go = &gout[ch * hw..(ch + 1) * hw];
                        if on {
                            for ((gp, &gv), &gr) in gi.iter_mut().zip(go).zip(gvals) {
                                *gp += gv * gr;
                            }
                        } else {
                            for (gp, &gv) in gi.iter_mut().zip(go) {
                                *gp += gv;
                            }
                        }
                    }
                }
                if self.tracked(*grid) {
                    let ivals = &self.nodes[input.0].values;
                    let g = ensure(grads, *grid, hw);
                    for (ch, &on) in mask.iter().enumerate() {
                        if on {
                            let go = &gout[ch * hw..(ch + 1) * hw];
                            let inp = &ivals[ch * hw..(ch + 1) * hw];
                            for ((gp, &gv), &x) in g.iter_mut().zip(go).zip(inp) {
                                *gp += gv * x;
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let n_in = len_of(*input);
                let n_out = len_of(*bias);
                if self.tracked(*input) {
                    let wvals = &self.nodes[weight.0].values;
                    let g = ensure(grads, *input, n_in);
                    for o in 0..n_out {
                        let row = &wvals[o * n_in..(o + 1) * n_in];
                        for (gp, &wv) in g.iter_mut().zip(row) {
                            *gp += gout[o] * wv;
                        }
                    }
                }
                if self.tracked(*weight) {
                    let ivals = &self.nodes[input.0].values;
                    let g = ensure(grads, *weight, n_in * n_out);
                    for o in 0..n_out {
                        for (gp, &x) in g[o * n_in..(o + 1) * n_in].iter_mut().zip(ivals) {
                            *gp += gout[o] * x;
                        }
                    }
                }
                if self.tracked(*bias) {
                    let g = ensure(grads, *bias, n_out);
                    for (gp, &go) in g.iter_mut().zip(gout) {
                        *gp += go;
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn chw_spatial(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [_, h, w] => Some((*h, *w)),
        _ => None,
    }
}

/// Per-axis source taps for 2x bilinear upsampling (align-corners-false):
/// src = (dst + 0.5) / 2 - 0.5, clamped into the input range.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|od| {
            let src = (od as f64 + 0.5) / 2.0 - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = if i1 > i0 { src - i0 as f64 } else { 0.0 };
            (i0, i1, frac)
        })
        .collect()
}

fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let oc = &mut out[co * hw..(co + 1) * hw];
        oc.fill(bias[co]);
        for ci in 0..cin {
            let ic = &input[ci * hw..(ci + 1) * hw];
            let k = &kernel[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for (dy, krow) in k.chunks_exact(3).enumerate() {
                let dy = dy as isize - 1;
                for (dx, &kv) in krow.iter().enumerate() {
                    let dx = dx as isize - 1;
                    accumulate_shifted(oc, ic, kv, dy, dx, h, w);
                }
            }
        }
    }
    out
}

/// out[r, c] += k * in[r + dy, c + dx] over the valid range.
fn accumulate_shifted(out: &mut [f64], inp: &[f64], k: f64, dy: isize, dx: isize, h: usize, w: usize) {
    if k == 0.0 {
        return;
    }
    let r_lo = (-dy).max(0) as usize;
    let r_hi = (h as isize - dy).min(h as isize) as usize;
    let c_lo = (-dx).max(0) as usize;
    let c_hi = (w as isize - dx).min(w as isize) as usize;
    for r in r_lo..r_hi {
        let src = (r as isize + dy) as usize * w;
        let start = (src as isize + dx + c_lo as isize) as usize;
        let orow = &mut out[r * w + c_lo..r * w + c_hi];
        let irow = &inp[start..start + (c_hi - c_lo)];
        for (o, &x) in orow.iter_mut().zip(irow) {
            *o += k * x;
        }
    }
}

fn conv2d_backward_input(
    gin: &mut [f64],
    gout: &[f64],
    kernel: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    for ci in 0..cin {
        let gi = &mut gin[ci * hw..(ci + 1) * hw];
        for co in 0..cout {
            let go = &gout[co * hw..(co + 1) * hw];
            let k = &kernel[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for (dy, krow) in k.chunks_exact(3).enumerate() {
                let dy = dy as isize - 1;
                for (dx, &kv) in krow.iter().enumerate() {
                    let dx = dx as isize - 1;
                    // d in[r+dy, c+dx] gets k * gout[r, c]: flip the shift.
                    accumulate_shifted(gi, go, kv, -dy, -dx, h, w);
                }
            }
        }
    }
}

fn conv2d_backward_kernel(
    gk: &mut [f64],
    gout: &[f64],
    input: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    for co in 0..cout {
        let go = &gout[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let ic = &input[ci * hw..(ci + 1) * hw];
            let k = &mut gk[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let r_lo = (-dy).max(0) as usize;
                    let r_hi = (h as isize - dy).min(h as isize) as usize;
                    let c_lo = (-dx).max(0) as usize;
                    let c_hi = (w as isize - dx).min(w as isize) as usize;
                    let mut acc = 0.0;
                    for r in r_lo..r_hi {
                        let src = ((r as isize + dy) as usize) * w;
                        let start = (src as isize + dx + c_lo as isize) as usize;
                        let grow = &go[r * w + c_lo..r * w + c_hi];
                        let irow = &ic[start..start + (c_hi - c_lo)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    k[((dy + 1) * 3 + dx + 1) as usize] += acc;
                }
            }
        }
    }
}
