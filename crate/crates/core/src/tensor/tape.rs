use super::kernels::{self, ConvGeometry};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// Constant copy of another node; blocks gradient flow.
    Detach,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Log(Var),
    SoftmaxT {
        input: Var,
        temperature: T,
    },
    Sum(Var),
    ChannelSum(Var),
    SpatialSum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    FrobeniusSq(Var, Var),
    RowL2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Bilinear {
        input: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Detach => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::ChannelSum(a)
            | Op::SpatialSum(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxT { input: a, .. }
            | Op::RowL2Normalize { input: a, .. }
            | Op::Bilinear { input: a } => vec![a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::FrobeniusSq(a, b) => {
                vec![a, b]
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records primitive applications in execution order and replays them in
/// reverse to accumulate gradients.
///
/// Nodes are appended only after their inputs, so the node list is already a
/// topological order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LOG_FLOOR: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] for a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Direct inputs of a recorded operation.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by forward op");
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`: same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Detach)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// 2-D cross-correlation on `B×H×W×Cin` input with a `kh×kw×Cin×Cout`
    /// kernel. Output extent is `(H + 2p - d(k-1) - 1) / s + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input/weight and 1-d bias, got {is:?}, {ws:?}, {bs:?}"),
            ));
        }
        if is[3] != ws[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", is[3], ws[2]),
            ));
        }
        if bs[0] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries but weight has {} outputs", bs[0], ws[3]),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Param("conv2d stride and dilation must be >= 1".into()));
        }
        if ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(Error::Param(format!("conv2d kernel must be odd, got {}x{}", ws[0], ws[1])));
        }
        let span_h = dilation * (ws[0] - 1) + 1;
        let span_w = dilation * (ws[1] - 1) + 1;
        if is[1] + 2 * padding < span_h || is[2] + 2 * padding < span_w {
            return Err(Error::shape("conv2d", "kernel footprint exceeds padded input"));
        }
        let geom = ConvGeometry {
            batch: is[0],
            in_h: is[1],
            in_w: is[2],
            in_c: is[3],
            out_h: (is[1] + 2 * padding - span_h) / stride + 1,
            out_w: (is[2] + 2 * padding - span_w) / stride + 1,
            out_c: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            dilation,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let keep_cols = self.requires_grad(weight);
        let value = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols: keep_cols.then_some(cols) }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Natural log with the input clamped below at 1e-12.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::lit(LOG_FLOOR);
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push(value, Op::Log(a))
    }

    /// Softmax over the last axis of `logits / temperature`.
    pub fn softmax_t(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let value = super::softmax_t(self.value(logits), temperature)?;
        Ok(self.push(value, Op::SoftmaxT { input: logits, temperature: T::lit(temperature) }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Sums the last axis away: `[..., C] -> [...]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("channel_sum", "scalar input"))?;
        let data = if c == 0 {
            vec![T::zero(); shape[..shape.len() - 1].iter().product()]
        } else {
            self.value(a).data().chunks_exact(c).map(|r| r.iter().copied().sum()).collect()
        };
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::ChannelSum(a)))
    }

    /// Sums the spatial axes away: `[B, H, W, C] -> [B, C]`.
    pub fn spatial_sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [b, h, w, c] = shape[..] else {
            return Err(Error::shape("spatial_sum", format!("expected 4-d, got {shape:?}")));
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let dst = &mut out[bi * c..(bi + 1) * c];
            for px in src[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact(c.max(1)) {
                for (d, &s) in dst.iter_mut().zip(px) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::SpatialSum(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), false, self.value(b).data(), false, &mut out, m, k, n, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [r, c] = s[..] else {
            return Err(Error::shape("transpose", format!("expected 2-d, got {s:?}")));
        };
        let src = self.value(a).data();
        let out = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `Σ (a − b)²` over all elements.
    pub fn frobenius_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("frobenius_sq", a, b)?;
        let total =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(total), Op::FrobeniusSq(a, b)))
    }

    /// Scales each row of a 2-d tensor to unit L2 norm. All-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [_, c] = s[..] else {
            return Err(Error::shape("row_l2_normalize", format!("expected 2-d, got {s:?}")));
        };
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for (i, row) in value.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                log::debug!("row_l2_normalize: row {i} has zero norm, left as zeros");
            }
            norms.push(norm);
        }
        Ok(self.push(value, Op::RowL2Normalize { input: a, norms }))
    }

    /// Bilinear resampling of a `B×H×W×C` map with half-pixel centres.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [b, h, w, c] = s[..] else {
            return Err(Error::shape("bilinear_resize", format!("expected 4-d, got {s:?}")));
        };
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "zero spatial extent"));
        }
        let out = kernels::bilinear_forward(self.value(a).data(), (b, h, w, c), (out_h, out_w));
        let value = Tensor::new(vec![b, out_h, out_w, c], out)?;
        Ok(self.push(value, Op::Bilinear { input: a }))
    }

    /// Reverse accumulation from a scalar `loss`. Afterwards every
    /// `requires_grad` leaf holds a gradient (zero when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Param(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let rows = geom.rows();
                let patch = geom.patch();
                self.accumulate(grads, *bias, |db| {
                    for r in gd.chunks_exact(geom.out_c) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                });
                if self.nodes[weight.0].requires_grad {
                    let cols = cols.as_ref().expect("columns kept for trainable weight");
                    self.accumulate(grads, *weight, |dw| {
                        gemm(cols, true, gd, false, dw, patch, rows, geom.out_c, true);
                    });
                }
                if self.nodes[input.0].requires_grad {
                    let w = self.value(*weight).data();
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(gd, false, w, true, &mut dcols, rows, geom.out_c, patch, false);
                    self.accumulate(grads, *input, |di| kernels::col2im(&dcols, geom, di));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(xb) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(xa) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *f));
            }
            Op::Log(a) => {
                let floor = T::lit(LOG_FLOOR);
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(x) {
                        if x > floor {
                            *d += g / x;
                        }
                    }
                });
            }
            Op::SoftmaxT { input, temperature } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                self.accumulate(grads, *input, |d| {
                    for ((d, g), y) in d.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot) / *temperature;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::ChannelSum(a) => {
                let c = *self.shape(*a).last().unwrap();
                self.accumulate(grads, *a, |d| {
                    if c == 0 {
                        return;
                    }
                    for (row, &g) in d.chunks_exact_mut(c).zip(gd) {
                        row.iter_mut().for_each(|d| *d += g);
                    }
                });
            }
            Op::SpatialSum(a) => {
                let s = self.shape(*a);
                let (hw, c) = (s[1] * s[2], s[3]);
                self.accumulate(grads, *a, |d| {
                    if c == 0 {
                        return;
                    }
                    for (bi, img) in d.chunks_exact_mut(hw * c).enumerate() {
                        let g = &gd[bi * c..(bi + 1) * c];
                        for px in img.chunks_exact_mut(c) {
                            px.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate(grads, *a, |d| gemm(gd, false, vb, true, d, m, n, k, true));
                self.accumulate(grads, *b, |d| gemm(va, true, gd, false, d, k, m, n, true));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
            }
            Op::FrobeniusSq(a, b) => {
                let two_g = T::lit(2.0) * gd[0];
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(xa).zip(xb) {
                        *d += two_g * (x - y);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(xa).zip(xb) {
                        *d -= two_g * (x - y);
                    }
                });
            }
            Op::RowL2Normalize { input, norms } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                self.accumulate(grads, *input, |d| {
                    if c == 0 {
                        return;
                    }
                    for (((d, g), y), &norm) in
                        d.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(y.chunks_exact(c)).zip(norms)
                    {
                        if norm <= T::zero() {
                            continue;
                        }
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += (g - y * dot) / norm;
                        }
                    }
                });
            }
            Op::Bilinear { input } => {
                let s = self.shape(*input);
                let os = node.value.shape();
                self.accumulate(grads, *input, |d| {
                    kernels::bilinear_backward(gd, (s[0], s[1], s[2], s[3]), (os[1], os[2]), d)
                });
            }
        }
        Ok(())
    }
}
