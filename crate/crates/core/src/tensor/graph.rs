use std::cell::RefCell;
use std::fmt;

use super::conv::{self, ConvGeom};
use super::resample::{self, Resample};
use super::{numel, Real};
use crate::error::{contract_err, shape_err, Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { input: usize, weight: usize, bias: usize, geom: ConvGeom },
    Resample { input: usize, mode: Resample, bc: usize, dims: [usize; 3] },
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat { inputs: Vec<usize>, channels: Vec<usize>, batch: usize, spatial: usize },
    SliceChannels { input: usize, start: usize, channels: usize, len: usize, batch: usize, spatial: usize },
    GlobalAvgPool { input: usize, spatial: usize },
    Dense { x: usize, w: usize, b: usize, batch: usize, fan_in: usize, fan_out: usize },
    ScaleChannels { x: usize, s: usize, spatial: usize },
    Mse(usize, usize),
    Sum(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a computation for reverse-mode differentiation.
///
/// A graph belongs to one training step or one inference pass; tensors are
/// lightweight `Copy` handles borrowing it.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(#{}, shape={:?})", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Tensor<'_, T>> {
        if data.len() != numel(&shape) {
            return Err(Error::SizeMismatch { expected: numel(&shape), found: data.len() });
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, false)
    }

    /// A leaf that accumulates gradients during [`Graph::backward`].
    pub fn variable(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, true)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Tensor<'_, T> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Tensor { graph: self, id: nodes.len() - 1 }
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar, adding into the gradients of every
    /// reachable variable. Repeated calls accumulate.
    pub fn backward(&self, loss: Tensor<'_, T>) -> Result<()> {
        self.check_same(&loss)?;
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return contract_err(format!("backward needs a scalar loss, got shape {:?}", root.shape));
            }
            let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![T::one()]);
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                } else {
                    backprop_node(&nodes, node, &g, &mut grads);
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn check_same(&self, t: &Tensor<'_, T>) -> Result<()> {
        if !std::ptr::eq(self, t.graph) {
            return contract_err("tensor belongs to a different graph");
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv3d { input, weight, bias, geom } => {
            if needs(*input) {
                let gi = conv::backward_input(geom, g, &nodes[*weight].value);
                accumulate(grads, *input, gi);
            }
            if needs(*weight) || needs(*bias) {
                let (gw, gb) = conv::backward_params(geom, g, &nodes[*input].value);
                if needs(*weight) {
                    accumulate(grads, *weight, gw);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
        }
        Op::Resample { input, mode, bc, dims } => {
            let gi = if mode.is_up() {
                resample::upsample_backward(g, *bc, *dims, mode.factor())
            } else {
                resample::avg_pool_backward(g, *bc, *dims, mode.factor())
            };
            accumulate(grads, *input, gi);
        }
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if needs(*a) {
                accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &v)| g * v).collect());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().zip(va).map(|(&g, &v)| g * v).collect());
            }
        }
        Op::Relu(x) => {
            let gi = g
                .iter()
                .zip(&nodes[*x].value)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(grads, *x, gi);
        }
        Op::Sigmoid(x) => {
            let gi = g.iter().zip(&node.value).map(|(&g, &y)| g * y * (T::one() - y)).collect();
            accumulate(grads, *x, gi);
        }
        Op::Tanh(x) => {
            let gi = g.iter().zip(&node.value).map(|(&g, &y)| g * (T::one() - y * y)).collect();
            accumulate(grads, *x, gi);
        }
        Op::Concat { inputs, channels, batch, spatial } => {
            let total: usize = channels.iter().sum();
            let mut offset = 0;
            for (&id, &c) in inputs.iter().zip(channels) {
                if needs(id) {
                    let mut gi = Vec::with_capacity(batch * c * spatial);
                    for b in 0..*batch {
                        gi.extend_from_slice(&g[(b * total + offset) * spatial..][..c * spatial]);
                    }
                    accumulate(grads, id, gi);
                }
                offset += c;
            }
        }
        Op::SliceChannels { input, start, channels, len, batch, spatial } => {
            let mut gi = vec![T::zero(); batch * channels * spatial];
            for b in 0..*batch {
                gi[(b * channels + start) * spatial..][..len * spatial]
                    .copy_from_slice(&g[b * len * spatial..][..len * spatial]);
            }
            accumulate(grads, *input, gi);
        }
        Op::GlobalAvgPool { input, spatial } => {
            let scale = T::cast(1.0 / *spatial as f64);
            let gi = g.iter().flat_map(|&gv| std::iter::repeat(gv * scale).take(*spatial)).collect();
            accumulate(grads, *input, gi);
        }
        Op::Dense { x, w, b, batch, fan_in, fan_out } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            if needs(*x) {
                let mut gx = vec![T::zero(); batch * fan_in];
                for n in 0..*batch {
                    for o in 0..*fan_out {
                        let gv = g[n * fan_out + o];
                        for i in 0..*fan_in {
                            gx[n * fan_in + i] += gv * vw[o * fan_in + i];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); fan_out * fan_in];
                for n in 0..*batch {
                    for o in 0..*fan_out {
                        let gv = g[n * fan_out + o];
                        for i in 0..*fan_in {
                            gw[o * fan_in + i] += gv * vx[n * fan_in + i];
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); *fan_out];
                for n in 0..*batch {
                    for o in 0..*fan_out {
                        gb[o] += g[n * fan_out + o];
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::ScaleChannels { x, s, spatial } => {
            let (vx, vs) = (&nodes[*x].value, &nodes[*s].value);
            if needs(*x) {
                let gx = g
                    .chunks(*spatial)
                    .zip(vs)
                    .flat_map(|(gc, &sv)| gc.iter().map(move |&gv| gv * sv))
                    .collect();
                accumulate(grads, *x, gx);
            }
            if needs(*s) {
                let gs = g
                    .chunks(*spatial)
                    .zip(vx.chunks(*spatial))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                    .collect();
                accumulate(grads, *s, gs);
            }
        }
        Op::Mse(p, t) => {
            let (vp, vt) = (&nodes[*p].value, &nodes[*t].value);
            let scale = g[0] * T::cast(2.0 / vp.len() as f64);
            let diff: Vec<T> = vp.iter().zip(vt).map(|(&a, &b)| (a - b) * scale).collect();
            if needs(*t) {
                accumulate(grads, *t, diff.iter().map(|&d| -d).collect());
            }
            if needs(*p) {
                accumulate(grads, *p, diff);
            }
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, *x, vec![g[0]; n]);
        }
    }
}

impl<'g, T: Real> Tensor<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward values.
    pub fn value(&self) -> Vec<T> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward values without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.with_value(|v| v[0])
    }

    /// Accumulated gradient of a variable, `None` before any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn same_graph(&self, other: &Tensor<'g, T>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return contract_err("operands belong to different graphs");
        }
        Ok(())
    }

    fn binary(self, other: Tensor<'g, T>, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Tensor<'g, T>> {
        self.same_graph(&other)?;
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return shape_err(format!("{name}: shapes {:?} and {:?} differ", a.shape, b.shape));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, op, rg))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op) -> Tensor<'g, T> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect(), a.requires_grad)
        };
        self.graph.push(shape, value, op, rg)
    }

    pub fn add(self, other: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn mul(self, other: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn relu(self) -> Tensor<'g, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Tensor<'g, T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Tensor<'g, T> {
        self.unary(|x| x.tanh(), Op::Tanh(self.id))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Tensor<'g, T> {
        let (v, rg) = self.with_node(|n| (n.value.iter().copied().sum::<T>(), n.requires_grad));
        self.graph.push(vec![], vec![v], Op::Sum(self.id), rg)
    }

    /// Mean squared difference as a rank-0 tensor.
    pub fn mse(self, target: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(&target)?;
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[target.id]);
            if a.shape != b.shape {
                return shape_err(format!("mse: shapes {:?} and {:?} differ", a.shape, b.shape));
            }
            let s: f64 = a.value.iter().zip(&b.value).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
            (T::cast(s / a.value.len() as f64), a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(vec![], vec![v], Op::Mse(self.id, target.id), rg))
    }

    fn with_node<R>(&self, f: impl FnOnce(&Node<T>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id])
    }

    fn feature_dims(&self, name: &str) -> Result<[usize; 5]> {
        let s = self.shape();
        if s.len() != 5 {
            return shape_err(format!("{name}: expected a rank-5 (B, C, D, H, W) tensor, got {s:?}"));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    /// Trilinear upsampling or average-pool downsampling of the spatial axes.
    pub fn resample(self, mode: Resample) -> Result<Tensor<'g, T>> {
        let [b, c, d, h, w] = self.feature_dims("resample")?;
        let f = mode.factor();
        let mut out_dims = [0; 3];
        for (i, n) in [d, h, w].into_iter().enumerate() {
            out_dims[i] = mode.output_extent(n).ok_or_else(|| {
                Error::Shape(format!("resample: spatial axis {} of extent {n} not divisible by {f}", i + 2))
            })?;
        }
        let (value, rg) = self.with_node(|n| {
            let v = if mode.is_up() {
                resample::upsample(&n.value, b * c, [d, h, w], f)
            } else {
                resample::avg_pool(&n.value, b * c, [d, h, w], f)
            };
            (v, n.requires_grad)
        });
        let shape = vec![b, c, out_dims[0], out_dims[1], out_dims[2]];
        Ok(self.graph.push(shape, value, Op::Resample { input: self.id, mode, bc: b * c, dims: [d, h, w] }, rg))
    }

    /// Channels `start..start + len` of a `(B, C, ...)` tensor.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Tensor<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return shape_err(format!("slice_channels: {start}..{} out of range for {shape:?}", start + len));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (value, rg) = self.with_node(|n| {
            let mut v = Vec::with_capacity(batch * len * spatial);
            for b in 0..batch {
                v.extend_from_slice(&n.value[(b * channels + start) * spatial..][..len * spatial]);
            }
            (v, n.requires_grad)
        });
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let op = Op::SliceChannels { input: self.id, start, channels, len, batch, spatial };
        Ok(self.graph.push(out_shape, value, op, rg))
    }

    /// Mean over all spatial positions: `(B, C, ...)` → `(B, C)`.
    pub fn global_avg_pool(self) -> Result<Tensor<'g, T>> {
        let shape = self.shape();
        if shape.len() < 3 {
            return shape_err(format!("global_avg_pool: need (B, C, spatial...), got {shape:?}"));
        }
        let spatial: usize = shape[2..].iter().product();
        let (value, rg) = self.with_node(|n| {
            let v = n
                .value
                .chunks(spatial)
                .map(|c| T::cast(c.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
                .collect();
            (v, n.requires_grad)
        });
        Ok(self.graph.push(vec![shape[0], shape[1]], value, Op::GlobalAvgPool { input: self.id, spatial }, rg))
    }

    /// Multiplies every channel map of `(B, C, ...)` by the matching entry of a `(B, C)` tensor.
    pub fn scale_channels(self, scales: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(&scales)?;
        let shape = self.shape();
        let sshape = scales.shape();
        if shape.len() < 3 || sshape != shape[..2] {
            return shape_err(format!("scale_channels: scales {sshape:?} do not match features {shape:?}"));
        }
        let spatial: usize = shape[2..].iter().product();
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (x, s) = (&nodes[self.id], &nodes[scales.id]);
            let v = x
                .value
                .chunks(spatial)
                .zip(&s.value)
                .flat_map(|(c, &sv)| c.iter().map(move |&v| v * sv))
                .collect();
            (v, x.requires_grad || s.requires_grad)
        };
        Ok(self.graph.push(shape, value, Op::ScaleChannels { x: self.id, s: scales.id, spatial }, rg))
    }
}

/// 3-D cross-correlation of `(B, Cin, D, H, W)` with `(Cout, Cin, k, k, k)` plus per-channel bias.
pub fn conv3d<'g, T: Real>(
    input: Tensor<'g, T>,
    weight: Tensor<'g, T>,
    bias: Tensor<'g, T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<'g, T>> {
    input.same_graph(&weight)?;
    input.same_graph(&bias)?;
    let [b, cin, d, h, w] = input.feature_dims("conv3d input")?;
    let ws = weight.shape();
    if ws.len() != 5 {
        return shape_err(format!("conv3d: weight must be (Cout, Cin, k, k, k), got {ws:?}"));
    }
    let (cout, k) = (ws[0], ws[2]);
    if ws[1] != cin {
        return shape_err(format!("conv3d: weight expects {} input channels, input has {cin}", ws[1]));
    }
    if ws[3] != k || ws[4] != k || k % 2 == 0 {
        return shape_err(format!("conv3d: kernel must be cubic with odd extent, got {:?}", &ws[2..]));
    }
    if bias.shape() != [cout] {
        return shape_err(format!("conv3d: bias shape {:?} does not match {cout} output channels", bias.shape()));
    }
    if stride == 0 {
        return shape_err("conv3d: stride must be positive");
    }
    let mut output = [0usize; 3];
    for (i, n) in [d, h, w].into_iter().enumerate() {
        let span = n + 2 * padding;
        if span < k || (span - k) % stride != 0 {
            return shape_err(format!(
                "conv3d: axis {} extent {n} with padding {padding} is incompatible with kernel {k} stride {stride}",
                i + 2
            ));
        }
        output[i] = (span - k) / stride + 1;
    }
    let geom = ConvGeom { batch: b, cin, cout, input: [d, h, w], k, stride, pad: padding, output };
    let (value, rg) = {
        let nodes = input.graph.nodes.borrow();
        let (x, wn, bn) = (&nodes[input.id], &nodes[weight.id], &nodes[bias.id]);
        (conv::forward(&geom, &x.value, &wn.value, &bn.value), x.requires_grad || wn.requires_grad || bn.requires_grad)
    };
    let shape = vec![b, cout, output[0], output[1], output[2]];
    Ok(input.graph.push(shape, value, Op::Conv3d { input: input.id, weight: weight.id, bias: bias.id, geom }, rg))
}

/// `(B, I) · (O, I)ᵀ + (O)` → `(B, O)`.
pub fn dense<'g, T: Real>(x: Tensor<'g, T>, w: Tensor<'g, T>, b: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    x.same_graph(&w)?;
    x.same_graph(&b)?;
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
        return shape_err(format!("dense: incompatible shapes x {xs:?}, w {ws:?}, b {bs:?}"));
    }
    let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
    let (value, rg) = {
        let nodes = x.graph.nodes.borrow();
        let (xv, wv, bv) = (&nodes[x.id].value, &nodes[w.id].value, &nodes[b.id].value);
        let mut out = Vec::with_capacity(batch * fan_out);
        for n in 0..batch {
            for o in 0..fan_out {
                let mut acc = bv[o];
                for i in 0..fan_in {
                    acc += wv[o * fan_in + i] * xv[n * fan_in + i];
                }
                out.push(acc);
            }
        }
        (out, nodes[x.id].requires_grad || nodes[w.id].requires_grad || nodes[b.id].requires_grad)
    };
    Ok(x.graph.push(vec![batch, fan_out], value, Op::Dense { x: x.id, w: w.id, b: b.id, batch, fan_in, fan_out }, rg))
}

/// Concatenates `(B, Ci, ...)` tensors along the channel axis.
pub fn concat_channels<'g, T: Real>(parts: &[Tensor<'g, T>]) -> Result<Tensor<'g, T>> {
    let Some(first) = parts.first() else {
        return shape_err("concat_channels: no operands");
    };
    let graph = first.graph;
    let base = first.shape();
    if base.len() < 2 {
        return shape_err(format!("concat_channels: need (B, C, ...), got {base:?}"));
    }
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_graph(p)?;
        let s = p.shape();
        if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
            return shape_err(format!("concat_channels: {s:?} does not match {base:?} outside the channel axis"));
        }
        channels.push(s[1]);
    }
    let batch = base[0];
    let spatial: usize = base[2..].iter().product();
    let total: usize = channels.iter().sum();
    let (value, rg) = {
        let nodes = graph.nodes.borrow();
        let mut v = Vec::with_capacity(batch * total * spatial);
        for b in 0..batch {
            for (p, &c) in parts.iter().zip(&channels) {
                v.extend_from_slice(&nodes[p.id].value[b * c * spatial..][..c * spatial]);
            }
        }
        (v, parts.iter().any(|p| nodes[p.id].requires_grad))
    };
    let mut shape = base;
    shape[1] = total;
    let inputs = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(shape, value, Op::Concat { inputs, channels, batch, spatial }, rg))
}
