use crate::kernels::{self, Conv3dSpec, Rounding};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this crate.
///
/// Given the input values, the forward output and the gradient flowing into
/// the output, return one gradient per input (same dims as that input).
pub trait BackwardRule<T: Element>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv3d { input: Var, kernel: Var, bias: Var, spec: Conv3dSpec },
    MaxPool3d { input: Var, argmax: Vec<usize> },
    Linear { x: Var, weight: Var, bias: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Row { a: Var, row: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    MeanRows { a: Var },
    Sum { a: Var },
    Bce { p: Var, target: T, eps: T },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule<T>> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of operations. Every operation's inputs precede it, and
/// backward visits operations in exact reverse recording order.
///
/// A tape is single-threaded; run independent tapes in parallel instead.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    match *t.dims() {
        [m, n] => Ok((m, n)),
        ref d => Err(TensorError::shape(op, format!("expected a matrix, got {d:?}"))),
    }
}

fn vector_len(op: &'static str, t: &Tensor<impl Element>) -> Result<usize> {
    match *t.dims() {
        [n] => Ok(n),
        ref d => Err(TensorError::shape(op, format!("expected a vector, got {d:?}"))),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permuted_dims(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| dims[a]).collect()
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Moves data from layout `dims` into layout `dims` permuted by `axes`.
fn permute_data<T: Element>(data: &[T], dims: &[usize], axes: &[usize]) -> Vec<T> {
    let out_dims = permuted_dims(dims, axes);
    let in_strides = strides(dims);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_dims.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], kind: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, requires_grad, op: kind });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of `v`; `None` for detached nodes or before any
    /// backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, spec: Conv3dSpec) -> Result<Var> {
        let (x, k, b) = (self.val(input)?, self.val(kernel)?, self.val(bias)?);
        if b.rank() != 1 {
            return Err(TensorError::shape("conv3d", format!("bias must be a vector, got {:?}", b.dims())));
        }
        let (out, dims) = kernels::conv3d_forward(x.data(), x.dims(), k.data(), k.dims(), b.data(), spec)?;
        let value = Tensor::from_parts_unchecked(dims.to_vec(), out);
        self.push("conv3d", value, &[input, kernel, bias], Op::Conv3d { input, kernel, bias, spec })
    }

    pub fn maxpool3d(&mut self, input: Var, rounding: [Rounding; 3]) -> Result<Var> {
        let x = self.val(input)?;
        let (out, argmax, dims) = kernels::maxpool3d_forward(x.data(), x.dims(), rounding)?;
        let value = Tensor::from_parts_unchecked(dims.to_vec(), out);
        self.push("maxpool3d", value, &[input], Op::MaxPool3d { input, argmax })
    }

    /// Fully connected layer: `weight[m, n] · x[n] + bias[m]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let (xv, w, b) = (self.val(x)?, self.val(weight)?, self.val(bias)?);
        let n = vector_len(OP, xv)?;
        let (m, wn) = matrix_dims(OP, w)?;
        if wn != n || vector_len(OP, b)? != m {
            return Err(TensorError::shape(
                OP,
                format!("x {:?}, weight {:?}, bias {:?}", xv.dims(), w.dims(), b.dims()),
            ));
        }
        let out = kernels::linear_forward(xv.data(), w.data(), b.data());
        let value = Tensor::from_parts_unchecked(vec![m], out);
        self.push(OP, value, &[x, weight, bias], Op::Linear { x, weight, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (m, k) = matrix_dims("matmul", av)?;
        let (k2, n) = matrix_dims("matmul", bv)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", av.dims(), bv.dims())));
        }
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::from_parts_unchecked(vec![m, n], out), &[a, b], Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let (m, n) = matrix_dims("transpose", av)?;
        let out = kernels::transpose(av.data(), m, n);
        self.push("transpose", Tensor::from_parts_unchecked(vec![n, m], out), &[a], Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        same_dims("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts_unchecked(av.dims().to_vec(), data);
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    /// Adds `row[n]` to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.val(a)?, self.val(row)?);
        let (_, n) = matrix_dims("add_row", av)?;
        if vector_len("add_row", rv)? != n {
            return Err(TensorError::shape("add_row", format!("{:?} + {:?}", av.dims(), rv.dims())));
        }
        let data = av
            .data()
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::from_parts_unchecked(av.dims().to_vec(), data);
        self.push("add_row", value, &[a, row], Op::AddRow { a, row })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        same_dims("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts_unchecked(av.dims().to_vec(), data);
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.val(a)?.map(|x| x * factor);
        self.push("scale", value, &[a], Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a)?.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", value, &[a], Op::Relu { a })
    }

    /// Logistic function `1 / (1 + exp(-x))`, elementwise.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a)?.map(sigmoid);
        self.push("sigmoid", value, &[a], Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a)?.map(T::tanh);
        self.push("tanh", value, &[a], Op::Tanh { a })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let n = *av.dims().last().unwrap_or(&1);
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts_unchecked(av.dims().to_vec(), data);
        self.push("softmax", value, &[a], Op::Softmax { a })
    }

    /// Order-preserving concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "empty part list"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.val(p)?;
            vector_len("concat", pv)?;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::from_parts_unchecked(vec![data.len()], data);
        self.push("concat", value, parts, Op::Concat { parts: parts.to_vec() })
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a)?;
        let n = vector_len("slice", av)?;
        if len == 0 || start + len > n {
            return Err(TensorError::shape("slice", format!("{start}..{} of {n}", start + len)));
        }
        let value = Tensor::from_parts_unchecked(vec![len], av.data()[start..start + len].to_vec());
        self.push("slice", value, &[a], Op::Slice { a, start })
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let av = self.val(a)?;
        let (m, n) = matrix_dims("row", av)?;
        if row >= m {
            return Err(TensorError::shape("row", format!("row {row} of {m}")));
        }
        let value = Tensor::from_parts_unchecked(vec![n], av.data()[row * n..(row + 1) * n].to_vec());
        self.push("row", value, &[a], Op::Row { a, row })
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.val(a)?.clone().reshape(dims.to_vec())?;
        self.push("reshape", value, &[a], Op::Reshape { a })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.val(a)?;
        let mut seen = vec![false; av.rank()];
        if axes.len() != av.rank() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::invalid("permute", format!("{axes:?} is not a permutation of rank {}", av.rank())));
        }
        let data = permute_data(av.data(), av.dims(), axes);
        let value = Tensor::from_parts_unchecked(permuted_dims(av.dims(), axes), data);
        self.push("permute", value, &[a], Op::Permute { a, axes: axes.to_vec() })
    }

    /// Mean over the rows of `a[m, n]`, giving a vector of length `n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let (m, n) = matrix_dims("mean_rows", av)?;
        let mut out = vec![T::zero(); n];
        for r in av.data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("mean_rows", Tensor::from_parts_unchecked(vec![n], out), &[a], Op::MeanRows { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.val(a)?.sum());
        self.push("sum", value, &[a], Op::Sum { a })
    }

    /// Binary cross entropy `-y log p - (1 - y) log(1 - p)` with `p`
    /// clamped to `[eps, 1 - eps]`, `eps = 1e-7`.
    pub fn bce(&mut self, p: Var, target: u8) -> Result<Var> {
        if target > 1 {
            return Err(TensorError::invalid("bce_loss", format!("target must be 0 or 1, got {target}")));
        }
        let pv = self.val(p)?;
        if pv.numel() != 1 {
            return Err(TensorError::shape("bce_loss", format!("p must be scalar, got {:?}", pv.dims())));
        }
        let eps = T::of(1e-7);
        let y = T::of(target as f64);
        let pc = pv.item().max(eps).min(T::one() - eps);
        let loss = -(y * pc.ln()) - (T::one() - y) * (T::one() - pc).ln();
        self.push("bce_loss", Tensor::scalar(loss), &[p], Op::Bce { p, target: y, eps })
    }

    /// Records an operation whose value was computed by the caller and whose
    /// gradient is given by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn BackwardRule<T>>) -> Result<Var> {
        for &v in inputs {
            self.node(v)?;
        }
        self.push("custom", value, inputs, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a scalar `loss`, adding `d(loss)/d(node)` into
    /// the stored gradient of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.val(loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.dims().to_vec()));
        }
        let seed = Tensor::full(lv.dims().to_vec(), T::one())?;
        self.backward_with(loss, seed)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` (same dims as
    /// `root`). Used to chain tapes: the gradient of a downstream tape's
    /// leaf becomes the seed here.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        same_dims("backward", self.val(root)?, &seed)?;
        if !self.needs(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g)?;
            for (v, gi) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let v = |var: Var| &self.nodes[var.0].value;
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts_unchecked(t.dims().to_vec(), data);
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            a.iter().zip(g.data()).map(|(&x, &gx)| f(x, gx)).collect()
        };

        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { input, kernel, bias, spec } => {
                let (x, k) = (v(*input), v(*kernel));
                let (gi, gk, gb) = kernels::conv3d_backward(
                    x.data(),
                    x.dims(),
                    k.data(),
                    k.dims(),
                    *spec,
                    g.data(),
                    self.needs(*input),
                )?;
                let mut r = vec![(*kernel, like(k, gk)), (*bias, like(v(*bias), gb))];
                if let Some(gi) = gi {
                    r.push((*input, like(x, gi)));
                }
                r
            }
            Op::MaxPool3d { input, argmax } => {
                let x = v(*input);
                vec![(*input, like(x, kernels::maxpool3d_backward(x.numel(), argmax, g.data())))]
            }
            Op::Linear { x, weight, bias } => {
                let (xv, w) = (v(*x), v(*weight));
                let (gx, gw) = kernels::linear_backward(xv.data(), w.data(), g.data(), self.needs(*x));
                let mut r = vec![(*weight, like(w, gw)), (*bias, g.clone())];
                if let Some(gx) = gx {
                    r.push((*x, like(xv, gx)));
                }
                r
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = bv.dims()[1];
                let mut r = Vec::new();
                if self.needs(*a) {
                    let bt = kernels::transpose(bv.data(), k, n);
                    r.push((*a, like(av, kernels::matmul(g.data(), &bt, m, n, k))));
                }
                if self.needs(*b) {
                    let at = kernels::transpose(av.data(), m, k);
                    r.push((*b, like(bv, kernels::matmul(&at, g.data(), k, m, n))));
                }
                r
            }
            Op::Transpose { a } => {
                let (n, m) = (out.dims()[0], out.dims()[1]);
                vec![(*a, like(v(*a), kernels::transpose(g.data(), n, m)))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow { a, row } => {
                let n = v(*row).numel();
                let mut gr = vec![T::zero(); n];
                for r in g.data().chunks_exact(n) {
                    for (o, &x) in gr.iter_mut().zip(r) {
                        *o += x;
                    }
                }
                vec![(*a, g.clone()), (*row, like(v(*row), gr))]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (v(*a), v(*b));
                let ga = bv.data().iter().zip(g.data()).map(|(&y, &gx)| y * gx).collect();
                let gb = av.data().iter().zip(g.data()).map(|(&x, &gx)| x * gx).collect();
                vec![(*a, like(av, ga)), (*b, like(bv, gb))]
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                vec![(*a, g.map(|x| x * f))]
            }
            Op::Relu { a } => {
                vec![(*a, like(out, zip(out.data(), &|y, gx| if y > T::zero() { gx } else { T::zero() })))]
            }
            Op::Sigmoid { a } => vec![(*a, like(out, zip(out.data(), &|y, gx| gx * y * (T::one() - y))))],
            Op::Tanh { a } => vec![(*a, like(out, zip(out.data(), &|y, gx| gx * (T::one() - y * y))))],
            Op::Softmax { a } => {
                let n = *out.dims().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(out.numel());
                for (y, gy) in out.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    let s: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    gx.extend(y.iter().zip(gy).map(|(&yi, &gi)| yi * (gi - s)));
                }
                vec![(*a, like(out, gx))]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = v(p).numel();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (p, like(v(p), piece))
                    })
                    .collect()
            }
            Op::Slice { a, start } => {
                let av = v(*a);
                let mut ga = vec![T::zero(); av.numel()];
                ga[*start..*start + g.numel()].copy_from_slice(g.data());
                vec![(*a, like(av, ga))]
            }
            Op::Row { a, row } => {
                let av = v(*a);
                let n = g.numel();
                let mut ga = vec![T::zero(); av.numel()];
                ga[row * n..(row + 1) * n].copy_from_slice(g.data());
                vec![(*a, like(av, ga))]
            }
            Op::Reshape { a } => vec![(*a, like(v(*a), g.data().to_vec()))],
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![(*a, like(v(*a), permute_data(g.data(), out.dims(), &inverse)))]
            }
            Op::MeanRows { a } => {
                let av = v(*a);
                let m = av.dims()[0];
                let inv = T::one() / T::of(m as f64);
                let row: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                vec![(*a, like(av, data))]
            }
            Op::Sum { a } => {
                let av = v(*a);
                vec![(*a, Tensor::from_parts_unchecked(av.dims().to_vec(), vec![g.item(); av.numel()]))]
            }
            Op::Bce { p, target, eps } => {
                let pv = v(*p);
                let pc = pv.item().max(*eps).min(T::one() - *eps);
                let d = (pc - *target) / (pc * (T::one() - pc));
                vec![(*p, like(pv, vec![d * g.item()]))]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&x| v(x)).collect();
                let grads = rule.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::invalid("custom", "backward rule returned wrong gradient count"));
                }
                for (gi, x) in grads.iter().zip(&ins) {
                    same_dims("custom", gi, x)?;
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), data).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn detached_tensor_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64)).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 5.0);
        assert!(tape.grad(c).is_none());
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let err = tape.leaf(t(&[2], &[1.0, f64::NAN]), true).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-3.0, 0.0, 3.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.5);
        assert!(tape.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
        let ones = tape.constant(t(&[4], &[1.0; 4])).unwrap();
        let sm = tape.softmax(ones).unwrap();
        assert_eq!(tape.value(sm).data(), &[0.25; 4]);
    }

    #[test]
    fn bce_matches_analytic_values() {
        let mut tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::scalar(0.5)).unwrap();
        let l = tape.bce(half, 1).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = tape.constant(Tensor::scalar(0.9)).unwrap();
        let l = tape.bce(p, 0).unwrap();
        assert!((tape.value(l).item() - 2.302585092994046).abs() < 1e-9);
        let one = tape.constant(Tensor::scalar(1.0 - 1e-7)).unwrap();
        let l = tape.bce(one, 1).unwrap();
        assert!(tape.value(l).item() < 1e-6);
        assert!(tape.bce(one, 2).is_err());
    }

    #[test]
    fn concat_orders_and_splits_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.param(t(&[1], &[3.0])).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant(t(&[3], &[10.0, 20.0, 30.0])).unwrap();
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[30.0]);
        assert!(tape.concat(&[]).is_err());
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = tape.constant(t(&[2, 3, 4], &data)).unwrap();
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).dims(), &[4, 2, 3]);
        assert_eq!(tape.value(p).data()[1], 4.0);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        assert!(tape.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn fully_connected_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 0.25])).unwrap();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let zero = tape.constant(t(&[3], &[0.0; 3])).unwrap();
        let y = tape.linear(x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(t(&[2, 2], &[0.0; 4])).unwrap();
        assert!(tape.linear(x, bad, zero).is_err());
    }
}
