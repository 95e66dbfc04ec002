use super::ops::{self, ConvGeometry, PoolGeometry, PoolKind};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch mean and unbiased variance.
pub type BatchMoments<T> = (Vec<T>, Vec<T>);

/// Statistics source for batch normalization.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with previously estimated statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeometry,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        input: Var,
        scale: Var,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records executed operations so that [`Tape::backward`] can replay them in
/// reverse.
///
/// A tape built with [`Tape::inference`] never tracks gradients and keeps no
/// backward state.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter. Gradients are tracked when the tensor
    /// is flagged `requires_grad` and the tape is recording.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires = self.recording && tensor.requires_grad();
        self.push(tensor.with_requires_grad(requires), Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires = self.recording && inputs.iter().any(|&v| self.tracks(v));
        let value = Tensor::new(shape, data)
            .expect("kernel output matches shape")
            .with_requires_grad(requires);
        let op = if requires { op } else { Op::Leaf };
        self.push(value, op)
    }

    fn rank4(&self, var: Var, op: &'static str) -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(self.shape(var))
            .map_err(|_| Error::shape(op, format!("expected (N,C,H,W), got {:?}", self.shape(var))))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.out_channels),
                ));
            }
        }
        let out = ops::conv2d_forward(
            &geom,
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_result(
            &geom.output_shape(),
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// In [`BatchNormStats::Batch`] mode also returns the batch mean and
    /// unbiased variance so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        const OP: &str = "batchnorm2d";
        let shape = self.rank4(input, OP)?;
        let [n, c, h, w] = shape;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(OP, format!("{name} shape {:?}, expected [{c}]", self.shape(v))));
            }
        }
        let batch_stats = matches!(stats, BatchNormStats::Batch);
        if batch_stats && n * h * w < 2 {
            return Err(Error::invalid(OP, format!("training mode needs N*H*W >= 2, got {}", n * h * w)));
        }
        let running = match stats {
            BatchNormStats::Batch => None,
            BatchNormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(OP, format!("running stats must have {c} entries")));
                }
                Some((mean, var))
            }
        };
        let fwd = ops::batchnorm_forward(shape, self.data(input), self.data(gamma), self.data(beta), running, eps);
        let batch = batch_stats.then_some((fwd.batch_mean, fwd.batch_var));
        let var = self.push_result(
            &shape,
            fwd.output,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                batch_stats,
            },
        );
        Ok((var, batch))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(input).to_vec();
        self.push_result(&shape, out, &[input], Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|&x| ops::sigmoid(x)).collect();
        let shape = self.shape(input).to_vec();
        self.push_result(&shape, out, &[input], Op::Sigmoid(input))
    }

    /// Windowed or global pooling. `padding` applies to max pooling only
    /// (padded cells never win); average pooling rejects padding.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let [n, c, h, w] = self.rank4(input, OP)?;
        match kind {
            PoolKind::GlobalAvg => {
                let area = T::from_usize(h * w).expect("area");
                let out = self
                    .data(input)
                    .chunks(h * w)
                    .map(|plane| plane.iter().copied().sum::<T>() / area)
                    .collect();
                Ok(self.push_result(&[n, c, 1, 1], out, &[input], Op::GlobalAvgPool(input)))
            }
            PoolKind::Max => {
                let geom = PoolGeometry::new(self.shape(input), kernel, stride, padding)?;
                let (out, argmax) = ops::max_pool_forward(&geom, self.data(input));
                Ok(self.push_result(&geom.output_shape(), out, &[input], Op::MaxPool { input, argmax }))
            }
            PoolKind::Avg => {
                if padding != 0 {
                    return Err(Error::invalid(OP, "average pooling does not take padding"));
                }
                let geom = PoolGeometry::new(self.shape(input), kernel, stride, 0)?;
                let out = ops::avg_pool_forward(&geom, self.data(input));
                Ok(self.push_result(&geom.output_shape(), out, &[input], Op::AvgPool { input, geom }))
            }
        }
    }

    /// Concatenates (N,Cᵢ,H,W) inputs along channels, in input order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let [n, _, h, w] = self.rank4(first, OP)?;
        let mut channels = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.rank4(v, OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    OP,
                    format!("input {:?} does not share N,H,W with {:?}", self.shape(v), self.shape(first)),
                ));
            }
            channels += vc;
        }
        let area = h * w;
        let mut out = Vec::with_capacity(n * channels * area);
        for b in 0..n {
            for &v in inputs {
                let vc = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[b * vc * area..(b + 1) * vc * area]);
            }
        }
        Ok(self.push_result(&[n, channels, h, w], out, inputs, Op::Concat(inputs.to_vec())))
    }

    /// `input·weightᵀ + bias` for input (N,F) and weight (O,F).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [n, f] = <[usize; 2]>::try_from(self.shape(input))
            .map_err(|_| Error::shape(OP, format!("input must be (N,F), got {:?}", self.shape(input))))?;
        let [o, wf] = <[usize; 2]>::try_from(self.shape(weight))
            .map_err(|_| Error::shape(OP, format!("weight must be (O,F), got {:?}", self.shape(weight))))?;
        if wf != f {
            return Err(Error::shape(OP, format!("input has F={f} features, weight expects {wf}")));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(OP, format!("bias shape {:?}, expected [{o}]", self.shape(b))));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(self.data(b));
            }
        }
        T::gemm(n, f, o, T::one(), self.data(input), (f, 1), self.data(weight), (1, f), T::one(), &mut out, (o, 1));
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_result(&[n, o], out, &inputs, Op::Linear { input, weight, bias }))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let [n, k] = <[usize; 2]>::try_from(self.shape(logits))
            .map_err(|_| Error::shape(OP, format!("logits must be (N,K), got {:?}", self.shape(logits))))?;
        if targets.len() != n {
            return Err(Error::shape(OP, format!("{} targets for batch of {n}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(OP, format!("target {bad} outside [0, {k})")));
        }
        let z = self.data(logits);
        let mut loss = T::zero();
        for (row, &t) in z.chunks(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        loss /= T::from_usize(n).expect("batch");
        let probs = if self.tracks(logits) {
            ops::softmax_rows(z, k)
        } else {
            Vec::new()
        };
        Ok(self.push_result(
            &[1],
            vec![loss],
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push_result(&shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push_result(&shape, out, &[a, b], Op::Mul(a, b)))
    }

    /// Multiplies each (n, c) plane of a (N,C,H,W) input by `scale[n, c]`.
    /// `scale` may be (N,C) or (N,C,1,1).
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        const OP: &str = "scale_channels";
        let [n, c, h, w] = self.rank4(input, OP)?;
        let s_shape = self.shape(scale);
        if s_shape != [n, c] && s_shape != [n, c, 1, 1] {
            return Err(Error::shape(OP, format!("scale shape {s_shape:?} does not match (N,C)=({n},{c})")));
        }
        let area = h * w;
        let s = self.data(scale);
        let out = self
            .data(input)
            .chunks(area)
            .zip(s)
            .flat_map(|(plane, &f)| plane.iter().map(move |&x| x * f))
            .collect();
        Ok(self.push_result(&[n, c, h, w], out, &[input, scale], Op::ScaleChannels { input, scale }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().copied().sum();
        self.push_result(&[1], vec![total], &[input], Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let data = self.data(input).to_vec();
        Ok(self.push_result(shape, data, &[input], Op::Reshape(input)))
    }

    /// Reverse sweep from a scalar. Every tracked value reachable from `loss`
    /// receives the sum of its path contributions; tracked values off the
    /// path read back as zero through [`Tape::grad_tensor`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.tracks(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.propagate(i, &g);
            self.grads[i] = Some(g);
            for (var, contribution) in contributions {
                self.accumulate(var, contribution);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, contribution: Vec<T>) {
        if !self.tracks(var) {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, index: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[index];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw) = ops::conv2d_backward(
                    geom,
                    self.data(*input),
                    self.data(*weight),
                    g,
                    self.tracks(*input),
                    self.tracks(*weight),
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
                if let Some(b) = bias {
                    let area = geom.out_h * geom.out_w;
                    out.push((*b, ops::channel_sums(g, geom.batch, geom.out_channels, area)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let shape: [usize; 4] = node.value.shape().try_into().expect("rank 4");
                let (dx, dg, db) =
                    ops::batchnorm_backward(shape, g, normalized, inv_std, self.data(*gamma), *batch_stats);
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Relu(input) => {
                let d = self
                    .data(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &dy)| if x > T::zero() { dy } else { T::zero() })
                    .collect();
                out.push((*input, d));
            }
            Op::Sigmoid(input) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &dy)| dy * y * (T::one() - y))
                    .collect();
                out.push((*input, d));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &dy) in argmax.iter().zip(g) {
                    d[src] += dy;
                }
                out.push((*input, d));
            }
            Op::AvgPool { input, geom } => out.push((*input, ops::avg_pool_backward(geom, g))),
            Op::GlobalAvgPool(input) => {
                let shape = self.shape(*input);
                let area = shape[2] * shape[3];
                let norm = T::from_usize(area).expect("area");
                let d = g
                    .iter()
                    .flat_map(|&dy| std::iter::repeat_n(dy / norm, area))
                    .collect();
                out.push((*input, d));
            }
            Op::Concat(inputs) => {
                let shape = node.value.shape();
                let (n, total, area) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &v in inputs {
                    let vc = self.shape(v)[1];
                    let mut d = Vec::with_capacity(n * vc * area);
                    for b in 0..n {
                        let start = (b * total + offset) * area;
                        d.extend_from_slice(&g[start..start + vc * area]);
                    }
                    offset += vc;
                    out.push((v, d));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = (self.shape(*input)[0], self.shape(*input)[1]);
                let o = self.shape(*weight)[0];
                if self.tracks(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), g, (o, 1), self.data(*weight), (f, 1), T::zero(), &mut dx, (f, 1));
                    out.push((*input, dx));
                }
                if self.tracks(*weight) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), g, (1, o), self.data(*input), (f, 1), T::zero(), &mut dw, (f, 1));
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let k = self.shape(*logits)[1];
                let n = T::from_usize(targets.len()).expect("batch");
                let scale = g[0] / n;
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= scale;
                }
                out.push((*logits, d));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.data(*b)).map(|(&dy, &y)| dy * y).collect();
                let db = g.iter().zip(self.data(*a)).map(|(&dy, &x)| dy * x).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::ScaleChannels { input, scale } => {
                let shape = node.value.shape();
                let area = shape[2] * shape[3];
                let s = self.data(*scale);
                let x = self.data(*input);
                let dx = g
                    .chunks(area)
                    .zip(s)
                    .flat_map(|(plane, &f)| plane.iter().map(move |&dy| dy * f))
                    .collect();
                let ds = g
                    .chunks(area)
                    .zip(x.chunks(area))
                    .map(|(dp, xp)| dp.iter().zip(xp).map(|(&dy, &xv)| dy * xv).sum())
                    .collect();
                out.push((*input, dx));
                out.push((*scale, ds));
            }
            Op::Sum(input) => out.push((*input, vec![g[0]; self.value(*input).numel()])),
            Op::Reshape(input) => out.push((*input, g.to_vec())),
        }
        out
    }

    /// Every recorded ReLU input element, in recording order. Only tapes
    /// built with [`Tape::new`] record ReLU nodes.
    pub fn relu_inputs(&self) -> Vec<T> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                out.extend_from_slice(self.data(input));
            }
        }
        out
    }

    /// Gradient of the last `backward` target with respect to `var`, if any
    /// path reached it.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor: zeros for a tracked value the loss did not reach,
    /// `None` for untracked values.
    pub fn grad_tensor(&self, var: Var) -> Option<Tensor<T>> {
        if !self.tracks(var) {
            return None;
        }
        let shape = self.shape(var);
        let data = self
            .grad(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(var).numel()]);
        Tensor::new(shape, data).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], values: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(shape, values).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[1., -2., 3., 0.5, 0., 7.]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1., -2.]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn reused_value_accumulates_both_paths() {
        // y = x + x*3 via two uses of x; compare with the single-use form 4x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[0.2, -1.0, 4.0]);
        let three = tape.leaf(Tensor::from_f64(&[3], &[3.0; 3]).unwrap());
        let tripled = tape.mul(x, three).unwrap();
        let y = tape.add(x, tripled).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 3]);
        assert!(tape.grad(three).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1., 2.]);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn unreachable_tracked_leaf_reads_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1., 2.]);
        let unused = leaf(&mut tape, &[3], &[1., 2., 3.]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_tensor(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad_tensor(x).is_none());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let avg = tape.pool2d(x, PoolKind::Avg, 2, 2, 0).unwrap();
        let max = tape.pool2d(x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(tape.value(avg).data(), &[2.5]);
        assert_eq!(tape.value(max).data(), &[4.0]);
        let c = tape.leaf(Tensor::full(&[1, 2, 3, 3], 1.75));
        let g = tape.pool2d(c, PoolKind::GlobalAvg, 0, 0, 0).unwrap();
        assert_eq!(tape.shape(g), &[1, 2, 1, 1]);
        assert_eq!(tape.value(g).data(), &[1.75, 1.75]);
        assert!(tape.pool2d(x, PoolKind::Max, 3, 1, 0).is_err());
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(&[1, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 3, 3]);
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let odd = tape.leaf(Tensor::ones(&[1, 1, 4, 3]));
        assert!(tape.concat_channels(&[a, odd]).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let eye = tape.leaf(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let zero = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);

        let bad = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_f64(&[2, 2], &[0.3, 0.3, -4.0, -4.0]).unwrap());
        let l = tape.softmax_cross_entropy(z, &[0, 1]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let z = tape.leaf(Tensor::from_f64(&[1, 2], &[800.0, -800.0]).unwrap());
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-300);
        assert!(tape.softmax_cross_entropy(z, &[2]).is_err());
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn conv_one_hot_pointwise_kernel_selects_channel() {
        let mut tape = Tape::<f32>::new();
        let values: Vec<f64> = (0..3 * 25).map(|i| (i as f64 * 0.7).sin()).collect();
        let input = Tensor::<f32>::from_f64(&[1, 3, 5, 5], &values).unwrap();
        let x = tape.leaf(input.clone());
        for c in 0..3 {
            let mut k = vec![0.0; 3];
            k[c] = 1.0;
            let w = tape.leaf(Tensor::from_f64(&[1, 3, 1, 1], &k).unwrap());
            let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
            assert_eq!(tape.value(y).data(), &input.data()[c * 25..(c + 1) * 25]);
        }
    }

    #[test]
    fn batchnorm_train_and_eval() {
        let mut tape = Tape::<f64>::new();
        let values: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 * 1.3).cos() * 3.0 + 1.0).collect();
        let x = tape.leaf(Tensor::from_f64(&[2, 2, 3, 3], &values).unwrap());
        let gamma = tape.leaf(Tensor::ones(&[2]));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm(x, gamma, beta, BatchNormStats::Batch, 1e-5).unwrap();
        assert!(stats.is_some());
        let out = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..9).map(move |i| (n, i)))
                .map(|(n, i)| out.data()[(n * 2 + c) * 9 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }

        // constant channel collapses to beta
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0));
        let g1 = tape.leaf(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let b1 = tape.leaf(Tensor::from_f64(&[1], &[0.7]).unwrap());
        let (y, _) = tape.batch_norm(x, g1, b1, BatchNormStats::Batch, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // eval with imported stats on a 1x1x1x2 input
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 4.0]).unwrap());
        let g = tape.leaf(Tensor::from_f64(&[1], &[1.5]).unwrap());
        let b = tape.leaf(Tensor::from_f64(&[1], &[-0.5]).unwrap());
        let (m, v, eps) = (2.0, 4.0, 1e-5);
        let (y, stats) = tape
            .batch_norm(x, g, b, BatchNormStats::Running { mean: &[m], var: &[v] }, eps)
            .unwrap();
        assert!(stats.is_none());
        let expect = |x: f64| (x - m) / (v + eps).sqrt() * 1.5 - 0.5;
        let got = tape.value(y).data();
        assert!((got[0] - expect(1.0)).abs() < 1e-12 && (got[1] - expect(4.0)).abs() < 1e-12);

        let single = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        assert!(tape.batch_norm(single, g, b, BatchNormStats::Batch, 1e-5).is_err());
    }
}
