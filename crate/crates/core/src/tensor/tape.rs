use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation, with whatever the forward pass had
/// to save for it.
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Reciprocal(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Laplacian(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph; [`Tape::backward`] walks it in reverse. A tape lives for one frame
/// and is dropped afterwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Batch statistics produced by a train-mode batch-norm node.
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var> {
        let v = f(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::add, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::sub, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::mul, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.needs(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::AddScalar(a))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.unary(a, v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / x);
        self.unary(a, v, Op::Reciprocal(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Which side of its non-differentiable point every abs, ReLU and clamp
    /// input lies on, in recording order: -1, 0 or 1 (below, inside or above
    /// the clamp range). Two recordings of the same graph with equal signs lie
    /// in the same smooth piece.
    pub fn branch_signs(&self) -> Vec<i8> {
        let sign = |x: T| (x > T::zero()) as i8 - (x < T::zero()) as i8;
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Abs(a) | Op::Relu(a) => out.extend(self.value(a).data().iter().map(|&x| sign(x))),
                Op::Clamp(a, lo, hi) => out.extend(
                    self.value(a)
                        .data()
                        .iter()
                        .map(|&x| (x > hi) as i8 - (x < lo) as i8),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// Convolution with an optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(kernel), stride, pad)?;
        let mut out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != geom.cout {
                return Err(Error::dim("conv2d", format!("bias has {} values for {} channels", bv.len(), geom.cout)));
            }
            for px in out.chunks_exact_mut(geom.cout) {
                for (o, &b) in px.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new([geom.oh, geom.ow, geom.cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization over the channel axis. `stats = Some((mean, var))`
    /// normalizes with fixed statistics (eval mode); `None` uses the batch
    /// statistics, which are returned so the caller can update running
    /// estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter(format!("batch_norm eps must be positive, got {eps}")));
        }
        let x = self.value(input);
        let c = *x.shape().last().ok_or_else(|| Error::dim("batch_norm", "no channel axis"))?;
        let shape = x.shape().to_vec();
        let count = x.numel() / c;
        for (name, n) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", stats.map_or(c, |s| s.0.len())),
            ("running_var", stats.map_or(c, |s| s.1.len())),
        ] {
            if n != c {
                return Err(Error::dim("batch_norm", format!("{name} has {n} values for {c} channels")));
            }
        }
        let fwd = kernels::bn_forward(
            self.value(input).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
        );
        let train = stats.is_none();
        let batch = train.then(|| BnBatchStats {
            mean: fwd.batch_mean,
            var: fwd.batch_var,
            count,
        });
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::new(shape, fwd.out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
            rg,
        );
        Ok((v, batch))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(self.value(input), factor)?;
        Ok(self.unary(input, v, Op::Upsample { input, factor }))
    }

    /// Clamped 4-neighbour Laplacian of a single-channel map.
    pub fn laplacian(&mut self, field: Var) -> Result<Var> {
        let v = kernels::laplacian(self.value(field))?;
        Ok(self.unary(field, v, Op::Laplacian(field)))
    }

    /// Reverse sweep from a scalar root. Returns the gradients of every leaf
    /// recorded with `requires_grad`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = if g.len() == n {
            g
        } else {
            // scalar operand broadcast against a larger one
            debug_assert_eq!(n, 1);
            vec![g.iter().copied().sum()]
        };
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Gradient for `target` from an elementwise binary op whose other
    /// operand may be a broadcast scalar.
    fn broadcast_grad(&self, g: &[T], f: impl Fn(usize) -> T) -> Vec<T> {
        g.iter().enumerate().map(|(i, &gv)| gv * f(i)).collect()
    }

    fn at(&self, v: Var, i: usize) -> T {
        let d = self.nodes[v.0].value.data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let ga = self.broadcast_grad(g, |i| self.at(b, i));
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = self.broadcast_grad(g, |i| self.at(a, i));
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|&v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Abs(a) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let x = self.value(a).data();
                let two = T::of(2.0);
                self.accumulate(grads, a, g.iter().zip(x).map(|(&gv, &xv)| two * xv * gv).collect());
            }
            Op::Relu(a) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.accumulate(grads, a, ga);
            }
            Op::Reciprocal(a) => {
                let ga = g.iter().zip(out).map(|(&gv, &r)| -gv * r * r).collect();
                self.accumulate(grads, a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv < lo || xv > hi { T::zero() } else { gv })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if self.needs(input) {
                    let gx = kernels::conv2d_backward_input(g, self.value(kernel).data(), &geom);
                    self.accumulate(grads, input, gx);
                }
                if self.needs(kernel) {
                    let gw = kernels::conv2d_backward_kernel(g, self.value(input).data(), &geom);
                    self.accumulate(grads, kernel, gw);
                }
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let mut gb = vec![T::zero(); geom.cout];
                    for px in g.chunks_exact(geom.cout) {
                        gb.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let c = inv_std.len();
                let (dx, dg, db) = kernels::bn_backward(g, xhat, inv_std, self.value(gamma).data(), c, train);
                self.accumulate(grads, input, dx);
                self.accumulate(grads, gamma, dg);
                self.accumulate(grads, beta, db);
            }
            Op::Upsample { input, factor } => {
                let (h, w, c) = self.value(input).hwc()?;
                self.accumulate(grads, input, kernels::upsample_backward(g, h, w, c, factor));
            }
            Op::Laplacian(a) => {
                let (h, w) = self.value(a).hw()?;
                self.accumulate(grads, a, kernels::laplacian_backward(g, h, w));
            }
        }
        Ok(())
    }
}

/// Leaf gradients from one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂root/∂v`, or `None` when `v` does not require a gradient or the root
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreached leaves.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let th = t.param(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = t.sum(th);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(th).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let th = t.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = t.mul(th, th).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(th).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::new([2], vec![-1.0, 3.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::new([3], vec![-2.0, 0.0, 5.0]).unwrap());
        let a = t.abs(x);
        let s = t.sum(a);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::zeros([2]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn branch_signs_cover_kinked_ops() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let a = t.abs(x);
        t.relu(x);
        t.clamp(a, 0.5, 1.5);
        t.sigmoid(x);
        assert_eq!(t.branch_signs(), vec![-1, 0, 1, -1, 0, 1, 0, -1, 1]);
    }

    #[test]
    fn scalar_broadcast_gradient_is_reduced() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let k = t.param(Tensor::scalar(2.0));
        let p = t.mul(x, k).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(k).unwrap(), &[6.0]);
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn root_without_grad_path_yields_nothing() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
    }
}
