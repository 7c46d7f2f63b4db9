//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its value and whatever its
//! backward rule needs. Nodes are only ever appended, so node order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::engine::conv::{
    batch_to_channel_major, channel_to_batch_major, col2im, im2col, ConvGeom,
};
use crate::engine::tensor::{ensure_finite, numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batchnorm variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether normalization layers use batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    Deconv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cin: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_coupled: bool,
    },
    LeakyRelu {
        x: Var,
        slope: S,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Offset {
        x: Var,
    },
    ClampedLog {
        x: Var,
        floor: S,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    TileSpatial {
        x: Var,
        hw: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<S>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-channel mean and biased variance of one train-mode batchnorm call.
#[derive(Clone, Debug)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub count: usize,
}

impl<S: Scalar> BatchMoments<S> {
    /// `running = m * running + (1 - m) * batch`, using the unbiased batch variance.
    pub fn update_running(&self, running_mean: &mut [S], running_var: &mut [S]) {
        let m = S::lit(BN_MOMENTUM);
        let unbias = S::lit(self.count as f64 / (self.count as f64 - 1.0));
        for c in 0..self.mean.len() {
            running_mean[c] = m * running_mean[c] + (S::one() - m) * self.mean[c];
            running_var[c] = m * running_var[c] + (S::one() - m) * self.var[c] * unbias;
        }
    }
}

/// Gradients produced by one backward sweep, indexed by leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<S>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Single-owner recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf carrying a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Smallest |input| over every leaky ReLU on the tape, `None` without any.
    /// Finite differences are unreliable once a step can cross that kink.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu { x, .. } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).iter().map(|v| v.as_f64().abs()))
            .reduce(f64::min)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    fn dims(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::contract(format!("{op}: expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    /// `x[n,a] . w[a,b] + bias[b]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.dims("affine", x, 2)?.to_vec();
        let ws = self.dims("affine", w, 2)?.to_vec();
        if xs[1] != ws[0] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, a, b) = (xs[0], xs[1], ws[1]);
        let mut out = vec![S::zero(); n * b];
        if let Some(bv) = bias {
            if self.shape(bv) != [b] {
                return Err(Error::Dimension {
                    op: "affine bias",
                    lhs: ws,
                    rhs: self.shape(bv).to_vec(),
                });
            }
            let bd = self.value(bv);
            for row in out.chunks_mut(b) {
                row.copy_from_slice(bd);
            }
        }
        S::gemm(n, a, b, self.value(x), false, self.value(w), false, S::one(), &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("affine", vec![n, b], out, Op::Affine { x, w, b: bias }, &inputs)
    }

    /// Cross-correlation of `x[n,c,h,w]` with `kernel[co,c,k,k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.dims("conv2d", x, 4)?.to_vec();
        let ks = self.dims("conv2d", kernel, 4)?.to_vec();
        if ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let cout = ks[0];
        let geom = ConvGeom::forward(xs[0], xs[1], xs[2], xs[3], ks[2], stride, pad)?;
        self.check_bias("conv2d", bias, cout)?;
        let cols = im2col(self.value(x), &geom);
        let mut out_cm = vec![S::zero(); cout * geom.col_cols()];
        S::gemm(
            cout,
            geom.col_rows(),
            geom.col_cols(),
            self.value(kernel),
            false,
            &cols,
            false,
            S::zero(),
            &mut out_cm,
        );
        let hw = geom.oh * geom.ow;
        let mut out = channel_to_batch_major(&out_cm, geom.n, cout, hw);
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv), geom.n, hw);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            vec![geom.n, cout, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                x,
                k: kernel,
                bias,
                geom,
                cout,
            },
            &inputs,
        )
    }

    /// Transposed convolution of `x[n,c,h,w]` with `kernel[c,co,k,k]`; the
    /// output side is `(h-1)*stride - 2*pad + k`.
    pub fn deconv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.dims("deconv2d", x, 4)?.to_vec();
        let ks = self.dims("deconv2d", kernel, 4)?.to_vec();
        if ks[0] != xs[1] || ks[2] != ks[3] {
            return Err(Error::Dimension {
                op: "deconv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (n, cin, cout) = (xs[0], xs[1], ks[1]);
        let geom = ConvGeom::transposed(n, cout, xs[2], xs[3], ks[2], stride, pad)?;
        self.check_bias("deconv2d", bias, cout)?;
        let x_cm = batch_to_channel_major(self.value(x), n, cin, xs[2] * xs[3]);
        let mut cols = vec![S::zero(); geom.col_rows() * geom.col_cols()];
        S::gemm(
            geom.col_rows(),
            cin,
            geom.col_cols(),
            self.value(kernel),
            true,
            &x_cm,
            false,
            S::zero(),
            &mut cols,
        );
        let mut out = vec![S::zero(); n * cout * geom.h * geom.w];
        col2im(&cols, &geom, &mut out);
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv), n, geom.h * geom.w);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "deconv2d",
            vec![n, cout, geom.h, geom.w],
            out,
            Op::Deconv2d {
                x,
                k: kernel,
                bias,
                geom,
                cin,
            },
            &inputs,
        )
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        match bias {
            Some(b) if self.shape(b) != [channels] => Err(Error::Dimension {
                op,
                lhs: vec![channels],
                rhs: self.shape(b).to_vec(),
            }),
            _ => Ok(()),
        }
    }

    /// Per-channel normalization of `x[n,c,...]`.
    ///
    /// Train mode normalizes with batch moments and folds them into the
    /// running statistics; infer mode normalizes with the running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running_mean: &mut [S],
        running_var: &mut [S],
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (out, moments) = self.batchnorm_train(x, gamma, beta)?;
                moments.update_running(running_mean, running_var);
                Ok(out)
            }
            Mode::Infer => self.batchnorm_infer(x, gamma, beta, running_mean, running_var),
        }
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::contract(format!("batchnorm: input shape {xs:?} lacks a channel axis")));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    /// Train-mode batchnorm returning the batch moments without touching any running state.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments<S>)> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let count = n * inner;
        if count < 2 {
            return Err(Error::DegenerateBatch { count });
        }
        let xv = self.value(x);
        let inv_count = S::lit(1.0 / count as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                mean[ch] += s.iter().copied().sum::<S>();
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_count);
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<S>();
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_count);
        let eps = S::lit(BN_EPS);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true, n, c, inner)?;
        Ok((out, BatchMoments { mean, var, count }))
    }

    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[S], running_var: &[S]) -> Result<Var> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm running stats",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let eps = S::lit(BN_EPS);
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false, n, c, inner)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        inv_std: &[S],
        batch_coupled: bool,
        n: usize,
        c: usize,
        inner: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "batchnorm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_coupled,
            },
            &[x, gamma, beta],
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, value, op, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = S::lit(slope);
        self.unary("leaky_relu", x, |v| if v >= S::zero() { v } else { s * v }, Op::LeakyRelu { x, slope: s })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    /// `x + c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        self.unary("offset", x, |v| v + c, Op::Offset { x })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.offset(neg, 1.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn clamped_log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let f = S::lit(floor);
        self.unary("clamped_log", x, |v| v.max(f).ln(), Op::ClampedLog { x, floor: f })
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", shape, value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", shape, value, Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: S = v.iter().copied().sum::<S>() / S::lit(v.len() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Concatenation along axis 1 of tensors agreeing on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() < 2 {
            return Err(Error::contract(format!("concat: shape {fs:?} lacks axis 1")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != fs.len() || ps[0] != fs[0] || ps[2..] != fs[2..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: fs.clone(),
                    rhs: ps.to_vec(),
                });
            }
            widths.push(ps[1]);
        }
        let n = fs[0];
        let inner: usize = fs[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[b * w * inner..(b + 1) * w * inner]);
            }
        }
        let mut shape = fs;
        shape[1] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                inner,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape, value, Op::Reshape { x }, &[x])
    }

    /// Broadcasts `x[n,c]` to `[n,c,h,w]`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.dims("tile_spatial", x, 2)?.to_vec();
        let hw = h * w;
        let mut out = Vec::with_capacity(xs[0] * xs[1] * hw);
        for &v in self.value(x) {
            out.extend(std::iter::repeat_n(v, hw));
        }
        self.push("tile_spatial", vec![xs[0], xs[1], h, w], out, Op::TileSpatial { x, hw }, &[x])
    }

    /// Mean cross-entropy of row-wise softmax over `logits[n,c]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.dims("softmax_cross_entropy", logits, 2)?.to_vec();
        let (n, c) = (ls[0], ls[1]);
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: {} labels for {n} rows of {c} classes",
                labels.len()
            )));
        }
        let probs = softmax_rows(self.value(logits), c);
        let mut loss = S::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * c + l].max(S::min_positive_value()).ln();
        }
        loss /= S::lit(n as f64);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar loss. Each node is visited once; gradients
    /// of differentiable leaves are returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
    }

    fn backprop(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, a) = (self.shape(*x)[0], self.shape(*x)[1]);
                let bdim = self.shape(*w)[1];
                if let Some(dx) = self.grad_slot(grads, *x) {
                    S::gemm(n, bdim, a, dy, false, self.value(*w), true, S::one(), dx);
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    S::gemm(a, n, bdim, self.value(*x), true, dy, false, S::one(), dw);
                }
                if let Some(bv) = b {
                    if let Some(db) = self.grad_slot(grads, *bv) {
                        for row in dy.chunks(bdim) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cout,
            } => {
                let hw = geom.oh * geom.ow;
                let dy_cm = batch_to_channel_major(dy, geom.n, *cout, hw);
                if let Some(dk) = self.grad_slot(grads, *k) {
                    let cols = im2col(self.value(*x), geom);
                    S::gemm(*cout, geom.col_cols(), geom.col_rows(), &dy_cm, false, &cols, true, S::one(), dk);
                }
                if let Some(bv) = bias {
                    if let Some(db) = self.grad_slot(grads, *bv) {
                        for (ch, row) in dy_cm.chunks(geom.col_cols()).enumerate() {
                            db[ch] += row.iter().copied().sum::<S>();
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dcols = vec![S::zero(); geom.col_rows() * geom.col_cols()];
                    S::gemm(
                        geom.col_rows(),
                        *cout,
                        geom.col_cols(),
                        self.value(*k),
                        true,
                        &dy_cm,
                        false,
                        S::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, geom, dx);
                }
            }
            Op::Deconv2d {
                x,
                k,
                bias,
                geom,
                cin,
            } => {
                let dcols = im2col(dy, geom);
                let in_hw = geom.oh * geom.ow;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dx_cm = vec![S::zero(); cin * geom.col_cols()];
                    S::gemm(
                        *cin,
                        geom.col_rows(),
                        geom.col_cols(),
                        self.value(*k),
                        false,
                        &dcols,
                        false,
                        S::zero(),
                        &mut dx_cm,
                    );
                    add_into(dx, &channel_to_batch_major(&dx_cm, geom.n, *cin, in_hw));
                }
                if let Some(dk) = self.grad_slot(grads, *k) {
                    let x_cm = batch_to_channel_major(self.value(*x), geom.n, *cin, in_hw);
                    S::gemm(*cin, geom.col_cols(), geom.col_rows(), &x_cm, false, &dcols, true, S::one(), dk);
                }
                if let Some(bv) = bias {
                    if let Some(db) = self.grad_slot(grads, *bv) {
                        let plane = geom.h * geom.w;
                        for (i, chunk) in dy.chunks(plane).enumerate() {
                            db[i % geom.c] += chunk.iter().copied().sum::<S>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_coupled,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    add_into(dg, &sum_dy_xhat);
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    add_into(db, &sum_dy);
                }
                let g = self.value(*gamma);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let m = S::lit((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] += if *batch_coupled {
                                    scale * (dy[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / m)
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += if xv[i] >= S::zero() { dy[i] } else { *slope * dy[i] };
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (i, &y) in node.value.iter().enumerate() {
                        dx[i] += dy[i] * (S::one() - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (i, &y) in node.value.iter().enumerate() {
                        dx[i] += dy[i] * y * (S::one() - y);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        add_into(d, dy);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (i, &bv) in self.value(*b).iter().enumerate() {
                        da[i] += dy[i] * bv;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (i, &av) in self.value(*a).iter().enumerate() {
                        db[i] += dy[i] * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += *c * dy[i];
                    }
                }
            }
            Op::Offset { x } | Op::Reshape { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    add_into(dx, dy);
                }
            }
            Op::ClampedLog { x, floor } => {
                let xv = self.value(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dy.len() {
                        if xv[i] > *floor {
                            dx[i] += dy[i] / xv[i];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|v| *v += dy[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let g = dy[0] / S::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|v| *v += g);
                }
            }
            Op::Concat { parts, widths, inner } => {
                let total: usize = widths.iter().sum();
                let n = dy.len() / (total * inner);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for b in 0..n {
                            let src = &dy[(b * total + offset) * inner..(b * total + offset + w) * inner];
                            add_into(&mut dp[b * w * inner..(b + 1) * w * inner], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::TileSpatial { x, hw } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (i, chunk) in dy.chunks(*hw).enumerate() {
                        dx[i] += chunk.iter().copied().sum::<S>();
                    }
                }
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = dy[0] / S::lit(n as f64);
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == l { S::one() } else { S::zero() };
                            dl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], n: usize, hw: usize) {
    let c = bias.len();
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v += bias[ch]);
        }
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softmax of each length-`c` row.
pub fn softmax_rows<S: Scalar>(logits: &[S], c: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
