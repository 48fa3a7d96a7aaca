//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node that
//! depends on a parameter or a leaf.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{gemm, Window};
use crate::params::ParamId;
use crate::tensor::{numel, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    lin: usize,
    lout: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    ExpFloor(Var, f64),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        spatial: usize,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
        width: usize,
    },
    ConcatLast(Var, Var),
    WeightedSqErr {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        scale: f64,
    },
    Kld {
        mu: Var,
        logvar: Var,
        batch: usize,
    },
    BetaNll {
        mu: Var,
        var: Var,
        target: Vec<f64>,
        beta: f64,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Differentiable input whose gradient can be read back from [`Grads`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    /// Ids of parameters that appear on the tape, with their nodes.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    /// Copy of `v` that is cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (s, d) = (n.shape.clone(), n.value.clone());
        self.push(s, d, Op::Input, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant of the same size.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let value = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddConst(a), rg))
    }

    /// `x · wᵀ + b` with `x: [.., fin]`, `w: [fout, fin]`, `b: [fout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fin = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[1] != fin {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let fout = ws[0];
        if let Some(b) = b {
            check_same("linear bias", self.shape(b), &[fout])?;
        }
        let rows = self.value(x).len() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(fout).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            rows,
            fin,
            fout,
            self.value(x),
            false,
            self.value(w),
            true,
            1.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
            rg,
        ))
    }

    /// 1-D convolution: `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 || xs[2] + 2 * pad < ws[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            kernel: ws[2],
            stride,
            pad,
            lin: xs[2],
            lout: (xs[2] + 2 * pad - ws[2]) / stride + 1,
        };
        if let Some(b) = b {
            check_same("conv1d bias", self.shape(b), &[g.cout])?;
        }
        let win = Window {
            channels: g.cin,
            src_len: g.lin,
            kernel: g.kernel,
            stride,
            pad,
            cols_len: g.lout,
        };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![0.0; g.batch * g.cout * g.lout];
        out.par_chunks_mut(g.cout * g.lout)
            .zip(xv.par_chunks(g.cin * g.lin))
            .for_each_init(
                || vec![0.0; win.cols_size()],
                |cols, (o, xb)| {
                    win.im2col(xb, cols);
                    if let Some(bv) = bv {
                        for (row, &bias) in o.chunks_mut(g.lout).zip(bv) {
                            row.fill(bias);
                        }
                    }
                    gemm(g.cout, g.cin * g.kernel, g.lout, wv, false, cols, false, 1.0, o);
                },
            );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![g.batch, g.cout, g.lout], out, Op::Conv1d { x, w, b, g }, rg))
    }

    /// Transposed 1-D convolution: `x: [B, Cin, L]`, `w: [Cin, Cout, K]`.
    ///
    /// Output length is `(L − 1)·stride − 2·pad + K + out_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || stride == 0 || (out_pad > 0 && out_pad >= stride) {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let full = (xs[2] - 1) * stride + ws[2] + out_pad;
        if full <= 2 * pad {
            return Err(Error::Invalid(format!("conv_transpose1d padding {pad} too large")));
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[1],
            kernel: ws[2],
            stride,
            pad,
            lin: xs[2],
            lout: full - 2 * pad,
        };
        if let Some(b) = b {
            check_same("conv_transpose1d bias", self.shape(b), &[g.cout])?;
        }
        let win = Window {
            channels: g.cout,
            src_len: g.lout,
            kernel: g.kernel,
            stride,
            pad,
            cols_len: g.lin,
        };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![0.0; g.batch * g.cout * g.lout];
        out.par_chunks_mut(g.cout * g.lout)
            .zip(xv.par_chunks(g.cin * g.lin))
            .for_each_init(
                || vec![0.0; win.cols_size()],
                |cols, (o, xb)| {
                    // cols[Cout·K, Lin] = wᵀ · x
                    gemm(g.cout * g.kernel, g.cin, g.lin, wv, true, xb, false, 0.0, cols);
                    if let Some(bv) = bv {
                        for (row, &bias) in o.chunks_mut(g.lout).zip(bv) {
                            row.fill(bias);
                        }
                    }
                    win.col2im_add(cols, o);
                },
            );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![g.batch, g.cout, g.lout], out, Op::ConvT1d { x, w, b, g }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `max(exp(a), floor)`; the gradient is zero where the floor is active.
    pub fn exp_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.exp().max(floor), Op::ExpFloor(a, floor))
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1−p)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let value = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, rg))
    }

    /// Per-channel normalization of `x: [B, C]` or `[B, C, L]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given `(mean, var)` are
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial = xs[2..].iter().product::<usize>();
        check_same("batch_norm gamma", self.shape(gamma), &[channels])?;
        check_same("batch_norm beta", self.shape(beta), &[channels])?;
        let xv = self.value(x);
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let n = (batch * spatial) as f64;
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let s = &xv[(b * channels + c) * spatial..][..spatial];
                        mean[c] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..batch {
                    for c in 0..channels {
                        let s = &xv[(b * channels + c) * spatial..][..spatial];
                        var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
                batch_stats: stats.is_none(),
            },
            rg,
        );
        Ok((v, mean, var))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Slice `[start, start + width)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&1);
        if width == 0 || start + width > d {
            return Err(Error::Invalid(format!(
                "slice [{start}, {}) of axis {d}",
                start + width
            )));
        }
        let value: Vec<f64> = self
            .value(x)
            .chunks(d)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::SliceLast { x, start, width }, rg))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let value: Vec<f64> = self
            .value(a)
            .chunks(da)
            .zip(self.value(b).chunks(db))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::ConcatLast(a, b), rg))
    }

    /// `scale · Σ wⱼ (pred − target)²`; `weights` has the size of the last
    /// axis and is broadcast over leading axes.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &[f64], weights: &[f64], scale: f64) -> Result<Var> {
        let pv = self.value(pred);
        let d = *self.shape(pred).last().unwrap_or(&1);
        if target.len() != pv.len() || weights.len() != d {
            return Err(Error::ShapeMismatch {
                op: "weighted_sq_err",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len(), weights.len()],
            });
        }
        let s: f64 = pv
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (p, t))| weights[i % d] * (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            vec![],
            vec![scale * s],
            Op::WeightedSqErr {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over the
    /// latent axis and averaged over the leading (batch) axis.
    pub fn kld_gauss(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        check_same("kld_gauss", self.shape(mu), self.shape(logvar))?;
        let s = self.shape(mu);
        let batch = if s.len() >= 2 { s[0] } else { 1 };
        let total: f64 = self
            .value(mu)
            .iter()
            .zip(self.value(logvar))
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum();
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(
            vec![],
            vec![0.5 * total / batch as f64],
            Op::Kld { mu, logvar, batch },
            rg,
        ))
    }

    /// β-NLL: mean of `sg(var)^β · (½ ln var + (t − mu)² / (2 var))`.
    pub fn beta_nll(&mut self, mu: Var, var: Var, target: &[f64], beta: f64) -> Result<Var> {
        check_same("beta_nll", self.shape(mu), self.shape(var))?;
        if target.len() != self.value(mu).len() {
            return Err(Error::ShapeMismatch {
                op: "beta_nll target",
                lhs: self.shape(mu).to_vec(),
                rhs: vec![target.len()],
            });
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Invalid(format!("beta_nll weight {beta} outside [0, 1]")));
        }
        if let Some(&bad) = self.value(var).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NonPositiveVariance(bad));
        }
        let n = target.len() as f64;
        let total: f64 = self
            .value(mu)
            .iter()
            .zip(self.value(var))
            .zip(target)
            .map(|((m, v), t)| v.powf(beta) * (0.5 * v.ln() + (t - m) * (t - m) / (2.0 * v)))
            .sum();
        let rg = self.rg(mu) || self.rg(var);
        Ok(self.push(
            vec![],
            vec![total / n],
            Op::BetaNll {
                mu,
                var,
                target: target.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// `mu + exp(logvar / 2) ⊙ eps` with a caller-supplied noise draw.
    pub fn reparam(&mut self, mu: Var, logvar: Var, eps: Vec<f64>) -> Result<Var> {
        check_same("reparam", self.shape(mu), self.shape(logvar))?;
        if eps.len() != self.value(mu).len() {
            return Err(Error::ShapeMismatch {
                op: "reparam noise",
                lhs: self.shape(mu).to_vec(),
                rhs: vec![eps.len()],
            });
        }
        let value = self
            .value(mu)
            .iter()
            .zip(self.value(logvar))
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(self.shape(mu).to_vec(), value, Op::Reparam { mu, logvar, eps }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 || !ln.shape.is_empty() && ln.shape.iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        let g = acc(&mut grads[v.0], gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    let g = acc(&mut grads[a.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if want(*b) {
                    let g = acc(&mut grads[b.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let g = acc(&mut grads[a.0], gout.len());
                    for ((x, y), w) in g.iter_mut().zip(gout).zip(bv) {
                        *x += y * w;
                    }
                }
                if want(*b) {
                    let g = acc(&mut grads[b.0], gout.len());
                    for ((x, y), w) in g.iter_mut().zip(gout).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = acc(&mut grads[a.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y);
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let g = acc(&mut grads[a.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            } => {
                let (rows, fin, fout) = (*rows, *fin, *fout);
                if want(*x) {
                    let g = acc(&mut grads[x.0], rows * fin);
                    gemm(rows, fout, fin, gout, false, self.value(*w), false, 1.0, g);
                }
                if want(*w) {
                    let g = acc(&mut grads[w.0], fout * fin);
                    gemm(fout, rows, fin, gout, true, self.value(*x), false, 1.0, g);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let g = acc(&mut grads[b.0], fout);
                    for r in gout.chunks(fout) {
                        g.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Conv1d { x, w, b, g } => self.conv_backward(*x, *w, *b, *g, gout, grads, false),
            Op::ConvT1d { x, w, b, g } => self.conv_backward(*x, *w, *b, *g, gout, grads, true),
            Op::Relu(a) => {
                let av = self.value(*a);
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av) {
                    *x += if *v > 0.0 { *y } else { slope * y };
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av) {
                    *x += y * gelu_grad(*v);
                }
            }
            Op::Exp(a) => {
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(&node.value) {
                    *x += y * v;
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av) {
                    *x += 2.0 * v * y;
                }
            }
            Op::ExpFloor(a, floor) => {
                let av = self.value(*a);
                let g = acc(&mut grads[a.0], gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(av) {
                    let e = v.exp();
                    if e > *floor {
                        *x += y * e;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = acc(&mut grads[x.0], gout.len());
                for ((a, y), m) in g.iter_mut().zip(gout).zip(mask) {
                    *a += y * m;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
                batch_stats,
            } => {
                let (channels, spatial) = (*channels, *spatial);
                let batch = gout.len() / (channels * spatial);
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * spatial;
                        for i in off..off + spatial {
                            dgamma[c] += gout[i] * xhat[i];
                            dbeta[c] += gout[i];
                        }
                    }
                }
                if want(*x) {
                    let gv = self.value(*gamma);
                    let n = (batch * spatial) as f64;
                    let g = acc(&mut grads[x.0], gout.len());
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * spatial;
                            let k = gv[c] * inv_std[c];
                            for i in off..off + spatial {
                                g[i] += if *batch_stats {
                                    k * (gout[i] - dbeta[c] / n - xhat[i] * dgamma[c] / n)
                                } else {
                                    k * gout[i]
                                };
                            }
                        }
                    }
                }
                if want(*gamma) {
                    let g = acc(&mut grads[gamma.0], channels);
                    g.iter_mut().zip(&dgamma).for_each(|(x, y)| *x += y);
                }
                if want(*beta) {
                    let g = acc(&mut grads[beta.0], channels);
                    g.iter_mut().zip(&dbeta).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                let n = self.len_of(*a);
                let g = acc(&mut grads[a.0], n);
                g.iter_mut().for_each(|x| *x += gout[0]);
            }
            Op::Mean(a) => {
                let n = self.len_of(*a);
                let g = acc(&mut grads[a.0], n);
                let s = gout[0] / n as f64;
                g.iter_mut().for_each(|x| *x += s);
            }
            Op::SliceLast { x, start, width } => {
                let d = *self.shape(*x).last().unwrap();
                let n = self.len_of(*x);
                let g = acc(&mut grads[x.0], n);
                for (row, gr) in g.chunks_mut(d).zip(gout.chunks(*width)) {
                    row[*start..start + width].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatLast(a, b) => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                if want(*a) {
                    let g = acc(&mut grads[a.0], self.len_of(*a));
                    for (row, gr) in g.chunks_mut(da).zip(gout.chunks(da + db)) {
                        row.iter_mut().zip(&gr[..da]).for_each(|(x, y)| *x += y);
                    }
                }
                if want(*b) {
                    let g = acc(&mut grads[b.0], self.len_of(*b));
                    for (row, gr) in g.chunks_mut(db).zip(gout.chunks(da + db)) {
                        row.iter_mut().zip(&gr[da..]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::WeightedSqErr {
                pred,
                target,
                weights,
                scale,
            } => {
                let pv = self.value(*pred);
                let d = weights.len();
                let g = acc(&mut grads[pred.0], pv.len());
                for (i, (x, (p, t))) in g.iter_mut().zip(pv.iter().zip(target)).enumerate() {
                    *x += gout[0] * scale * 2.0 * weights[i % d] * (p - t);
                }
            }
            Op::Kld { mu, logvar, batch } => {
                let s = gout[0] / *batch as f64;
                if want(*mu) {
                    let mv = self.value(*mu);
                    let g = acc(&mut grads[mu.0], mv.len());
                    g.iter_mut().zip(mv).for_each(|(x, m)| *x += s * m);
                }
                if want(*logvar) {
                    let lv = self.value(*logvar);
                    let g = acc(&mut grads[logvar.0], lv.len());
                    g.iter_mut().zip(lv).for_each(|(x, l)| *x += s * 0.5 * (l.exp() - 1.0));
                }
            }
            Op::BetaNll { mu, var, target, beta } => {
                let n = target.len() as f64;
                let mv = self.value(*mu);
                let vv = self.value(*var);
                let s = gout[0] / n;
                if want(*mu) {
                    let g = acc(&mut grads[mu.0], mv.len());
                    for (i, x) in g.iter_mut().enumerate() {
                        let w = vv[i].powf(*beta);
                        *x += s * w * (mv[i] - target[i]) / vv[i];
                    }
                }
                if want(*var) {
                    let g = acc(&mut grads[var.0], vv.len());
                    for (i, x) in g.iter_mut().enumerate() {
                        let w = vv[i].powf(*beta);
                        let r2 = (target[i] - mv[i]).powi(2);
                        *x += s * w * (0.5 / vv[i] - r2 / (2.0 * vv[i] * vv[i]));
                    }
                }
            }
            Op::Reparam { mu, logvar, eps } => {
                if want(*mu) {
                    let g = acc(&mut grads[mu.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if want(*logvar) {
                    let lv = self.value(*logvar);
                    let g = acc(&mut grads[logvar.0], gout.len());
                    for (i, x) in g.iter_mut().enumerate() {
                        *x += gout[i] * eps[i] * 0.5 * (0.5 * lv[i]).exp();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        transposed: bool,
    ) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let xv = self.value(x);
        let wv = self.value(w);
        let xb_len = g.cin * g.lin;
        let ob_len = g.cout * g.lout;
        // For the plain conv the window runs over the input; for the
        // transposed conv it runs over the output.
        let win = if transposed {
            Window {
                channels: g.cout,
                src_len: g.lout,
                kernel: g.kernel,
                stride: g.stride,
                pad: g.pad,
                cols_len: g.lin,
            }
        } else {
            Window {
                channels: g.cin,
                src_len: g.lin,
                kernel: g.kernel,
                stride: g.stride,
                pad: g.pad,
                cols_len: g.lout,
            }
        };
        let need_x = want(x);
        let need_w = want(w);
        let wlen = wv.len();
        // Per-sample partial weight gradients, reduced in batch order.
        let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..g.batch)
            .into_par_iter()
            .map(|bi| {
                let xb = &xv[bi * xb_len..(bi + 1) * xb_len];
                let gb = &gout[bi * ob_len..(bi + 1) * ob_len];
                let mut cols = vec![0.0; win.cols_size()];
                let mut dx = Vec::new();
                let mut dw = Vec::new();
                if transposed {
                    win.im2col(gb, &mut cols);
                    if need_x {
                        dx = vec![0.0; xb_len];
                        gemm(g.cin, g.cout * g.kernel, g.lin, wv, false, &cols, false, 0.0, &mut dx);
                    }
                    if need_w {
                        dw = vec![0.0; wlen];
                        gemm(g.cin, g.lin, g.cout * g.kernel, xb, false, &cols, true, 0.0, &mut dw);
                    }
                } else {
                    if need_w {
                        win.im2col(xb, &mut cols);
                        dw = vec![0.0; wlen];
                        gemm(g.cout, g.lout, g.cin * g.kernel, gb, false, &cols, true, 0.0, &mut dw);
                    }
                    if need_x {
                        gemm(g.cin * g.kernel, g.cout, g.lout, wv, true, gb, false, 0.0, &mut cols);
                        dx = vec![0.0; xb_len];
                        win.col2im_add(&cols, &mut dx);
                    }
                }
                (dx, dw)
            })
            .collect();
        if need_x {
            let gx = acc(&mut grads[x.0], xv.len());
            for (bi, (dx, _)) in partial.iter().enumerate() {
                gx[bi * xb_len..(bi + 1) * xb_len]
                    .iter_mut()
                    .zip(dx)
                    .for_each(|(a, b)| *a += b);
            }
        }
        if need_w {
            let gw = acc(&mut grads[w.0], wlen);
            for (_, dw) in &partial {
                gw.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(b) = b.filter(|b| want(*b)) {
            let gb = acc(&mut grads[b.0], g.cout);
            for chunk in gout.chunks(g.lout).enumerate() {
                let c = chunk.0 % g.cout;
                gb[c] += chunk.1.iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let ww = g.mul(w, w).unwrap();
        let loss = g.sum(ww);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_no_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.input(&t(&[2], &[5.0, 6.0]));
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(w).is_none_or(|gw| gw.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn kld_examples() {
        let mut g = Graph::new();
        let mu = g.input(&t(&[1], &[0.0]));
        let lv = g.input(&t(&[1], &[0.0]));
        let k = g.kld_gauss(mu, lv).unwrap();
        assert_eq!(g.value(k)[0], 0.0);

        let mu = g.input(&t(&[1], &[1.0]));
        let k = g.kld_gauss(mu, lv).unwrap();
        assert!((g.value(k)[0] - 0.5).abs() < 1e-15);

        let mu = g.input(&t(&[1], &[0.0]));
        let lv = g.input(&t(&[1], &[4f64.ln()]));
        let k = g.kld_gauss(mu, lv).unwrap();
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((g.value(k)[0] - expect).abs() < 1e-12);
        assert!((g.value(k)[0] - 0.8069).abs() < 1e-4);

        let lv2 = g.input(&t(&[2], &[0.0, 0.0]));
        assert!(g.kld_gauss(mu, lv2).is_err());
    }

    #[test]
    fn kld_averages_over_batch() {
        let mut g = Graph::new();
        let mu = g.input(&t(&[2, 1], &[1.0, 1.0]));
        let lv = g.input(&t(&[2, 1], &[0.0, 0.0]));
        let k = g.kld_gauss(mu, lv).unwrap();
        assert!((g.value(k)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn beta_nll_examples() {
        let mut g = Graph::new();
        let tgt = [1.5];
        let mu = g.input(&t(&[1], &tgt));
        let one = g.input(&t(&[1], &[1.0]));
        for beta in [0.0, 0.5, 1.0] {
            let l = g.beta_nll(mu, one, &tgt, beta).unwrap();
            assert_eq!(g.value(l)[0], 0.0);
        }
        let zero = g.input(&t(&[1], &[0.0]));
        let l = g.beta_nll(zero, one, &[1.0], 0.5).unwrap();
        assert!((g.value(l)[0] - 0.5).abs() < 1e-15);

        let four = g.input(&t(&[1], &[4.0]));
        let l = g.beta_nll(zero, four, &[2.0], 0.5).unwrap();
        let expect = 2.0 * (0.5 * 4f64.ln() + 0.5);
        assert!((g.value(l)[0] - expect).abs() < 1e-12);
        assert!((g.value(l)[0] - 2.3863).abs() < 1e-4);

        let neg = g.input(&t(&[1], &[0.0]));
        assert!(matches!(
            g.beta_nll(zero, neg, &[1.0], 0.5),
            Err(Error::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn beta_nll_weight_carries_no_gradient() {
        // With beta = 1 the detached weight is var; d/dvar of
        // var·(½ ln var + r²/(2var)) would be different if it were not detached.
        let mut g = Graph::new();
        let mu = g.input(&t(&[1], &[0.0]));
        let var = g.leaf(&t(&[1], &[2.0]));
        let l = g.beta_nll(mu, var, &[1.0], 1.0).unwrap();
        let gr = g.backward(l).unwrap();
        let expect = 2.0 * (0.5 / 2.0 - 1.0 / (2.0 * 4.0));
        assert!((gr.wrt(var).unwrap()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn conv_output_lengths() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros([2, 3, 1000]));
        let w = g.input(&Tensor::zeros([4, 3, 7]));
        let y = g.conv1d(x, w, None, 2, 3).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 500]);
        let wt = g.input(&Tensor::zeros([4, 2, 4]));
        let z = g.conv_transpose1d(y, wt, None, 2, 1, 0).unwrap();
        assert_eq!(g.shape(z), &[2, 2, 1000]);
    }

    #[test]
    fn linear_matches_manual() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(&t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = g.input(&t(&[3], &[0.5, 0.5, 0.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.5, 2.5, 3.5, 3.5, 4.5, 7.5]);
    }
}
