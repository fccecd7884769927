//! Parameter vectors, exact loss gradients, and the Adam optimizer.
//!
//! Networks expose batched primitives through [`ScalarDiffMap`]; everything
//! here reduces to one of three calls: a forward pass, a forward pass with
//! input gradients, or a parameter-gradient pass driven by cotangents on the
//! value and on its input gradient. Losses that contain input gradients of
//! the network (one nesting level) are handled exactly by the cotangent pass.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced in {layer}")]
    NonFinite { layer: String },
    #[error("time {t} outside the horizon [0, {horizon}]")]
    TimeOutOfDomain { t: f64, horizon: f64 },
    #[error("duplicate parameter block `{0}` in layout")]
    DuplicateBlock(String),
}

/// Shape and position of one named parameter block inside a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    /// (rows, cols); bias vectors are (n, 1).
    pub shape: (usize, usize),
}

impl LayoutBlock {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named layout of a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    blocks: Vec<LayoutBlock>,
    index: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn new(shapes: &[(&str, (usize, usize))]) -> Result<Layout, DiffError> {
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, shape) in shapes {
            if index.insert(name.to_string(), blocks.len()).is_some() {
                return Err(DiffError::DuplicateBlock(name.to_string()));
            }
            blocks.push(LayoutBlock {
                name: name.to_string(),
                offset,
                shape: *shape,
            });
            offset += shape.0 * shape.1;
        }
        Ok(Layout {
            blocks,
            index,
            total: offset,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[LayoutBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&LayoutBlock> {
        self.index.get(name).map(|&i| &self.blocks[i])
    }
}

/// Flat vector of trainable weights plus its named layout.
#[derive(Debug, Clone)]
pub struct ParamVec {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParamVec {
    pub fn zeros(layout: Arc<Layout>) -> ParamVec {
        ParamVec {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<ParamVec, DiffError> {
        if values.len() != layout.total_len() {
            return Err(DiffError::DimMismatch {
                context: "ParamVec::from_values",
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        Ok(ParamVec { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Matrix view of a named block.
    pub fn matrix(&self, name: &str) -> ndarray::ArrayView2<'_, f64> {
        let b = self
            .layout
            .block(name)
            .unwrap_or_else(|| panic!("unknown parameter block `{name}`"));
        ndarray::ArrayView2::from_shape(b.shape, &self.values[b.offset..b.offset + b.len()])
            .expect("layout shape consistent with storage")
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Loss value and its gradient with respect to a full parameter vector.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Network outputs at a single point, handed to pointwise losses.
pub struct PointOutputs<'a> {
    pub value: f64,
    pub dt: f64,
    pub dx: &'a [f64],
}

/// Cotangents of a pointwise loss term with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct Cotangent {
    pub d_value: f64,
    pub d_dt: f64,
    pub d_dx: Vec<f64>,
}

impl Cotangent {
    pub fn value_only(d_value: f64) -> Cotangent {
        Cotangent {
            d_value,
            d_dt: 0.0,
            d_dx: Vec::new(),
        }
    }
}

/// A pointwise contribution to a scalar loss: given the network value and its
/// input gradients at point `k`, return the loss term and its cotangents.
/// Summed over the batch by [`param_grad`]; any averaging weights belong to
/// the implementation.
pub trait PointLoss {
    fn eval(&self, k: usize, t: f64, x: &[f64], out: &PointOutputs<'_>) -> (f64, Cotangent);
}

/// Batched differentiable scalar map (t, x) -> R with trainable parameters.
pub trait ScalarDiffMap: Sync {
    fn dim(&self) -> usize;
    fn layout(&self) -> &Arc<Layout>;

    /// Values at a batch of points; `xs` is `dim x B`.
    fn forward_batch(&self, params: &ParamVec, ts: &[f64], xs: &Array2<f64>)
        -> Result<Array1<f64>, DiffError>;

    /// Values, time derivatives, and spatial gradients (`dim x B`).
    fn grads_batch(
        &self,
        params: &ParamVec,
        ts: &[f64],
        xs: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>), DiffError>;

    /// Gradient with respect to the parameters of
    /// `sum_b [ c[b] f + ct[b] df/dt + cx[:,b] . grad_x f ]` at the batch points.
    fn cotangent_param_grad(
        &self,
        params: &ParamVec,
        ts: &[f64],
        xs: &Array2<f64>,
        c: &[f64],
        ct: &[f64],
        cx: &Array2<f64>,
    ) -> Result<Vec<f64>, DiffError>;
}

/// Value and exact input gradient of a network at one point.
pub fn value_and_input_grad(
    net: &dyn ScalarDiffMap,
    params: &ParamVec,
    t: f64,
    x: &[f64],
) -> Result<(f64, Vec<f64>), DiffError> {
    check_point(net, params, x)?;
    let xs = column(x);
    let (v, _, gx) = net.grads_batch(params, &[t], &xs)?;
    Ok((v[0], gx.column(0).to_vec()))
}

/// Value and exact time derivative of a network at one point.
pub fn value_and_time_grad(
    net: &dyn ScalarDiffMap,
    params: &ParamVec,
    t: f64,
    x: &[f64],
) -> Result<(f64, f64), DiffError> {
    check_point(net, params, x)?;
    let xs = column(x);
    let (v, gt, _) = net.grads_batch(params, &[t], &xs)?;
    Ok((v[0], gt[0]))
}

/// Exact parameter gradient of a scalar loss assembled from pointwise terms,
/// each of which may involve the network value and one level of input
/// gradients. Returns an error if the loss or gradient is non-finite.
pub fn param_grad(
    net: &dyn ScalarDiffMap,
    params: &ParamVec,
    ts: &[f64],
    xs: &Array2<f64>,
    loss: &dyn PointLoss,
) -> Result<GradReport, DiffError> {
    let b = ts.len();
    if xs.ncols() != b {
        return Err(DiffError::DimMismatch {
            context: "param_grad batch",
            expected: b,
            got: xs.ncols(),
        });
    }
    let d = net.dim();
    let (vals, dts, dxs) = net.grads_batch(params, ts, xs)?;
    let mut total = 0.0;
    let mut c = vec![0.0; b];
    let mut ct = vec![0.0; b];
    let mut cx = Array2::zeros((d, b));
    let mut xbuf = vec![0.0; d];
    for k in 0..b {
        for (i, v) in xbuf.iter_mut().enumerate() {
            *v = xs[(i, k)];
        }
        let col = dxs.column(k);
        let out = PointOutputs {
            value: vals[k],
            dt: dts[k],
            dx: col.as_slice().unwrap_or(&[]),
        };
        // Fallback copy when the column view is not contiguous.
        let owned;
        let out = if out.dx.len() == d {
            out
        } else {
            owned = col.to_vec();
            PointOutputs {
                value: vals[k],
                dt: dts[k],
                dx: &owned,
            }
        };
        let (l, cot) = loss.eval(k, ts[k], &xbuf, &out);
        total += l;
        c[k] = cot.d_value;
        ct[k] = cot.d_dt;
        for (i, g) in cot.d_dx.iter().enumerate() {
            cx[(i, k)] = *g;
        }
    }
    if !total.is_finite() {
        return Err(DiffError::NonFinite {
            layer: "loss".to_string(),
        });
    }
    let grad = net.cotangent_param_grad(params, ts, xs, &c, &ct, &cx)?;
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(DiffError::NonFinite {
            layer: format!("gradient component {bad}"),
        });
    }
    Ok(GradReport { loss: total, grad })
}

fn check_point(net: &dyn ScalarDiffMap, params: &ParamVec, x: &[f64]) -> Result<(), DiffError> {
    if x.len() != net.dim() {
        return Err(DiffError::DimMismatch {
            context: "input point",
            expected: net.dim(),
            got: x.len(),
        });
    }
    if !params.all_finite() {
        return Err(DiffError::NonFinite {
            layer: "parameters".to_string(),
        });
    }
    Ok(())
}

fn column(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column shape")
}

/// Adam with bias correction. Deterministic given its inputs.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamVec, grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len(), "gradient length");
        assert!(lr > 0.0, "learning rate must be positive");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params.values[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout1() -> Arc<Layout> {
        Arc::new(Layout::new(&[("w", (1, 1))]).unwrap())
    }

    #[test]
    fn layout_offsets_and_total() {
        let l = Layout::new(&[("a", (2, 3)), ("b", (4, 1))]).unwrap();
        assert_eq!(l.total_len(), 10);
        assert_eq!(l.block("b").unwrap().offset, 6);
        assert!(l.block("c").is_none());
    }

    #[test]
    fn duplicate_block_rejected() {
        assert!(Layout::new(&[("a", (1, 1)), ("a", (1, 1))]).is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = ParamVec::from_values(layout1(), vec![1.5]).unwrap();
        let mut opt = Adam::new(1);
        opt.step(&mut p, &[0.0], 0.1);
        assert_eq!(p.values[0], 1.5);
        // moments decayed but still zero for zero gradients
        assert_eq!(opt.m[0], 0.0);
        assert_eq!(opt.v[0], 0.0);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // With m_hat = g and v_hat = g^2 on the first step, the update is
        // lr * g / (|g| + eps), i.e. almost exactly lr for g = 1.
        let mut p = ParamVec::from_values(layout1(), vec![0.0]).unwrap();
        let mut opt = Adam::new(1);
        opt.step(&mut p, &[1.0], 0.1);
        assert!((p.values[0] + 0.1).abs() < 1e-8, "got {}", p.values[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = ParamVec::from_values(layout1(), vec![0.3]).unwrap();
            let mut opt = Adam::new(1);
            for k in 0..50 {
                let g = (k as f64 * 0.37).sin();
                opt.step(&mut p, &[g], 1e-2);
            }
            p.values[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
