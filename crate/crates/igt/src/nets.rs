//! Residual networks with hard-wired boundary behavior.
//!
//! Two networks are built on one shared core:
//!
//! - the value net `V(t,x) = (1-phi(t)) N(t,x) + phi(t) g(x)`, which satisfies
//!   the terminal condition `V(T,x) = g(x)` exactly for any parameters, and
//! - the generator `Phi(t,x0) = x0 + (t/T) N(t,x0)`, which satisfies
//!   `Phi(0,x0) = x0` exactly.
//!
//! The core is a ResNet: an input layer, `L-1` residual blocks
//! `h <- sigma(y + beta (W y + c))`, and a linear head. All passes are batched
//! over sample columns so the heavy work is plain matrix products. Besides the
//! forward pass the core provides exact input Jacobians and a
//! forward-over-reverse pass that yields parameter gradients of losses
//! containing directional input derivatives of the network (the one nesting
//! level needed for gradient-matching and HJB-residual losses).

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{DiffError, Layout, ParamVec, ScalarDiffMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    /// Pass-through, only useful for structural tests.
    Identity,
}

impl Activation {
    /// h = sigma(a), s = sigma'(a), elementwise.
    fn apply(self, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        match self {
            Activation::Tanh => {
                let h = a.mapv(f64::tanh);
                let s = h.mapv(|v| 1.0 - v * v);
                (h, s)
            }
            Activation::Relu => {
                let h = a.mapv(|v| if v > 0.0 { v } else { 0.0 });
                let s = a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                (h, s)
            }
            Activation::Identity => (a.clone(), Array2::ones(a.raw_dim())),
        }
    }

    /// sigma''(a) * adot, expressed from cached (h, hdot): for tanh
    /// sigma'' = -2 h sigma', so sigma''*adot = -2 h hdot. Piecewise-linear
    /// and identity activations have zero curvature.
    fn curvature_term(self, h: &Array2<f64>, hdot: &Array2<f64>) -> Option<Array2<f64>> {
        match self {
            Activation::Tanh => Some(-2.0 * h * hdot),
            Activation::Relu | Activation::Identity => None,
        }
    }
}

/// Shared ResNet trunk: input layer, residual blocks, linear head.
#[derive(Debug, Clone)]
pub struct ResNetCore {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    /// Number of residual blocks (layer count L minus the input layer).
    pub blocks: usize,
    pub beta: f64,
    pub activation: Activation,
    pub layout: Arc<Layout>,
}

struct ForwardCache {
    /// Input batch, in_dim x B.
    z: Array2<f64>,
    /// Hidden states h_0..h_blocks, each width x B.
    h: Vec<Array2<f64>>,
    /// Activation derivatives sigma'(a_l), same shapes as h.
    s: Vec<Array2<f64>>,
}

impl ResNetCore {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        width: usize,
        blocks: usize,
        beta: f64,
        activation: Activation,
    ) -> ResNetCore {
        assert!(in_dim >= 1 && out_dim >= 1 && width >= 1 && blocks >= 1);
        assert!(beta > 0.0 && beta < 1.0, "residual weight must be in (0,1)");
        let mut shapes: Vec<(String, (usize, usize))> = vec![
            ("w_in".to_string(), (width, in_dim)),
            ("b_in".to_string(), (width, 1)),
        ];
        for i in 1..=blocks {
            shapes.push((format!("w_res{i}"), (width, width)));
            shapes.push((format!("b_res{i}"), (width, 1)));
        }
        shapes.push(("w_out".to_string(), (out_dim, width)));
        shapes.push(("b_out".to_string(), (out_dim, 1)));
        let refs: Vec<(&str, (usize, usize))> =
            shapes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let layout = Arc::new(Layout::new(&refs).expect("distinct block names"));
        ResNetCore {
            in_dim,
            out_dim,
            width,
            blocks,
            beta,
            activation,
            layout,
        }
    }

    pub fn param_len(&self) -> usize {
        self.layout.total_len()
    }

    /// Glorot-uniform weights, zero biases; deterministic per seed.
    pub fn init_params(&self, seed: u64) -> ParamVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total_len()];
        for block in self.layout.blocks() {
            if block.name.starts_with('w') {
                let (rows, cols) = block.shape;
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                for v in &mut values[block.offset..block.offset + block.len()] {
                    *v = rng.gen_range(-limit..limit);
                }
            }
        }
        ParamVec::from_values(Arc::clone(&self.layout), values).expect("layout length")
    }

    fn forward_cache(&self, params: &ParamVec, z: &Array2<f64>) -> Result<ForwardCache, DiffError> {
        if z.nrows() != self.in_dim {
            return Err(DiffError::DimMismatch {
                context: "core input rows",
                expected: self.in_dim,
                got: z.nrows(),
            });
        }
        let b = z.ncols();
        let w_in = params.matrix("w_in");
        let b_in = params.matrix("b_in");
        let mut a = w_in.dot(z);
        add_bias(&mut a, &b_in);
        let mut h = Vec::with_capacity(self.blocks + 1);
        let mut sderiv = Vec::with_capacity(self.blocks + 1);
        let (h0, s0) = self.activation.apply(&a);
        check_finite(&h0, "input layer")?;
        h.push(h0);
        sderiv.push(s0);
        for i in 1..=self.blocks {
            let w = params.matrix(&format!("w_res{i}"));
            let c = params.matrix(&format!("b_res{i}"));
            let prev = &h[i - 1];
            // a = prev + beta (W prev + c)
            let mut a = prev.clone();
            general_mat_mul(self.beta, &w, prev, 1.0, &mut a);
            add_scaled_bias(&mut a, &c, self.beta);
            let (hi, si) = self.activation.apply(&a);
            check_finite(&hi, &format!("residual block {i}"))?;
            h.push(hi);
            sderiv.push(si);
        }
        debug_assert_eq!(h.last().unwrap().ncols(), b);
        Ok(ForwardCache {
            z: z.clone(),
            h,
            s: sderiv,
        })
    }

    fn head(&self, params: &ParamVec, cache: &ForwardCache) -> Array2<f64> {
        let w_out = params.matrix("w_out");
        let b_out = params.matrix("b_out");
        let mut out = w_out.dot(&cache.h[self.blocks]);
        add_bias(&mut out, &b_out);
        out
    }

    /// Network outputs for an in_dim x B batch; out_dim x B.
    pub fn forward_batch(&self, params: &ParamVec, z: &Array2<f64>) -> Result<Array2<f64>, DiffError> {
        let cache = self.forward_cache(params, z)?;
        let out = self.head(params, &cache);
        check_finite(&out, "head")?;
        Ok(out)
    }

    /// Outputs together with the full input Jacobian.
    ///
    /// The Jacobian is returned as an (out_dim, in_dim*B) array whose column
    /// k*B + b holds dN[:,b]/dz[k,b].
    pub fn forward_with_input_jacobian(
        &self,
        params: &ParamVec,
        z: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), DiffError> {
        let cache = self.forward_cache(params, z)?;
        let b = z.ncols();
        let w_in = params.matrix("w_in");
        // J columns grouped by input coordinate: block k is dh/dz_k over the batch.
        let mut j = Array2::zeros((self.width, self.in_dim * b));
        for k in 0..self.in_dim {
            let mut blockk = j.slice_mut(s![.., k * b..(k + 1) * b]);
            for r in 0..self.width {
                let w = w_in[(r, k)];
                for c in 0..b {
                    blockk[(r, c)] = w * cache.s[0][(r, c)];
                }
            }
        }
        for i in 1..=self.blocks {
            let w = params.matrix(&format!("w_res{i}"));
            let mut tmp = j.clone();
            general_mat_mul(self.beta, &w, &j, 1.0, &mut tmp);
            for k in 0..self.in_dim {
                let mut blockk = tmp.slice_mut(s![.., k * b..(k + 1) * b]);
                blockk *= &cache.s[i];
            }
            j = tmp;
        }
        let w_out = params.matrix("w_out");
        let jac = w_out.dot(&j);
        let out = self.head(params, &cache);
        check_finite(&out, "head")?;
        check_finite(&jac, "input jacobian")?;
        Ok((out, jac))
    }

    /// Outputs and the directional derivative dN/dz in direction w_dir
    /// (one direction column per sample).
    pub fn forward_with_directional(
        &self,
        params: &ParamVec,
        z: &Array2<f64>,
        w_dir: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), DiffError> {
        let cache = self.forward_cache(params, z)?;
        let hdot = self.dual_forward(params, &cache, w_dir);
        let w_out = params.matrix("w_out");
        let ydot = w_out.dot(&hdot[self.blocks]);
        let out = self.head(params, &cache);
        check_finite(&out, "head")?;
        check_finite(&ydot, "directional derivative")?;
        Ok((out, ydot))
    }

    /// hdot_l = d h_l / d(z in direction w_dir), for all layers.
    fn dual_forward(
        &self,
        params: &ParamVec,
        cache: &ForwardCache,
        w_dir: &Array2<f64>,
    ) -> Vec<Array2<f64>> {
        let w_in = params.matrix("w_in");
        let adot0 = w_in.dot(w_dir);
        let mut hdot = Vec::with_capacity(self.blocks + 1);
        hdot.push(&cache.s[0] * &adot0);
        for i in 1..=self.blocks {
            let w = params.matrix(&format!("w_res{i}"));
            let prev = &hdot[i - 1];
            let mut adot = prev.clone();
            general_mat_mul(self.beta, &w, prev, 1.0, &mut adot);
            adot *= &cache.s[i];
            hdot.push(adot);
        }
        hdot
    }

    /// Parameter gradient of
    /// `sum_b [ ybar[:,b].N(z_b) + ydotbar[:,b].(dN/dz_b in direction w_dir[:,b]) ]`.
    ///
    /// The directional term is differentiated exactly by reverse mode through
    /// the dual (tangent) forward pass, so losses that penalize input
    /// gradients of the network get exact parameter gradients.
    pub fn dual_param_grad(
        &self,
        params: &ParamVec,
        z: &Array2<f64>,
        w_dir: &Array2<f64>,
        ybar: &Array2<f64>,
        ydotbar: &Array2<f64>,
    ) -> Result<Vec<f64>, DiffError> {
        let cache = self.forward_cache(params, z)?;
        let use_dual =
            w_dir.iter().any(|v| *v != 0.0) || ydotbar.iter().any(|v| *v != 0.0);
        let hdot = if use_dual {
            self.dual_forward(params, &cache, w_dir)
        } else {
            Vec::new()
        };
        let mut grad = vec![0.0; self.layout.total_len()];
        let w_out = params.matrix("w_out");

        // Head: N = W_out h_L + b_out, Ndot = W_out hdot_L.
        {
            let mut g_w = self.grad_block(&mut grad, "w_out");
            general_mat_mul(1.0, &ybar.view(), &cache.h[self.blocks].t(), 1.0, &mut g_w);
            if use_dual {
                general_mat_mul(1.0, &ydotbar.view(), &hdot[self.blocks].t(), 1.0, &mut g_w);
            }
        }
        {
            let mut g_b = self.grad_block(&mut grad, "b_out");
            for (r, row) in ybar.rows().into_iter().enumerate() {
                g_b[(r, 0)] = row.sum();
            }
        }
        let mut hbar = w_out.t().dot(ybar);
        let mut hdotbar = if use_dual {
            w_out.t().dot(ydotbar)
        } else {
            Array2::zeros((0, 0))
        };

        for i in (1..=self.blocks).rev() {
            let (abar, acheck) = self.pre_activation_cotangents(&cache, &hdot, &hbar, &hdotbar, i, use_dual);
            {
                let mut g_w = self.grad_block(&mut grad, &format!("w_res{i}"));
                general_mat_mul(self.beta, &abar.view(), &cache.h[i - 1].t(), 1.0, &mut g_w);
                if let Some(ac) = &acheck {
                    general_mat_mul(self.beta, &ac.view(), &hdot[i - 1].t(), 1.0, &mut g_w);
                }
            }
            {
                let mut g_b = self.grad_block(&mut grad, &format!("b_res{i}"));
                for (r, row) in abar.rows().into_iter().enumerate() {
                    g_b[(r, 0)] = self.beta * row.sum();
                }
            }
            let w = params.matrix(&format!("w_res{i}"));
            // y enters the block both through the skip path and through W y.
            let mut next_hbar = abar.clone();
            general_mat_mul(self.beta, &w.t(), &abar, 1.0, &mut next_hbar);
            hbar = next_hbar;
            if let Some(ac) = acheck {
                let mut next = ac.clone();
                general_mat_mul(self.beta, &w.t(), &ac, 1.0, &mut next);
                hdotbar = next;
            }
        }

        let (abar0, acheck0) = self.pre_activation_cotangents(&cache, &hdot, &hbar, &hdotbar, 0, use_dual);
        {
            let mut g_w = self.grad_block(&mut grad, "w_in");
            general_mat_mul(1.0, &abar0.view(), &cache.z.t(), 1.0, &mut g_w);
            if let Some(ac) = &acheck0 {
                general_mat_mul(1.0, &ac.view(), &w_dir.t(), 1.0, &mut g_w);
            }
        }
        {
            let mut g_b = self.grad_block(&mut grad, "b_in");
            for (r, row) in abar0.rows().into_iter().enumerate() {
                g_b[(r, 0)] = row.sum();
            }
        }
        Ok(grad)
    }

    /// abar_l = hbar.s_l + hdotbar.(sigma''(a_l) adot_l), acheck_l = hdotbar.s_l.
    fn pre_activation_cotangents(
        &self,
        cache: &ForwardCache,
        hdot: &[Array2<f64>],
        hbar: &Array2<f64>,
        hdotbar: &Array2<f64>,
        l: usize,
        use_dual: bool,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut abar = hbar * &cache.s[l];
        if !use_dual {
            return (abar, None);
        }
        if let Some(curv) = self.activation.curvature_term(&cache.h[l], &hdot[l]) {
            abar = abar + hdotbar * &curv;
        }
        let acheck = hdotbar * &cache.s[l];
        (abar, Some(acheck))
    }

    fn grad_block<'g>(&self, grad: &'g mut [f64], name: &str) -> ArrayViewMut2<'g, f64> {
        let b = self.layout.block(name).expect("known block");
        ArrayViewMut2::from_shape(b.shape, &mut grad[b.offset..b.offset + b.len()])
            .expect("block shape")
    }
}

fn add_bias(a: &mut Array2<f64>, bias: &ArrayView2<'_, f64>) {
    add_scaled_bias(a, bias, 1.0);
}

fn add_scaled_bias(a: &mut Array2<f64>, bias: &ArrayView2<'_, f64>, scale: f64) {
    for (r, mut row) in a.rows_mut().into_iter().enumerate() {
        let b = scale * bias[(r, 0)];
        row.mapv_inplace(|v| v + b);
    }
}

fn check_finite(a: &Array2<f64>, layer: &str) -> Result<(), DiffError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// Time blend between the free network and the terminal cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    /// phi(t) = exp(t - T).
    Phi1,
    /// phi(t) = t / T.
    Phi2,
}

impl Transition {
    pub fn eval(self, t: f64, horizon: f64) -> (f64, f64) {
        match self {
            Transition::Phi1 => {
                let p = (t - horizon).exp();
                (p, p)
            }
            Transition::Phi2 => (t / horizon, 1.0 / horizon),
        }
    }
}

/// Terminal cost g with its gradient, supplied by the control problem.
pub trait TerminalCost: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// g(x) = ||x||^2, used in several tests.
pub struct SquaredNorm;

impl TerminalCost for SquaredNorm {
    fn eval(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * v).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueNetSpec {
    pub d: usize,
    /// Layer count L: one input layer plus L-1 residual blocks.
    pub layers: usize,
    pub width: usize,
    pub beta: f64,
    pub activation: Activation,
    pub transition: Transition,
    pub horizon: f64,
}

impl ValueNetSpec {
    pub fn defaults(d: usize, horizon: f64) -> ValueNetSpec {
        ValueNetSpec {
            d,
            layers: 3,
            width: 128,
            beta: 0.5,
            activation: Activation::Tanh,
            transition: Transition::Phi1,
            horizon,
        }
    }
}

/// Value network with exact terminal condition:
/// `V(t,x) = (1 - phi(t)) N(t,x) + phi(t) g(x)` with phi(T) = 1.
pub struct ValueNet {
    pub spec: ValueNetSpec,
    pub core: ResNetCore,
    pub terminal: Arc<dyn TerminalCost>,
}

impl ValueNet {
    pub fn new(spec: ValueNetSpec, terminal: Arc<dyn TerminalCost>) -> ValueNet {
        assert!(spec.layers >= 2, "need at least one residual block");
        assert!(spec.horizon > 0.0);
        let core = ResNetCore::new(
            1 + spec.d,
            1,
            spec.width,
            spec.layers - 1,
            spec.beta,
            spec.activation,
        );
        ValueNet {
            spec,
            core,
            terminal,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamVec {
        self.core.init_params(seed)
    }

    fn check_times(&self, ts: &[f64]) -> Result<(), DiffError> {
        let tol = 1e-9 * self.spec.horizon.max(1.0);
        for &t in ts {
            if t < -tol || t > self.spec.horizon + tol {
                return Err(DiffError::TimeOutOfDomain {
                    t,
                    horizon: self.spec.horizon,
                });
            }
        }
        Ok(())
    }

    fn stack_inputs(&self, ts: &[f64], xs: &Array2<f64>) -> Array2<f64> {
        let b = ts.len();
        let mut z = Array2::zeros((1 + self.spec.d, b));
        for (k, &t) in ts.iter().enumerate() {
            z[(0, k)] = t;
        }
        z.slice_mut(s![1.., ..]).assign(xs);
        z
    }

    pub fn value(&self, params: &ParamVec, t: f64, x: &[f64]) -> Result<f64, DiffError> {
        let xs = Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column");
        Ok(self.forward_batch(params, &[t], &xs)?[0])
    }

    pub fn spatial_grad(&self, params: &ParamVec, t: f64, x: &[f64]) -> Result<Vec<f64>, DiffError> {
        let xs = Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column");
        let (_, _, gx) = self.grads_batch(params, &[t], &xs)?;
        Ok(gx.column(0).to_vec())
    }
}

impl ScalarDiffMap for ValueNet {
    fn dim(&self) -> usize {
        self.spec.d
    }

    fn layout(&self) -> &Arc<Layout> {
        &self.core.layout
    }

    fn forward_batch(
        &self,
        params: &ParamVec,
        ts: &[f64],
        xs: &Array2<f64>,
    ) -> Result<Array1<f64>, DiffError> {
        self.check_times(ts)?;
        let z = self.stack_inputs(ts, xs);
        let n = self.core.forward_batch(params, &z)?;
        let mut out = Array1::zeros(ts.len());
        let mut xbuf = vec![0.0; self.spec.d];
        for (k, &t) in ts.iter().enumerate() {
            let (phi, _) = self.spec.transition.eval(t, self.spec.horizon);
            for i in 0..self.spec.d {
                xbuf[i] = xs[(i, k)];
            }
            let g = self.terminal.eval(&xbuf);
            out[k] = (1.0 - phi) * n[(0, k)] + phi * g;
        }
        Ok(out)
    }

    fn grads_batch(
        &self,
        params: &ParamVec,
        ts: &[f64],
        xs: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>), DiffError> {
        self.check_times(ts)?;
        let b = ts.len();
        let d = self.spec.d;
        let z = self.stack_inputs(ts, xs);
        let (n, jac) = self.core.forward_with_input_jacobian(params, &z)?;
        let mut vals = Array1::zeros(b);
        let mut dts = Array1::zeros(b);
        let mut dxs = Array2::zeros((d, b));
        let mut xbuf = vec![0.0; d];
        for (k, &t) in ts.iter().enumerate() {
            let (phi, dphi) = self.spec.transition.eval(t, self.spec.horizon);
            for i in 0..d {
                xbuf[i] = xs[(i, k)];
            }
            let g = self.terminal.eval(&xbuf);
            let gg = self.terminal.grad(&xbuf);
            let nk = n[(0, k)];
            let nt = jac[(0, k)]; // input coordinate 0 is time
            vals[k] = (1.0 - phi) * nk + phi * g;
            dts[k] = (1.0 - phi) * nt + dphi * (g - nk);
            for i in 0..d {
                let nx = jac[(0, (1 + i) * b + k)];
                dxs[(i, k)] = (1.0 - phi) * nx + phi * gg[i];
            }
        }
        Ok((vals, dts, dxs))
    }

    fn cotangent_param_grad(
        &self,
        params: &ParamVec,
        ts: &[f64],
        xs: &Array2<f64>,
        c: &[f64],
        ct: &[f64],
        cx: &Array2<f64>,
    ) -> Result<Vec<f64>, DiffError> {
        self.check_times(ts)?;
        let b = ts.len();
        let z = self.stack_inputs(ts, xs);
        // Through the blend, the network receives cotangent
        //   (1-phi) c - phi' ct   on N,
        //   (1-phi) (ct, cx)      on (dN/dt, dN/dx),
        // because V = (1-phi) N + phi g and dV/dt = (1-phi) dN/dt - phi'(N-g).
        let mut ybar = Array2::zeros((1, b));
        let mut ydotbar = Array2::zeros((1, b));
        let mut w_dir = Array2::zeros((1 + self.spec.d, b));
        for (k, &t) in ts.iter().enumerate() {
            let (phi, dphi) = self.spec.transition.eval(t, self.spec.horizon);
            ybar[(0, k)] = (1.0 - phi) * c[k] - dphi * ct[k];
            ydotbar[(0, k)] = 1.0 - phi;
            w_dir[(0, k)] = ct[k];
            for i in 0..self.spec.d {
                w_dir[(1 + i, k)] = cx[(i, k)];
            }
        }
        self.core.dual_param_grad(params, &z, &w_dir, &ybar, &ydotbar)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d: usize,
    pub layers: usize,
    pub width: usize,
    pub beta: f64,
    pub horizon: f64,
}

impl GeneratorSpec {
    pub fn defaults(d: usize, horizon: f64) -> GeneratorSpec {
        GeneratorSpec {
            d,
            layers: 4, // input layer + 3 residual blocks
            width: 128,
            beta: 0.5,
            horizon,
        }
    }
}

/// Flow generator with exact initial condition:
/// `Phi(t,x0) = x0 + (t/T) N(t,x0)`, ReLU activations, one shared trunk
/// with a d-dimensional output head.
pub struct Generator {
    pub spec: GeneratorSpec,
    pub core: ResNetCore,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Generator {
        assert!(spec.layers >= 2 && spec.horizon > 0.0);
        let core = ResNetCore::new(
            1 + spec.d,
            spec.d,
            spec.width,
            spec.layers - 1,
            spec.beta,
            Activation::Relu,
        );
        Generator { spec, core }
    }

    pub fn init_params(&self, seed: u64) -> ParamVec {
        self.core.init_params(seed)
    }

    fn check_times(&self, ts: &[f64]) -> Result<(), DiffError> {
        let tol = 1e-9 * self.spec.horizon.max(1.0);
        for &t in ts {
            if t < -tol || t > self.spec.horizon + tol {
                return Err(DiffError::TimeOutOfDomain {
                    t,
                    horizon: self.spec.horizon,
                });
            }
        }
        Ok(())
    }

    fn stack_inputs(&self, ts: &[f64], x0s: &Array2<f64>) -> Array2<f64> {
        let b = ts.len();
        let mut z = Array2::zeros((1 + self.spec.d, b));
        for (k, &t) in ts.iter().enumerate() {
            z[(0, k)] = t;
        }
        z.slice_mut(s![1.., ..]).assign(x0s);
        z
    }

    /// Phi at a batch of (t, x0); d x B.
    pub fn forward_batch(
        &self,
        params: &ParamVec,
        ts: &[f64],
        x0s: &Array2<f64>,
    ) -> Result<Array2<f64>, DiffError> {
        self.check_times(ts)?;
        let z = self.stack_inputs(ts, x0s);
        let n = self.core.forward_batch(params, &z)?;
        let mut out = x0s.clone();
        for (k, &t) in ts.iter().enumerate() {
            let w = t / self.spec.horizon;
            for i in 0..self.spec.d {
                out[(i, k)] += w * n[(i, k)];
            }
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamVec, t: f64, x0: &[f64]) -> Result<Vec<f64>, DiffError> {
        let xs = Array2::from_shape_vec((x0.len(), 1), x0.to_vec()).expect("column");
        Ok(self.forward_batch(params, &[t], &xs)?.column(0).to_vec())
    }

    /// Phi and its time derivative:
    /// d/dt Phi = N/T + (t/T) dN/dt, with dN/dt from a tangent pass.
    pub fn forward_and_time_deriv(
        &self,
        params: &ParamVec,
        ts: &[f64],
        x0s: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), DiffError> {
        self.check_times(ts)?;
        let b = ts.len();
        let z = self.stack_inputs(ts, x0s);
        let mut e_t = Array2::zeros((1 + self.spec.d, b));
        e_t.row_mut(0).fill(1.0);
        let (n, ndot) = self.core.forward_with_directional(params, &z, &e_t)?;
        let mut phi = x0s.clone();
        let mut dphi = Array2::zeros((self.spec.d, b));
        let horizon = self.spec.horizon;
        for (k, &t) in ts.iter().enumerate() {
            let w = t / horizon;
            for i in 0..self.spec.d {
                phi[(i, k)] += w * n[(i, k)];
                dphi[(i, k)] = n[(i, k)] / horizon + w * ndot[(i, k)];
            }
        }
        Ok((phi, dphi))
    }

    /// Parameter gradient of
    /// `sum_b [ c_phi[:,b].Phi(t_b,x0_b) + c_dt[:,b].dPhi/dt(t_b,x0_b) ]`.
    pub fn cotangent_param_grad(
        &self,
        params: &ParamVec,
        ts: &[f64],
        x0s: &Array2<f64>,
        c_phi: &Array2<f64>,
        c_dt: &Array2<f64>,
    ) -> Result<Vec<f64>, DiffError> {
        self.check_times(ts)?;
        let b = ts.len();
        let z = self.stack_inputs(ts, x0s);
        let mut e_t = Array2::zeros((1 + self.spec.d, b));
        e_t.row_mut(0).fill(1.0);
        // Phi depends on N with weight t/T; dPhi/dt contributes N/T plus
        // (t/T) dN/dt, so the head cotangents are
        //   ybar = (t/T) c_phi + c_dt/T,  ydotbar = (t/T) c_dt.
        let mut ybar = Array2::zeros((self.spec.d, b));
        let mut ydotbar = Array2::zeros((self.spec.d, b));
        let horizon = self.spec.horizon;
        for (k, &t) in ts.iter().enumerate() {
            let w = t / horizon;
            for i in 0..self.spec.d {
                ybar[(i, k)] = w * c_phi[(i, k)] + c_dt[(i, k)] / horizon;
                ydotbar[(i, k)] = w * c_dt[(i, k)];
            }
        }
        self.core.dual_param_grad(params, &z, &e_t, &ybar, &ydotbar)
    }
}

/// Writes a one-line JSON header (caller metadata plus the parameter layout)
/// followed by the raw little-endian f64 parameter array. Round trips are
/// bit-exact.
pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    params: &ParamVec,
) -> std::io::Result<()> {
    let layout: Vec<serde_json::Value> = params
        .layout
        .blocks()
        .iter()
        .map(|b| serde_json::json!({"name": b.name, "rows": b.shape.0, "cols": b.shape.1}))
        .collect();
    let header = serde_json::json!({
        "meta": meta,
        "layout": layout,
        "param_len": params.len(),
    });
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the header
/// metadata and the flat parameter values.
pub fn load_checkpoint(path: &Path) -> std::io::Result<(serde_json::Value, Vec<f64>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "missing header"))?;
    let header: serde_json::Value = serde_json::from_slice(&raw[..nl])
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let body = &raw[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "parameter payload is not a whole number of f64 values",
        ));
    }
    let expected = header
        .get("param_len")
        .and_then(|v| v.as_u64())
        .unwrap_or((body.len() / 8) as u64) as usize;
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.len() != expected {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("expected {expected} parameters, found {}", values.len()),
        ));
    }
    Ok((header.get("meta").cloned().unwrap_or(serde_json::Value::Null), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{param_grad, Cotangent, PointLoss, PointOutputs};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_value_net(d: usize, transition: Transition) -> ValueNet {
        ValueNet::new(
            ValueNetSpec {
                d,
                layers: 3,
                width: 16,
                beta: 0.5,
                activation: Activation::Tanh,
                transition,
                horizon: 1.0,
            },
            Arc::new(SquaredNorm),
        )
    }

    #[test]
    fn param_count_matches_layer_formulas() {
        // L=3, n=128, d=1: n(1+d)+n input layer, (L-1)(n^2+n) blocks, n+1 head.
        let net = ValueNet::new(ValueNetSpec::defaults(1, 1.0), Arc::new(SquaredNorm));
        assert_eq!(net.core.param_len(), 128 * 2 + 128 + 2 * (128 * 128 + 128) + 128 + 1);
        assert_eq!(net.core.param_len(), 33537);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let net = small_value_net(2, Transition::Phi1);
        let a = net.init_params(7);
        let b = net.init_params(7);
        let c = net.init_params(8);
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().zip(&c.values).any(|(x, y)| x != y));
        // biases start at zero
        let bin = net.core.layout.block("b_in").unwrap();
        assert!(a.values[bin.offset..bin.offset + bin.len()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn terminal_condition_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let d = 1 + trial % 3;
            let net = small_value_net(d, if trial % 2 == 0 { Transition::Phi1 } else { Transition::Phi2 });
            let params = net.init_params(trial as u64);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: f64 = x.iter().map(|v| v * v).sum();
            let v = net.value(&params, 1.0, &x).unwrap();
            assert_eq!(v, g, "terminal blend must force V(T,x)=g(x)");
            let grad = net.spatial_grad(&params, 1.0, &x).unwrap();
            for i in 0..d {
                assert_eq!(grad[i], 2.0 * x[i]);
            }
        }
    }

    #[test]
    fn generator_initial_condition_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..1000 {
            let d = 1 + trial % 3;
            let gen = Generator::new(GeneratorSpec {
                d,
                layers: 3,
                width: 12,
                beta: 0.5,
                horizon: 1.0,
            });
            let params = gen.init_params(trial as u64);
            let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = gen.forward(&params, 0.0, &x0).unwrap();
            assert_eq!(out, x0);
        }
    }

    #[test]
    fn zero_net_with_phi2_blends_terminal_cost_linearly() {
        let net = small_value_net(1, Transition::Phi2);
        let params = ParamVec::zeros(Arc::clone(&net.core.layout));
        // N == 0, so V(t,x) = (t/T) g(x) and dV/dt = g(x).
        let v = net.value(&params, 0.5, &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let (v2, dt) = crate::diffnum::value_and_time_grad(&net, &params, 0.3, &[1.0]).unwrap();
        assert!((v2 - 0.3).abs() < 1e-15);
        assert!((dt - 1.0).abs() < 1e-15);
        let gx = net.spatial_grad(&params, 0.0, &[0.7]).unwrap();
        assert!(gx[0].abs() < 1e-15, "blend weight 0 on g and zero net");
    }

    #[test]
    fn phi1_blend_weight_value() {
        let (phi, _) = Transition::Phi1.eval(0.0, 1.0);
        assert!((phi - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn residual_blocks_with_zero_weights_are_identity() {
        // With identity activation and zero residual weights, each block
        // reduces to h <- h, so the head sees the input-layer features.
        let deep = ResNetCore::new(2, 1, 8, 3, 0.5, Activation::Identity);
        let shallow = ResNetCore::new(2, 1, 8, 1, 0.5, Activation::Identity);
        let mut params_deep = deep.init_params(3);
        // zero all residual blocks
        for i in 1..=3 {
            let blk = deep.layout.block(&format!("w_res{i}")).unwrap();
            for v in &mut params_deep.values[blk.offset..blk.offset + blk.len()] {
                *v = 0.0;
            }
        }
        let mut shallow_vals = shallow.init_params(0).values;
        for name in ["w_in", "b_in", "w_out", "b_out"] {
            let src = deep.layout.block(name).unwrap();
            let dst = shallow.layout.block(name).unwrap();
            shallow_vals[dst.offset..dst.offset + dst.len()]
                .copy_from_slice(&params_deep.values[src.offset..src.offset + src.len()]);
        }
        let blk = shallow.layout.block("w_res1").unwrap();
        for v in &mut shallow_vals[blk.offset..blk.offset + blk.len()] {
            *v = 0.0;
        }
        let params_shallow = ParamVec::from_values(Arc::clone(&shallow.layout), shallow_vals).unwrap();
        let z = Array2::from_shape_vec((2, 3), vec![0.3, -0.2, 1.1, 0.4, 0.0, -0.9]).unwrap();
        let a = deep.forward_batch(&params_deep, &z).unwrap();
        let b = shallow.forward_batch(&params_shallow, &z).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    fn fd_input_grad(net: &ValueNet, params: &ParamVec, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let h = 1e-4;
        let vt = {
            let tp = (t + h).min(net.spec.horizon);
            let tm = (t - h).max(0.0);
            (net.value(params, tp, x).unwrap() - net.value(params, tm, x).unwrap()) / (tp - tm)
        };
        let mut gx = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            gx[i] = (net.value(params, t, &xp).unwrap() - net.value(params, t, &xm).unwrap()) / (2.0 * h);
        }
        (vt, gx)
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let d = 1 + trial % 3;
            let net = small_value_net(d, if trial % 2 == 0 { Transition::Phi1 } else { Transition::Phi2 });
            let params = net.init_params(100 + trial as u64);
            let t = rng.gen_range(0.05..0.95);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, gt) = crate::diffnum::value_and_time_grad(&net, &params, t, &x).unwrap();
            let (_, gx) = crate::diffnum::value_and_input_grad(&net, &params, t, &x).unwrap();
            let (fd_t, fd_x) = fd_input_grad(&net, &params, t, &x);
            assert!((gt - fd_t).abs() <= 1e-5 * (1.0 + fd_t.abs()), "dt: {gt} vs {fd_t}");
            for i in 0..d {
                assert!(
                    (gx[i] - fd_x[i]).abs() <= 1e-5 * (1.0 + fd_x[i].abs()),
                    "dx[{i}]: {} vs {}",
                    gx[i],
                    fd_x[i]
                );
            }
        }
    }

    struct GradNormLoss;
    impl PointLoss for GradNormLoss {
        fn eval(&self, _k: usize, _t: f64, _x: &[f64], out: &PointOutputs<'_>) -> (f64, Cotangent) {
            let l: f64 = out.dx.iter().map(|v| v * v).sum::<f64>() + out.dt * out.dt + out.value * out.value;
            (
                l,
                Cotangent {
                    d_value: 2.0 * out.value,
                    d_dt: 2.0 * out.dt,
                    d_dx: out.dx.iter().map(|v| 2.0 * v).collect(),
                },
            )
        }
    }

    #[test]
    fn param_grad_of_gradient_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 2;
        let net = small_value_net(d, Transition::Phi1);
        let params = net.init_params(42);
        let b = 5;
        let ts: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..0.9)).collect();
        let xs = Array2::from_shape_fn((d, b), |_| rng.gen_range(-1.0..1.0));
        let report = param_grad(&net, &params, &ts, &xs, &GradNormLoss).unwrap();

        let loss_at = |p: &ParamVec| -> f64 {
            let (v, dt, dx) = net.grads_batch(p, &ts, &xs).unwrap();
            (0..b)
                .map(|k| {
                    v[k] * v[k]
                        + dt[k] * dt[k]
                        + (0..d).map(|i| dx[(i, k)] * dx[(i, k)]).sum::<f64>()
                })
                .sum()
        };
        assert!((report.loss - loss_at(&params)).abs() < 1e-12);

        let h = 1e-4;
        let n_checks = 120;
        let total = params.len();
        for c in 0..n_checks {
            let idx = (c * 7919) % total;
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.values[idx] += h;
            pm.values[idx] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            let an = report.grad[idx];
            assert!(
                (an - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                "param {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn param_grad_is_linear_in_the_loss() {
        struct Scaled(f64);
        impl PointLoss for Scaled {
            fn eval(&self, _k: usize, _t: f64, _x: &[f64], out: &PointOutputs<'_>) -> (f64, Cotangent) {
                (
                    self.0 * out.value,
                    Cotangent::value_only(self.0),
                )
            }
        }
        let net = small_value_net(1, Transition::Phi2);
        let params = net.init_params(5);
        let ts = [0.2, 0.7];
        let xs = Array2::from_shape_vec((1, 2), vec![0.5, -0.3]).unwrap();
        let g1 = param_grad(&net, &params, &ts, &xs, &Scaled(1.0)).unwrap();
        let g3 = param_grad(&net, &params, &ts, &xs, &Scaled(3.0)).unwrap();
        for (a, b) in g1.grad.iter().zip(&g3.grad) {
            assert!((3.0 * a - b).abs() <= 1e-13 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn param_grad_of_constant_loss_is_zero() {
        struct Const;
        impl PointLoss for Const {
            fn eval(&self, _k: usize, _t: f64, _x: &[f64], _out: &PointOutputs<'_>) -> (f64, Cotangent) {
                (1.0, Cotangent::value_only(0.0))
            }
        }
        let net = small_value_net(1, Transition::Phi1);
        let params = net.init_params(9);
        let ts = [0.5];
        let xs = Array2::from_shape_vec((1, 1), vec![0.1]).unwrap();
        let rep = param_grad(&net, &params, &ts, &xs, &Const).unwrap();
        assert!(rep.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn generator_time_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 2;
        let gen = Generator::new(GeneratorSpec {
            d,
            layers: 3,
            width: 16,
            beta: 0.5,
            horizon: 1.0,
        });
        let params = gen.init_params(77);
        let mut checked = 0;
        for _ in 0..60 {
            let t = rng.gen_range(0.05..0.95);
            let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xs = Array2::from_shape_vec((d, 1), x0.clone()).unwrap();
            let (_, dphi) = gen.forward_and_time_deriv(&params, &[t], &xs).unwrap();
            let h = 1e-6;
            let fp = gen.forward(&params, t + h, &x0).unwrap();
            let fm = gen.forward(&params, t - h, &x0).unwrap();
            let mut kink = false;
            for i in 0..d {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                if (dphi[(i, 0)] - fd).abs() > 1e-4 * (1.0 + fd.abs()) {
                    kink = true; // a ReLU kink sits inside the FD stencil
                }
            }
            if !kink {
                checked += 1;
            }
        }
        assert!(checked >= 55, "only {checked}/60 probes matched; kinks should be rare");
    }

    #[test]
    fn generator_param_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 2;
        let gen = Generator::new(GeneratorSpec {
            d,
            layers: 3,
            width: 10,
            beta: 0.5,
            horizon: 1.0,
        });
        let params = gen.init_params(13);
        let b = 4;
        let ts: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..0.9)).collect();
        let x0s = Array2::from_shape_fn((d, b), |_| rng.gen_range(-1.0..1.0));
        // loss = sum |Phi|^2 + |dPhi/dt|^2
        let loss_at = |p: &ParamVec| -> f64 {
            let (phi, dphi) = gen.forward_and_time_deriv(p, &ts, &x0s).unwrap();
            phi.iter().map(|v| v * v).sum::<f64>() + dphi.iter().map(|v| v * v).sum::<f64>()
        };
        let (phi, dphi) = gen.forward_and_time_deriv(&params, &ts, &x0s).unwrap();
        let grad = gen
            .cotangent_param_grad(&params, &ts, &x0s, &(2.0 * &phi), &(2.0 * &dphi))
            .unwrap();
        let h = 1e-5;
        let total = params.len();
        let mut ok = 0;
        let mut tested = 0;
        for c in 0..100 {
            let idx = (c * 5237) % total;
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.values[idx] += h;
            pm.values[idx] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            tested += 1;
            if (grad[idx] - fd).abs() <= 1e-4 * (1.0 + fd.abs()) {
                ok += 1;
            }
        }
        // ReLU kinks can spoil individual FD probes; require near-unanimity.
        assert!(ok >= tested - 2, "{ok}/{tested} parameter probes matched");
    }

    #[test]
    fn time_domain_is_enforced() {
        let net = small_value_net(1, Transition::Phi1);
        let params = net.init_params(0);
        assert!(matches!(
            net.value(&params, 1.5, &[0.0]),
            Err(DiffError::TimeOutOfDomain { .. })
        ));
        assert!(matches!(
            net.value(&params, -0.1, &[0.0]),
            Err(DiffError::TimeOutOfDomain { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = small_value_net(2, Transition::Phi1);
        let params = net.init_params(0);
        assert!(crate::diffnum::value_and_input_grad(&net, &params, 0.5, &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = small_value_net(2, Transition::Phi2);
        let params = net.init_params(123);
        let dir = std::env::temp_dir().join("igt-nets-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        let meta = serde_json::json!({"kind": "value", "seed": 123});
        save_checkpoint(&path, &meta, &params).unwrap();
        let (meta2, values) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2["kind"], "value");
        assert_eq!(values.len(), params.len());
        for (a, b) in values.iter().zip(&params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).ok();
    }
}
