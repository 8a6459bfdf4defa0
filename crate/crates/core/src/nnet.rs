//! Fully connected networks used as `g_x` and `g_z`.
//!
//! A [`MaskedMlp`] maps `R^d -> R^d`; output coordinate `i` is the `i`-th output of
//! the shared network evaluated at `m_i ⊙ x`, where `m_i` is column `i` of the
//! adjacency mask (or `e_i` for identity masking).
//!
//! Reverse mode is written out by hand. Besides the usual vector-Jacobian product,
//! [`MaskedMlp::backward_dual`] differentiates a forward-mode tangent, which gives
//! gradients of `wᵀ J(x) v` with respect to parameters, inputs and mask entries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// (σ(v), σ'(v), σ''(v))
    #[inline]
    fn with_derivatives(self, v: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (v, 1.0, 0.0),
            Activation::Tanh => {
                let t = v.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Output `i` sees `M[:, i] ⊙ x`.
    ColumnOfM,
    /// Output `i` sees only `x_i`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub mask_mode: MaskMode,
    pub lipschitz_cap: f64,
}

/// Gradient buffers shaped like the network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias += &b.bias * scale;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0))
    }
}

/// Gradients of `Σ_i α_i g_i(x) + β_i ġ_i(x; v)`.
#[derive(Debug, Clone)]
pub struct DualGrads {
    pub params: MlpGrads,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    /// `mask[(j, i)]`: derivative with respect to mask entry `M[j, i]`.
    pub mask: DMatrix<f64>,
}

/// Forward pass for all outputs at once; column `i` of every matrix belongs to output `i`.
struct Trace {
    /// Input of every layer; index 0 holds the masked inputs.
    acts: Vec<DMatrix<f64>>,
    tans: Vec<DMatrix<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<DMatrix<f64>>,
    pre_tan: Vec<DMatrix<f64>>,
    out: DVector<f64>,
    out_tan: Option<DVector<f64>>,
}

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITER: usize = 50;

impl MaskedMlp {
    /// Random init with `U(−1/√fan_in, 1/√fan_in)` weights and zero biases, then normalized.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        mask_mode: MaskMode,
        lipschitz_cap: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.first() != widths.last() {
            return Err(Error::InvalidArgument(format!(
                "network widths must start and end at d, got {widths:?}"
            )));
        }
        if !(lipschitz_cap > 0.0 && lipschitz_cap <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lipschitz_cap must lie in (0, 1], got {lipschitz_cap}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        let mut net = MaskedMlp {
            layers,
            activation,
            mask_mode,
            lipschitz_cap,
        };
        net.spectral_normalize();
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(widths: &[usize], activation: Activation, mask_mode: MaskMode, lipschitz_cap: f64) -> Self {
        MaskedMlp {
            layers: widths
                .windows(2)
                .map(|w| Dense {
                    weight: DMatrix::zeros(w[1], w[0]),
                    bias: DVector::zeros(w[1]),
                })
                .collect(),
            activation,
            mask_mode,
            lipschitz_cap,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        MlpGrads {
            layers: self.layers.clone(),
        }
        .flatten()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Per-layer spectral norm budget; the budgets multiply to `lipschitz_cap`.
    pub fn layer_cap(&self) -> f64 {
        self.lipschitz_cap.powf(1.0 / self.layers.len() as f64)
    }

    /// Rescale every weight matrix whose estimated spectral norm exceeds its layer budget
    /// by more than the power-iteration tolerance.
    pub fn spectral_normalize(&mut self) {
        let cap = self.layer_cap();
        for (k, l) in self.layers.iter_mut().enumerate() {
            let restart: Vec<f64> = (0..l.weight.ncols())
                .map(|i| ((i * 7 + k * 3 + 1) as f64).sin())
                .collect();
            let s = linalg::spectral_norm_power(&l.weight, POWER_TOL, POWER_MAX_ITER, &restart);
            if s > cap * (1.0 + POWER_TOL) {
                l.weight *= cap / s;
            }
        }
    }

    /// Upper bound on the Lipschitz constant of the unmasked network.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| linalg::spectral_norm_exact(&l.weight))
            .product()
    }

    /// Plain network `R^d -> R^d` without any masking.
    pub fn eval_unmasked(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut pre = &l.weight * &a + &l.bias;
            if k < last {
                pre.apply(|v| *v = self.activation.apply(*v));
            }
            a = pre;
        }
        a
    }

    fn check(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        if self.mask_mode == MaskMode::ColumnOfM && mask.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: mask.nrows() });
        }
        Ok(())
    }

    /// `d x d` matrix whose column `i` is the network input `m_i ⊙ x`.
    fn masked_inputs(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        match self.mask_mode {
            MaskMode::ColumnOfM => DMatrix::from_fn(x.len(), x.len(), |j, i| mask[(j, i)] * x[j]),
            MaskMode::Identity => DMatrix::from_diagonal(x),
        }
    }

    fn run(&self, inp: DMatrix<f64>, tan: Option<DMatrix<f64>>) -> Trace {
        let last = self.layers.len() - 1;
        let with_tan = tan.is_some();
        let mut tr = Trace {
            acts: Vec::with_capacity(last + 1),
            tans: Vec::with_capacity(last + 1),
            pre: Vec::with_capacity(last),
            pre_tan: Vec::with_capacity(last),
            out: DVector::zeros(0),
            out_tan: None,
        };
        let mut a = inp;
        let mut t = tan.unwrap_or_else(|| DMatrix::zeros(0, 0));
        for l in &self.layers[..last] {
            let mut pre = &l.weight * &a;
            for mut col in pre.column_iter_mut() {
                col += &l.bias;
            }
            let (next_a, next_t, pre_t) = if with_tan {
                let pre_t = &l.weight * &t;
                let mut na = pre.clone();
                let mut nt = pre_t.clone();
                for k in 0..pre.len() {
                    let (s, ds, _) = self.activation.with_derivatives(pre[k]);
                    na[k] = s;
                    nt[k] = ds * pre_t[k];
                }
                (na, nt, pre_t)
            } else {
                (pre.map(|v| self.activation.apply(v)), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
            };
            tr.acts.push(std::mem::replace(&mut a, next_a));
            tr.tans.push(std::mem::replace(&mut t, next_t));
            tr.pre.push(pre);
            tr.pre_tan.push(pre_t);
        }
        let lw = &self.layers[last];
        let d = lw.weight.nrows();
        let h = lw.weight.ncols();
        let row_dot = |m: &DMatrix<f64>, i: usize| (0..h).map(|k| lw.weight[(i, k)] * m[(k, i)]).sum::<f64>();
        tr.out = DVector::from_fn(d, |i, _| row_dot(&a, i) + lw.bias[i]);
        if with_tan {
            tr.out_tan = Some(DVector::from_fn(d, |i, _| row_dot(&t, i)));
        }
        tr.acts.push(a);
        tr.tans.push(t);
        tr
    }

    /// Reverse pass for upstream weights `ga` on outputs and `gt` on output tangents.
    /// Returns gradients with respect to the masked inputs and their tangents.
    fn backprop(
        &self,
        tr: &Trace,
        ga: &DVector<f64>,
        gt: Option<&DVector<f64>>,
        grads: &mut MlpGrads,
    ) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let last = self.layers.len() - 1;
        let lw = &self.layers[last];
        let (d, h) = lw.weight.shape();
        {
            let g = &mut grads.layers[last];
            let a = &tr.acts[last];
            for i in 0..d {
                for k in 0..h {
                    g.weight[(i, k)] += ga[i] * a[(k, i)];
                }
            }
            if let Some(gt) = gt {
                let t = &tr.tans[last];
                for i in 0..d {
                    for k in 0..h {
                        g.weight[(i, k)] += gt[i] * t[(k, i)];
                    }
                }
            }
            g.bias += ga;
        }
        let mut g_a = DMatrix::from_fn(h, d, |k, i| lw.weight[(i, k)] * ga[i]);
        let mut g_t = gt.map(|gt| DMatrix::from_fn(h, d, |k, i| lw.weight[(i, k)] * gt[i]));
        for l in (0..last).rev() {
            let pre = &tr.pre[l];
            let mut g_pre = DMatrix::zeros(pre.nrows(), pre.ncols());
            let mut gt_pre = g_t.as_ref().map(|_| DMatrix::zeros(pre.nrows(), pre.ncols()));
            for k in 0..pre.len() {
                let (_, d1, d2) = self.activation.with_derivatives(pre[k]);
                g_pre[k] = g_a[k] * d1;
                if let (Some(gt_in), Some(gtp)) = (&g_t, &mut gt_pre) {
                    g_pre[k] += gt_in[k] * d2 * tr.pre_tan[l][k];
                    gtp[k] = gt_in[k] * d1;
                }
            }
            let g = &mut grads.layers[l];
            g.weight.gemm(1.0, &g_pre, &tr.acts[l].transpose(), 1.0);
            for col in g_pre.column_iter() {
                g.bias += col;
            }
            let w = &self.layers[l].weight;
            g_a = w.tr_mul(&g_pre);
            if let Some(gtp) = &gt_pre {
                g.weight.gemm(1.0, gtp, &tr.tans[l].transpose(), 1.0);
                g_t = Some(w.tr_mul(gtp));
            }
        }
        (g_a, g_t)
    }

    /// `g(x)` with coordinate `i` computed from the masked input `m_i ⊙ x`.
    pub fn forward(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(mask, x)?;
        Ok(self.run(self.masked_inputs(mask, x), None).out)
    }

    /// `(g(x), J_g(x) v)`.
    pub fn jvp(&self, mask: &DMatrix<f64>, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check(mask, x)?;
        let tr = self.run(self.masked_inputs(mask, x), Some(self.masked_inputs(mask, v)));
        Ok((tr.out, tr.out_tan.expect("tangent requested")))
    }

    /// `uᵀ J_g(x)` as a column vector.
    pub fn vjp(&self, mask: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.backward(mask, x, u)?.1)
    }

    /// Reverse-mode gradients of `⟨upstream, g(x)⟩` with respect to parameters and `x`.
    pub fn backward(
        &self,
        mask: &DMatrix<f64>,
        x: &DVector<f64>,
        upstream: &DVector<f64>,
    ) -> Result<(MlpGrads, DVector<f64>)> {
        let d = self.dim();
        let zero = DVector::zeros(d);
        let g = self.backward_dual(mask, x, &zero, upstream, &zero)?;
        Ok((g.params, g.x))
    }

    /// Gradients of `Σ_i α_i g_i(x) + β_i [J_g(x) v]_i` with respect to parameters,
    /// `x`, `v`, and the mask entries.
    pub fn backward_dual(
        &self,
        mask: &DMatrix<f64>,
        x: &DVector<f64>,
        v: &DVector<f64>,
        alpha: &DVector<f64>,
        beta: &DVector<f64>,
    ) -> Result<DualGrads> {
        self.check(mask, x)?;
        let d = self.dim();
        let with_tan = beta.iter().any(|&b| b != 0.0);
        let tr = self.run(
            self.masked_inputs(mask, x),
            with_tan.then(|| self.masked_inputs(mask, v)),
        );
        let mut params = self.zero_grads();
        let (g_in, gt_in) = self.backprop(&tr, alpha, with_tan.then_some(beta), &mut params);
        let mut gx = DVector::zeros(d);
        let mut gv = DVector::zeros(d);
        let mut gm = DMatrix::zeros(d, d);
        match self.mask_mode {
            MaskMode::ColumnOfM => {
                for i in 0..d {
                    for j in 0..d {
                        let m = mask[(j, i)];
                        gx[j] += m * g_in[(j, i)];
                        gm[(j, i)] = g_in[(j, i)] * x[j];
                        if let Some(gt) = &gt_in {
                            gv[j] += m * gt[(j, i)];
                            gm[(j, i)] += gt[(j, i)] * v[j];
                        }
                    }
                }
            }
            MaskMode::Identity => {
                for j in 0..d {
                    gx[j] = g_in[(j, j)];
                    if let Some(gt) = &gt_in {
                        gv[j] = gt[(j, j)];
                    }
                }
            }
        }
        Ok(DualGrads {
            params,
            x: gx,
            v: gv,
            mask: gm,
        })
    }

    /// Dense Jacobian `J[i, j] = ∂g_i/∂x_j`.
    pub fn jacobian(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            let (_, col) = self.jvp(mask, x, &e)?;
            jac.set_column(j, &col);
        }
        Ok(jac)
    }
}
