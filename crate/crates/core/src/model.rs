//! Linear self-attention, looped and per-layer forward passes.
//!
//! The prompt is `Z = [[X, x_q], [y^T, 0]]` ((d+1)×(n+1)). One step is
//! `Z ← Z − (1/n)·P Z M (Z^T Q Z)` with `Q = [[A, 0], [0, 0]]`,
//! `P = [[0, 0], [u^T, 1]]` and `M = diag(1, …, 1, 0)`. The model output is
//! `−Z_{d+1, n+1}` after the last step.
//!
//! With `u = 0` the bottom row after `t` steps is `[y^T − w_t^T X, −w_t^T x_q]`
//! where `w_t` is `t` steps of gradient descent preconditioned by `A`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matkernel::SymMatrix;
use crate::tasks::{CompactInstance, RegressionInstance};

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    z: DMatrix<f64>,
}

impl Prompt {
    pub fn from_instance(inst: &RegressionInstance) -> Self {
        let (d, n) = (inst.d(), inst.n());
        let mut z = DMatrix::zeros(d + 1, n + 1);
        z.view_mut((0, 0), (d, n)).copy_from(&inst.x);
        z.view_mut((0, n), (d, 1)).copy_from(&inst.x_q);
        z.view_mut((d, 0), (1, n)).copy_from(&inst.y.transpose());
        Self { z }
    }

    pub fn from_matrix(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() < 2 || z.ncols() < 2 {
            return Err(LabError::InvalidParameter("prompt must be at least 2×2".into()));
        }
        Ok(Self { z })
    }

    pub fn d(&self) -> usize {
        self.z.nrows() - 1
    }

    pub fn n(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Bottom row, `[y^{(t)}, −y_q^{(t)}]`.
    pub fn bottom_row(&self) -> Vec<f64> {
        self.z.row(self.d()).iter().copied().collect()
    }

    /// `−Z_{d+1, n+1}`.
    pub fn output(&self) -> f64 {
        -self.z[(self.d(), self.n())]
    }
}

/// Shared-weight parameters `(A, u)` applied `loops` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct LoopedParams {
    pub a: SymMatrix,
    pub u: DVector<f64>,
    pub loops: usize,
}

/// JSON layout of [`LoopedParams`]: `{A (row-major), u, L}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    #[serde(rename = "A")]
    a: Vec<f64>,
    u: Vec<f64>,
    #[serde(rename = "L")]
    loops: usize,
}

impl TryFrom<ParamsDoc> for LoopedParams {
    type Error = LabError;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        let d = doc.u.len();
        let a = SymMatrix::from_row_slice(d, &doc.a)?;
        LoopedParams::new(a, DVector::from_vec(doc.u), doc.loops)
    }
}

impl From<LoopedParams> for ParamsDoc {
    fn from(p: LoopedParams) -> Self {
        ParamsDoc { a: p.a.to_row_major(), u: p.u.as_slice().to_vec(), loops: p.loops }
    }
}

impl LoopedParams {
    pub fn new(a: SymMatrix, u: DVector<f64>, loops: usize) -> Result<Self> {
        if loops == 0 {
            return Err(LabError::InvalidParameter("loop count must be ≥ 1".into()));
        }
        if a.dim() != u.len() {
            return Err(LabError::DimensionMismatch { expected: a.dim(), got: u.len() });
        }
        Ok(Self { a, u, loops })
    }

    /// `(A, 0, loops)`.
    pub fn preconditioner(a: SymMatrix, loops: usize) -> Result<Self> {
        let d = a.dim();
        Self::new(a, DVector::zeros(d), loops)
    }

    pub fn d(&self) -> usize {
        self.a.dim()
    }

    pub fn with_loops(&self, loops: usize) -> Result<Self> {
        Self::new(self.a.clone(), self.u.clone(), loops)
    }

    /// The equivalent multilayer parameters (`loops` identical layers).
    pub fn expand(&self) -> LayerParamsSeq {
        LayerParamsSeq(vec![LayerParams { a: self.a.clone(), u: self.u.clone() }; self.loops])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub a: SymMatrix,
    pub u: DVector<f64>,
}

/// Per-layer parameters without weight sharing.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParamsSeq(pub Vec<LayerParams>);

impl LayerParamsSeq {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(LabError::InvalidParameter("layer sequence must be non-empty".into()));
        };
        let d = first.a.dim();
        for l in &layers {
            if l.a.dim() != d || l.u.len() != d {
                return Err(LabError::DimensionMismatch { expected: d, got: l.a.dim().max(l.u.len()) });
            }
        }
        Ok(Self(layers))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn d(&self) -> usize {
        self.0[0].a.dim()
    }
}

/// Anything that supplies `(A_t, u_t)` for `t = 0..depth`.
pub trait Layers {
    fn depth(&self) -> usize;
    fn layer(&self, t: usize) -> (&SymMatrix, &DVector<f64>);
    fn dim(&self) -> usize;
}

impl Layers for LoopedParams {
    fn depth(&self) -> usize {
        self.loops
    }

    fn layer(&self, _t: usize) -> (&SymMatrix, &DVector<f64>) {
        (&self.a, &self.u)
    }

    fn dim(&self) -> usize {
        self.a.dim()
    }
}

impl Layers for LayerParamsSeq {
    fn depth(&self) -> usize {
        self.0.len()
    }

    fn layer(&self, t: usize) -> (&SymMatrix, &DVector<f64>) {
        (&self.0[t].a, &self.0[t].u)
    }

    fn dim(&self) -> usize {
        self.d()
    }
}

/// The full `P` and `Q` matrices for the restricted parameterization.
pub fn attention_matrices(a: &SymMatrix, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.dim();
    let mut p = DMatrix::zeros(d + 1, d + 1);
    p.view_mut((d, 0), (1, d)).copy_from(&u.transpose());
    p[(d, d)] = 1.0;
    let mut q = DMatrix::zeros(d + 1, d + 1);
    q.view_mut((0, 0), (d, d)).copy_from(a.as_matrix());
    (p, q)
}

/// `Z − (1/n)·P Z M (Z^T Q Z)` for arbitrary dense `P`, `Q`.
pub fn lsa_step_dense(z: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let cols = z.ncols();
    let mut mask = DMatrix::identity(cols, cols);
    mask[(cols - 1, cols - 1)] = 0.0;
    let attn = p * z * mask * (z.transpose() * q * z);
    z - attn / n as f64
}

/// One attention step in the restricted parameterization, O(nd + d²).
pub fn lsa_step(z: &Prompt, a: &SymMatrix, u: &DVector<f64>, n: usize) -> Result<Prompt> {
    let d = z.d();
    if a.dim() != d || u.len() != d {
        return Err(LabError::DimensionMismatch { expected: d, got: a.dim().max(u.len()) });
    }
    if n != z.n() {
        return Err(LabError::DimensionMismatch { expected: z.n(), got: n });
    }
    let mut out = z.clone();
    apply_step(&mut out.z, a.as_matrix(), u, n);
    Ok(out)
}

fn apply_step(z: &mut DMatrix<f64>, a: &DMatrix<f64>, u: &DVector<f64>, n: usize) {
    let d = z.nrows() - 1;
    let top = z.view((0, 0), (d, n + 1));
    let data = z.view((0, 0), (d, n));
    // s = (u^T X + y^(t)), restricted to the n example columns by the mask
    let s = data.tr_mul(u) + z.view((d, 0), (1, n)).transpose();
    let coeff = a * (data * s);
    let update = top.tr_mul(&coeff) / n as f64;
    for j in 0..=n {
        z[(d, j)] -= update[j];
    }
}

fn run_layers<P: Layers + ?Sized>(inst: &RegressionInstance, params: &P) -> Result<Prompt> {
    let d = inst.d();
    if params.dim() != d {
        return Err(LabError::DimensionMismatch { expected: d, got: params.dim() });
    }
    let n = inst.n();
    let mut prompt = Prompt::from_instance(inst);
    for t in 0..params.depth() {
        let (a, u) = params.layer(t);
        apply_step(&mut prompt.z, a.as_matrix(), u, n);
    }
    Ok(prompt)
}

/// Applies the shared layer `L` times and returns `−Z^{(L)}_{d+1, n+1}`.
pub fn forward_looped(inst: &RegressionInstance, p: &LoopedParams) -> Result<f64> {
    Ok(run_layers(inst, p)?.output())
}

pub fn forward_multilayer(inst: &RegressionInstance, seq: &LayerParamsSeq) -> Result<f64> {
    Ok(run_layers(inst, seq)?.output())
}

/// Prompt after every step, `Z^{(0)}..=Z^{(L)}`.
pub fn forward_trace<P: Layers + ?Sized>(inst: &RegressionInstance, params: &P) -> Result<Vec<Prompt>> {
    let n = inst.n();
    let mut prompt = Prompt::from_instance(inst);
    let mut out = vec![prompt.clone()];
    for t in 0..params.depth() {
        let (a, u) = params.layer(t);
        prompt = lsa_step(&prompt, a, u, n)?;
        out.push(prompt.clone());
    }
    Ok(out)
}

/// Closed-form label rows `y^{(t)}` and query values `y_q^{(t)}` for `t = 0..=L`.
#[derive(Clone, Debug)]
pub struct RecursionTrace {
    pub label_rows: Vec<DVector<f64>>,
    pub query: Vec<f64>,
}

impl RecursionTrace {
    /// Model output after the last layer (equals `y_q^{(L)}`).
    pub fn prediction(&self) -> f64 {
        *self.query.last().expect("trace has t = 0")
    }
}

/// Evaluates, with `Σ = (1/n)XX^T` and `Π_{i..t} = (I − ΣA_i)⋯(I − ΣA_{t−1})`,
///
/// `y^{(t)T}  = w*^T Π_{0..t} X − Σ_{i<t} u_i^T Σ A_i Π_{i+1..t} X`
/// `y_q^{(t)} = y_q − w*^T Π_{0..t} x_q + Σ_{i<t} u_i^T Σ A_i Π_{i+1..t} x_q`
///
/// directly from the products, without running attention.
pub fn recursion_formula(inst: &RegressionInstance, seq: &LayerParamsSeq) -> RecursionTrace {
    let d = inst.d();
    let sigma = inst.covariance();
    let eye = DMatrix::<f64>::identity(d, d);
    let factors: Vec<DMatrix<f64>> = seq.0.iter().map(|l| &eye - &sigma * l.a.as_matrix()).collect();
    let product = |from: usize, to: usize| -> DMatrix<f64> {
        factors[from..to].iter().fold(eye.clone(), |acc, f| acc * f)
    };
    let mut label_rows = Vec::with_capacity(seq.len() + 1);
    let mut query = Vec::with_capacity(seq.len() + 1);
    for t in 0..=seq.len() {
        let mut v = product(0, t).tr_mul(&inst.w_star);
        for i in 0..t {
            let l = &seq.0[i];
            let left = (&sigma * l.a.as_matrix()).tr_mul(&l.u);
            v -= product(i + 1, t).tr_mul(&left);
        }
        label_rows.push(inst.x.tr_mul(&v));
        query.push(inst.y_q - v.dot(&inst.x_q));
    }
    RecursionTrace { label_rows, query }
}

/// Parameters under which the looped model runs `L` steps of gradient
/// descent preconditioned by `a_pre`: `(A = a_pre, u = 0)`.
pub fn construct_expressive_params(a_pre: &SymMatrix, loops: usize) -> Result<LoopedParams> {
    LoopedParams::preconditioner(a_pre.clone(), loops)
}

/// Prediction error `ŷ − y_q` from the sufficient statistics of an instance.
///
/// Runs `v_{t+1} = v_t − A_t Σ (v_t + u_t)` from `v_0 = w*`; the output is
/// `(w* − v_L)·x_q`, so the error is `−v_L·x_q`.
pub fn compact_error<P: Layers + ?Sized>(ci: &CompactInstance, params: &P) -> f64 {
    let mut v = ci.w_star.clone();
    for t in 0..params.depth() {
        let (a, u) = params.layer(t);
        let s = &ci.sigma * (&v + u);
        v -= a.as_matrix() * s;
    }
    -v.dot(&ci.x_q)
}

/// Error and its gradients with respect to every layer's `(A_t, u_t)`.
#[derive(Clone, Debug)]
pub struct ErrorGradient {
    pub error: f64,
    /// Unsymmetrized `∂e/∂A_t`.
    pub grad_a: Vec<DMatrix<f64>>,
    pub grad_u: Vec<DVector<f64>>,
}

/// Reverse-mode derivative of [`compact_error`].
pub fn compact_error_grad<P: Layers + ?Sized>(ci: &CompactInstance, params: &P) -> ErrorGradient {
    let depth = params.depth();
    let mut states = Vec::with_capacity(depth + 1);
    let mut v = ci.w_star.clone();
    for t in 0..depth {
        let (a, u) = params.layer(t);
        let s = &ci.sigma * (&v + u);
        let next = &v - a.as_matrix() * &s;
        states.push(s);
        v = next;
    }
    let error = -v.dot(&ci.x_q);
    let mut g = -ci.x_q.clone();
    let mut grad_a = vec![DMatrix::zeros(0, 0); depth];
    let mut grad_u = vec![DVector::zeros(0); depth];
    for t in (0..depth).rev() {
        let (a, _) = params.layer(t);
        let sa_g = &ci.sigma * (a.as_matrix() * &g);
        grad_a[t] = -(&g * states[t].transpose());
        grad_u[t] = -sa_g.clone();
        g -= sa_g;
    }
    ErrorGradient { error, grad_a, grad_u }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkernel::random_symmetric;
    use crate::tasks::{gd_oracle, TaskDistribution};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_instance() -> RegressionInstance {
        RegressionInstance::realizable(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::from_vec(vec![3.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap()
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rand::Rng::sample(rng, rand_distr::StandardNormal)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn prompt_layout() {
        let dist = TaskDistribution::isotropic(2, 3, 1).unwrap();
        let inst = dist.instance(0);
        let p = Prompt::from_instance(&inst);
        assert_eq!(p.matrix()[(2, 3)], 0.0);
        assert_eq!(p.matrix()[(0, 3)], inst.x_q[0]);
        assert_eq!(p.matrix()[(2, 1)], inst.y[1]);
        assert_eq!(p.matrix()[(1, 2)], inst.x[(1, 2)]);
    }

    #[test]
    fn scalar_step_by_hand() {
        let inst = scalar_instance();
        let z = Prompt::from_instance(&inst);
        for a in [0.25, 0.1, -0.7] {
            let out = lsa_step(&z, &SymMatrix::from_diagonal(&[a]).unwrap(), &DVector::zeros(1), 1).unwrap();
            let row = out.bottom_row();
            assert!((row[0] - (2.0 - 8.0 * a)).abs() < 1e-15);
            assert!((row[1] + 12.0 * a).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_params_leave_prompt_unchanged() {
        let inst = TaskDistribution::isotropic(3, 5, 2).unwrap().instance(0);
        let z = Prompt::from_instance(&inst);
        assert_eq!(lsa_step(&z, &SymMatrix::zeros(3), &DVector::zeros(3), 5).unwrap(), z);
    }

    #[test]
    fn dimension_mismatch() {
        let inst = TaskDistribution::isotropic(3, 5, 2).unwrap().instance(0);
        let z = Prompt::from_instance(&inst);
        assert!(lsa_step(&z, &SymMatrix::zeros(2), &DVector::zeros(2), 5).is_err());
        assert!(lsa_step(&z, &SymMatrix::zeros(3), &DVector::zeros(3), 4).is_err());
        let p = LoopedParams::preconditioner(SymMatrix::identity(2), 1).unwrap();
        assert!(forward_looped(&inst, &p).is_err());
    }

    #[test]
    fn scalar_forward() {
        let p = LoopedParams::preconditioner(SymMatrix::from_diagonal(&[0.25]).unwrap(), 1).unwrap();
        assert!((forward_looped(&scalar_instance(), &p).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_preconditioner_recovers_label() {
        let inst = TaskDistribution::isotropic(3, 9, 4).unwrap().instance(2);
        let a = SymMatrix::new(inst.covariance()).unwrap().inverse_pd().unwrap();
        let p = construct_expressive_params(&a, 1).unwrap();
        assert!((forward_looped(&inst, &p).unwrap() - inst.y_q).abs() < 1e-9);
    }

    #[test]
    fn identity_preconditioner_is_plain_gd() {
        let inst = TaskDistribution::isotropic(3, 9, 4).unwrap().instance(5);
        let p = construct_expressive_params(&SymMatrix::identity(3), 4).unwrap();
        let w = gd_oracle(&inst, &SymMatrix::identity(3), 4).unwrap();
        assert!(rel_close(forward_looped(&inst, &p).unwrap(), w[4].dot(&inst.x_q), 1e-12));
    }

    #[test]
    fn restricted_step_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dist = TaskDistribution::isotropic(3, 6, 3).unwrap();
        let inst = dist.instance(0);
        let a = random_symmetric(3, &mut rng);
        let u = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let (p, q) = attention_matrices(&a, &u);
        let z = Prompt::from_instance(&inst);
        let fast = lsa_step(&z, &a, &u, 6).unwrap();
        let dense = lsa_step_dense(z.matrix(), &p, &q, 6);
        assert!((fast.matrix() - &dense).norm() < 1e-12 * dense.norm());
        // top block untouched by both
        assert_eq!(fast.matrix().rows(0, 3), z.matrix().rows(0, 3));
        assert!((dense.rows(0, 3) - z.matrix().rows(0, 3)).norm() == 0.0);
    }

    #[test]
    fn dense_step_with_general_p_writes_top_rows() {
        // the zero top block of P is what keeps the data rows fixed
        let inst = TaskDistribution::isotropic(2, 4, 3).unwrap().instance(0);
        let z = Prompt::from_instance(&inst);
        let p = DMatrix::from_element(3, 3, 0.1);
        let q = DMatrix::identity(3, 3);
        let out = lsa_step_dense(z.matrix(), &p, &q, 4);
        assert!((out.rows(0, 2) - z.matrix().rows(0, 2)).norm() > 0.0);
    }

    #[test]
    fn shared_layers_equal_expanded_multilayer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = TaskDistribution::isotropic(3, 7, 1).unwrap().instance(0);
        let a = random_symmetric(3, &mut rng).scale(0.3);
        for loops in [1, 2, 5] {
            let p = LoopedParams::new(a.clone(), DVector::from_vec(vec![0.1, 0.0, -0.3]), loops).unwrap();
            let looped = forward_looped(&inst, &p).unwrap();
            let multi = forward_multilayer(&inst, &p.expand()).unwrap();
            assert_eq!(looped.to_bits(), multi.to_bits());
        }
    }

    #[test]
    fn recursion_base_case() {
        let inst = TaskDistribution::isotropic(2, 5, 6).unwrap().instance(0);
        let seq = LoopedParams::new(SymMatrix::identity(2), DVector::from_vec(vec![1.0, 1.0]), 2)
            .unwrap()
            .expand();
        let r = recursion_formula(&inst, &seq);
        assert!((&r.label_rows[0] - &inst.y).norm() < 1e-12);
        assert_eq!(r.query[0], inst.y_q - inst.w_star.dot(&inst.x_q));
        assert!(r.query[0].abs() < 1e-12);
    }

    #[test]
    fn recursion_residual_with_zero_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = TaskDistribution::isotropic(3, 8, 6).unwrap().instance(1);
        let layers: Vec<LayerParams> = (0..3)
            .map(|_| LayerParams { a: random_symmetric(3, &mut rng).scale(0.2), u: DVector::zeros(3) })
            .collect();
        let seq = LayerParamsSeq::new(layers).unwrap();
        let r = recursion_formula(&inst, &seq);
        let sigma = inst.covariance();
        let eye = DMatrix::identity(3, 3);
        let mut prod = eye.clone();
        for l in &seq.0 {
            prod = prod * (&eye - &sigma * l.a.as_matrix());
        }
        let residual = inst.w_star.dot(&(prod * &inst.x_q));
        assert!(((inst.y_q - r.prediction()) - residual).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_attention_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = TaskDistribution::isotropic(2, 8, 5).unwrap().instance(3);
        let layers: Vec<LayerParams> = (0..3)
            .map(|_| LayerParams {
                a: random_symmetric(2, &mut rng).scale(0.4),
                u: DVector::from_fn(2, |_, _| normal(&mut rng)),
            })
            .collect();
        let seq = LayerParamsSeq::new(layers).unwrap();
        let r = recursion_formula(&inst, &seq);
        let steps = forward_trace(&inst, &seq).unwrap();
        for (t, z) in steps.iter().enumerate() {
            let row = z.bottom_row();
            for j in 0..8 {
                assert!(rel_close(row[j], r.label_rows[t][j], 1e-9));
            }
            assert!(rel_close(z.output(), r.query[t], 1e-9));
        }
    }

    #[test]
    fn compact_error_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = TaskDistribution::isotropic(3, 10, 9).unwrap().instance(0);
        let p = LoopedParams::new(random_symmetric(3, &mut rng).scale(0.3), DVector::from_vec(vec![0.2, -0.1, 0.4]), 3)
            .unwrap();
        let ci = CompactInstance::from_instance(&inst);
        let e = compact_error(&ci, &p);
        assert!(rel_close(e, forward_looped(&inst, &p).unwrap() - inst.y_q, 1e-10));
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = TaskDistribution::isotropic(3, 10, 9).unwrap().instance(1);
        let ci = CompactInstance::from_instance(&inst);
        let layers: Vec<LayerParams> = (0..3)
            .map(|_| LayerParams { a: random_symmetric(3, &mut rng).scale(0.3), u: DVector::from_vec(vec![0.2, -0.1, 0.4]) })
            .collect();
        let seq = LayerParamsSeq::new(layers).unwrap();
        let g = compact_error_grad(&ci, &seq);
        assert_eq!(g.error, compact_error(&ci, &seq));
        let h = 1e-6;
        for t in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    // symmetric perturbation E_ij + E_ji picks up g_ij + g_ji
                    let bump = |s: f64| {
                        let mut seq2 = seq.clone();
                        let mut m = seq2.0[t].a.clone().into_matrix();
                        m[(i, j)] += s;
                        m[(j, i)] += s;
                        if i == j {
                            m[(i, i)] -= s;
                        }
                        seq2.0[t].a = SymMatrix::new(m).unwrap();
                        compact_error(&ci, &seq2)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if i == j { g.grad_a[t][(i, i)] } else { g.grad_a[t][(i, j)] + g.grad_a[t][(j, i)] };
                    assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0));
                }
                let bump = |s: f64| {
                    let mut seq2 = seq.clone();
                    seq2.0[t].u[i] += s;
                    compact_error(&ci, &seq2)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g.grad_u[t][i]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn params_json_layout() {
        let p = LoopedParams::new(
            SymMatrix::from_row_slice(2, &[1.0, 0.5, 0.5, 2.0]).unwrap(),
            DVector::from_vec(vec![0.1, 0.2]),
            3,
        )
        .unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["A"], serde_json::json!([1.0, 0.5, 0.5, 2.0]));
        assert_eq!(json["L"], 3);
        let back: LoopedParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<LoopedParams>(r#"{"A":[1],"u":[0],"L":0}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn looped_model_runs_preconditioned_gd(seed in any::<u64>(), d in 1usize..=8, n in 1usize..=32, loops in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TaskDistribution::isotropic(d, n, seed).unwrap().instance(0);
            let g = DMatrix::from_fn(d, d, |_, _| normal(&mut rng));
            let a = SymMatrix::new(&g * g.transpose()).unwrap();
            let a = a.scale(2.0 / a.spectral_norm().max(1e-12));
            let p = LoopedParams::preconditioner(a.clone(), loops).unwrap();
            let pred = forward_looped(&inst, &p).unwrap();
            let w = gd_oracle(&inst, &a, loops).unwrap();
            let oracle = w[loops].dot(&inst.x_q);
            prop_assert!((pred - oracle).abs() <= 1e-9 * pred.abs().max(oracle.abs()).max(1.0));
        }

        #[test]
        fn data_rows_never_change(seed in any::<u64>(), d in 1usize..=4, n in 1usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TaskDistribution::isotropic(d, n, seed).unwrap().instance(0);
            let u = DVector::from_fn(d, |_, _| normal(&mut rng));
            let p = LoopedParams::new(random_symmetric(d, &mut rng), u, 3).unwrap();
            let steps = forward_trace(&inst, &p).unwrap();
            for z in &steps {
                prop_assert_eq!(z.matrix().rows(0, d), steps[0].matrix().rows(0, d));
            }
        }

        #[test]
        fn prediction_is_linear_in_task(seed in any::<u64>(), c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TaskDistribution::isotropic(3, 6, seed).unwrap().instance(0);
            let scaled = RegressionInstance::realizable(inst.x.clone(), inst.x_q.clone(), &inst.w_star * c).unwrap();
            let p = LoopedParams::preconditioner(random_symmetric(3, &mut rng).scale(0.2), 3).unwrap();
            let base = forward_looped(&inst, &p).unwrap();
            let lhs = forward_looped(&scaled, &p).unwrap();
            prop_assert!((lhs - c * base).abs() <= 1e-12 * base.abs().max(1.0) * c.abs().max(1.0));
        }
    }
}
