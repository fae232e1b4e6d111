//! Exact analysis of the all-linear model `z = A x`, `z_hat = z + eps`,
//! `y_hat = B^T z_hat` with squared-error distortion: the closed-form
//! objective, its gradient, the optimal device map `A*(beta)`, and the
//! two-layer beta-conditioned construction that reproduces `A*(beta)` for
//! every `beta` at once. Serves as ground truth for the trained models.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hyperlayers::{beta_scale, scale_rows};

/// A linear-model problem: inputs as columns of `x`, a row vector of targets,
/// a fixed network-side linear map `b`, and the channel noise variance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearInstance {
    /// `[n, N]`, one input per column; full row rank.
    pub x: Tensor,
    /// `[1, N]` targets.
    pub y: Tensor,
    /// `[d]` network-side map, nonzero.
    pub b: Tensor,
    /// Channel noise variance.
    pub sigma2: f64,
}

impl LinearInstance {
    pub fn new(x: Tensor, y: Tensor, b: Tensor, sigma2: f64) -> Result<LinearInstance> {
        if x.rank() != 2 || y.rank() != 2 || y.shape()[0] != 1 || y.shape()[1] != x.shape()[1] {
            return Err(Error::shape(
                "LinearInstance",
                format!("x {:?} with y {:?}", x.shape(), y.shape()),
            ));
        }
        if x.shape()[1] < x.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "need at least as many samples as input dimensions ({} < {})",
                x.shape()[1],
                x.shape()[0]
            )));
        }
        if b.rank() != 1 || b.data().iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("b must be a nonzero vector".into()));
        }
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        Ok(LinearInstance { x, y, b, sigma2 })
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn sample_count(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.b.shape()[0]
    }

    /// `X X^T`, the `[n, n]` input Gram matrix.
    pub fn input_gram(&self) -> Tensor {
        let xt = self.x.transposed().expect("x is rank 2");
        self.x.matmul(&xt).expect("shapes agree")
    }

    /// `y X^T` as an `[n]` vector.
    pub fn target_moment(&self) -> Vec<f64> {
        let (n, big_n) = (self.input_dim(), self.sample_count());
        let mut out = vec![0.0; n];
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in 0..big_n {
                acc += self.y.data()[s] * self.x.data()[j * big_n + s];
            }
            *slot = acc;
        }
        out
    }
}

fn check_a_shape(a: &Tensor, inst: &LinearInstance) -> Result<()> {
    if a.rank() != 2 || a.shape()[0] != inst.feature_dim() || a.shape()[1] != inst.input_dim() {
        return Err(Error::shape(
            "linear objective",
            format!(
                "device map must be [{}, {}], got {:?}",
                inst.feature_dim(),
                inst.input_dim(),
                a.shape()
            ),
        ));
    }
    Ok(())
}

/// The closed-form objective
///
/// `(1/N) { ||y - B^T A X||^2 + (beta/2) tr(X^T A^T A X) }
///  + sigma2 B^T B + (beta/2) (sigma2 d - d ln(sigma2) - d)`
///
/// valid for `sigma2 > 0` (the `ln sigma2` term has no noiseless limit).
pub fn cvib_linear(a: &Tensor, inst: &LinearInstance, beta: f64) -> Result<f64> {
    check_a_shape(a, inst)?;
    if !(inst.sigma2 > 0.0) {
        return Err(Error::Domain(
            "closed-form linear objective requires sigma2 > 0".into(),
        ));
    }
    let (d, n, big_n) = (inst.feature_dim(), inst.input_dim(), inst.sample_count());
    // B^T A, then residual y - (B^T A) X.
    let mut bta = vec![0.0; n];
    for (j, slot) in bta.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            acc += inst.b.data()[i] * a.data()[i * n + j];
        }
        *slot = acc;
    }
    let mut residual_sq = 0.0;
    for s in 0..big_n {
        let mut pred = 0.0;
        for j in 0..n {
            pred += bta[j] * inst.x.data()[j * big_n + s];
        }
        let r = inst.y.data()[s] - pred;
        residual_sq += r * r;
    }
    // tr(X^T A^T A X) = ||A X||_F^2 via the Gram matrix.
    let gram = inst.input_gram();
    let ag = a.matmul(&gram).expect("shapes agree");
    let trace: f64 = a.data().iter().zip(ag.data()).map(|(&p, &q)| p * q).sum();

    let btb: f64 = inst.b.data().iter().map(|&v| v * v).sum();
    let df = d as f64;
    let constant = 0.5 * beta * (inst.sigma2 * df - df * inst.sigma2.ln() - df);
    Ok((residual_sq + 0.5 * beta * trace) / big_n as f64 + inst.sigma2 * btb + constant)
}

/// Gradient of [`cvib_linear`] with respect to the device map:
/// `(1/N) { -2 B y X^T + 2 B B^T A X X^T + beta A X X^T }`.
pub fn cvib_linear_grad(a: &Tensor, inst: &LinearInstance, beta: f64) -> Result<Tensor> {
    check_a_shape(a, inst)?;
    let gram = inst.input_gram();
    let moment = inst.target_moment();
    Ok(grad_with_grams(a, inst, beta, &gram, &moment))
}

fn grad_with_grams(
    a: &Tensor,
    inst: &LinearInstance,
    beta: f64,
    gram: &Tensor,
    moment: &[f64],
) -> Tensor {
    let (d, n, big_n) = (inst.feature_dim(), inst.input_dim(), inst.sample_count());
    let ag = a.matmul(gram).expect("shapes agree");
    // B^T (A G) as a row vector.
    let mut btag = vec![0.0; n];
    for (j, slot) in btag.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            acc += inst.b.data()[i] * ag.data()[i * n + j];
        }
        *slot = acc;
    }
    let inv_n = 1.0 / big_n as f64;
    let mut out = vec![0.0; d * n];
    for i in 0..d {
        let bi = inst.b.data()[i];
        for j in 0..n {
            out[i * n + j] =
                inv_n * (-2.0 * bi * moment[j] + 2.0 * bi * btag[j] + beta * ag.data()[i * n + j]);
        }
    }
    Tensor::matrix(d, n, out).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// Symmetric positive definite solves
// ---------------------------------------------------------------------------

/// Cholesky factor (lower triangular) of a symmetric positive definite matrix.
fn cholesky(m: &Tensor) -> Result<Vec<f64>> {
    let n = m.shape()[0];
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.at2(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Singular(format!(
                        "matrix not positive definite at pivot {i} (value {acc:.3e})"
                    )));
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], n: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = rhs[i];
        for k in 0..i {
            acc -= l[i * n + k] * y[k];
        }
        y[i] = acc / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in (i + 1)..n {
            acc -= l[k * n + i] * x[k];
        }
        x[i] = acc / l[i * n + i];
    }
    x
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration with a fixed start and iteration count (deterministic).
pub(crate) fn spd_max_eig(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += m.at2(i, j) * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    lambda
}

/// Smallest eigenvalue of an SPD matrix via inverse power iteration on a
/// Cholesky factorization. Returns `None` when the matrix is not positive
/// definite to working precision.
pub(crate) fn spd_min_eig(m: &Tensor) -> Option<f64> {
    let n = m.shape()[0];
    let l = cholesky(m).ok()?;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut inv_lambda = 0.0;
    for _ in 0..200 {
        let w = chol_solve(&l, n, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        inv_lambda = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    Some(1.0 / inv_lambda)
}

/// Condition estimate of an SPD matrix from its largest eigenvalue and the
/// largest eigenvalue of the inverse (via inverse power iteration).
fn spd_condition(m: &Tensor, l: &[f64]) -> f64 {
    let n = m.shape()[0];
    let lmax = spd_max_eig(m);
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut inv_lambda = 0.0;
    for _ in 0..200 {
        let w = chol_solve(l, n, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return f64::INFINITY;
        }
        inv_lambda = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    lmax * inv_lambda
}

/// Solves `G Z = RHS^T` for the matrix `A = RHS G^{-1}` given `A G = RHS`
/// conventions, where `G` is SPD. `rhs` is `[rows, n]`; returns `[rows, n]`.
fn solve_right(gram: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let n = gram.shape()[0];
    let l = cholesky(gram)
        .map_err(|e| Error::Singular(format!("input Gram matrix not invertible: {e}")))?;
    let cond = spd_condition(gram, &l);
    if cond > 1e12 {
        return Err(Error::Singular(format!(
            "input Gram matrix condition estimate {cond:.3e} exceeds 1e12"
        )));
    }
    let rows = rhs.shape()[0];
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let solved = chol_solve(&l, n, rhs.row(r));
        out[r * n..(r + 1) * n].copy_from_slice(&solved);
    }
    Tensor::matrix(rows, n, out)
}

/// The optimal device map `A*(beta) = (B B^T + (beta/2) I)^{-1} B y X^T (X X^T)^{-1}`.
///
/// `B` is an eigenvector of the rank-one-plus-identity left factor, so its
/// inverse action is exact: `(B B^T + (beta/2) I)^{-1} B = B / (||B||^2 +
/// beta/2)`. This keeps the evaluation well conditioned for any `||B||` and
/// any positive `beta`. The result does not depend on `sigma2`.
pub fn closed_form_a(inst: &LinearInstance, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!(
            "closed-form optimum requires beta > 0, got {beta}"
        )));
    }
    let (d, n) = (inst.feature_dim(), inst.input_dim());
    let moment = Tensor::matrix(1, n, inst.target_moment())?;
    let q = solve_right(&inst.input_gram(), &moment)?;
    let btb: f64 = inst.b.data().iter().map(|&v| v * v).sum();
    let scale = 1.0 / (btb + 0.5 * beta);
    let mut a = vec![0.0; d * n];
    for i in 0..d {
        for j in 0..n {
            a[i * n + j] = inst.b.data()[i] * q.data()[j] * scale;
        }
    }
    Tensor::matrix(d, n, a)
}

/// Fixed-step gradient descent on the closed-form objective.
///
/// The step defaults to the reciprocal of the quadratic's curvature bound
/// `(2 ||B||^2 + beta) lambda_max(X X^T) / N`, which guarantees monotone
/// convergence. Returns the final iterate.
pub fn minimize_cvib(
    inst: &LinearInstance,
    beta: f64,
    steps: usize,
    init: &Tensor,
    step_size: Option<f64>,
) -> Result<Tensor> {
    check_a_shape(init, inst)?;
    let gram = inst.input_gram();
    let moment = inst.target_moment();
    let lr = match step_size {
        Some(lr) => lr,
        None => {
            let btb: f64 = inst.b.data().iter().map(|&v| v * v).sum();
            let lipschitz = (2.0 * btb + beta) * spd_max_eig(&gram) / inst.sample_count() as f64;
            1.0 / lipschitz
        }
    };
    let mut a = init.clone();
    for _ in 0..steps {
        let g = grad_with_grams(&a, inst, beta, &gram, &moment);
        let data: Vec<f64> = a.data().iter().zip(g.data()).map(|(&p, &q)| p - lr * q).collect();
        a = Tensor::matrix(inst.feature_dim(), inst.input_dim(), data)?;
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// The two-layer construction
// ---------------------------------------------------------------------------

/// Two beta-conditioned linear layers whose composed effective map equals
/// `A*(beta)` for every positive `beta`:
///
/// * `w1 = (1/||B||^2) Sigma y X^T (X X^T)^{-1}` (only row 0 nonzero),
/// * `w2 = 2 U` from the orthonormal completion of `B/||B||`,
/// * first layer scales `sigmoid(-ln(beta) + ln 2 + 2 ln ||B||)`,
/// * second layer scales `sigmoid(0) = 1/2`.
#[derive(Clone, Debug)]
pub struct TwoLayerConstruction {
    /// `[d, n]` first-layer weights.
    pub w1: Tensor,
    /// `[d, d]` second-layer weights.
    pub w2: Tensor,
    pub u1: Vec<f64>,
    pub v1: Vec<f64>,
    pub u2: Vec<f64>,
    pub v2: Vec<f64>,
}

impl TwoLayerConstruction {
    /// Effective composed map `W2(beta) W1(beta)` through the same scale and
    /// row-scaling path the trained layers use.
    pub fn effective_map(&self, beta: f64) -> Result<Tensor> {
        let s1 = beta_scale(&self.u1, &self.v1, beta)?;
        let s2 = beta_scale(&self.u2, &self.v2, beta)?;
        let w1b = scale_rows(&self.w1, &s1)?;
        let w2b = scale_rows(&self.w2, &s2)?;
        w2b.matmul(&w1b)
    }
}

/// Orthonormal basis whose first column is `b / ||b||`, completed by
/// Gram-Schmidt over the standard basis, choosing the largest residual pivot
/// at every step.
fn orthonormal_completion(b: &[f64]) -> Tensor {
    let d = b.len();
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut cols: Vec<Vec<f64>> = vec![b.iter().map(|v| v / norm).collect()];
    let mut remaining: Vec<usize> = (0..d).collect();
    while cols.len() < d {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (slot, &cand) in remaining.iter().enumerate() {
            let mut r = vec![0.0; d];
            r[cand] = 1.0;
            for col in &cols {
                let dot: f64 = col.iter().zip(&r).map(|(&c, &x)| c * x).sum();
                for (ri, &ci) in r.iter_mut().zip(col) {
                    *ri -= dot * ci;
                }
            }
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(_, _, bn)| rn > *bn) {
                best = Some((slot, r, rn));
            }
        }
        let (slot, mut r, rn) = best.expect("candidates remain while basis incomplete");
        remaining.remove(slot);
        for ri in r.iter_mut() {
            *ri /= rn;
        }
        cols.push(r);
    }
    let mut data = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = col[i];
        }
    }
    Tensor::matrix(d, d, data).expect("shape matches data")
}

/// Builds the representability construction for an instance.
pub fn build_theorem_construction(inst: &LinearInstance) -> Result<TwoLayerConstruction> {
    let d = inst.feature_dim();
    let b_norm = inst.b.frobenius_norm();
    if b_norm == 0.0 {
        return Err(Error::InvalidArgument("b must be nonzero".into()));
    }
    let u = orthonormal_completion(inst.b.data());
    let w2 = u.map(|v| 2.0 * v);

    // Row 0 of W1 is (1/||B||) y X^T (X X^T)^{-1}; all other rows are zero.
    let moment = Tensor::matrix(1, inst.input_dim(), inst.target_moment())?;
    let solved = solve_right(&inst.input_gram(), &moment)?;
    let mut w1 = vec![0.0; d * inst.input_dim()];
    for j in 0..inst.input_dim() {
        w1[j] = solved.data()[j] / b_norm;
    }
    let w1 = Tensor::matrix(d, inst.input_dim(), w1)?;

    Ok(TwoLayerConstruction {
        w1,
        w2,
        u1: vec![-1.0; d],
        v1: vec![2.0_f64.ln() + 2.0 * b_norm.ln(); d],
        u2: vec![0.0; d],
        v2: vec![0.0; d],
    })
}

/// Maximum over the grid of the relative Frobenius deviation between the
/// construction's effective map and the closed-form optimum.
pub fn verify_construction(
    constr: &TwoLayerConstruction,
    inst: &LinearInstance,
    beta_grid: &[f64],
) -> Result<f64> {
    if beta_grid.is_empty() {
        return Err(Error::InvalidArgument("beta grid must be nonempty".into()));
    }
    let mut worst = 0.0_f64;
    for &beta in beta_grid {
        let reference = closed_form_a(inst, beta)?;
        let effective = constr.effective_map(beta)?;
        let mut diff_sq = 0.0;
        for (e, r) in effective.data().iter().zip(reference.data()) {
            diff_sq += (e - r) * (e - r);
        }
        let dev = diff_sq.sqrt() / reference.frobenius_norm();
        worst = worst.max(dev);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_instance() -> LinearInstance {
        // n = 1, N = 2, d = 1, X = [1 1], y = [1 1], B = [1].
        LinearInstance::new(
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::vector(vec![1.0]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_hand_case() {
        let inst = toy_instance();
        let a = closed_form_a(&inst, 2.0).unwrap();
        assert!((a.data()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn closed_form_shrinks_for_huge_beta() {
        let inst = toy_instance();
        let a = closed_form_a(&inst, 2e6).unwrap();
        assert!(a.data()[0].abs() < 1.1e-6, "{}", a.data()[0]);
        assert!((a.data()[0] - 1.0 / (1.0 + 1e6)).abs() < 1e-12);
    }

    #[test]
    fn closed_form_ignores_sigma2() {
        let mut inst = toy_instance();
        inst.sigma2 = 0.01;
        let low = closed_form_a(&inst, 0.3).unwrap();
        inst.sigma2 = 1.0;
        let high = closed_form_a(&inst, 0.3).unwrap();
        assert_eq!(low.data(), high.data());
    }

    #[test]
    fn objective_rejects_zero_noise() {
        let mut inst = toy_instance();
        inst.sigma2 = 0.0;
        let a = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        assert!(cvib_linear(&a, &inst, 1.0).is_err());
    }

    #[test]
    fn unit_sigma2_kills_the_additive_constant() {
        // With sigma2 = 1 the constant term vanishes, so the objective at
        // A = 0 is exactly ||y||^2 / N + B^T B.
        let inst = toy_instance();
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let v = cvib_linear(&a, &inst, 3.7).unwrap();
        assert!((v - (1.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let inst = toy_instance();
        for &beta in &[0.05, 0.7, 2.0] {
            let a_star = closed_form_a(&inst, beta).unwrap();
            let g = cvib_linear_grad(&a_star, &inst, beta).unwrap();
            assert!(g.frobenius_norm() < 1e-12, "beta={beta}");
        }
    }

    #[test]
    fn construction_second_layer_is_orthonormal_doubled() {
        let inst = LinearInstance::new(
            Tensor::matrix(2, 8, (0..16).map(|i| ((i * 31 % 17) as f64 - 8.0) / 4.0).collect())
                .unwrap(),
            Tensor::matrix(1, 8, (0..8).map(|i| (i as f64) * 0.25 - 1.0).collect()).unwrap(),
            Tensor::vector(vec![0.6, -0.8, 0.0]),
            0.5,
        )
        .unwrap();
        let c = build_theorem_construction(&inst).unwrap();
        // W2(beta) = sigmoid(0) * 2U = U for every beta; U is orthonormal.
        let half = c.w2.map(|v| 0.5 * v);
        let prod = half.transposed().unwrap().matmul(&half).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.at2(i, j) - expect).abs() < 1e-12);
            }
        }
        // First column of U is b / ||b||.
        assert!((half.at2(0, 0) - 0.6).abs() < 1e-12);
        assert!((half.at2(1, 0) + 0.8).abs() < 1e-12);
        // Rows 1.. of W1 are zero.
        for j in 0..2 {
            assert_eq!(c.w1.at2(1, j), 0.0);
            assert_eq!(c.w1.at2(2, j), 0.0);
        }
    }

    #[test]
    fn construction_scale_matches_rational_form() {
        let inst = toy_instance();
        let c = build_theorem_construction(&inst).unwrap();
        let s = beta_scale(&c.u1, &c.v1, 2.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
    }
}
