//! Advection-reaction problems in weak form and their discrete assembly.
//!
//! The bilinear form puts all derivatives on the test function:
//! `b(w, v) = integral of w * (mu*v - (beta*v)')` in 1-D and
//! `b(w, v) = integral of w * (mu*v - div(beta*v))` in 2-D, with load
//! `<f, v> = integral of f*v (+ point masses) + sum over inflow boundary of
//! |beta . n| g v`.

use crate::linalg::{SparseRows, SymBanded};
use crate::mesh::FaceClass;
use crate::spaces::{
    quadrature, Coefficient, Space1D, Space2D, SpaceKind1D, SpaceKind2D, TestNormKind,
};
use crate::{DdmresError, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::sync::Arc;

/// 1-D advection-reaction problem on an interval: find `u` with
/// `(beta*u)' + mu*u = f` weakly, `u = g` on the inflow boundary, errors
/// measured in `L^p`.
#[derive(Clone)]
pub struct Problem1D {
    pub domain: (f64, f64),
    pub beta: Coefficient,
    pub mu: Coefficient,
    /// Smooth part of the source.
    pub f_smooth: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    /// Point masses `weight * delta_x` in the source.
    pub f_diracs: Vec<(f64, f64)>,
    /// Boundary datum, evaluated at inflow endpoints.
    pub g: Coefficient,
    /// Lebesgue exponent of the trial space.
    pub p: f64,
    /// Caller's assertion that the problem is well posed even though the
    /// reaction-based sufficient condition fails (`mu0 <= 0`).
    pub assume_well_posed: bool,
}

impl Problem1D {
    pub fn new(domain: (f64, f64), beta: Coefficient, mu: Coefficient, g: Coefficient, p: f64) -> Result<Self> {
        if !(domain.0.is_finite() && domain.1.is_finite() && domain.0 < domain.1) {
            return Err(DdmresError::InvalidInterval(format!(
                "bad domain [{}, {}]",
                domain.0, domain.1
            )));
        }
        if !(p >= 1.0) {
            return Err(DdmresError::InvalidConfig(format!("exponent p = {p} must be >= 1")));
        }
        Ok(Problem1D {
            domain,
            beta,
            mu,
            f_smooth: None,
            f_diracs: Vec::new(),
            g,
            p,
            assume_well_posed: false,
        })
    }

    pub fn with_smooth_source(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.f_smooth = Some(Arc::new(f));
        self
    }

    pub fn with_dirac(mut self, x: f64, weight: f64) -> Self {
        self.f_diracs.push((x, weight));
        self
    }

    pub fn with_well_posedness_assumed(mut self) -> Self {
        self.assume_well_posed = true;
        self
    }

    /// Dual exponent `q = p / (p - 1)`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Inflow endpoints as `(x, |beta(x)|)`: the left endpoint is inflow when
    /// the field points rightward there, the right endpoint when it points
    /// leftward.
    pub fn inflow_endpoints(&self) -> Vec<(f64, f64)> {
        let (a, b) = self.domain;
        let mut out = Vec::new();
        let ba = self.beta.eval(a);
        if ba > 0.0 {
            out.push((a, ba.abs()));
        }
        let bb = self.beta.eval(b);
        if bb < 0.0 {
            out.push((b, bb.abs()));
        }
        out
    }

    /// Outflow endpoints, where conforming test functions must vanish.
    pub fn outflow_endpoints(&self) -> Vec<f64> {
        let (a, b) = self.domain;
        let mut out = Vec::new();
        if self.beta.eval(a) < 0.0 {
            out.push(a);
        }
        if self.beta.eval(b) > 0.0 {
            out.push(b);
        }
        out
    }
}

/// Stability constants of the weak form: `mu0` is the infimum of
/// `mu - (1/p) * beta'`, `gamma` the inf-sup lower bound derived from it
/// (absent when the caller waived the sufficient condition), `m` the
/// continuity constant `sqrt(1 + sup|mu|^2)`.
#[derive(Debug, Clone)]
pub struct StabilityConstants {
    pub mu0: f64,
    pub gamma: Option<f64>,
    pub m: f64,
}

/// Samples `mu - (1/p) beta'` and `|mu|` on a fine grid to estimate the
/// stability constants. Errors with the failed infimum when `mu0 <= 0` and
/// the problem does not assert well-posedness.
pub fn stability_constants(problem: &Problem1D) -> Result<StabilityConstants> {
    let (a, b) = problem.domain;
    let cells = 512;
    let rule = quadrature::gauss_legendre(8);
    let mut mu0 = f64::INFINITY;
    let mut mu_sup: f64 = 0.0;
    let mut probe = |x: f64| {
        let v = problem.mu.eval(x) - problem.beta.deriv(x) / problem.p;
        mu0 = mu0.min(v);
        mu_sup = mu_sup.max(problem.mu.eval(x).abs());
    };
    for c in 0..cells {
        let lo = a + (b - a) * c as f64 / cells as f64;
        let hi = a + (b - a) * (c + 1) as f64 / cells as f64;
        probe(lo);
        probe(0.5 * (lo + hi));
        for &t in &rule.nodes {
            probe(0.5 * (lo + hi) + 0.5 * (hi - lo) * t);
        }
    }
    probe(b);
    let m = (1.0 + mu_sup * mu_sup).sqrt();
    if mu0 <= 0.0 {
        if problem.assume_well_posed {
            return Ok(StabilityConstants { mu0, gamma: None, m });
        }
        return Err(DdmresError::AssumptionUnavailable(format!(
            "infimum of mu - beta'/p is {mu0:e}; assert well-posedness explicitly to proceed"
        )));
    }
    let gamma = (mu0 * mu0 / (1.0 + (mu0 + mu_sup) * (mu0 + mu_sup))).sqrt();
    Ok(StabilityConstants { mu0, gamma: Some(gamma), m })
}

/// Checks that every test basis function vanishes at the outflow endpoints
/// (conformity of the discrete test space with the weak form).
pub fn validate_test_space(test: &Space1D, problem: &Problem1D) -> Result<()> {
    for e in problem.outflow_endpoints() {
        for d in 0..test.dof_count() {
            let (v, _) = test.eval(d, e);
            if v.abs() > 1e-10 {
                return Err(DdmresError::NonconformingTestSpace(format!(
                    "test function {d} has value {v:e} at outflow endpoint {e}"
                )));
            }
        }
    }
    Ok(())
}

/// Number of Gauss points for a trial/test product on one element.
fn product_points(trial: &Space1D, test: &Space1D, problem: &Problem1D) -> usize {
    let base = trial.degree() + test.degree() + 3;
    if problem.beta.is_constant() && problem.mu.is_constant() {
        base
    } else {
        base.max(10)
    }
}

/// Per-element contributions reduced in element order, so the parallel and
/// serial paths produce bit-identical results.
fn reduce_contributions(
    rows: usize,
    cols: usize,
    contributions: Vec<Vec<(usize, usize, f64)>>,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for list in contributions {
        for (i, j, v) in list {
            m[(i, j)] += v;
        }
    }
    m
}

/// Assembles the bilinear form as a dense matrix `B[i][j] = b(trial_j, test_i)`.
/// The optimal test family takes the exact path `b(w, v_j) = integral of w
/// over element j`; other pairs integrate on the union mesh.
pub fn assemble_b_dense(
    trial: &Space1D,
    test: &Space1D,
    problem: &Problem1D,
    parallel: bool,
) -> DMatrix<f64> {
    let rows = test.dof_count();
    let cols = trial.dof_count();
    if let SpaceKind1D::OptimalTest(_) = test.kind() {
        // -(beta v_j)' is the indicator of test element j, so the advection
        // part of b(w, v_j) reduces to the exact integral of w over that
        // element; a reaction term needs the rational basis values and is
        // integrated adaptively over the support
        let test_mesh = test.mesh();
        let npts = trial.degree() + 1;
        let mu_is_zero = problem.mu.is_constant() && problem.mu.eval(0.0) == 0.0;
        let per_element: Vec<Vec<(usize, usize, f64)>> = (0..test_mesh.num_elements())
            .map(|j| {
                let (a, b) = test_mesh.element(j);
                let mut list = Vec::new();
                // trial elements overlapping test element j
                let lo = trial.mesh().locate(a).unwrap();
                let hi = trial.mesh().locate(b - 1e-15 * (b - a)).unwrap();
                for jt in lo..=hi {
                    let (ta, tb) = trial.mesh().element(jt);
                    let (x0, x1) = (ta.max(a), tb.min(b));
                    if x1 <= x0 {
                        continue;
                    }
                    for (local, dof) in trial.element_dofs(jt) {
                        let val = quadrature::integrate(
                            &|x| trial.eval_local(jt, local, x).0,
                            x0,
                            x1,
                            npts,
                        );
                        list.push((j, dof, val));
                    }
                }
                if !mu_is_zero {
                    let (slo, shi) = test.support(j);
                    for je in slo..=shi {
                        let (ea, eb) = test_mesh.element(je);
                        let lo = trial.mesh().locate(ea).unwrap();
                        let hi = trial.mesh().locate(eb - 1e-15 * (eb - ea)).unwrap();
                        for jt in lo..=hi {
                            let (ta, tb) = trial.mesh().element(jt);
                            let (x0, x1) = (ta.max(ea), tb.min(eb));
                            if x1 <= x0 {
                                continue;
                            }
                            for (local, dof) in trial.element_dofs(jt) {
                                let val = quadrature::integrate_adaptive(
                                    &|x| {
                                        problem.mu.eval(x)
                                            * trial.eval_local(jt, local, x).0
                                            * test.eval_local(j, 0, x).0
                                    },
                                    x0,
                                    x1,
                                    1e-12,
                                );
                                list.push((j, dof, val));
                            }
                        }
                    }
                }
                list
            })
            .collect();
        return reduce_contributions(rows, cols, per_element);
    }

    let union = trial.mesh().union(test.mesh());
    let npts = product_points(trial, test, problem);
    let rule = quadrature::gauss_legendre(npts);
    let element_contribution = |e: usize| -> Vec<(usize, usize, f64)> {
        let (a, b) = union.element(e);
        let mid = 0.5 * (a + b);
        let jt = trial.mesh().locate(mid).unwrap();
        let je = test.mesh().locate(mid).unwrap();
        let trial_dofs = trial.element_dofs(jt);
        let test_dofs = test.element_dofs(je);
        let mut list = Vec::new();
        for &(lt, dt) in &trial_dofs {
            for &(le, de) in &test_dofs {
                let mut s = 0.0;
                for (i, &t) in rule.nodes.iter().enumerate() {
                    let x = mid + 0.5 * (b - a) * t;
                    let w = 0.5 * (b - a) * rule.weights[i];
                    let (phi, _) = trial.eval_local(jt, lt, x);
                    let (psi, dpsi) = test.eval_local(je, le, x);
                    let adjoint =
                        problem.mu.eval(x) * psi - problem.beta.deriv(x) * psi - problem.beta.eval(x) * dpsi;
                    s += w * phi * adjoint;
                }
                list.push((de, dt, s));
            }
        }
        list
    };
    let contributions: Vec<Vec<(usize, usize, f64)>> = if parallel {
        (0..union.num_elements()).into_par_iter().map(element_contribution).collect()
    } else {
        (0..union.num_elements()).map(element_contribution).collect()
    };
    reduce_contributions(rows, cols, contributions)
}

/// Sparse assembly for a piecewise-constant trial space against the optimal
/// test family on the same mesh: the matrix is diagonal with the element
/// lengths, computed from exact flux differences of the numerators.
pub fn assemble_b_sparse_optimal(trial: &Space1D, test: &Space1D) -> Result<SparseRows> {
    let SpaceKind1D::OptimalTest(data) = test.kind() else {
        return Err(DdmresError::InvalidConfig(
            "sparse optimal assembly needs an optimal test family".into(),
        ));
    };
    if !matches!(trial.kind(), SpaceKind1D::P0) {
        return Err(DdmresError::InvalidConfig(
            "sparse optimal assembly expects a piecewise-constant trial space".into(),
        ));
    }
    if !Arc::ptr_eq(trial.mesh(), test.mesh()) && trial.mesh().nodes() != test.mesh().nodes() {
        return Err(DdmresError::InvalidConfig(
            "sparse optimal assembly expects trial and test on the same mesh".into(),
        ));
    }
    let mesh = test.mesh();
    let n = mesh.num_elements();
    let mut b = SparseRows::new(n);
    for j in 0..n {
        let (x0, x1) = mesh.element(j);
        // b(indicator_K, v_j) = N_j(x_{K-1}) - N_j(x_K); on the shared mesh
        // only K = j survives, with value h_j
        let (n0, _) = data.numerator(j, x0);
        let (n1, _) = data.numerator(j, x1);
        b.add(j, j, n0 - n1);
    }
    Ok(b)
}

/// Load vector `F[i] = <f, test_i>`: smooth source by element quadrature,
/// point masses by evaluation, inflow boundary by weighted endpoint values.
pub fn assemble_rhs(test: &Space1D, problem: &Problem1D) -> DVector<f64> {
    let mut f = DVector::zeros(test.dof_count());
    let mesh = test.mesh();
    if let Some(src) = &problem.f_smooth {
        let npts = test.degree() + 8;
        for j in 0..mesh.num_elements() {
            let (a, b) = mesh.element(j);
            for (local, dof) in test.element_dofs(j) {
                f[dof] += quadrature::integrate(
                    &|x| src(x) * test.eval_local(j, local, x).0,
                    a,
                    b,
                    npts,
                );
            }
        }
    }
    for &(x, weight) in &problem.f_diracs {
        for d in 0..test.dof_count() {
            let (v, _) = test.eval(d, x);
            f[d] += weight * v;
        }
    }
    for (x, flux) in problem.inflow_endpoints() {
        let gval = problem.g.eval(x);
        for d in 0..test.dof_count() {
            let (v, _) = test.eval(d, x);
            f[d] += flux * gval * v;
        }
    }
    f
}

/// Storage for a symmetric positive definite Gram matrix.
#[derive(Debug, Clone)]
pub enum GramMatrix {
    Banded(SymBanded),
    Dense(DMatrix<f64>),
}

impl GramMatrix {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            GramMatrix::Banded(b) => b.to_dense(),
            GramMatrix::Dense(d) => d.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GramMatrix::Banded(b) => b.dim(),
            GramMatrix::Dense(d) => d.nrows(),
        }
    }
}

/// Gram matrix of the test space for the chosen norm at exponent 2:
/// derivative-only `integral of v' w'` (constant advection only) or adjoint
/// graph `integral of v w + (beta v)' (beta w)'`. Banded for polynomial
/// spaces, dense for the optimal family (rational products integrated
/// adaptively).
pub fn gram_matrix(test: &Space1D, problem: &Problem1D, norm: TestNormKind) -> Result<GramMatrix> {
    if matches!(norm, TestNormKind::DerivativeOnly) && !problem.beta.is_constant() {
        return Err(DdmresError::InvalidConfig(
            "derivative-only test norm requires a constant advection field".into(),
        ));
    }
    match test.kind() {
        SpaceKind1D::P0 => Err(DdmresError::InvalidConfig(
            "piecewise constants are not a conforming test space".into(),
        )),
        SpaceKind1D::PCont { degree } => {
            let mesh = test.mesh();
            let mut g = SymBanded::zeros(test.dof_count(), *degree);
            let rule = quadrature::gauss_legendre(degree + 3);
            for j in 0..mesh.num_elements() {
                let (a, b) = mesh.element(j);
                let dofs = test.element_dofs(j);
                for (ii, &(li, di)) in dofs.iter().enumerate() {
                    for &(lj, dj) in dofs.iter().take(ii + 1) {
                        if di < dj {
                            continue;
                        }
                        let mut s = 0.0;
                        for (k, &t) in rule.nodes.iter().enumerate() {
                            let x = 0.5 * (a + b) + 0.5 * (b - a) * t;
                            let w = 0.5 * (b - a) * rule.weights[k];
                            let (vi, dvi) = test.eval_local(j, li, x);
                            let (vj, dvj) = test.eval_local(j, lj, x);
                            s += w * gram_integrand(problem, norm, x, vi, dvi, vj, dvj);
                        }
                        g.add(di, dj, s);
                    }
                }
            }
            Ok(GramMatrix::Banded(g))
        }
        SpaceKind1D::OptimalTest(_) => {
            let n = test.dof_count();
            let mesh = test.mesh();
            let mut g = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let (lo_i, hi_i) = test.support(i);
                    let (lo_j, hi_j) = test.support(j);
                    let lo = lo_i.max(lo_j);
                    let hi = hi_i.min(hi_j);
                    if lo > hi {
                        continue;
                    }
                    let mut s = 0.0;
                    for e in lo..=hi {
                        let (a, b) = mesh.element(e);
                        s += quadrature::integrate_adaptive(
                            &|x| {
                                let (vi, dvi) = test.eval_local(i, 0, x);
                                let (vj, dvj) = test.eval_local(j, 0, x);
                                gram_integrand(problem, norm, x, vi, dvi, vj, dvj)
                            },
                            a,
                            b,
                            1e-12,
                        );
                    }
                    g[(i, j)] = s;
                    g[(j, i)] = s;
                }
            }
            Ok(GramMatrix::Dense(g))
        }
    }
}

fn gram_integrand(
    problem: &Problem1D,
    norm: TestNormKind,
    x: f64,
    vi: f64,
    dvi: f64,
    vj: f64,
    dvj: f64,
) -> f64 {
    match norm {
        TestNormKind::DerivativeOnly => dvi * dvj,
        TestNormKind::AdjointGraph => {
            let beta = problem.beta.eval(x);
            let dbeta = problem.beta.deriv(x);
            let gi = dbeta * vi + beta * dvi;
            let gj = dbeta * vj + beta * dvj;
            vi * vj + gi * gj
        }
    }
}

/// L^2 mass matrix of a 1-D space (banded).
pub fn mass_matrix_1d(space: &Space1D) -> SymBanded {
    let mesh = space.mesh();
    match space.kind() {
        SpaceKind1D::P0 | SpaceKind1D::OptimalTest(_) => {
            // diagonal of element lengths for indicators; the optimal family
            // is not handled here and callers use the Gram machinery instead
            let mut m = SymBanded::zeros(mesh.num_elements(), 0);
            for j in 0..mesh.num_elements() {
                m.add(j, j, mesh.h(j));
            }
            m
        }
        SpaceKind1D::PCont { degree } => {
            let mut m = SymBanded::zeros(space.dof_count(), *degree);
            let rule = quadrature::gauss_legendre(degree + 2);
            for j in 0..mesh.num_elements() {
                let (a, b) = mesh.element(j);
                let dofs = space.element_dofs(j);
                for (ii, &(li, di)) in dofs.iter().enumerate() {
                    for &(lj, dj) in dofs.iter().take(ii + 1) {
                        if di < dj {
                            continue;
                        }
                        let mut s = 0.0;
                        for (k, &t) in rule.nodes.iter().enumerate() {
                            let x = 0.5 * (a + b) + 0.5 * (b - a) * t;
                            let w = 0.5 * (b - a) * rule.weights[k];
                            s += w * space.eval_local(j, li, x).0 * space.eval_local(j, lj, x).0;
                        }
                        m.add(di, dj, s);
                    }
                }
            }
            m
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D problems
// ---------------------------------------------------------------------------

/// Pure advection problem on a flow-aligned mesh: `div(beta u) = 0` with
/// inflow datum `g` on the inflow boundary, errors in `L^p`. The advection
/// field lives on the mesh.
#[derive(Clone)]
pub struct Problem2D {
    pub g_inflow: Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    /// x-coordinates where the inflow datum jumps (for split quadrature).
    pub g_breakpoints: Vec<f64>,
    pub p: f64,
}

/// Assembles `B[i][j] = b(indicator_j, v_i) = -|T_j| beta_j . grad(v_i|_j)`
/// for a piecewise-constant trial space against a conforming linear test
/// space, sparsely by rows.
pub fn assemble_b_sparse_2d(trial: &Space2D, test: &Space2D) -> Result<SparseRows> {
    if !matches!(trial.kind(), SpaceKind2D::P0) {
        return Err(DdmresError::InvalidConfig(
            "2-D trial space must be piecewise constant".into(),
        ));
    }
    let mesh = trial.mesh();
    let n = mesh.num_triangles();
    if test.dof_count() != n {
        return Err(DdmresError::InvalidConfig(
            "2-D spaces must carry one degree of freedom per element".into(),
        ));
    }
    let mut b = SparseRows::new(n);
    for t in 0..n {
        let area = mesh.area(t);
        let beta = mesh.beta(t);
        let centroid = {
            let [a, bb, c] = mesh.triangle_coords(t);
            [(a[0] + bb[0] + c[0]) / 3.0, (a[1] + bb[1] + c[1]) / 3.0]
        };
        for (dof, vals) in test.element_dofs(t) {
            let (_, grad) = test.eval_linear(t, vals, centroid);
            let entry = -area * (beta[0] * grad[0] + beta[1] * grad[1]);
            b.add(dof, t, entry);
        }
    }
    Ok(b)
}

/// Load vector for a 2-D problem: inflow boundary term
/// `integral over inflow faces of |beta . n| g v`, split at the datum's
/// breakpoints.
pub fn assemble_rhs_2d(test: &Space2D, problem: &Problem2D, classes: &[FaceClass]) -> DVector<f64> {
    let mesh = test.mesh();
    let mut f = DVector::zeros(test.dof_count());
    let rule = quadrature::gauss_legendre(10);
    for (fi, face) in mesh.faces().iter().enumerate() {
        if classes[fi] != FaceClass::Inflow {
            continue;
        }
        let t = face.left;
        let beta = mesh.beta(t);
        let flux = (beta[0] * face.normal[0] + beta[1] * face.normal[1]).abs();
        let a = mesh.vertex(face.verts[0]);
        let b = mesh.vertex(face.verts[1]);
        // split the segment at breakpoints of the datum (in x)
        let mut cuts = vec![0.0, 1.0];
        for &bx in &problem.g_breakpoints {
            if (b[0] - a[0]).abs() > 1e-300 {
                let s = (bx - a[0]) / (b[0] - a[0]);
                if s > 1e-12 && s < 1.0 - 1e-12 {
                    cuts.push(s);
                }
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (dof, vals) in test.element_dofs(t) {
            let mut s = 0.0;
            for w in cuts.windows(2) {
                let (s0, s1) = (w[0], w[1]);
                for (i, &tq) in rule.nodes.iter().enumerate() {
                    let sq = 0.5 * (s0 + s1) + 0.5 * (s1 - s0) * tq;
                    let p = [a[0] + sq * (b[0] - a[0]), a[1] + sq * (b[1] - a[1])];
                    let (v, _) = test.eval_linear(t, vals, p);
                    s += 0.5 * (s1 - s0) * rule.weights[i] * face.length * flux
                        * (problem.g_inflow)(p)
                        * v;
                }
            }
            f[dof] += s;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh1D;
    use crate::spaces::BoundaryConstraint1D;
    use approx::assert_relative_eq;

    fn p1_space(n: usize, constraint: BoundaryConstraint1D) -> Space1D {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, n).unwrap());
        Space1D::p_cont(mesh, 1, constraint).unwrap()
    }

    #[test]
    fn derivative_gram_of_linears_is_scaled_second_difference() {
        // stiffness of P1 hats on a uniform n-element mesh: tridiag(-n, 2n, -n)
        let n = 4;
        let space = p1_space(n, BoundaryConstraint1D::None);
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let g = gram_matrix(&space, &problem, TestNormKind::DerivativeOnly)
            .unwrap()
            .to_dense();
        let nf = n as f64;
        for i in 0..=n {
            for j in 0..=n {
                let expect = if i == j {
                    if i == 0 || i == n {
                        nf
                    } else {
                        2.0 * nf
                    }
                } else if i.abs_diff(j) == 1 {
                    -nf
                } else {
                    0.0
                };
                assert_relative_eq!(g[(i, j)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_graph_gram_with_zero_advection_is_mass_matrix() {
        let n = 5;
        let space = p1_space(n, BoundaryConstraint1D::None);
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let g = gram_matrix(&space, &problem, TestNormKind::AdjointGraph)
            .unwrap()
            .to_dense();
        let m = mass_matrix_1d(&space).to_dense();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                assert_relative_eq!(g[(i, j)], m[(i, j)], epsilon = 1e-12);
            }
        }
        // hat mass matrix oracle: h/6 * tridiag(1, 4, 1) inside
        let h = 1.0 / n as f64;
        assert_relative_eq!(m[(2, 2)], 4.0 * h / 6.0, epsilon = 1e-12);
        assert_relative_eq!(m[(2, 3)], h / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn rhs_sign_matches_weak_form_of_exact_jump() {
        // transport to the right on (-1,1) with datum -1 and a point source
        // 2*delta at 0: the exact solution is sign(x), which lies in the
        // piecewise-constant space when 0 is a node, so B u = F exactly.
        let mesh = Arc::new(Mesh1D::uniform(-1.0, 1.0, 8).unwrap());
        let trial = Space1D::p0(mesh.clone());
        let test = Space1D::p_cont(mesh.clone(), 1, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = Problem1D::new(
            (-1.0, 1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(-1.0),
            2.0,
        )
        .unwrap()
        .with_dirac(0.0, 2.0);
        validate_test_space(&test, &problem).unwrap();
        let b = assemble_b_dense(&trial, &test, &problem, false);
        let f = assemble_rhs(&test, &problem);
        // the load against hat psi_j is 2*psi_j(0) - psi_j(-1)
        for d in 0..test.dof_count() {
            let expect = 2.0 * test.eval(d, 0.0).0 - test.eval(d, -1.0).0;
            assert_relative_eq!(f[d], expect, epsilon = 1e-12);
        }
        let u: DVector<f64> = DVector::from_fn(trial.dof_count(), |j, _| {
            let (a, bb) = mesh.element(j);
            (0.5 * (a + bb)).signum()
        });
        let residual = &b * &u - &f;
        assert!(residual.amax() < 1e-12, "weak residual {:e}", residual.amax());
    }

    #[test]
    fn parallel_assembly_is_bit_identical_to_serial() {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 64).unwrap());
        let trial = Space1D::p0(mesh.clone());
        let test = Space1D::p_cont(mesh, 3, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(2.0, -1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(1.0),
            2.0,
        )
        .unwrap();
        let serial = assemble_b_dense(&trial, &test, &problem, false);
        let par = assemble_b_dense(&trial, &test, &problem, true);
        assert_eq!(serial.as_slice(), par.as_slice());
    }

    #[test]
    fn stability_constants_match_hand_values() {
        // constant advection, mu = 1: mu0 = 1, gamma = sqrt(1/5), m = sqrt(2)
        let p1 = Problem1D::new(
            (0.0, 1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let c = stability_constants(&p1).unwrap();
        assert_relative_eq!(c.mu0, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.gamma.unwrap(), (0.2f64).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(c.m, 2.0f64.sqrt(), epsilon = 1e-12);

        // beta = 1 - 12x, mu = -4, p = 2: mu0 = 2, gamma = sqrt(4/37)
        let p2 = Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(1.0, -12.0),
            Coefficient::constant(-4.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let c = stability_constants(&p2).unwrap();
        assert_relative_eq!(c.mu0, 2.0, epsilon = 1e-12);
        assert_relative_eq!(c.gamma.unwrap(), (4.0f64 / 37.0).sqrt(), epsilon = 1e-12);

        // beta = 2 - x, mu = 0, p = 2: mu0 = 1/2, gamma = sqrt(1/5)
        let p3 = Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(2.0, -1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let c = stability_constants(&p3).unwrap();
        assert_relative_eq!(c.mu0, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.gamma.unwrap(), (0.2f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn failed_assumption_errors_unless_waived() {
        let p = Problem1D::new(
            (0.0, 1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        assert!(matches!(
            stability_constants(&p),
            Err(DdmresError::AssumptionUnavailable(_))
        ));
        let waived = p.with_well_posedness_assumed();
        let c = stability_constants(&waived).unwrap();
        assert!(c.gamma.is_none());
        assert_relative_eq!(c.mu0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nonconforming_test_space_detected() {
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        let bad = p1_space(4, BoundaryConstraint1D::None);
        assert!(matches!(
            validate_test_space(&bad, &problem),
            Err(DdmresError::NonconformingTestSpace(_))
        ));
        let good = p1_space(4, BoundaryConstraint1D::VanishRight);
        validate_test_space(&good, &problem).unwrap();
    }

    #[test]
    fn two_sided_inflow_leaves_test_space_unconstrained() {
        // beta = 1 - 12x flows in at both endpoints: no outflow endpoint
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(1.0, -12.0),
            Coefficient::constant(-4.0),
            Coefficient::constant(0.0),
            2.0,
        )
        .unwrap();
        assert!(problem.outflow_endpoints().is_empty());
        assert_eq!(problem.inflow_endpoints().len(), 2);
        let free = p1_space(4, BoundaryConstraint1D::None);
        validate_test_space(&free, &problem).unwrap();
    }

    #[test]
    fn smooth_source_and_boundary_loads_integrate_exactly() {
        // f = 2(2-x) against P1 hats plus the inflow value at the left
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 2).unwrap());
        let test = Space1D::p_cont(mesh, 1, BoundaryConstraint1D::None).unwrap();
        let problem = Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(2.0, -1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(1.0),
            2.0,
        )
        .unwrap()
        .with_smooth_source(|x| 2.0 * (2.0 - x));
        let f = assemble_rhs(&test, &problem);
        // hand integrals: hat_0 on [0, 1/2]: int (4-2x)(1-2x) = 3/4 - 1/3 = ...
        let exact0: f64 = quadrature::integrate(&|x| (4.0 - 2.0 * x) * (1.0 - 2.0 * x), 0.0, 0.5, 6);
        // boundary: inflow at x = 0, |beta| = 2, g = 1, hat_0(0) = 1
        assert_relative_eq!(f[0], exact0 + 2.0, epsilon = 1e-12);
        let exact2: f64 = quadrature::integrate(&|x| (4.0 - 2.0 * x) * (2.0 * x - 1.0), 0.5, 1.0, 6);
        assert_relative_eq!(f[2], exact2, epsilon = 1e-12);
    }
}
