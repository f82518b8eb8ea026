//! Solvers for the minimal-residual saddle system and its companions: the
//! linear exponent-2 solve by Schur reduction, Newton with exponent
//! continuation for general duals, square Petrov-Galerkin solves in one and
//! two dimensions, best `L^p` approximation by damped Newton, and error
//! norms against known solutions with discontinuities and singularities.

use crate::duality::DualityOps;
use crate::error::DdmresError;
use crate::linalg::{solve_dense, BandedCholesky, SymBanded};
use crate::mesh::{FaceClass, TriMesh2D};
use crate::problem::{
    self, assemble_b_dense, assemble_b_sparse_2d, assemble_b_sparse_optimal, assemble_rhs,
    assemble_rhs_2d, gram_matrix, GramMatrix, Problem1D, Problem2D,
};
use crate::spaces::quadrature::{self, TriangleRule};
use crate::spaces::{Space1D, Space2D, SpaceKind1D, SpaceKind2D, TestNormKind};
use crate::Result;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use std::collections::VecDeque;

/// Controls for the nonlinear mixed solver.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Convergence tolerance on the algebraic residual sup-norm, relative to
    /// `max(1, ||F||_inf)`.
    pub newton_tol: f64,
    /// Newton iteration cap per continuation stage.
    pub max_iters: usize,
    /// Explicit continuation stages in the dual exponent, which must end at
    /// the problem's target and are honored verbatim; empty selects a
    /// geometric ladder from 2 whose steps split adaptively when a stage
    /// fails to converge.
    pub continuation: Vec<f64>,
    /// Line-search step shrink factor.
    pub backtrack: f64,
    /// Smallest admissible line-search step before a stage gives up.
    pub min_step: f64,
    /// Keep the rank-one normalization terms in the duality-map Jacobian.
    /// The exact derivative (the default) is the Hessian of a convex
    /// functional, hence symmetric positive semidefinite, and gives locally
    /// quadratic convergence; disabling freezes the normalization and falls
    /// back to linear convergence.
    pub full_normalization_jacobian: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-10,
            max_iters: 50,
            continuation: Vec::new(),
            backtrack: 0.5,
            min_step: 1e-6,
            full_normalization_jacobian: true,
        }
    }
}

/// Convergence record of a mixed solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    /// Accepted Newton iterations summed over all continuation stages (zero
    /// when the target dual exponent is 2 and the solve is linear).
    pub iterations: usize,
    /// Sup-norm of the final algebraic residual relative to
    /// `max(1, ||F||_inf)`.
    pub final_residual_norm: f64,
    /// Dual exponents visited, starting at 2.
    pub continuation_path: Vec<f64>,
}

/// Result of a mixed solve: trial coefficients, residual-representer test
/// coefficients, and the convergence record.
#[derive(Debug, Clone)]
pub struct MixedSolution {
    pub u_coeffs: DVector<f64>,
    pub r_coeffs: DVector<f64>,
    pub diagnostics: SolveDiagnostics,
}

// ---------------------------------------------------------------------------
// exponent-2 linear algebra

/// Cholesky factorization of either Gram storage form.
enum GramFactor {
    Banded(BandedCholesky),
    Dense(Cholesky<f64, Dyn>),
}

impl GramFactor {
    fn factor(g: &GramMatrix) -> Result<Self> {
        match g {
            GramMatrix::Banded(sb) => Ok(GramFactor::Banded(sb.cholesky()?)),
            GramMatrix::Dense(d) => Cholesky::new(d.clone()).map(GramFactor::Dense).ok_or_else(|| {
                DdmresError::SingularGram("dense Gram matrix is not positive definite".into())
            }),
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            GramFactor::Banded(c) => c.solve(rhs),
            GramFactor::Dense(c) => c.solve(rhs),
        }
    }
}

/// Matrix-vector product with a Gram matrix without densifying the banded form.
fn gram_matvec(g: &GramMatrix, x: &DVector<f64>) -> DVector<f64> {
    match g {
        GramMatrix::Banded(sb) => {
            let n = sb.dim();
            let bw = sb.bandwidth();
            let mut y = DVector::zeros(n);
            for i in 0..n {
                let lo = i.saturating_sub(bw);
                let hi = (i + bw).min(n - 1);
                let mut s = 0.0;
                for j in lo..=hi {
                    s += sb.get(i, j) * x[j];
                }
                y[i] = s;
            }
            y
        }
        GramMatrix::Dense(d) => d * x,
    }
}

/// Eigendecomposition-backed solver for the symmetric positive definite
/// reduced system, rejecting rank deficiency explicitly: a trial space the
/// test space cannot see produces an (almost) exactly singular reduced matrix
/// rather than a quietly garbage solution. Kept as a factorization so the
/// refinement passes reuse it.
struct SpdSolver {
    eig: SymmetricEigen<f64, Dyn>,
}

impl SpdSolver {
    fn new(s: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(s.clone());
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
        let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if !(lmin > lmax * 1e-13) {
            return Err(DdmresError::SingularSystem(format!(
                "reduced trial system is singular (eigenvalue range [{lmin:.3e}, {lmax:.3e}]); \
                 the test space does not control the trial space"
            )));
        }
        Ok(Self { eig })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let vt_rhs = self.eig.eigenvectors.transpose() * rhs;
        let scaled = DVector::from_iterator(
            vt_rhs.len(),
            vt_rhs
                .iter()
                .zip(self.eig.eigenvalues.iter())
                .map(|(v, l)| v / l),
        );
        &self.eig.eigenvectors * scaled
    }
}

/// Exponent-2 mixed solve by Schur reduction: with `X = G^-1 B`, the trial
/// coefficients solve `(B^T X) u = X^T F` and the representer is
/// `r = G^-1 (F - B u)`. Two passes of iterative refinement on the saddle
/// system follow, because on fine test meshes the Gram factor's conditioning
/// would otherwise leave the trial-range orthogonality of the representer
/// well above roundoff.
fn solve_exponent_two(
    g: &GramMatrix,
    gfac: &GramFactor,
    b: &DMatrix<f64>,
    f: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = b.ncols();
    let mut x = DMatrix::zeros(b.nrows(), n);
    for j in 0..n {
        let col = gfac.solve(&b.column(j).into_owned());
        x.set_column(j, &col);
    }
    let s_raw = b.transpose() * &x;
    let s = (&s_raw + s_raw.transpose()) * 0.5;
    let schur = SpdSolver::new(&s)?;
    let mut u = schur.solve(&(x.transpose() * f));
    let mut r = gfac.solve(&(f - b * &u));
    for _ in 0..2 {
        let rho1 = f - gram_matvec(g, &r) - b * &u;
        let rho2 = -(b.transpose() * &r);
        let du = schur.solve(&(x.transpose() * &rho1 - rho2));
        let dr = gfac.solve(&rho1) - &x * &du;
        u += du;
        r += dr;
    }
    Ok((u, r))
}

// ---------------------------------------------------------------------------
// continuation and Newton stages

/// Geometric ladder of dual exponents from 2 to the target with ratio at most
/// 1.6 per step (at most 12 steps for any exponent the library accepts), or a
/// validated caller-supplied ladder.
fn continuation_stages(q_target: f64, explicit: &[f64]) -> Result<Vec<f64>> {
    if !(q_target.is_finite() && q_target > 1.0) {
        return Err(DdmresError::InvalidConfig(format!(
            "dual exponent q = {q_target} must lie in (1, infinity)"
        )));
    }
    if !explicit.is_empty() {
        for &q in explicit {
            if !(q.is_finite() && q > 1.0) {
                return Err(DdmresError::InvalidConfig(format!(
                    "continuation stage q = {q} must lie in (1, infinity)"
                )));
            }
        }
        let last = *explicit.last().unwrap();
        if (last - q_target).abs() > 1e-9 * q_target {
            return Err(DdmresError::InvalidConfig(format!(
                "continuation stages must end at the target dual exponent {q_target}, got {last}"
            )));
        }
        return Ok(explicit.to_vec());
    }
    if (q_target - 2.0).abs() <= 1e-12 {
        return Ok(Vec::new());
    }
    let ratio_cap = 1.6f64;
    let span = (q_target / 2.0).ln().abs();
    let k = ((span / ratio_cap.ln()).ceil() as usize).max(1);
    let mut stages: Vec<f64> = (1..=k)
        .map(|i| 2.0 * (q_target / 2.0).powf(i as f64 / k as f64))
        .collect();
    *stages.last_mut().unwrap() = q_target;
    Ok(stages)
}

/// Stacked residual of the mixed system at frozen regularization:
/// `[N(r) + B u - F; B^T r]`.
fn mixed_residual(
    ops: &DualityOps,
    eps: (f64, f64),
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    f: &DVector<f64>,
    r: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = b.nrows();
    let n = b.ncols();
    let top = ops.apply(r, eps)? + b * u - f;
    let bottom = bt * r;
    let mut out = DVector::zeros(m + n);
    out.rows_mut(0, m).copy_from(&top);
    out.rows_mut(m, n).copy_from(&bottom);
    Ok(out)
}

/// Saddle matrix `[[J, B], [B^T, 0]]`.
fn saddle(j: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = (b.nrows(), b.ncols());
    let mut k = DMatrix::zeros(m + n, m + n);
    k.view_mut((0, 0), (m, m)).copy_from(j);
    k.view_mut((0, m), (m, n)).copy_from(b);
    k.view_mut((m, 0), (n, m)).copy_from(&b.transpose());
    k
}

/// Backtracking line search on the squared residual norm. Returns the
/// accepted state or `None` when no step above the minimum decreases it.
#[allow(clippy::too_many_arguments)]
fn line_search(
    ops: &DualityOps,
    eps: (f64, f64),
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    f: &DVector<f64>,
    r: &DVector<f64>,
    u: &DVector<f64>,
    delta: &DVector<f64>,
    res0: &DVector<f64>,
    config: &SolverConfig,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let m = b.nrows();
    let n = b.ncols();
    let phi0 = 0.5 * res0.norm_squared();
    let mut t = 1.0;
    while t >= config.min_step {
        let r_new = r + delta.rows(0, m).scale(t);
        let u_new = u + delta.rows(m, n).scale(t);
        if let Ok(res_new) = mixed_residual(ops, eps, b, bt, f, &r_new, &u_new) {
            if 0.5 * res_new.norm_squared() < phi0 {
                return Some((r_new, u_new, res_new));
            }
        }
        t *= config.backtrack;
    }
    None
}

struct StageOutcome {
    iterations: usize,
    residual: f64,
}

/// One continuation stage: damped Newton on `(r, u)` at a fixed dual exponent
/// with the regularization frozen at the stage's warm start. When a Newton
/// step fails to decrease the residual, the duality-map Jacobian is replaced
/// by the exponent-2 Gram matrix for a fixed-point step before the stage is
/// declared divergent.
#[allow(clippy::too_many_arguments)]
fn newton_stage(
    ops: &DualityOps,
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    f: &DVector<f64>,
    g2: &DMatrix<f64>,
    r: &mut DVector<f64>,
    u: &mut DVector<f64>,
    tol: f64,
    config: &SolverConfig,
    completed: &[f64],
) -> Result<StageOutcome> {
    let eps = ops.epsilons(r);
    let mut res = mixed_residual(ops, eps, b, bt, f, r, u)?;
    for iter in 0..config.max_iters {
        let rnorm = res.amax();
        if rnorm <= tol {
            return Ok(StageOutcome { iterations: iter, residual: rnorm });
        }
        let jac = ops.jacobian(r, eps, config.full_normalization_jacobian)?;
        let mut accepted = solve_dense(saddle(&jac, b), -&res)
            .ok()
            .and_then(|delta| line_search(ops, eps, b, bt, f, r, u, &delta, &res, config));
        if accepted.is_none() {
            let delta = solve_dense(saddle(g2, b), -&res)?;
            accepted = line_search(ops, eps, b, bt, f, r, u, &delta, &res, config);
        }
        match accepted {
            Some((r_new, u_new, res_new)) => {
                *r = r_new;
                *u = u_new;
                res = res_new;
            }
            None => {
                return Err(DdmresError::NewtonDiverged(format!(
                    "line search stalled at dual exponent q = {:.6} after {iter} iterations; \
                     residual {:.3e} (tolerance {:.3e}); completed stages {:?}",
                    ops.q,
                    res.amax(),
                    tol,
                    completed
                )))
            }
        }
    }
    // the loop checks convergence before each step, so an iterate produced by
    // the final allowed step still needs its own check
    let rnorm = res.amax();
    if rnorm <= tol {
        return Ok(StageOutcome { iterations: config.max_iters, residual: rnorm });
    }
    Err(DdmresError::NewtonDiverged(format!(
        "exhausted {} iterations at dual exponent q = {:.6}; residual {:.3e} \
         (tolerance {:.3e}); completed stages {:?}",
        config.max_iters,
        ops.q,
        rnorm,
        tol,
        completed
    )))
}

/// Solves the mixed minimal-residual system for the problem's trial exponent:
/// find `u` in the trial space and a residual representer `r` in the test
/// space with `N(r) + B u = F` and `B^T r = 0`, where `N` realizes the duality
/// map of the chosen test norm at the dual exponent `q = p/(p-1)`.
///
/// The dual exponent 2 gives a linear saddle system solved directly; other
/// exponents are reached by geometric continuation in `q`, each stage solved
/// by line-searched Newton warm-started from the previous one. The test space
/// must have at least as many degrees of freedom as the trial space and must
/// conform to the outflow boundary.
pub fn solve_mixed(
    problem: &Problem1D,
    trial: &Space1D,
    test: &Space1D,
    norm: TestNormKind,
    config: &SolverConfig,
) -> Result<MixedSolution> {
    let n = trial.dof_count();
    let m = test.dof_count();
    if m < n {
        return Err(DdmresError::InvalidConfig(format!(
            "test space must be at least as rich as the trial space \
             ({m} test vs {n} trial degrees of freedom)"
        )));
    }
    problem::validate_test_space(test, problem)?;
    let b = assemble_b_dense(trial, test, problem, false);
    let f = assemble_rhs(test, problem);
    let gram = gram_matrix(test, problem, norm)?;
    let gfac = GramFactor::factor(&gram)?;
    let scale = f.amax().max(1.0);
    let tol = config.newton_tol * scale;

    let (mut u, mut r) = solve_exponent_two(&gram, &gfac, &b, &f)?;
    let mut path = vec![2.0];
    let stages = continuation_stages(problem.q(), &config.continuation)?;

    if stages.is_empty() {
        let top = gram_matvec(&gram, &r) + &b * &u - &f;
        let residual = top.amax().max((b.transpose() * &r).amax());
        return Ok(MixedSolution {
            u_coeffs: u,
            r_coeffs: r,
            diagnostics: SolveDiagnostics {
                iterations: 0,
                final_residual_norm: residual / scale,
                continuation_path: path,
            },
        });
    }

    let bt = b.transpose();
    let g2 = gram.to_dense();
    let mut iterations = 0usize;
    let mut last_residual = 0.0;
    // The automatic ladder adapts: when Newton fails to converge across an
    // exponent step (its attraction basin shrinks as q grows), the iterate is
    // rolled back and the step is split at the geometric midpoint. Explicit
    // caller-supplied ladders are honored verbatim and fail immediately.
    let explicit = !config.continuation.is_empty();
    let mut pending: VecDeque<f64> = stages.into_iter().collect();
    let mut q_prev = 2.0f64;
    let mut attempts = 0usize;
    while let Some(q_stage) = pending.pop_front() {
        attempts += 1;
        if attempts > 64 {
            return Err(DdmresError::NewtonDiverged(format!(
                "continuation needed more than 64 stages; reached q = {q_prev:.6} \
                 of target {:.6}; completed stages {path:?}",
                problem.q()
            )));
        }
        let ops = DualityOps::new(test, problem, norm, q_stage);
        let saved = (r.clone(), u.clone());
        match newton_stage(&ops, &b, &bt, &f, &g2, &mut r, &mut u, tol, config, &path) {
            Ok(outcome) => {
                iterations += outcome.iterations;
                last_residual = outcome.residual;
                path.push(q_stage);
                q_prev = q_stage;
            }
            Err(e @ DdmresError::NewtonDiverged(_)) => {
                if explicit || (q_stage / q_prev).ln().abs() <= 1e-3 {
                    return Err(e);
                }
                r = saved.0;
                u = saved.1;
                pending.push_front(q_stage);
                pending.push_front((q_prev * q_stage).sqrt());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MixedSolution {
        u_coeffs: u,
        r_coeffs: r,
        diagnostics: SolveDiagnostics {
            iterations,
            final_residual_norm: last_residual / scale,
            continuation_path: path,
        },
    })
}

/// Discrete dual norm of the residual functional represented by `r`: the test
/// norm of the representer at the problem's dual exponent. At exponent 2 this
/// equals `sqrt(r^T G r)`.
pub fn discrete_dual_residual_norm(
    test: &Space1D,
    problem: &Problem1D,
    norm: TestNormKind,
    r: &DVector<f64>,
) -> f64 {
    DualityOps::new(test, problem, norm, problem.q()).v_norm(r)
}

// ---------------------------------------------------------------------------
// square Petrov-Galerkin solves

/// Solves the square Petrov-Galerkin system `b(u, v_i) = <f, v_i>` for a trial
/// and test space of equal dimension. The reaction-free optimal pair takes the
/// exact diagonal path; other pairs assemble densely.
pub fn solve_petrov_galerkin(
    problem: &Problem1D,
    trial: &Space1D,
    test: &Space1D,
) -> Result<DVector<f64>> {
    let n = trial.dof_count();
    if test.dof_count() != n {
        return Err(DdmresError::InvalidConfig(format!(
            "Petrov-Galerkin spaces must match in dimension ({} test vs {n} trial)",
            test.dof_count()
        )));
    }
    problem::validate_test_space(test, problem)?;
    let f = assemble_rhs(test, problem);
    let mu_zero = problem.mu.is_constant() && problem.mu.eval(problem.domain.0) == 0.0;
    if mu_zero
        && matches!(trial.kind(), SpaceKind1D::P0)
        && matches!(test.kind(), SpaceKind1D::OptimalTest(_))
    {
        let b = assemble_b_sparse_optimal(trial, test)?;
        let order: Vec<usize> = (0..n).collect();
        return Ok(DVector::from_vec(b.solve_ordered(f.as_slice(), &order)?));
    }
    solve_dense(assemble_b_dense(trial, test, problem, false), f)
}

/// Solves the square 2-D Petrov-Galerkin system for piecewise constants
/// against the flow-conforming linear test family. The system is triangular
/// along the downstream element order and is eliminated in that order.
pub fn solve_petrov_galerkin_2d(
    problem: &Problem2D,
    trial: &Space2D,
    test: &Space2D,
    classes: &[FaceClass],
) -> Result<DVector<f64>> {
    let b = assemble_b_sparse_2d(trial, test)?;
    let f = assemble_rhs_2d(test, problem, classes);
    let order = trial.mesh().flow_order(classes)?;
    Ok(DVector::from_vec(b.solve_ordered(f.as_slice(), &order.order)?))
}

// ---------------------------------------------------------------------------
// best L^p approximation

/// Shared quadrature grid for the best-approximation functional: per element,
/// panel points with weights, target values, and basis values. Panels split
/// at the target's listed discontinuities so every integrand piece is smooth.
struct LpGrid {
    elements: Vec<LpElement>,
    dof_count: usize,
    bandwidth: usize,
}

struct LpElement {
    dofs: Vec<(usize, usize)>,
    pts: Vec<f64>,
    w: Vec<f64>,
    target: Vec<f64>,
    /// `basis[local][point]`
    basis: Vec<Vec<f64>>,
}

impl LpGrid {
    fn build(space: &Space1D, u_exact: &dyn Fn(f64) -> f64, breakpoints: &[f64]) -> LpGrid {
        let mesh = space.mesh();
        let rule = quadrature::gauss_legendre(12);
        let panels_per_piece = 4;
        let tol_x = 1e-13 * mesh.measure();
        let mut elements = Vec::with_capacity(mesh.num_elements());
        for j in 0..mesh.num_elements() {
            let (a, b) = mesh.element(j);
            let mut cuts = vec![a, b];
            for &x in breakpoints {
                if x > a + tol_x && x < b - tol_x {
                    cuts.push(x);
                }
            }
            cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let dofs = space.element_dofs(j);
            let mut pts = Vec::new();
            let mut w = Vec::new();
            for piece in cuts.windows(2) {
                for panel in 0..panels_per_piece {
                    let lo = piece[0] + (piece[1] - piece[0]) * panel as f64 / panels_per_piece as f64;
                    let hi =
                        piece[0] + (piece[1] - piece[0]) * (panel + 1) as f64 / panels_per_piece as f64;
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                        pts.push(mid + half * x);
                        w.push(half * wt);
                    }
                }
            }
            let target: Vec<f64> = pts.iter().map(|&x| u_exact(x)).collect();
            let basis: Vec<Vec<f64>> = dofs
                .iter()
                .map(|&(local, _)| pts.iter().map(|&x| space.eval_local(j, local, x).0).collect())
                .collect();
            elements.push(LpElement { dofs, pts, w, target, basis });
        }
        LpGrid { elements, dof_count: space.dof_count(), bandwidth: space.degree() }
    }

    fn sup_abs_target(&self) -> f64 {
        self.elements
            .iter()
            .flat_map(|e| e.target.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Exponent-2 minimizer on this grid (mass solve), used as the Newton start.
    fn l2_projection(&self) -> Result<DVector<f64>> {
        let mut mass = SymBanded::zeros(self.dof_count, self.bandwidth);
        let mut rhs = DVector::zeros(self.dof_count);
        for e in &self.elements {
            for (li, &(_, di)) in e.dofs.iter().enumerate() {
                for (pt, &wt) in e.w.iter().enumerate() {
                    rhs[di] += wt * e.target[pt] * e.basis[li][pt];
                }
                for (lj, &(_, dj)) in e.dofs.iter().enumerate().take(li + 1) {
                    let mut s = 0.0;
                    for (pt, &wt) in e.w.iter().enumerate() {
                        s += wt * e.basis[li][pt] * e.basis[lj][pt];
                    }
                    mass.add(di, dj, s);
                    if di != dj && lj < li {
                        // symmetric partner already covered by SymBanded::add
                    }
                }
            }
        }
        Ok(mass.cholesky()?.solve(&rhs))
    }

    fn functional(&self, c: &DVector<f64>, p: f64, eps: f64) -> f64 {
        let mut total = 0.0;
        for e in &self.elements {
            for pt in 0..e.pts.len() {
                let mut v = -e.target[pt];
                for (li, &(_, di)) in e.dofs.iter().enumerate() {
                    v += c[di] * e.basis[li][pt];
                }
                total += e.w[pt] * v.hypot(eps).powf(p);
            }
        }
        total
    }

    fn grad_hess(&self, c: &DVector<f64>, p: f64, eps: f64) -> (DVector<f64>, SymBanded) {
        let mut grad = DVector::zeros(self.dof_count);
        let mut hess = SymBanded::zeros(self.dof_count, self.bandwidth);
        for e in &self.elements {
            for pt in 0..e.pts.len() {
                let mut v = -e.target[pt];
                for (li, &(_, di)) in e.dofs.iter().enumerate() {
                    v += c[di] * e.basis[li][pt];
                }
                let eta2 = v * v + eps * eps;
                let g_coef = p * e.w[pt] * eta2.powf(0.5 * p - 1.0) * v;
                let h_coef =
                    p * e.w[pt] * eta2.powf(0.5 * p - 2.0) * (eps * eps + (p - 1.0) * v * v);
                for (li, &(_, di)) in e.dofs.iter().enumerate() {
                    grad[di] += g_coef * e.basis[li][pt];
                    for (lj, &(_, dj)) in e.dofs.iter().enumerate().take(li + 1) {
                        if dj <= di {
                            hess.add(di, dj, h_coef * e.basis[li][pt] * e.basis[lj][pt]);
                        }
                    }
                }
            }
        }
        (grad, hess)
    }
}

/// Exponent ladder for the best-approximation solve: geometric in `p - 1`
/// with ratio 0.4 toward 1 (or its reciprocal away from 1), ending exactly at
/// the target.
fn lp_ladder(p: f64) -> Vec<f64> {
    if (p - 2.0).abs() < 1e-12 {
        return vec![2.0];
    }
    let t = p - 1.0;
    let k = ((t.ln().abs() / 0.4f64.ln().abs()).ceil() as usize).max(1);
    (1..=k)
        .map(|i| if i == k { p } else { 1.0 + t.powf(i as f64 / k as f64) })
        .collect()
}

fn lp_newton(grid: &LpGrid, c: &mut DVector<f64>, p: f64, eps: f64, tol: f64) -> Result<()> {
    let max_iters = 200;
    for _ in 0..max_iters {
        let (grad, hess) = grid.grad_hess(c, p, eps);
        if grad.amax() <= tol {
            return Ok(());
        }
        let delta = hess.cholesky()?.solve(&(-&grad));
        let f0 = grid.functional(c, p, eps);
        // Predicted decrease of the quadratic model, (1/2) g^T H^{-1} g. Once it
        // falls below the floating-point resolution of the functional value the
        // line search can no longer measure descent, but the iterate is already
        // deep in the quadratic basin of a smooth strictly convex functional, so
        // the full step is taken untested and the gradient criterion decides.
        let predicted = -0.5 * grad.dot(&delta);
        if predicted <= 1e-14 * (1.0 + f0.abs()) {
            *c += &delta;
            continue;
        }
        let mut t = 1.0;
        let mut moved = false;
        while t >= 1e-6 {
            let cand = &*c + &delta * t;
            if grid.functional(&cand, p, eps) < f0 {
                *c = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return Err(DdmresError::NewtonDiverged(format!(
                "best-approximation line search stalled at exponent p = {p}; \
                 gradient sup-norm {:.3e} (tolerance {tol:.3e})",
                grad.amax()
            )));
        }
    }
    let (grad, _) = grid.grad_hess(c, p, eps);
    if grad.amax() <= tol {
        Ok(())
    } else {
        Err(DdmresError::NewtonDiverged(format!(
            "best-approximation Newton exhausted {max_iters} iterations at exponent p = {p}; \
             gradient sup-norm {:.3e} (tolerance {tol:.3e})",
            grad.amax()
        )))
    }
}

/// Best `L^p` approximation of `u_exact` in a polynomial space: minimizes the
/// regularized functional `integral of (e^2 + eps^2)^(p/2)` with
/// `eps = 1e-8 * sup|u|` by damped Newton, continuing geometrically in `p - 1`
/// from the exponent-2 projection. `breakpoints` lists the target's
/// discontinuities so quadrature panels never straddle a jump. Converges when
/// the gradient sup-norm drops to `tol`; near the optimum, steps whose
/// predicted decrease is below the floating-point resolution of the
/// functional are taken at full length so the gradient can keep contracting
/// quadratically instead of stalling on an unmeasurable line search.
pub fn best_lp_approximation(
    u_exact: &dyn Fn(f64) -> f64,
    breakpoints: &[f64],
    space: &Space1D,
    p: f64,
    tol: f64,
) -> Result<DVector<f64>> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(DdmresError::InvalidConfig(format!(
            "best-approximation exponent p = {p} must lie in (1, infinity)"
        )));
    }
    if matches!(space.kind(), SpaceKind1D::OptimalTest(_)) {
        return Err(DdmresError::InvalidConfig(
            "best approximation targets a polynomial space".into(),
        ));
    }
    let grid = LpGrid::build(space, u_exact, breakpoints);
    let eps = 1e-8 * grid.sup_abs_target().max(1e-30);
    let mut c = grid.l2_projection()?;
    for p_stage in lp_ladder(p) {
        lp_newton(&grid, &mut c, p_stage, eps, tol)?;
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// error norms

/// `L^rho` norm of `u_exact - expansion` over the space's mesh. Quadrature
/// splits every element at the listed discontinuities and singularities and
/// grades dyadically toward singular endpoints, so integrable blow-ups are
/// resolved to roughly six significant digits and smooth pieces to full
/// accuracy.
pub fn error_norm_1d(
    u_exact: &dyn Fn(f64) -> f64,
    discontinuities: &[f64],
    singularities: &[f64],
    space: &Space1D,
    coeffs: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(DdmresError::InvalidConfig(format!(
            "error-norm exponent rho = {rho} must lie in [1, infinity)"
        )));
    }
    let mesh = space.mesh();
    let tol_x = 1e-13 * mesh.measure();
    let mut total = 0.0;
    for j in 0..mesh.num_elements() {
        let (a, b) = mesh.element(j);
        let mut cuts = vec![a, b];
        for &x in discontinuities.iter().chain(singularities) {
            if x > a + tol_x && x < b - tol_x {
                cuts.push(x);
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for piece in cuts.windows(2) {
            let (lo, hi) = (piece[0], piece[1]);
            if hi - lo <= tol_x {
                continue;
            }
            let integrand = |x: f64| {
                let e = (u_exact(x) - space.eval_expansion(coeffs.as_slice(), x).0).abs();
                e.powf(rho)
            };
            let sing_left = singularities.iter().any(|&s| (s - lo).abs() <= tol_x);
            let sing_right = singularities.iter().any(|&s| (s - hi).abs() <= tol_x);
            total += match (sing_left, sing_right) {
                (true, true) => {
                    let mid = 0.5 * (lo + hi);
                    quadrature::integrate_graded(&integrand, lo, mid, true, 80, 24)
                        + quadrature::integrate_graded(&integrand, mid, hi, false, 80, 24)
                }
                (true, false) => quadrature::integrate_graded(&integrand, lo, hi, true, 80, 24),
                (false, true) => quadrature::integrate_graded(&integrand, lo, hi, false, 80, 24),
                (false, false) => quadrature::integrate(&integrand, lo, hi, 12),
            };
        }
    }
    Ok(total.powf(1.0 / rho))
}

/// Weighted pointwise error samples `(weight, |u - u_n|)` for a 2-D transport
/// solution: the exact value at each quadrature point is the inflow datum
/// carried along the characteristic traced backward through the mesh, and
/// elements cut by the characteristic through a datum breakpoint are split
/// along the traced chord so no quadrature cell straddles the jump. The
/// samples are independent of the norm exponent and can be reused across
/// several norms of the same solution.
pub fn error_samples_2d(
    problem: &Problem2D,
    trial: &Space2D,
    u: &DVector<f64>,
    classes: &[FaceClass],
) -> Result<Vec<(f64, f64)>> {
    if !matches!(trial.kind(), SpaceKind2D::P0) {
        return Err(DdmresError::InvalidConfig(
            "2-D error sampling expects a piecewise-constant solution".into(),
        ));
    }
    let mesh = trial.mesh();
    let nt = mesh.num_triangles();
    if u.len() != nt {
        return Err(DdmresError::InvalidConfig(format!(
            "solution has {} coefficients for {nt} elements",
            u.len()
        )));
    }
    let mut chords: Vec<Vec<([f64; 2], [f64; 2])>> = vec![Vec::new(); nt];
    for &bx in &problem.g_breakpoints {
        let (start_elem, start_pt) = locate_on_inflow(mesh, classes, bx)?;
        for (t, entry, exit) in mesh.trace_forward_path(classes, start_elem, start_pt)? {
            chords[t].push((entry, exit));
        }
    }
    let rule = quadrature::triangle_rule_degree4();
    let per_triangle: Vec<Result<Vec<(f64, f64)>>> = (0..nt)
        .into_par_iter()
        .map(|t| sample_triangle(problem, mesh, classes, u[t], t, &chords[t], &rule))
        .collect();
    let mut samples = Vec::new();
    for part in per_triangle {
        samples.extend(part?);
    }
    Ok(samples)
}

/// `L^rho` norm from weighted error samples.
pub fn norm_from_samples(samples: &[(f64, f64)], rho: f64) -> Result<f64> {
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(DdmresError::InvalidConfig(format!(
            "error-norm exponent rho = {rho} must lie in [1, infinity)"
        )));
    }
    Ok(samples
        .iter()
        .map(|&(w, e)| w * e.powf(rho))
        .sum::<f64>()
        .powf(1.0 / rho))
}

/// `L^rho` norm of the error of a 2-D transport solution (see
/// [`error_samples_2d`]).
pub fn error_norm_2d(
    problem: &Problem2D,
    trial: &Space2D,
    u: &DVector<f64>,
    classes: &[FaceClass],
    rho: f64,
) -> Result<f64> {
    let samples = error_samples_2d(problem, trial, u, classes)?;
    norm_from_samples(&samples, rho)
}

/// Finds the inflow face crossing `x = bx` and the point on it.
fn locate_on_inflow(
    mesh: &TriMesh2D,
    classes: &[FaceClass],
    bx: f64,
) -> Result<(usize, [f64; 2])> {
    for (fi, face) in mesh.faces().iter().enumerate() {
        if classes[fi] != FaceClass::Inflow {
            continue;
        }
        let a = mesh.vertex(face.verts[0]);
        let b = mesh.vertex(face.verts[1]);
        let dx = b[0] - a[0];
        if dx.abs() <= 1e-300 {
            continue;
        }
        let s = (bx - a[0]) / dx;
        if (0.0..=1.0).contains(&s) {
            return Ok((face.left, [a[0] + s * dx, a[1] + s * (b[1] - a[1])]));
        }
    }
    Err(DdmresError::InvalidConfig(format!(
        "datum breakpoint x = {bx} does not lie on the inflow boundary"
    )))
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Where a point sits on a convex polygon's boundary.
enum BoundaryHit {
    Vertex(usize),
    Edge(usize, f64),
}

fn place_on_boundary(poly: &[[f64; 2]], p: [f64; 2], tol: f64) -> Option<BoundaryHit> {
    let n = poly.len();
    for i in 0..n {
        let v0 = poly[i];
        let v1 = poly[(i + 1) % n];
        let ex = v1[0] - v0[0];
        let ey = v1[1] - v0[1];
        let len = (ex * ex + ey * ey).sqrt();
        if len <= tol {
            continue;
        }
        let dx = p[0] - v0[0];
        let dy = p[1] - v0[1];
        if (ex * dy - ey * dx).abs() / len > tol {
            continue;
        }
        let s = (dx * ex + dy * ey) / (len * len);
        if s < -tol / len || s > 1.0 + tol / len {
            continue;
        }
        if s * len <= tol {
            return Some(BoundaryHit::Vertex(i));
        }
        if (1.0 - s) * len <= tol {
            return Some(BoundaryHit::Vertex((i + 1) % n));
        }
        return Some(BoundaryHit::Edge(i, s));
    }
    None
}

/// Splits a convex polygon along the chord `a -> b` (both on the boundary).
/// Returns `None` when the chord lies on an edge, grazes the boundary, or
/// cannot be placed.
fn split_polygon(
    poly: &[[f64; 2]],
    a: [f64; 2],
    b: [f64; 2],
    tol: f64,
) -> Option<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= tol {
        return None;
    }
    let ha = place_on_boundary(poly, a, tol)?;
    let hb = place_on_boundary(poly, b, tol)?;
    // ring of boundary points with the chord endpoints tagged
    let n = poly.len();
    let mut ring: Vec<([f64; 2], u8)> = Vec::with_capacity(n + 2);
    for i in 0..n {
        let mut tag = 0u8;
        if matches!(ha, BoundaryHit::Vertex(v) if v == i) {
            tag = 1;
        }
        if matches!(hb, BoundaryHit::Vertex(v) if v == i) {
            tag |= 2;
        }
        ring.push((poly[i], tag));
        let mut inserts: Vec<(f64, [f64; 2], u8)> = Vec::new();
        if let BoundaryHit::Edge(e, s) = ha {
            if e == i {
                inserts.push((s, a, 1));
            }
        }
        if let BoundaryHit::Edge(e, s) = hb {
            if e == i {
                inserts.push((s, b, 2));
            }
        }
        inserts.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        for (_, p, tag) in inserts {
            ring.push((p, tag));
        }
    }
    let ia = ring.iter().position(|r| r.1 & 1 != 0)?;
    let ib = ring.iter().position(|r| r.1 & 2 != 0)?;
    if ia == ib {
        return None;
    }
    let len = ring.len();
    let take = |from: usize, to: usize| {
        let mut v = Vec::new();
        let mut i = from;
        loop {
            v.push(ring[i].0);
            if i == to {
                break;
            }
            i = (i + 1) % len;
        }
        v
    };
    let p1 = take(ia, ib);
    let p2 = take(ib, ia);
    let min_area = tol * tol;
    if p1.len() < 3 || p2.len() < 3 || polygon_area(&p1) <= min_area || polygon_area(&p2) <= min_area
    {
        return None;
    }
    Some((p1, p2))
}

#[allow(clippy::too_many_arguments)]
fn sample_triangle(
    problem: &Problem2D,
    mesh: &TriMesh2D,
    classes: &[FaceClass],
    u_t: f64,
    t: usize,
    chords: &[([f64; 2], [f64; 2])],
    rule: &TriangleRule,
) -> Result<Vec<(f64, f64)>> {
    let coords = mesh.triangle_coords(t);
    let diam = (0..3)
        .map(|i| {
            let p = coords[i];
            let q = coords[(i + 1) % 3];
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .fold(0.0f64, f64::max);
    let tol = 1e-12 * diam;
    let mut polys: Vec<Vec<[f64; 2]>> = vec![coords.to_vec()];
    for &(a, b) in chords {
        let mut next = Vec::new();
        for poly in polys {
            match split_polygon(&poly, a, b, tol) {
                Some((p1, p2)) => {
                    next.push(p1);
                    next.push(p2);
                }
                None => next.push(poly),
            }
        }
        polys = next;
    }
    let mut out = Vec::new();
    for poly in &polys {
        for k in 1..poly.len() - 1 {
            let tri = [poly[0], poly[k], poly[k + 1]];
            sample_piece(problem, mesh, classes, u_t, t, tri, rule, &mut out)?;
        }
    }
    Ok(out)
}

/// Samples one triangular piece: two uniform refinement levels, then the
/// symmetric degree-4 rule per child, each point traced back to the inflow
/// boundary for the exact value.
#[allow(clippy::too_many_arguments)]
fn sample_piece(
    problem: &Problem2D,
    mesh: &TriMesh2D,
    classes: &[FaceClass],
    u_t: f64,
    t: usize,
    tri: [[f64; 2]; 3],
    rule: &TriangleRule,
    out: &mut Vec<(f64, f64)>,
) -> Result<()> {
    let area = polygon_area(&tri);
    if area <= 0.0 {
        return Ok(());
    }
    let refine = 4usize;
    let child_area = area / (refine * refine) as f64;
    let corner = |i: usize, j: usize| -> [f64; 2] {
        let s = i as f64 / refine as f64;
        let r = j as f64 / refine as f64;
        [
            tri[0][0] + s * (tri[1][0] - tri[0][0]) + r * (tri[2][0] - tri[0][0]),
            tri[0][1] + s * (tri[1][1] - tri[0][1]) + r * (tri[2][1] - tri[0][1]),
        ]
    };
    let mut emit = |child: [[f64; 2]; 3]| -> Result<()> {
        for (pt, &w) in rule.points.iter().zip(&rule.weights) {
            let p = [
                child[0][0] + pt[0] * (child[1][0] - child[0][0]) + pt[1] * (child[2][0] - child[0][0]),
                child[0][1] + pt[0] * (child[1][1] - child[0][1]) + pt[1] * (child[2][1] - child[0][1]),
            ];
            let foot = mesh.trace_back_to_inflow(classes, t, p)?;
            let e = ((problem.g_inflow)(foot) - u_t).abs();
            out.push((child_area * w, e));
        }
        Ok(())
    };
    for i in 0..refine {
        for j in 0..(refine - i) {
            emit([corner(i, j), corner(i + 1, j), corner(i, j + 1)])?;
            if j + i < refine - 1 {
                emit([corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1)])?;
            }
        }
    }
    Ok(())
}
