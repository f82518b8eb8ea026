//! Duality maps of L^q and of the discrete test norms.
//!
//! On a weighted quadrature grid the L^q duality map is
//! `J_q(v) = ||v||^(2-q) * |v|^(q-2) * v`, regularized by
//! `|v| -> sqrt(v^2 + eps^2)` and evaluated stably as `t^(q-2) * v` with
//! `t = sqrt(v^2 + eps^2) / ||v||`, which keeps the large-`q` powers on
//! ratios of moderate size. For a graph norm
//! `||v||_V^2 = ||v||_q^2 + ||A v||_q^2` the map splits into two
//! independently normalized parts: `<J_V(v), w> = <J_q(v), w> + <J_q(Av), Aw>`.

use crate::spaces::{quadrature, Space1D, SpaceKind1D, TestNormKind};
use crate::problem::Problem1D;
use crate::{DdmresError, Result};
use nalgebra::{DMatrix, DVector};

/// Weighted pairing `sum_i w_i a_i b_i`.
pub fn pairing(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), wi)| wi * x * y).sum()
}

/// `L^q` norm on a weighted grid, scaled to avoid overflow of `|v|^q`.
pub fn lq_norm(vals: &[f64], w: &[f64], q: f64) -> f64 {
    lq_norm_regularized(vals, w, q, 0.0)
}

/// `L^q` norm of `sqrt(v^2 + eps^2)` on a weighted grid.
pub fn lq_norm_regularized(vals: &[f64], w: &[f64], q: f64, eps: f64) -> f64 {
    let peak = vals
        .iter()
        .map(|v| v.hypot(eps))
        .fold(0.0f64, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let sum: f64 = vals
        .iter()
        .zip(w)
        .map(|(v, wi)| wi * (v.hypot(eps) / peak).powf(q))
        .sum();
    peak * sum.powf(1.0 / q)
}

/// Pointwise stable duality-map value `(sqrt(v^2 + eps^2) / norm)^(q-2) * v`.
pub fn jq_pointwise(v: f64, q: f64, eps: f64, norm: f64) -> f64 {
    if v == 0.0 && eps == 0.0 {
        return 0.0;
    }
    (v.hypot(eps) / norm).powf(q - 2.0) * v
}

/// Duality map of `L^q` on a weighted grid. With `eps = 0` a zero input maps
/// to zero for `q = 2` and is otherwise a singular normalization.
pub fn jq(vals: &[f64], w: &[f64], q: f64, eps: f64) -> Result<Vec<f64>> {
    let norm = lq_norm_regularized(vals, w, q, eps);
    if norm == 0.0 {
        if q == 2.0 {
            return Ok(vec![0.0; vals.len()]);
        }
        return Err(DdmresError::SingularNormalization { q });
    }
    Ok(vals.iter().map(|&v| jq_pointwise(v, q, eps, norm)).collect())
}

/// Default regularization scale relative to the sup of the argument: tighter
/// for moderate exponents, looser for the large-`q` regimes where the frozen
/// powers are stiff.
pub fn default_eps_rel(q: f64) -> f64 {
    if q <= 4.0 {
        1e-8
    } else {
        1e-4
    }
}

/// Residual operator of the discrete dual norm on a test space: tabulates the
/// basis (values and norm-specific derivative part) on a per-element Gauss
/// grid and exposes the nonlinear map `N(r)_i = <J_V(sum_j r_j psi_j), psi_i>`
/// together with its Jacobian.
pub struct DualityOps {
    pub norm: TestNormKind,
    pub q: f64,
    x: Vec<f64>,
    w: Vec<f64>,
    /// vals[dof][pt]
    vals: Vec<Vec<f64>>,
    /// derivative part per dof: psi' (derivative-only) or (beta psi)' (graph)
    grads: Vec<Vec<f64>>,
}

impl DualityOps {
    pub fn new(test: &Space1D, problem: &Problem1D, norm: TestNormKind, q: f64) -> Self {
        let mesh = test.mesh();
        let npts = (2 * test.degree() + 2).max(6);
        let rule = quadrature::gauss_legendre(npts);
        let mut x = Vec::new();
        let mut w = Vec::new();
        for j in 0..mesh.num_elements() {
            let (a, b) = mesh.element(j);
            for (i, &t) in rule.nodes.iter().enumerate() {
                x.push(0.5 * (a + b) + 0.5 * (b - a) * t);
                w.push(0.5 * (b - a) * rule.weights[i]);
            }
        }
        let m = test.dof_count();
        let mut vals = vec![vec![0.0; x.len()]; m];
        let mut grads = vec![vec![0.0; x.len()]; m];
        for (pt, &xp) in x.iter().enumerate() {
            let j = mesh.locate(xp).unwrap();
            match test.kind() {
                SpaceKind1D::OptimalTest(_) => {
                    for d in 0..m {
                        let (lo, hi) = test.support(d);
                        if j < lo || j > hi {
                            continue;
                        }
                        let (v, dv) = test.eval_local(d, 0, xp);
                        vals[d][pt] = v;
                        grads[d][pt] = grad_part(problem, norm, xp, v, dv);
                    }
                }
                _ => {
                    for (local, d) in test.element_dofs(j) {
                        let (v, dv) = test.eval_local(j, local, xp);
                        vals[d][pt] = v;
                        grads[d][pt] = grad_part(problem, norm, xp, v, dv);
                    }
                }
            }
        }
        DualityOps { norm, q, x, w, vals, grads }
    }

    pub fn dof_count(&self) -> usize {
        self.vals.len()
    }

    pub fn grid(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.w)
    }

    /// Pointwise values of the expansion and of its derivative part.
    pub fn expand(&self, r: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let p = self.x.len();
        let mut u = vec![0.0; p];
        let mut g = vec![0.0; p];
        for (d, rd) in r.iter().enumerate() {
            if *rd == 0.0 {
                continue;
            }
            for pt in 0..p {
                u[pt] += rd * self.vals[d][pt];
                g[pt] += rd * self.grads[d][pt];
            }
        }
        (u, g)
    }

    /// Regularization scales for the two parts from the current iterate:
    /// `eps_rel(q) * max(sup |part|, 1e-30)`.
    pub fn epsilons(&self, r: &DVector<f64>) -> (f64, f64) {
        let (u, g) = self.expand(r);
        let eps_rel = default_eps_rel(self.q);
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-30);
        (eps_rel * sup(&u), eps_rel * sup(&g))
    }

    /// Test norm of the expansion: `||u'||_q` or
    /// `sqrt(||u||_q^2 + ||(beta u)'||_q^2)`.
    pub fn v_norm(&self, r: &DVector<f64>) -> f64 {
        let (u, g) = self.expand(r);
        let ng = lq_norm(&g, &self.w, self.q);
        match self.norm {
            TestNormKind::DerivativeOnly => ng,
            TestNormKind::AdjointGraph => {
                let nu = lq_norm(&u, &self.w, self.q);
                nu.hypot(ng)
            }
        }
    }

    /// `N(r)_i = <J_V(r), psi_i>` with the given frozen regularizations.
    pub fn apply(&self, r: &DVector<f64>, eps: (f64, f64)) -> Result<DVector<f64>> {
        let (u, g) = self.expand(r);
        let mut out = DVector::zeros(self.dof_count());
        if matches!(self.norm, TestNormKind::AdjointGraph) {
            let ju = jq(&u, &self.w, self.q, eps.0)?;
            for i in 0..self.dof_count() {
                out[i] += pairing(&ju, &self.vals[i], &self.w);
            }
        }
        let jg = jq(&g, &self.w, self.q, eps.1)?;
        for i in 0..self.dof_count() {
            out[i] += pairing(&jg, &self.grads[i], &self.w);
        }
        Ok(out)
    }

    /// Jacobian of `apply` at `r` with frozen regularizations. The frozen
    /// mode also freezes the norm factors `||.||^(2-q)` (dropping the
    /// rank-one normalization terms); the full mode keeps them.
    pub fn jacobian(&self, r: &DVector<f64>, eps: (f64, f64), full: bool) -> Result<DMatrix<f64>> {
        let (u, g) = self.expand(r);
        let m = self.dof_count();
        let mut jac = DMatrix::zeros(m, m);
        if matches!(self.norm, TestNormKind::AdjointGraph) {
            accumulate_part(&mut jac, &u, &self.vals, &self.w, self.q, eps.0, full)?;
        }
        accumulate_part(&mut jac, &g, &self.grads, &self.w, self.q, eps.1, full)?;
        Ok(jac)
    }
}

fn grad_part(problem: &Problem1D, norm: TestNormKind, x: f64, v: f64, dv: f64) -> f64 {
    match norm {
        TestNormKind::DerivativeOnly => dv,
        TestNormKind::AdjointGraph => problem.beta.deriv(x) * v + problem.beta.eval(x) * dv,
    }
}

/// Adds to `jac` the Jacobian of `r -> <J_q(part(r)), part_i>` where
/// `part(r) = sum_j r_j rows[j]`:
/// `sum_pt w * t^(q-4) * ((q-1) v^2 + eps^2) / n^2 * rows_j rows_i`
/// plus, in full mode, the normalization term `(2-q)/n^2 * a a^T` with
/// `a_i = sum_pt w * t^(q-2) * v * rows_i`.
fn accumulate_part(
    jac: &mut DMatrix<f64>,
    v: &[f64],
    rows: &[Vec<f64>],
    w: &[f64],
    q: f64,
    eps: f64,
    full: bool,
) -> Result<()> {
    let n = lq_norm_regularized(v, w, q, eps);
    if n == 0.0 {
        if q == 2.0 {
            // J_2 is the identity; its Jacobian is the plain Gram contribution
            for (pt, &wp) in w.iter().enumerate() {
                for (i, ri) in rows.iter().enumerate() {
                    if ri[pt] == 0.0 {
                        continue;
                    }
                    for (j, rj) in rows.iter().enumerate() {
                        jac[(i, j)] += wp * ri[pt] * rj[pt];
                    }
                }
            }
            return Ok(());
        }
        return Err(DdmresError::SingularNormalization { q });
    }
    let m = rows.len();
    let mut a = vec![0.0; m];
    for (pt, (&vp, &wp)) in v.iter().zip(w).enumerate() {
        let t = vp.hypot(eps) / n;
        let diag = t.powf(q - 4.0) * ((q - 1.0) * vp * vp + eps * eps) / (n * n);
        let tq2v = t.powf(q - 2.0) * vp;
        for (i, ri) in rows.iter().enumerate() {
            if ri[pt] == 0.0 {
                continue;
            }
            a[i] += wp * tq2v * ri[pt];
            let left = wp * diag * ri[pt];
            if left == 0.0 {
                continue;
            }
            for (j, rj) in rows.iter().enumerate() {
                if rj[pt] != 0.0 {
                    jac[(i, j)] += left * rj[pt];
                }
            }
        }
    }
    if full {
        let c = (2.0 - q) / (n * n);
        for i in 0..m {
            for j in 0..m {
                jac[(i, j)] += c * a[i] * a[j];
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh1D;
    use crate::problem::{gram_matrix, Problem1D};
    use crate::spaces::{BoundaryConstraint1D, Coefficient};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid() -> (Vec<f64>, Vec<f64>) {
        // per-element Gauss grid on a 5-element mesh of (0,1)
        let mesh = Mesh1D::uniform(0.0, 1.0, 5).unwrap();
        let rule = quadrature::gauss_legendre(8);
        let mut x = Vec::new();
        let mut w = Vec::new();
        for j in 0..mesh.num_elements() {
            let (a, b) = mesh.element(j);
            for (i, &t) in rule.nodes.iter().enumerate() {
                x.push(0.5 * (a + b) + 0.5 * (b - a) * t);
                w.push(0.5 * (b - a) * rule.weights[i]);
            }
        }
        (x, w)
    }

    #[test]
    fn duality_identities_hold_on_the_discrete_measure() {
        let (_, w) = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for q in [1.5f64, 2.0, 3.0, 101.0] {
            let p = q / (q - 1.0);
            for trial in 0..100 {
                // scale varies wildly to exercise the stable powers
                let scale = 10f64.powi((trial % 7) as i32 - 3);
                let v: Vec<f64> =
                    (0..w.len()).map(|_| scale * (rng.gen::<f64>() - 0.5) * 2.0).collect();
                let j = jq(&v, &w, q, 0.0).unwrap();
                let nv = lq_norm(&v, &w, q);
                let lhs = pairing(&j, &v, &w);
                assert_relative_eq!(lhs, nv * nv, max_relative = 1e-10);
                let nj = lq_norm(&j, &w, p);
                assert_relative_eq!(nj, nv, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_is_singular_except_at_two() {
        let (_, w) = grid();
        let zeros = vec![0.0; w.len()];
        assert!(matches!(
            jq(&zeros, &w, 3.0, 0.0),
            Err(DdmresError::SingularNormalization { .. })
        ));
        assert!(jq(&zeros, &w, 2.0, 0.0).unwrap().iter().all(|&v| v == 0.0));
        // regularized evaluation is fine and maps zero to zero
        let j = jq(&zeros, &w, 3.0, 1e-8).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_at_two_is_identity() {
        let (_, w) = grid();
        let v: Vec<f64> = (0..w.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let j = jq(&v, &w, 2.0, 0.0).unwrap();
        for (a, b) in j.iter().zip(&v) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    fn fig7_problem() -> Problem1D {
        Problem1D::new(
            (0.0, 1.0),
            Coefficient::linear(2.0, -1.0),
            Coefficient::constant(0.0),
            Coefficient::constant(1.0),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn residual_operator_at_two_matches_gram() {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 6).unwrap());
        let test = Space1D::p_cont(mesh, 2, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = fig7_problem();
        let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, 2.0);
        let g = gram_matrix(&test, &problem, TestNormKind::AdjointGraph)
            .unwrap()
            .to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let r = DVector::from_fn(test.dof_count(), |_, _| rng.gen::<f64>() - 0.5);
            let n = ops.apply(&r, (0.0, 0.0)).unwrap();
            let gr = &g * &r;
            for i in 0..n.len() {
                assert_relative_eq!(n[i], gr[i], epsilon = 1e-12, max_relative = 1e-12);
            }
            for full in [false, true] {
                let jac = ops.jacobian(&r, (0.0, 0.0), full).unwrap();
                for i in 0..g.nrows() {
                    for j in 0..g.ncols() {
                        assert_relative_eq!(jac[(i, j)], g[(i, j)], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn graph_pairing_recovers_squared_test_norm() {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 5).unwrap());
        let test = Space1D::p_cont(mesh, 3, BoundaryConstraint1D::None).unwrap();
        let problem = fig7_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for q in [1.5f64, 3.0, 101.0] {
            let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, q);
            for _ in 0..20 {
                let r = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
                let n = ops.apply(&r, (0.0, 0.0)).unwrap();
                let vn = ops.v_norm(&r);
                assert_relative_eq!(n.dot(&r), vn * vn, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn full_jacobian_matches_finite_differences() {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 4).unwrap());
        let test = Space1D::p_cont(mesh, 2, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = fig7_problem();
        let q = 3.0;
        let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, q);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
        // fixed regularization so the finite differences see a smooth map
        let eps = ops.epsilons(&r);
        let jac = ops.jacobian(&r, eps, true).unwrap();
        let delta = 1e-6;
        for _ in 0..6 {
            let dir = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
            let np = ops.apply(&(&r + delta * &dir), eps).unwrap();
            let nm = ops.apply(&(&r - delta * &dir), eps).unwrap();
            let fd = (np - nm) / (2.0 * delta);
            let jd = &jac * &dir;
            let scale = jd.amax().max(1e-12);
            for i in 0..fd.len() {
                assert!(
                    (fd[i] - jd[i]).abs() <= 1e-5 * scale,
                    "row {i}: fd {} vs jac {}",
                    fd[i],
                    jd[i]
                );
            }
        }
    }

    #[test]
    fn map_is_positively_homogeneous() {
        let (_, w) = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for q in [1.5f64, 3.0, 101.0] {
            for _ in 0..20 {
                let v: Vec<f64> = (0..w.len()).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
                let jv = jq(&v, &w, q, 0.0).unwrap();
                for lambda in [2.0f64, 10.0] {
                    let scaled: Vec<f64> = v.iter().map(|&x| lambda * x).collect();
                    let js = jq(&scaled, &w, q, 0.0).unwrap();
                    for (a, b) in js.iter().zip(&jv) {
                        assert_relative_eq!(a, &(lambda * b), max_relative = 1e-10);
                    }
                }
            }
        }
        // the graph-norm operator inherits the homogeneity of its parts
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 4).unwrap());
        let test = Space1D::p_cont(mesh, 2, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = fig7_problem();
        let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, 3.0);
        let r = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
        let n = ops.apply(&r, (0.0, 0.0)).unwrap();
        for lambda in [2.0f64, 10.0] {
            let ns = ops.apply(&(lambda * &r), (0.0, 0.0)).unwrap();
            for i in 0..n.len() {
                assert_relative_eq!(ns[i], lambda * n[i], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn residual_operator_is_monotone() {
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 5).unwrap());
        let test = Space1D::p_cont(mesh, 2, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = fig7_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for q in [1.5f64, 2.0, 3.0, 101.0] {
            let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, q);
            for _ in 0..20 {
                let r1 = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
                let r2 = DVector::from_fn(test.dof_count(), |_, _| 2.0 * rng.gen::<f64>() - 1.0);
                let n1 = ops.apply(&r1, (0.0, 0.0)).unwrap();
                let n2 = ops.apply(&r2, (0.0, 0.0)).unwrap();
                let gap = (&n1 - &n2).dot(&(&r1 - &r2));
                let scale = ops.v_norm(&r1).max(ops.v_norm(&r2)).powi(2);
                assert!(gap >= -1e-12 * scale, "q = {q}: pairing {gap}");
            }
        }
    }

    #[test]
    fn regularization_bias_is_second_order() {
        let (x, w) = grid();
        // bounded away from zero so the unregularized map is smooth
        let v: Vec<f64> = x.iter().map(|&t| 1.5 + 0.5 * (7.0 * t).sin()).collect();
        for q in [1.5f64, 3.0, 101.0] {
            let exact = jq(&v, &w, q, 0.0).unwrap();
            let err = |eps: f64| -> f64 {
                let j = jq(&v, &w, q, eps).unwrap();
                j.iter()
                    .zip(&exact)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            };
            let e2 = err(1e-2);
            let e4 = err(1e-4);
            let e6 = err(1e-6);
            assert!(e2 <= 10.0 * q.max(2.0) * 1e-4, "q = {q}: err {e2}");
            let ratio = e2 / e4;
            assert!((1e3..1e5).contains(&ratio), "q = {q}: ratio {ratio}");
            assert!(e6 <= 1e-3 * e4.max(1e-30), "q = {q}: {e6} vs {e4}");
        }
    }

    #[test]
    fn frozen_jacobian_differs_from_full_by_rank_one_scale() {
        // at q != 2 the full mode keeps the normalization terms; both must be
        // symmetric and the difference must vanish at q = 2 (checked above)
        let mesh = Arc::new(Mesh1D::uniform(0.0, 1.0, 4).unwrap());
        let test = Space1D::p_cont(mesh, 2, BoundaryConstraint1D::VanishRight).unwrap();
        let problem = fig7_problem();
        let ops = DualityOps::new(&test, &problem, TestNormKind::AdjointGraph, 3.0);
        let r = DVector::from_fn(test.dof_count(), |i, _| 0.3 + (i as f64 * 0.7).sin());
        let eps = ops.epsilons(&r);
        let frozen = ops.jacobian(&r, eps, false).unwrap();
        let full = ops.jacobian(&r, eps, true).unwrap();
        let diff = &full - &frozen;
        assert!(diff.amax() > 1e-8, "normalization terms should be visible");
        for m in [&frozen, &full] {
            for i in 0..m.nrows() {
                for j in 0..i {
                    assert_relative_eq!(m[(i, j)], m[(j, i)], max_relative = 1e-10);
                }
            }
        }
        // difference of the two parts has rank at most two
        let svd = diff.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[2] < 1e-10 * sv[0].max(1e-300), "rank should be <= 2");
    }
}
