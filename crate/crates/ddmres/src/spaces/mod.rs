//! Discrete function spaces: piecewise polynomials on 1-D meshes (constant,
//! continuous Lagrange of any degree, and the element-indicator-dual optimal
//! test family), and piecewise constants / flow-aligned conforming linears on
//! triangle meshes.

pub mod fortin;
pub mod quadrature;

use crate::mesh::{Mesh1D, TriMesh2D};
use crate::{DdmresError, Result};
use std::fmt;
use std::sync::Arc;

/// Norm placed on the test space. The derivative-only norm `||v'||_q` is
/// valid for constant advection; the adjoint graph norm
/// `sqrt(||v||_q^2 + ||(beta v)'||_q^2)` covers variable fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestNormKind {
    DerivativeOnly,
    AdjointGraph,
}

// ---------------------------------------------------------------------------
// Scalar coefficients
// ---------------------------------------------------------------------------

/// Scalar coefficient of one variable with an exact derivative. `Linear`
/// represents `a + b*x`; `Custom` carries user closures for value and
/// derivative.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Linear { a: f64, b: f64 },
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        df: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl Coefficient {
    pub fn constant(c: f64) -> Self {
        Coefficient::Constant(c)
    }

    /// `a + b*x`.
    pub fn linear(a: f64, b: f64) -> Self {
        Coefficient::Linear { a, b }
    }

    pub fn custom(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coefficient::Custom { f: Arc::new(f), df: Arc::new(df) }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Linear { a, b } => a + b * x,
            Coefficient::Custom { f, .. } => f(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Linear { b, .. } => *b,
            Coefficient::Custom { df, .. } => df(x),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Linear { a, b } => write!(f, "Linear({a} + {b}*x)"),
            Coefficient::Custom { .. } => write!(f, "Custom"),
        }
    }
}

// ---------------------------------------------------------------------------
// 1-D spaces
// ---------------------------------------------------------------------------

/// Which endpoint value (if any) is constrained to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryConstraint1D {
    None,
    VanishLeft,
    VanishRight,
}

/// Data of the optimal test family dual to element indicators: basis function
/// `j` is `v_j(x) = N_j(x) / beta(x)` with a piecewise-linear numerator
/// `N_j(x) = clamp(x_star) - clamp(x)` over element `j`, where `x_star` is the
/// outflow endpoint (or the interior stagnation point of a sign-changing
/// field). By construction `-(beta v_j)' = 1` on element `j` and `0`
/// elsewhere, and `v_j` vanishes where the flow leaves the domain.
#[derive(Clone)]
pub struct OptimalTestData {
    pub mesh: Arc<Mesh1D>,
    pub beta: Coefficient,
    pub x_star: f64,
    /// Set when `x_star` is an interior stagnation node of the field.
    pub interior_stagnation: bool,
}

impl fmt::Debug for OptimalTestData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OptimalTestData")
            .field("x_star", &self.x_star)
            .field("interior_stagnation", &self.interior_stagnation)
            .finish()
    }
}

impl OptimalTestData {
    /// Piecewise-linear numerator of basis `j` and its derivative.
    pub fn numerator(&self, j: usize, x: f64) -> (f64, f64) {
        let (a, b) = self.mesh.element(j);
        let clamp = |t: f64| t.clamp(a, b);
        let value = clamp(self.x_star) - clamp(x);
        let deriv = if x > a && x < b { -1.0 } else { 0.0 };
        (value, deriv)
    }
}

#[derive(Debug, Clone)]
pub enum SpaceKind1D {
    /// Piecewise constants; one degree of freedom per element.
    P0,
    /// Continuous piecewise polynomials of the given degree with
    /// Gauss-Lobatto Lagrange nodes.
    PCont { degree: usize },
    /// Optimal test family dual to element indicators.
    OptimalTest(Arc<OptimalTestData>),
}

/// A 1-D discrete space over a mesh: kind + optional endpoint constraint.
#[derive(Debug, Clone)]
pub struct Space1D {
    mesh: Arc<Mesh1D>,
    kind: SpaceKind1D,
    constraint: BoundaryConstraint1D,
    /// Lagrange nodes in [-1, 1] for `PCont` (Gauss-Lobatto points).
    local_nodes: Vec<f64>,
}

impl Space1D {
    pub fn p0(mesh: Arc<Mesh1D>) -> Self {
        Space1D {
            mesh,
            kind: SpaceKind1D::P0,
            constraint: BoundaryConstraint1D::None,
            local_nodes: Vec::new(),
        }
    }

    pub fn p_cont(
        mesh: Arc<Mesh1D>,
        degree: usize,
        constraint: BoundaryConstraint1D,
    ) -> Result<Self> {
        if degree == 0 {
            return Err(DdmresError::DegreeTooLow {
                got: 0,
                context: "continuous space needs degree >= 1".into(),
            });
        }
        let rule = quadrature::gauss_lobatto(degree + 1);
        Ok(Space1D {
            mesh,
            kind: SpaceKind1D::PCont { degree },
            constraint,
            local_nodes: rule.nodes.clone(),
        })
    }

    pub fn optimal_test(data: Arc<OptimalTestData>) -> Self {
        let mesh = data.mesh.clone();
        Space1D {
            mesh,
            kind: SpaceKind1D::OptimalTest(data),
            constraint: BoundaryConstraint1D::None,
            local_nodes: Vec::new(),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh1D> {
        &self.mesh
    }

    pub fn kind(&self) -> &SpaceKind1D {
        &self.kind
    }

    pub fn constraint(&self) -> BoundaryConstraint1D {
        self.constraint
    }

    /// Polynomial degree per element (0 for the optimal family, whose basis is
    /// piecewise-rational; callers treat it separately).
    pub fn degree(&self) -> usize {
        match &self.kind {
            SpaceKind1D::P0 => 0,
            SpaceKind1D::PCont { degree } => *degree,
            SpaceKind1D::OptimalTest(_) => 0,
        }
    }

    pub fn dof_count(&self) -> usize {
        let n = self.mesh.num_elements();
        match &self.kind {
            SpaceKind1D::P0 | SpaceKind1D::OptimalTest(_) => n,
            SpaceKind1D::PCont { degree } => {
                let unconstrained = degree * n + 1;
                match self.constraint {
                    BoundaryConstraint1D::None => unconstrained,
                    _ => unconstrained - 1,
                }
            }
        }
    }

    /// Global Lagrange node id for a degree of freedom (`PCont` only).
    fn node_of_dof(&self, dof: usize) -> usize {
        match self.constraint {
            BoundaryConstraint1D::VanishLeft => dof + 1,
            _ => dof,
        }
    }

    /// Inverse of `node_of_dof`: the dof owning a global node, if any.
    fn dof_of_node(&self, node: usize, last_node: usize) -> Option<usize> {
        match self.constraint {
            BoundaryConstraint1D::None => Some(node),
            BoundaryConstraint1D::VanishLeft => node.checked_sub(1),
            BoundaryConstraint1D::VanishRight => (node != last_node).then_some(node),
        }
    }

    /// Coordinate associated with a degree of freedom: the Lagrange node for
    /// `PCont`, the element midpoint otherwise.
    pub fn dof_coord(&self, dof: usize) -> f64 {
        match &self.kind {
            SpaceKind1D::P0 | SpaceKind1D::OptimalTest(_) => {
                let (a, b) = self.mesh.element(dof);
                0.5 * (a + b)
            }
            SpaceKind1D::PCont { degree } => {
                let node = self.node_of_dof(dof);
                let j = (node / degree).min(self.mesh.num_elements() - 1);
                let local = node - j * degree;
                let (a, b) = self.mesh.element(j);
                if local == 0 {
                    a
                } else if local == *degree {
                    b
                } else {
                    let t = self.local_nodes[local];
                    0.5 * (a + b) + 0.5 * (b - a) * t
                }
            }
        }
    }

    /// Degrees of freedom with support on element `j`, as
    /// `(local index, global dof)` pairs; constrained nodes are skipped.
    pub fn element_dofs(&self, j: usize) -> Vec<(usize, usize)> {
        match &self.kind {
            SpaceKind1D::P0 | SpaceKind1D::OptimalTest(_) => vec![(0, j)],
            SpaceKind1D::PCont { degree } => {
                let last_node = degree * self.mesh.num_elements();
                (0..=*degree)
                    .filter_map(|l| {
                        self.dof_of_node(j * degree + l, last_node).map(|d| (l, d))
                    })
                    .collect()
            }
        }
    }

    /// Inclusive element range supporting a degree of freedom.
    pub fn support(&self, dof: usize) -> (usize, usize) {
        let n = self.mesh.num_elements();
        match &self.kind {
            SpaceKind1D::P0 => (dof, dof),
            SpaceKind1D::OptimalTest(data) => {
                // the numerator is a nonzero constant upstream of the element
                // (on the side away from x_star) and zero past it downstream,
                // so the support runs from the element to the inflow boundary
                let (a, b) = self.mesh.element(dof);
                if data.x_star >= b {
                    (0, dof)
                } else if data.x_star <= a {
                    (dof, n - 1)
                } else {
                    (0, n - 1)
                }
            }
            SpaceKind1D::PCont { degree } => {
                let node = self.node_of_dof(dof);
                let j = node / degree;
                let local = node - j * degree;
                if local == 0 {
                    (j.saturating_sub(1), j.min(n - 1))
                } else {
                    (j, j)
                }
            }
        }
    }

    /// Value and derivative of local Lagrange basis `local` of element `j`
    /// at `x` (which need not lie in the element; the polynomial is extended).
    fn lagrange_local(&self, j: usize, local: usize, x: f64) -> (f64, f64) {
        let (a, b) = self.mesh.element(j);
        let h = b - a;
        let t = 2.0 * (x - a) / h - 1.0;
        let nodes = &self.local_nodes;
        let k = nodes.len();
        let ti = nodes[local];
        let mut value = 1.0;
        for (m, &tm) in nodes.iter().enumerate() {
            if m != local {
                value *= (t - tm) / (ti - tm);
            }
        }
        let mut deriv_t = 0.0;
        for m in 0..k {
            if m == local {
                continue;
            }
            let mut term = 1.0 / (ti - nodes[m]);
            for (r, &tr) in nodes.iter().enumerate() {
                if r != local && r != m {
                    term *= (t - tr) / (ti - tr);
                }
            }
            deriv_t += term;
        }
        (value, deriv_t * 2.0 / h)
    }

    /// Value and derivative at `x` of the basis function for local index
    /// `local` on element `j` (no support check).
    pub fn eval_local(&self, j: usize, local: usize, x: f64) -> (f64, f64) {
        match &self.kind {
            SpaceKind1D::P0 => (1.0, 0.0),
            SpaceKind1D::PCont { .. } => self.lagrange_local(j, local, x),
            SpaceKind1D::OptimalTest(data) => {
                debug_assert_eq!(local, 0);
                let (num, dnum) = data.numerator(j, x);
                let beta = data.beta.eval(x);
                if beta.abs() < 1e-300 {
                    // stagnation node itself: measure-zero, report 0
                    return (0.0, 0.0);
                }
                let dbeta = data.beta.deriv(x);
                let value = num / beta;
                let deriv = (dnum * beta - num * dbeta) / (beta * beta);
                (value, deriv)
            }
        }
    }

    /// Value and derivative of global basis function `dof` at `x`; zero
    /// outside its support. For `P0` elements are half-open on the right.
    pub fn eval(&self, dof: usize, x: f64) -> (f64, f64) {
        match &self.kind {
            SpaceKind1D::P0 => match self.mesh.locate(x) {
                Ok(j) if j == dof => (1.0, 0.0),
                _ => (0.0, 0.0),
            },
            SpaceKind1D::OptimalTest(_) => {
                let (lo, hi) = self.support(dof);
                match self.mesh.locate(x) {
                    Ok(j) if j >= lo && j <= hi => self.eval_local(dof, 0, x),
                    _ => (0.0, 0.0),
                }
            }
            SpaceKind1D::PCont { degree } => {
                let Ok(j) = self.mesh.locate(x) else { return (0.0, 0.0) };
                let node = self.node_of_dof(dof);
                let base = j * degree;
                if node < base || node > base + degree {
                    // shared node: x at the left end of element j also lies in
                    // element j-1 whose basis is continuous, so use it there
                    if j > 0 && node >= base - degree && node <= base && x == self.mesh.nodes()[j]
                    {
                        return self.eval_local(j - 1, node - (base - degree), x);
                    }
                    return (0.0, 0.0);
                }
                self.eval_local(j, node - base, x)
            }
        }
    }

    /// Evaluates the expansion `sum_d coeffs[d] * basis_d` at `x`.
    pub fn eval_expansion(&self, coeffs: &[f64], x: f64) -> (f64, f64) {
        let Ok(j) = self.mesh.locate(x) else { return (0.0, 0.0) };
        let mut value = 0.0;
        let mut deriv = 0.0;
        match &self.kind {
            SpaceKind1D::P0 => {
                value = coeffs[j];
            }
            SpaceKind1D::PCont { .. } => {
                for (local, dof) in self.element_dofs(j) {
                    let (v, d) = self.eval_local(j, local, x);
                    value += coeffs[dof] * v;
                    deriv += coeffs[dof] * d;
                }
            }
            SpaceKind1D::OptimalTest(_) => {
                for dof in 0..self.dof_count() {
                    let (lo, hi) = self.support(dof);
                    if j >= lo && j <= hi {
                        let (v, d) = self.eval_local(dof, 0, x);
                        value += coeffs[dof] * v;
                        deriv += coeffs[dof] * d;
                    }
                }
            }
        }
        (value, deriv)
    }
}

// ---------------------------------------------------------------------------
// 2-D spaces
// ---------------------------------------------------------------------------

/// Conforming piecewise-linear basis on a flow-aligned mesh, one function per
/// element, stored sparsely: `columns[d]` lists `(element, vertex values)`
/// over the support of basis `d`; `rows[t]` lists `(dof, vertex values)` of
/// the functions alive on element `t`.
#[derive(Debug, Clone)]
pub struct P1ConfData {
    pub columns: Vec<Vec<(usize, [f64; 3])>>,
    pub rows: Vec<Vec<(usize, [f64; 3])>>,
}

#[derive(Debug, Clone)]
pub enum SpaceKind2D {
    P0,
    P1Conf(Arc<P1ConfData>),
}

#[derive(Debug, Clone)]
pub struct Space2D {
    mesh: Arc<TriMesh2D>,
    kind: SpaceKind2D,
}

impl Space2D {
    pub fn p0(mesh: Arc<TriMesh2D>) -> Self {
        Space2D { mesh, kind: SpaceKind2D::P0 }
    }

    pub fn p1_conf(mesh: Arc<TriMesh2D>, data: Arc<P1ConfData>) -> Self {
        Space2D { mesh, kind: SpaceKind2D::P1Conf(data) }
    }

    pub fn mesh(&self) -> &Arc<TriMesh2D> {
        &self.mesh
    }

    pub fn kind(&self) -> &SpaceKind2D {
        &self.kind
    }

    pub fn dof_count(&self) -> usize {
        self.mesh.num_triangles()
    }

    /// Degrees of freedom alive on element `t` with their vertex values.
    pub fn element_dofs(&self, t: usize) -> Vec<(usize, [f64; 3])> {
        match &self.kind {
            SpaceKind2D::P0 => vec![(t, [1.0, 1.0, 1.0])],
            SpaceKind2D::P1Conf(data) => data.rows[t].clone(),
        }
    }

    /// Value and gradient at a point of the linear function with the given
    /// vertex values on element `t`.
    pub fn eval_linear(&self, t: usize, vertex_values: [f64; 3], p: [f64; 2]) -> (f64, [f64; 2]) {
        let [a, b, c] = self.mesh.triangle_coords(t);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        // gradients of barycentric coordinates
        let gl1 = [(c[1] - a[1]) / det, (a[0] - c[0]) / det];
        let gl2 = [(a[1] - b[1]) / det, (b[0] - a[0]) / det];
        let l1 = gl1[0] * (p[0] - a[0]) + gl1[1] * (p[1] - a[1]);
        let l2 = gl2[0] * (p[0] - a[0]) + gl2[1] * (p[1] - a[1]);
        let l0 = 1.0 - l1 - l2;
        let value = l0 * vertex_values[0] + l1 * vertex_values[1] + l2 * vertex_values[2];
        let grad = [
            (vertex_values[1] - vertex_values[0]) * gl1[0]
                + (vertex_values[2] - vertex_values[0]) * gl2[0],
            (vertex_values[1] - vertex_values[0]) * gl1[1]
                + (vertex_values[2] - vertex_values[0]) * gl2[1],
        ];
        (value, grad)
    }

    /// Value and gradient of basis `dof` at point `p` of element `t`.
    pub fn eval_on(&self, dof: usize, t: usize, p: [f64; 2]) -> (f64, [f64; 2]) {
        match &self.kind {
            SpaceKind2D::P0 => {
                if dof == t {
                    (1.0, [0.0, 0.0])
                } else {
                    (0.0, [0.0, 0.0])
                }
            }
            SpaceKind2D::P1Conf(data) => {
                match data.columns[dof].binary_search_by_key(&t, |e| e.0) {
                    Ok(i) => {
                        let (_, vals) = data.columns[dof][i];
                        self.eval_linear(t, vals, p)
                    }
                    Err(_) => (0.0, [0.0, 0.0]),
                }
            }
        }
    }
}
