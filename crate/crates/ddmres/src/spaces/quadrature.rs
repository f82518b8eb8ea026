//! Quadrature rules: Gauss-Legendre / Gauss-Lobatto on intervals, symmetric
//! and collapsed-square rules on triangles, plus adaptive and graded drivers
//! for non-smooth integrands.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights on the reference interval `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn legendre_value_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for m in 1..n {
        let m_f = m as f64;
        let p2 = ((2.0 * m_f + 1.0) * x * p1 - m_f * p0) / (m_f + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (p0 - x * p1) / (1.0 - x * x);
    (p1, dp)
}

fn compute_gauss_legendre(n: usize) -> GaussRule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_value_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_value_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    GaussRule { nodes, weights }
}

fn compute_gauss_lobatto(n: usize) -> GaussRule {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    nodes[0] = -1.0;
    nodes[n - 1] = 1.0;
    let m = n - 1; // interior nodes are roots of P_m'
    for i in 1..n - 1 {
        // initial guess: Chebyshev-like spacing
        let mut x = (std::f64::consts::PI * (m as f64 - i as f64) / m as f64).cos();
        for _ in 0..100 {
            // Newton on f = P_m'(x); f' from the Legendre ODE:
            // (1-x^2) P'' = 2x P' - m(m+1) P  =>  P'' = (2x P' - m(m+1) P)/(1-x^2)
            let (p, dp) = legendre_value_deriv(m, x);
            let ddp = (2.0 * x * dp - (m * (m + 1)) as f64 * p) / (1.0 - x * x);
            let dx = dp / ddp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let (p, _) = legendre_value_deriv(m, nodes[i]);
        weights[i] = 2.0 / ((m * (m + 1)) as f64 * p * p);
    }
    GaussRule { nodes, weights }
}

fn rule_cache(
    which: &'static OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>>,
    n: usize,
    compute: fn(usize) -> GaussRule,
) -> Arc<GaussRule> {
    let cache = which.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry(n).or_insert_with(|| Arc::new(compute(n))).clone()
}

static GAUSS_CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();
static LOBATTO_CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();

/// `n`-point Gauss-Legendre rule on `[-1, 1]`; exact through degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> Arc<GaussRule> {
    rule_cache(&GAUSS_CACHE, n, compute_gauss_legendre)
}

/// `n`-point Gauss-Lobatto rule on `[-1, 1]` (`n >= 2`, includes endpoints);
/// exact through degree `2n - 3`.
pub fn gauss_lobatto(n: usize) -> Arc<GaussRule> {
    rule_cache(&LOBATTO_CACHE, n, compute_gauss_lobatto)
}

/// Integrates `f` over `[a, b]` with one `n`-point Gauss-Legendre panel.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let rule = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        s += w * f(mid + half * x);
    }
    s * half
}

/// Adaptive Gauss integration by recursive bisection (10-point panels),
/// relative tolerance `rel_tol` against the running whole-interval scale.
pub fn integrate_adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let whole = integrate(f, a, b, 10);
    let scale = whole.abs().max(1e-30);
    // the budget bounds the panel count when the integrand is dominated by
    // roundoff noise that can never meet the tolerance
    let mut budget: usize = 1 << 14;
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol_abs: f64,
        depth: usize,
        budget: &mut usize,
    ) -> f64 {
        let mid = 0.5 * (a + b);
        let left = integrate(f, a, mid, 10);
        let right = integrate(f, mid, b, 10);
        let err = (left + right - whole).abs();
        let floor = 1e-15 * (left.abs() + right.abs() + whole.abs());
        if err <= tol_abs.max(floor) || depth >= 48 || *budget == 0 {
            return left + right;
        }
        *budget -= 1;
        recurse(f, a, mid, left, 0.5 * tol_abs, depth + 1, budget)
            + recurse(f, mid, b, right, 0.5 * tol_abs, depth + 1, budget)
    }
    recurse(f, a, b, whole, rel_tol * scale, 0, &mut budget)
}

/// Integrates `f` over `[a, b]` when `f` is singular (or merely non-smooth) at
/// one endpoint: dyadic grading with `levels` subdivisions toward the singular
/// endpoint, `n`-point Gauss on each graded panel.
pub fn integrate_graded(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    singular_at_left: bool,
    levels: usize,
    n: usize,
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let len = b - a;
    // stop grading once panels approach the float spacing at the singular
    // endpoint, else the innermost panel degenerates onto the singularity
    let endpoint = if singular_at_left { a } else { b };
    let min_width = 1e3 * f64::EPSILON * endpoint.abs().max(1e-300);
    let mut s = 0.0;
    let mut frac = 1.0;
    for level in 0..levels {
        let mut next = if level + 1 == levels { 0.0 } else { frac * 0.5 };
        if next * len < min_width {
            next = 0.0;
        }
        let (lo, hi) = if singular_at_left {
            (a + next * len, a + frac * len)
        } else {
            (b - frac * len, b - next * len)
        };
        s += integrate(f, lo, hi, n);
        if next == 0.0 {
            break;
        }
        frac = next;
    }
    s
}

/// Quadrature rule on the reference triangle `(0,0)-(1,0)-(0,1)` stored as
/// reference coordinates with weights summing to 1; the physical integral is
/// `|T| * sum_i w_i f(x_i)`.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Symmetric 6-point rule, exact through degree 4.
pub fn triangle_rule_degree4() -> TriangleRule {
    let a1 = 0.445948490915965;
    let w1 = 0.223381589678011;
    let a2 = 0.091576213509771;
    let w2 = 0.109951743655322;
    let orbit = |a: f64| vec![[a, a], [1.0 - 2.0 * a, a], [a, 1.0 - 2.0 * a]];
    let mut points = orbit(a1);
    points.extend(orbit(a2));
    let weights = vec![w1, w1, w1, w2, w2, w2];
    TriangleRule { points, weights, degree: 4 }
}

/// Rule exact through `degree`: the symmetric 6-point rule for `degree <= 4`,
/// otherwise a collapsed-square tensor Gauss rule.
pub fn triangle_rule(degree: usize) -> TriangleRule {
    if degree <= 4 {
        return triangle_rule_degree4();
    }
    // Duffy transform (x, y) = (u, v (1 - u)), Jacobian (1 - u); a polynomial
    // of total degree d pulls back to degree <= d + 1 per variable.
    let n = degree / 2 + 1;
    let rule = gauss_legendre(n);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (u_hat, wu) in rule.nodes.iter().zip(&rule.weights) {
        let u = 0.5 * (u_hat + 1.0);
        for (v_hat, wv) in rule.nodes.iter().zip(&rule.weights) {
            let v = 0.5 * (v_hat + 1.0);
            points.push([u, v * (1.0 - u)]);
            // reference-square weight (1/4) * Jacobian (1-u), normalized by the
            // reference-triangle area 1/2.
            weights.push(wu * wv * 0.25 * (1.0 - u) / 0.5);
        }
    }
    TriangleRule { points, weights, degree }
}
