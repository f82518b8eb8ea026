//! Quasi-interpolation onto continuous piecewise polynomials: nodal linear
//! interpolation plus one quadratic bubble per element tuned to preserve the
//! element mean. The image is piecewise quadratic, so the target space needs
//! degree at least two. Node interpolation plus mean preservation make the
//! operator commute with the advection-reaction form against piecewise
//! constants when the coefficients are constant per element.

use super::{BoundaryConstraint1D, Space1D, SpaceKind1D};
use crate::spaces::quadrature;
use crate::{DdmresError, Result};
use nalgebra::DVector;

/// Interpolates `v` into `target` (a continuous space of degree >= 2),
/// returning the coefficient vector of the interpolant. Errors if the target
/// degree is too low or if `v` violates the target's endpoint constraint.
pub fn fortin_interpolate(target: &Space1D, v: &dyn Fn(f64) -> f64) -> Result<DVector<f64>> {
    let degree = match target.kind() {
        SpaceKind1D::PCont { degree } if *degree >= 2 => *degree,
        SpaceKind1D::PCont { degree } => {
            return Err(DdmresError::DegreeTooLow {
                got: *degree,
                context: "quasi-interpolation needs a quadratic bubble per element".into(),
            })
        }
        _ => {
            return Err(DdmresError::DegreeTooLow {
                got: 0,
                context: "quasi-interpolation targets continuous Lagrange spaces".into(),
            })
        }
    };
    let mesh = target.mesh().clone();
    let (a0, b0) = mesh.domain();
    let scale = 1.0 + v(0.5 * (a0 + b0)).abs();
    match target.constraint() {
        BoundaryConstraint1D::VanishLeft if v(a0).abs() > 1e-10 * scale => {
            return Err(DdmresError::NonconformingTestSpace(format!(
                "input value {:e} at the constrained left endpoint",
                v(a0)
            )))
        }
        BoundaryConstraint1D::VanishRight if v(b0).abs() > 1e-10 * scale => {
            return Err(DdmresError::NonconformingTestSpace(format!(
                "input value {:e} at the constrained right endpoint",
                v(b0)
            )))
        }
        _ => {}
    }

    let mut coeffs = DVector::zeros(target.dof_count());
    for j in 0..mesh.num_elements() {
        let (a, b) = mesh.element(j);
        let h = b - a;
        let va = v(a);
        let vb = v(b);
        let lin = |x: f64| va + (vb - va) * (x - a) / h;
        // bubble coefficient restoring the element mean:
        // integral of (x-a)(x-b) over the element is -h^3/6
        let defect = quadrature::integrate_adaptive(&|x| v(x) - lin(x), a, b, 1e-13);
        let alpha = -6.0 * defect / (h * h * h);
        for (local, dof) in target.element_dofs(j) {
            let x = element_node(target, j, local, degree);
            coeffs[dof] = lin(x) + alpha * (x - a) * (x - b);
        }
    }
    Ok(coeffs)
}

fn element_node(target: &Space1D, j: usize, local: usize, degree: usize) -> f64 {
    let (a, b) = target.mesh().element(j);
    if local == 0 {
        a
    } else if local == degree {
        b
    } else {
        let t = quadrature::gauss_lobatto(degree + 1).nodes[local];
        0.5 * (a + b) + 0.5 * (b - a) * t
    }
}
