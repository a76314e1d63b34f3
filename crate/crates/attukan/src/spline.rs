//! Uniform B-spline basis evaluation.
//!
//! The learnable activations of the KAN layers are linear combinations of a
//! fixed B-spline basis on a uniform grid. `SplineSpec` describes the grid:
//! `grid_count` intervals over `[grid_min, grid_max]`, knots extended
//! `order` deep on both sides, piecewise polynomials of degree `order`.
//! The basis therefore has `grid_count + order` members, of which at most
//! `order + 1` are nonzero at any point.
//!
//! Inputs outside the grid domain are clamped to the boundary before
//! evaluation, which keeps the basis a partition of unity everywhere and
//! makes the activation constant (zero derivative) beyond the grid.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplineSpec {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_count: usize,
    pub order: usize,
}

impl Default for SplineSpec {
    fn default() -> Self {
        SplineSpec {
            grid_min: -2.0,
            grid_max: 2.0,
            grid_count: 5,
            order: 3,
        }
    }
}

impl SplineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_min < self.grid_max) {
            return Err(Error::invalid(format!(
                "spline grid_min {} must be below grid_max {}",
                self.grid_min, self.grid_max
            )));
        }
        if self.grid_count < 1 || self.order < 1 {
            return Err(Error::invalid(
                "spline grid_count and order must both be at least 1",
            ));
        }
        Ok(())
    }

    /// Number of basis functions: grid_count + order.
    pub fn basis_len(&self) -> usize {
        self.grid_count + self.order
    }

    /// Knot spacing of the uniform grid.
    pub fn step(&self) -> f64 {
        (self.grid_max - self.grid_min) / self.grid_count as f64
    }

    /// Knot `t_i` for `i` in `0 ..= grid_count + 2*order`; knot index 0 sits
    /// `order` steps below `grid_min`.
    pub fn knot(&self, i: usize) -> f64 {
        self.grid_min + (i as f64 - self.order as f64) * self.step()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.grid_min, self.grid_max)
    }

    /// Interval index of `x` within the grid, in `0 .. grid_count`, with the
    /// right boundary folded into the last interval.
    fn span(&self, x: f64) -> usize {
        let h = self.step();
        let raw = ((x - self.grid_min) / h).floor() as isize;
        raw.clamp(0, self.grid_count as isize - 1) as usize
    }
}

/// Nonzero window of the basis at a point: the `order + 1` values
/// `B_{first}, ..., B_{first + order}` of the full `basis_len()` vector.
#[derive(Debug, Clone)]
pub struct BasisWindow {
    pub first: usize,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
    /// True when the raw input was clamped to the grid boundary; the
    /// derivative with respect to the raw input is then zero.
    pub clamped: bool,
}

/// Evaluate the nonzero basis values and first derivatives at `x` with the
/// triangular Cox–de Boor scheme.
pub fn basis_window(x: f64, spec: &SplineSpec) -> BasisWindow {
    let k = spec.order;
    let xc = spec.clamp(x);
    let clamped = xc != x;
    let interval = spec.span(xc);
    // In knot coordinates, the active span is `interval + k`: the basis
    // functions B_{interval} .. B_{interval+k} are the nonzero ones.
    let span = interval + k;

    // values[j] holds B_{span-k+j, d} for the current degree d.
    let mut values = vec![0.0; k + 1];
    let mut lower = vec![0.0; k + 1]; // degree k-1 table for the derivative
    values[0] = 1.0;
    let mut left = vec![0.0; k + 1];
    let mut right = vec![0.0; k + 1];
    for d in 1..=k {
        left[d] = xc - spec.knot(span + 1 - d);
        right[d] = spec.knot(span + d) - xc;
        if d == k {
            lower[..k].copy_from_slice(&values[..k]);
        }
        let mut saved = 0.0;
        for r in 0..d {
            let denom = right[r + 1] + left[d - r];
            let term = if denom.abs() < 1e-300 { 0.0 } else { values[r] / denom };
            values[r] = saved + right[r + 1] * term;
            saved = left[d - r] * term;
        }
        values[d] = saved;
    }

    // B'_{i,k}(x) = k * (B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1})).
    // `lower[j]` is B_{span-k+1+j, k-1}; on the uniform grid every denominator
    // is k * step.
    let mut derivs = vec![0.0; k + 1];
    if !clamped {
        let inv = 1.0 / spec.step();
        for j in 0..=k {
            let a = if j >= 1 { lower[j - 1] } else { 0.0 };
            let b = if j < k { lower[j] } else { 0.0 };
            derivs[j] = (a - b) * inv;
        }
    }

    BasisWindow {
        first: interval,
        values,
        derivs,
        clamped,
    }
}

/// Full basis vector of length `spec.basis_len()` at `x`.
pub fn bspline_basis(x: f64, spec: &SplineSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let w = basis_window(x, spec);
    let mut out = vec![0.0; spec.basis_len()];
    for (j, v) in w.values.iter().enumerate() {
        out[w.first + j] = *v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive Cox–de Boor evaluation, kept deliberately naive and
    /// structurally unrelated to `basis_window` so it can serve as an oracle.
    fn naive_basis(x: f64, spec: &SplineSpec) -> Vec<f64> {
        fn b(i: usize, d: usize, x: f64, spec: &SplineSpec) -> f64 {
            if d == 0 {
                // Half-open intervals; the grid maximum belongs to the final
                // interior interval only.
                let last_interior = spec.order + spec.grid_count - 1;
                if x == spec.grid_max {
                    return if i == last_interior { 1.0 } else { 0.0 };
                }
                let lo = spec.knot(i);
                let hi = spec.knot(i + 1);
                if x >= lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            } else {
                let t_i = spec.knot(i);
                let t_id = spec.knot(i + d);
                let t_i1 = spec.knot(i + 1);
                let t_id1 = spec.knot(i + d + 1);
                let mut acc = 0.0;
                if t_id > t_i {
                    acc += (x - t_i) / (t_id - t_i) * b(i, d - 1, x, spec);
                }
                if t_id1 > t_i1 {
                    acc += (t_id1 - x) / (t_id1 - t_i1) * b(i + 1, d - 1, x, spec);
                }
                acc
            }
        }
        let xc = spec.clamp(x);
        (0..spec.basis_len())
            .map(|i| b(i, spec.order, xc, spec))
            .collect()
    }

    #[test]
    fn matches_naive_recursion_oracle() {
        let spec = SplineSpec {
            grid_min: -1.0,
            grid_max: 1.0,
            grid_count: 5,
            order: 3,
        };
        // Includes the documented probe point x = 0.3 on grid [-1, 1], G=5, k=3.
        for &x in &[0.3, -1.0, 1.0, -0.999, 0.0, 0.77, -0.41, 2.5, -3.0] {
            let fast = bspline_basis(x, &spec).unwrap();
            let slow = naive_basis(x, &spec);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_hats_peak_at_interior_nodes() {
        let spec = SplineSpec {
            grid_min: 0.0,
            grid_max: 4.0,
            grid_count: 4,
            order: 1,
        };
        // Interior grid nodes x = 1, 2, 3: exactly one basis entry is 1.
        for node in 1..4 {
            let basis = bspline_basis(node as f64, &spec).unwrap();
            let ones = basis.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count();
            let zeros = basis.iter().filter(|v| v.abs() < 1e-12).count();
            assert_eq!(ones, 1);
            assert_eq!(zeros, basis.len() - 1);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let spec = SplineSpec::default();
        for &x in &[-1.7, -0.3, 0.0, 0.9, 1.99] {
            let w = basis_window(x, &spec);
            let eps = 1e-6;
            let lo = bspline_basis(x - eps, &spec).unwrap();
            let hi = bspline_basis(x + eps, &spec).unwrap();
            for j in 0..w.values.len() {
                let i = w.first + j;
                let fd = (hi[i] - lo[i]) / (2.0 * eps);
                assert!(
                    (w.derivs[j] - fd).abs() < 1e-6,
                    "x={x} basis {i}: analytic {} vs fd {fd}",
                    w.derivs[j]
                );
            }
        }
    }

    #[test]
    fn clamped_points_report_zero_derivative() {
        let spec = SplineSpec::default();
        let w = basis_window(5.0, &spec);
        assert!(w.clamped);
        assert!(w.derivs.iter().all(|d| *d == 0.0));
        let sum: f64 = w.values.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_spec() {
        let bad = SplineSpec {
            grid_min: 1.0,
            grid_max: 1.0,
            grid_count: 5,
            order: 3,
        };
        assert!(bspline_basis(0.0, &bad).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -2.0f64..2.0) {
            let spec = SplineSpec::default();
            let basis = bspline_basis(x, &spec).unwrap();
            let sum: f64 = basis.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(basis.iter().all(|v| *v >= 0.0));
            let nonzero = basis.iter().filter(|v| **v > 0.0).count();
            prop_assert!(nonzero <= spec.order + 1);
        }
    }
}
