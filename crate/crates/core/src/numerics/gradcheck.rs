//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::Scalar;

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Worst coordinate found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<S> {
    pub max_rel_error: S,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: S,
    pub numeric: S,
    pub coordinates: usize,
    /// Value of `f` at the unperturbed inputs.
    pub value: S,
    /// `(analytic, numeric)` for every coordinate, inputs in order.
    pub entries: Vec<(S, S)>,
    pub step: S,
}

impl<S: Scalar> GradCheckReport<S> {
    /// Smallest derivative a central difference of `f` can resolve: one
    /// machine epsilon of `|f|` spread over the `2h` stencil, doubled.
    pub fn resolution(&self) -> S {
        S::epsilon() * self.value.abs().max(S::one()) / self.step
    }

    /// Largest discrepancy beyond `tol` relative error, in units of
    /// [`resolution`](Self::resolution). Values near or below a few units mean
    /// every mismatch is explained by rounding of `f` itself.
    pub fn excess_over_resolution(&self, tol: S) -> S {
        let floor = S::lit(DENOM_FLOOR);
        let res = self.resolution();
        self.entries
            .iter()
            .map(|&(a, n)| ((a - n).abs() - tol * floor.max(a.abs() + n.abs())).max(S::zero()) / res)
            .fold(S::zero(), S::max)
    }

    /// Coordinates whose relative error reaches `tol`.
    pub fn count_above(&self, tol: S) -> usize {
        let floor = S::lit(DENOM_FLOOR);
        self.entries.iter().filter(|&&(a, n)| (a - n).abs() / floor.max(a.abs() + n.abs()) >= tol).count()
    }
}

fn evaluate<S, F>(f: &F, xs: &[Tensor<S>]) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let value = g.item(root)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(value)
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences and reports the worst relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check_many<S, F>(f: F, xs: &[Tensor<S>], h: S) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let value = g.item(root)?;
    let grads = g.backward(root)?;

    let floor = S::lit(DENOM_FLOOR);
    let two_h = h + h;
    let mut report = GradCheckReport {
        max_rel_error: S::zero(),
        worst: (0, 0),
        analytic: S::zero(),
        numeric: S::zero(),
        coordinates: 0,
        value,
        entries: Vec::with_capacity(xs.iter().map(Tensor::len).sum()),
        step: h,
    };
    let mut probe: Vec<Tensor<S>> = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        for i in 0..xs[t].len() {
            let analytic = grads.get(*var).map_or(S::zero(), |gr| gr.data()[i]);
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / two_h;
            let err = (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs());
            report.coordinates += 1;
            report.entries.push((analytic, numeric));
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (t, i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`]; returns the max relative error.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}
