//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the reverse sweep it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Compares backprop gradients of every parameter against central differences
/// with the given `step`. `build` must construct the same scalar loss every
/// time it is called with the same graph seed.
pub fn check_params<T, F>(params: &ParamSet<T>, step: f64, seed: u64, build: F) -> Result<Vec<GradCheck>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut g = Graph::with_seed(true, seed);
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).data()[0].as_f64())
    };
    let mut g = Graph::with_seed(true, seed);
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?.dense(params);

    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (id, entry) in params.iter() {
        let ana = analytic[id.index()].data();
        let mut diff_sq = 0.0;
        let mut ana_sq = 0.0;
        let mut num_sq = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..entry.value.numel() {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + T::lit(step);
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - T::lit(step);
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * step);
            let a = ana[i].as_f64();
            diff_sq += (a - num) * (a - num);
            ana_sq += a * a;
            num_sq += num * num;
            max_abs = max_abs.max((a - num).abs());
        }
        let denom = ana_sq.sqrt().max(num_sq.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
        out.push(GradCheck {
            name: entry.name.clone(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    Ok(out)
}
