//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::dd::Dd;
use crate::diff::float::Float;
use crate::diff::graph::{Graph, Var};
use crate::diff::params::ParameterStore;
use crate::error::{Error, Result};

/// A scalar loss that can be built at any precision.
pub trait Objective {
    fn loss<T: Float>(&self, params: &ParameterStore<T>, g: &mut Graph<T>) -> Result<Var>;
}

/// Precision used to evaluate the finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumericPrecision {
    /// Same float type as the analytic gradient.
    Same,
    /// Always 64-bit, so a 32-bit gradient is checked against a reference
    /// free of 32-bit cancellation noise.
    F64,
    /// Double-double, for references free of 64-bit cancellation noise.
    DoubleDouble,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step is `eps * max(1, |theta|)`.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `usize::MAX` checks all.
    pub coords_per_param: usize,
    pub seed: u64,
    pub numeric: NumericPrecision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-3, coords_per_param: 16, seed: 0, numeric: NumericPrecision::F64 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// (parameter, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval<T: Float, O: Objective>(obj: &O, params: &ParameterStore<T>) -> Result<T> {
    let mut g = Graph::inference();
    let loss = obj.loss(params, &mut g)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::contract("objective must be scalar"));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(x)
}

/// Central difference divided by the step actually taken in `T`.
fn numeric_grad<T: Float, O: Objective>(obj: &O, params: &mut ParameterStore<T>, name: &str, i: usize, h: f64) -> Result<f64> {
    let orig = params.get(name).expect("checked").data()[i];
    let set = |p: &mut ParameterStore<T>, x: T| p.get_mut(name).expect("checked").data_mut()[i] = x;
    let (plus, minus) = (orig + T::from_f64_lossy(h), orig - T::from_f64_lossy(h));
    set(params, plus);
    let up = eval(obj, params);
    set(params, minus);
    let down = eval(obj, params);
    set(params, orig);
    Ok(((up? - down?) / (plus - minus)).to_f64_lossy())
}

/// Maximum relative error between tape gradients and central differences
/// over sampled coordinates of every parameter.
pub fn grad_check<T: Float, O: Objective>(obj: &O, params: &ParameterStore<T>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = obj.loss(params, &mut g)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let grads = g.backward(loss)?.for_store(params);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work_same = params.clone();
    let mut work_f64 = params.cast::<f64>();
    let mut work_dd = match opts.numeric {
        NumericPrecision::DoubleDouble => Some(params.cast::<Dd>()),
        _ => None,
    };
    let mut report = GradCheckReport::default();
    for (name, t) in params.iter() {
        let n = t.numel();
        let idx: Vec<usize> = if opts.coords_per_param >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let theta = t.data()[i].to_f64_lossy();
            let h = opts.eps * theta.abs().max(1.0);
            let numeric = match opts.numeric {
                NumericPrecision::Same => numeric_grad(obj, &mut work_same, name, i, h)?,
                NumericPrecision::F64 => numeric_grad(obj, &mut work_f64, name, i, h)?,
                NumericPrecision::DoubleDouble => numeric_grad(obj, work_dd.as_mut().expect("cast above"), name, i, h)?,
            };
            let analytic = grads[name].data()[i].to_f64_lossy();
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name.to_string(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}
