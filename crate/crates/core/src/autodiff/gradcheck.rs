//! Central finite-difference verification of tape gradients.
//!
//! Only meaningful in f64: with step h = 1e-5 the truncation error is
//! O(h^2) and the rounding error ~1e-11, both far below the tolerances
//! asserted in tests. f32 finite differences are dominated by rounding.

use super::array::{DiffArray, Scalar};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of one [`check_gradients`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, worst relative error over its checked coordinates)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

/// Relative error with a matched-zero convention: two gradients that are
/// both tiny count as agreeing, everything else is |a-b| / max(|a|,|b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    let tiny = 1e-6;
    if a.abs() < tiny && b.abs() < tiny {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Compare tape gradients of a scalar-valued computation against central
/// finite differences, coordinate by coordinate.
///
/// `f` must be deterministic: it is re-evaluated 2x per checked coordinate
/// with one parameter entry nudged by ±h. `max_coords` caps the number of
/// coordinates checked per parameter (evenly strided), `None` checks all.
pub fn check_gradients<T, F>(
    params: &[(String, DiffArray<T>)],
    f: F,
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[(String, DiffArray<T>)]| -> Result<(T, Vec<Option<Vec<T>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|(_, a)| tape.leaf(a)).collect();
        let root = f(&mut tape, &vars)?;
        if tape.value(root).len() != 1 {
            return Err(Error::Invalid {
                what: "check_gradients",
                expected: "scalar-valued computation".into(),
                got: format!("{:?}", tape.shape(root)),
            });
        }
        tape.backward(root)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        Ok((tape.scalar_value(root), grads))
    };

    let (base_value, grads) = eval(params)?;
    if !base_value.is_finite() {
        return Err(Error::NonFinite {
            place: "check_gradients base value".into(),
        });
    }

    let mut work: Vec<(String, DiffArray<T>)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;

    for pi in 0..params.len() {
        let (name, arr) = &params[pi];
        if !arr.requires_grad {
            continue;
        }
        let n = arr.numel();
        let analytic = grads[pi].clone().unwrap_or_else(|| vec![T::ZERO; n]);
        let coords: Vec<usize> = match max_coords {
            Some(cap) if cap < n => {
                let stride = n / cap;
                (0..cap).map(|i| i * stride).collect()
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &ci in &coords {
            let orig = params[pi].1.data()[ci];
            let hh = T::from_f64(h);

            work[pi].1.data_mut()[ci] = orig + hh;
            let (fp, _) = eval_value_only(&work, &f)?;
            work[pi].1.data_mut()[ci] = orig - hh;
            let (fm, _) = eval_value_only(&work, &f)?;
            work[pi].1.data_mut()[ci] = orig;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    place: format!("finite difference of parameter '{name}'"),
                });
            }
            let numeric = (fp.to_f64() - fm.to_f64()) / (2.0 * h);
            let a = analytic[ci].to_f64();
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    place: format!("tape gradient of parameter '{name}'"),
                });
            }
            worst = worst.max(rel_err(a, numeric));
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
    })
}

fn eval_value_only<T, F>(params: &[(String, DiffArray<T>)], f: &F) -> Result<(T, ())>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, a)| tape.leaf(a)).collect();
    let root = f(&mut tape, &vars)?;
    Ok((tape.scalar_value(root), ()))
}
