use super::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h`.
///
/// `f` records its computation on the supplied tape, reading the parameters
/// from the given leaf, and returns the scalar output node.
pub fn check_gradients<F>(f: F, params: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("step must be positive, got {h}")));
    }
    let eval = |theta: Vec<f64>, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(theta);
        let out = f(&mut tape, p);
        let v = tape.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric {
                coordinate,
                detail: format!("function value {v}"),
            })
        }
    };

    let mut tape = Tape::new();
    let p = tape.param(params.to_vec());
    let out = f(&mut tape, p);
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numeric {
            coordinate: 0,
            detail: "non-finite value at the base point".into(),
        });
    }
    let analytic = tape.backward(out).wrt(p);
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            coordinate: i,
            detail: "non-finite analytic gradient".into(),
        });
    }

    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    let mut worst_coordinate = 0;
    for i in 0..params.len() {
        let mut plus = params.to_vec();
        plus[i] += h;
        let mut minus = params.to_vec();
        minus[i] -= h;
        let n = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let rel = (analytic[i] - n).abs() / n.abs().max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coordinate = i;
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    })
}
