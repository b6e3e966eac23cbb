use super::{Array, AutodiffError, Tape, Var};

/// Floor for the denominator of the relative error.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(tensor, flat index)` of the coordinate with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences `(f(p+eps) − f(p−eps)) / 2eps`, one coordinate at a time.
///
/// `f` builds the graph on a fresh tape from leaves holding `params` and
/// returns the scalar root.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Array],
    eps: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Contract(format!("eps must be positive, got {eps}")));
    }

    let evaluate = |values: &[Array]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|a| tape.leaf_ref(a)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let (base, analytic) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|a| tape.leaf_ref(a)).collect();
        let root = f(&mut tape, &vars)?;
        let grads = tape.backward(root)?;
        let analytic: Vec<Array> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
        (tape.value(root).item(), analytic)
    };
    let again = evaluate(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(AutodiffError::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut work: Vec<Array> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates: 0,
        pass: true,
    };
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = evaluate(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = evaluate(&work)?;
            work[t].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((t, i));
            }
            if !(rel < rel_tol) {
                report.pass = false;
            }
        }
    }
    Ok(report)
}
