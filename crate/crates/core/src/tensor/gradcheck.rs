use super::{Result, Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely: the relative
/// error denominator is `max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn empty() -> Self {
        GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 }
    }

    /// Error of one coordinate.
    pub fn compare(analytic: f64, numeric: f64) -> Self {
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        GradCheckReport { max_rel_err: abs / denom, max_abs_err: abs, checked: 1 }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(tape.scalar(out))
}

/// Compares tape gradients with central finite differences
/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every coordinate of every input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, h, 1.0)
}

/// As [`grad_check_inputs`] with the analytic gradient multiplied by
/// `analytic_scale`; a scale ≠ 1 simulates a broken backward pass.
pub(crate) fn grad_check_scaled<F>(f: F, inputs: &[Tensor], h: f64, analytic_scale: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::domain("grad_check", format!("step {h} outside (0, 1e-2]")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };

    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..work[which].len() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&f, &work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&f, &work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.merge(GradCheckReport::compare(analytic_scale * grad[i], numeric));
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_inputs`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    grad_check_inputs(|tape: &mut Tape<'_>, vars: &[Var]| f(tape, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
        assert!(grad_check(|t, v| t.sum(v), &x, 0.1).is_err());
        let err = grad_check(|t, v| t.scale(v, 2.0), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_abs_err < 1e-8, "{r:?}");
    }
}
