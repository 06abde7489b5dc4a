use super::{Result, Scalar, Tape, Tensor, Var};

/// Central-difference validation of reverse-mode gradients for a scalar
/// function of one tensor. Returns the maximum over coordinates of
///
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<F, G>(f: G, x: &Tensor<F>, step: F) -> Result<F>
where
    F: Scalar,
    G: Fn(&Tape<F>, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Multi-input variant of [`finite_diff_check`]; perturbs every coordinate
/// of every input.
pub fn finite_diff_check_multi<F, G>(f: G, inputs: &[Tensor<F>], step: F) -> Result<F>
where
    F: Scalar,
    G: Fn(&Tape<F>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<F>]| -> Result<F> {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        tape.value(out).item()
    };

    // Analytic gradients in one reverse pass.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    if tape.numel(out) != 1 {
        return Err(super::NumericsError::Contract(
            "finite_diff_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v).map_or_else(|| vec![F::zero(); t.numel()], |g| g.data().to_vec())
        })
        .collect();

    let tiny = F::lit(1e-12);
    let two = F::lit(2.0);
    let mut worst = F::zero();
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let base = input.data()[k];
            work[i].data_mut()[k] = base + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = base - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = base;

            let numeric = (plus - minus) / (two * step);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + tiny);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
