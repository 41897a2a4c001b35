use super::{DiffError, Tape, Tensor, Var};

/// Largest relative disagreement between the tape's adjoint of `f` at `point`
/// and a central difference with step `h`:
/// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

/// [`gradient_check`] over several input tensors at once.
pub fn gradient_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |pts: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars = pts
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item().ok_or_else(|| DiffError::NotScalar {
            shape: tape.shape(out).to_vec(),
        })
    };

    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..points[pi].numel() {
            let x0 = points[pi].data()[i];
            probe[pi].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
