use super::field::VelocityField;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn axpy(y: &Matrix, h: f64, k: &Matrix) -> Matrix {
    let mut out = y.clone();
    out.add_scaled(k, h);
    out
}

/// Fixed-step RK4 from `t = 0` to `t = 1`. `on_step` sees every state,
/// including the initial one.
pub fn integrate(
    mut field: impl FnMut(&Matrix, f64) -> Result<Matrix>,
    y0: &Matrix,
    steps: usize,
    mut on_step: impl FnMut(usize, &Matrix),
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Config(
            "ODE integration needs at least one step".into(),
        ));
    }
    let h = 1.0 / steps as f64;
    let mut y = y0.clone();
    on_step(0, &y);
    for s in 0..steps {
        let t = s as f64 * h;
        let k1 = field(&y, t)?;
        let k2 = field(&axpy(&y, 0.5 * h, &k1), t + 0.5 * h)?;
        let k3 = field(&axpy(&y, 0.5 * h, &k2), t + 0.5 * h)?;
        let k4 = field(&axpy(&y, h, &k3), t + h)?;
        for (((o, a), b), (c, d)) in y
            .as_mut_slice()
            .iter_mut()
            .zip(k1.as_slice())
            .zip(k2.as_slice())
            .zip(k3.as_slice().iter().zip(k4.as_slice()))
        {
            *o += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
        }
        if !y.is_finite() {
            return Err(Error::Integration { step: s + 1 });
        }
        on_step(s + 1, &y);
    }
    Ok(y)
}

/// Integrates `dy/dt = v_t(y | x)` from the noise draws `z` at `t = 0` to
/// `t = 1`, row by row.
pub fn push_forward(vf: &VelocityField, x: &Matrix, z: &Matrix, steps: usize) -> Result<Matrix> {
    push_forward_with(vf, x, z, steps, |_, _| {})
}

/// [`push_forward`] returning every intermediate state.
pub fn push_forward_trajectory(
    vf: &VelocityField,
    x: &Matrix,
    z: &Matrix,
    steps: usize,
) -> Result<Vec<Matrix>> {
    let mut states = Vec::with_capacity(steps + 1);
    push_forward_with(vf, x, z, steps, |_, y| states.push(y.clone()))?;
    Ok(states)
}

fn push_forward_with(
    vf: &VelocityField,
    x: &Matrix,
    z: &Matrix,
    steps: usize,
    on_step: impl FnMut(usize, &Matrix),
) -> Result<Matrix> {
    if x.rows() != z.rows() {
        return Err(Error::shape("push_forward batch", x.rows(), z.rows()));
    }
    let b = x.rows();
    integrate(|y, t| vf.forward(y, &vec![t; b], x), z, steps, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_exact() {
        let z = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.25]]).unwrap();
        let y = integrate(|_, _| Ok(c.clone()), &z, 7, |_, _| {}).unwrap();
        let mut expected = z.clone();
        expected.add_scaled(&c, 1.0);
        assert!(y.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn linear_field_matches_exponential() {
        let z = Matrix::from_rows(&[[1.0], [-0.3]]).unwrap();
        let y = integrate(|y, _| Ok(y.clone()), &z, 100, |_, _| {}).unwrap();
        let e = std::f64::consts::E;
        assert!((y[(0, 0)] - e).abs() < 1e-6);
        assert!((y[(1, 0)] + 0.3 * e).abs() < 1e-6);
    }

    #[test]
    fn non_finite_state_names_the_step() {
        let z = Matrix::filled(1, 1, 1.0);
        let err = integrate(|y, _| Ok(y.map(|v| v * 1e300)), &z, 10, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 1 | 2 }), "{err}");
    }
}
