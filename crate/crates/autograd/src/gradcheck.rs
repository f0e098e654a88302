//! Central-difference gradient oracle.

use crate::error::{AutogradError, Result};
use crate::scalar::Scalar;
use crate::tape::{ParamKey, Tape, Var};
use crate::tensor::Tensor;

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AutogradError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item().as_f64())
}

/// Maximum elementwise relative error between reverse-mode gradients and
/// central differences with step `h`. The denominator is
/// `max(|analytic|, |numeric|, floor)`, where `floor` sits 1e5 times above
/// the rounding noise of a difference quotient, `eps * max(|f|, 1) / h`.
/// Without it, gradients that are exactly zero compare against pure noise.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutogradError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        vars.push(tape.param(p, ParamKey::new(0, i as u32))?);
    }
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let floor = 1e5 * T::epsilon().as_f64() * first.abs().max(1.0) / h;
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamKey::new(0, i as u32)).expect("registered");
        for j in 0..p.len() {
            let orig = p.data()[j];
            probe[i].data_mut()[j] = T::from_f64(orig.as_f64() + h);
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = T::from_f64(orig.as_f64() - h);
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j].as_f64();
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
