//! Central-difference gradient verification.

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Largest relative error between tape gradients and central differences,
/// `|a - n| / max(1, |a|, |n|)`, over every element of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    ensure_arg!((1e-7..=1e-3).contains(&eps), "grad_check eps {eps} outside [1e-7, 1e-3]");
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x, false)).collect();
        let out = f(&mut tape, &vars)?;
        ensure_arg!(tape.value(out).len() == 1, "grad_check function must return a scalar");
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value {v} is not finite")));
        }
        Ok(v)
    };
    eval(inputs)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x, true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}
