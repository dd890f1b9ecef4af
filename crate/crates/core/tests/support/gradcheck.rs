//! Central finite differences against autograd, 64-bit.

use candle_core::{Tensor, Var};

/// Relative error of one tensor's sampled gradient entries:
/// `|a - n|_2 / max(|a|_2, |n|_2, FLOOR)`.
///
/// The floor keeps gradients that sit below finite-difference roundoff from
/// reporting noise as error.
pub struct GradError {
    pub name: String,
    pub relative: f64,
    pub analytic_norm: f64,
}

pub const FLOOR: f64 = 1e-6;

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Checks up to `per_tensor` evenly spaced entries of every variable.
pub fn check(vars: &[(String, Var)], loss: impl Fn() -> Tensor, per_tensor: usize, step: f64) -> Vec<GradError> {
    let grads = loss().backward().unwrap();
    let mut out = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let stride = (base.len() / per_tensor.max(1)).max(1);
        let picks: Vec<usize> = (0..base.len()).step_by(stride).take(per_tensor).collect();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let mut probe = base.clone();
            probe[i] = base[i] + step;
            var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), var.device()).unwrap()).unwrap();
            let up = scalar(&loss());
            probe[i] = base[i] - step;
            var.set(&Tensor::from_vec(probe, shape.as_slice(), var.device()).unwrap()).unwrap();
            let down = scalar(&loss());
            let numeric = (up - down) / (2.0 * step);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), var.device()).unwrap()).unwrap();
        let scale = na.sqrt().max(nn.sqrt()).max(FLOOR);
        let relative = diff.sqrt() / scale;
        out.push(GradError {
            name: name.clone(),
            relative,
            analytic_norm: na.sqrt(),
        });
    }
    out
}

pub fn worst(errors: &[GradError]) -> (String, f64) {
    errors
        .iter()
        .map(|e| (e.name.clone(), e.relative))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
