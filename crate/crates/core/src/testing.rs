//! Finite-difference gradient checking shared by unit and integration tests.

use crate::diff::{DiffError, Graph, Tensor, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)
    pub rel_err: f64,
    pub numeric_norm: f64,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward_inputs(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        analytic.extend_from_slice(grads.get(*v).unwrap_or(&zeros));
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric)).max(1e-300);
    GradCheck {
        rel_err: norm(&diff) / scale,
        numeric_norm: norm(numeric),
    }
}
