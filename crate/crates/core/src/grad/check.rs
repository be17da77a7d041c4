use super::tape::{Result, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives one tracked variable per input and must return a 1x1
/// node. Returns the largest normwise relative error over the inputs,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *var);
        let mut numeric = Tensor::zeros(analytic.dim());
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let up = eval(&work)?;
            work[k][[r, c]] = orig - h;
            let down = eval(&work)?;
            work[k][[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|x| x * x).sum().sqrt();
        let na = analytic.mapv(|x| x * x).sum().sqrt();
        let nn = numeric.mapv(|x| x * x).sum().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    Ok(worst)
}
