use super::tensor::Tensor;
use crate::error::Result;

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_gradient<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut x: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut g = Tensor::zeros(x[i].shape());
        for j in 0..x[i].len() {
            let orig = x[i].data()[j];
            x[i].data_mut()[j] = orig + eps;
            let up = f(&x)?;
            x[i].data_mut()[j] = orig - eps;
            let down = f(&x)?;
            x[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all tensors jointly; 0 when both vanish.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
