use super::mat::Mat;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of several matrices.
///
/// Each coordinate `i` of each leaf gets `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`.
/// The function is always called with untracked copies.
pub fn finite_diff_grad<F>(mut f: F, leaves: &[Mat], h: f64) -> Result<Vec<Mat>>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut work: Vec<Mat> = leaves.iter().map(Mat::detach).collect();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let base = leaves[li].detach();
        let mut grad = vec![0.0; base.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let x = base.data()[i];
            work[li] = base.with_entry(i, x + h);
            let up = f(&work)?;
            work[li] = base.with_entry(i, x - h);
            let down = f(&work)?;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("finite_diff_grad"));
            }
            *g = (up - down) / (2.0 * h);
        }
        work[li] = base.detach();
        out.push(Mat::new(base.rows(), base.cols(), grad)?);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over a list of matrices treated as one vector.
/// Zero when both are exactly zero.
pub fn relative_error(a: &[Mat], b: &[Mat]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
