use nalgebra::DMatrix;
use ndarray::Array2;

use super::BlendshapeSequence;
use crate::error::{Error, Result};

/// Savitzky-Golay projection ("hat") matrix for a window.
///
/// Row `r` holds the weights that evaluate the least-squares polynomial fit of
/// the window's samples at window position `r`. The middle row is the usual
/// smoothing kernel; the other rows are used for the first and last
/// `window / 2` samples so edge frames are fitted rather than padded.
pub fn savgol_weights(window: usize, order: usize) -> Result<Array2<f64>> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::Config(format!("window {window} must be odd")));
    }
    if order >= window {
        return Err(Error::Config(format!(
            "polynomial order {order} must be below window {window}"
        )));
    }
    let half = (window / 2) as f64;
    let vander = DMatrix::from_fn(window, order + 1, |i, k| (i as f64 - half).powi(k as i32));
    let gram = vander.transpose() * &vander;
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Config("singular Savitzky-Golay normal matrix".into()))?;
    let hat = &vander * gram_inv * vander.transpose();
    Ok(Array2::from_shape_fn((window, window), |(r, c)| hat[(r, c)]))
}

/// Per-column Savitzky-Golay smoothing of a `T x C` matrix.
pub fn savgol_matrix(x: &Array2<f64>, window: usize, order: usize) -> Result<Array2<f64>> {
    let hat = savgol_weights(window, order)?;
    let frames = x.nrows();
    if frames < window {
        return Err(Error::Length(format!(
            "{frames} frames is shorter than the smoothing window {window}"
        )));
    }
    let half = window / 2;
    let mut out = Array2::zeros(x.raw_dim());
    for t in 0..frames {
        let (start, row) = if t < half {
            (0, t)
        } else if t + half >= frames {
            (frames - window, window - (frames - t))
        } else {
            (t - half, half)
        };
        for j in 0..window {
            let w = hat[[row, j]];
            out.row_mut(t).scaled_add(w, &x.row(start + j));
        }
    }
    Ok(out)
}

/// Smooths every coefficient channel of a sequence.
pub fn savgol_smooth(seq: &BlendshapeSequence, window: usize, order: usize) -> Result<BlendshapeSequence> {
    let smoothed = savgol_matrix(seq.coeffs(), window, order)?;
    BlendshapeSequence::with_fps(smoothed, seq.fps())
}
