//! Plain loops shared by the recorded (tape) and unrecorded forward paths, so
//! both produce bit-identical values.

use crate::error::{Error, Result};

/// `out[i, o] = bias[o] + Σ_k x[i, k] · w[o, k]`
pub(crate) fn linear(x: &[f64], rows: usize, inputs: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let outputs = b.len();
    debug_assert_eq!(w.len(), outputs * inputs);
    let mut out = Vec::with_capacity(rows * outputs);
    for xr in x.chunks_exact(inputs).take(rows) {
        for (o, wr) in w.chunks_exact(inputs).enumerate() {
            let mut acc = 0.0;
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            out.push(acc + b[o]);
        }
    }
    out
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Row-wise tempered softmax with row-max subtraction.
pub(crate) fn softmax_rows(scores: &[f64], cols: usize, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("temperature", format!("must be a positive finite number, got {temperature}")));
    }
    if cols == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &s in row {
            let e = ((s - max) / temperature).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
