//! Small dense-vector helpers shared by every module.

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; errors when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroNorm("left operand of cosine".into()));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm("right operand of cosine".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient of `cos(x, p)` with respect to `p`, accumulated as `out += scale * d cos / d p`.
pub fn cosine_grad_wrt_second(x: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
    let (nx, np) = (norm(x), norm(p));
    let c = dot(x, p) / (nx * np);
    let inv = 1.0 / (nx * np);
    let self_term = c / (np * np);
    for ((o, &xi), &pi) in out.iter_mut().zip(x).zip(p) {
        *o += scale * (xi * inv - self_term * pi);
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of equally sized rows.
pub fn mean_of<'a, I>(rows: I, dim: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for row in rows {
        if row.len() != dim {
            return Err(Error::dim("mean of rows", dim, row.len()));
        }
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Insufficient("mean of an empty row set".into()));
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}
