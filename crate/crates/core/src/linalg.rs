//! Small dense helpers shared by the recursions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry; zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Relative asymmetry `max|M - Mᵀ| / max(1, max|M|)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    max_abs_diff(m, &m.transpose()) / max_abs(m).max(1.0)
}

/// Cholesky factorization; `None` unless every pivot is strictly positive.
pub fn pd_factor(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    pd_factor(m).is_some()
}

/// `[I, A, A², …, A^count]`.
pub fn powers(a: &DMatrix<f64>, count: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(count + 1);
    out.push(DMatrix::identity(a.nrows(), a.ncols()));
    for i in 0..count {
        let next = &out[i] * a;
        out.push(next);
    }
    out
}

/// `Σ_i (Aᵀ)^i L_i A^i` for the supplied `L_i` (missing tail treated as zero).
pub fn delayed_sum<'a, I>(a_pows: &[DMatrix<f64>], ls: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let n = a_pows[0].nrows();
    let mut acc = DMatrix::zeros(n, n);
    for (i, l) in ls.into_iter().enumerate() {
        let p = &a_pows[i];
        acc += p.transpose() * l * p;
    }
    acc
}

/// `tr(W S)` for square matrices of equal size.
pub fn trace_product(w: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    w.iter().zip(s.transpose().iter()).map(|(a, b)| a * b).sum()
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pivot_is_rejected() {
        assert!(!is_positive_definite(&DMatrix::zeros(1, 1)));
        assert!(!is_positive_definite(&DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 1.0, 1.0, 1.0]
        )));
        assert!(is_positive_definite(&DMatrix::from_row_slice(
            2,
            2,
            &[2.0, 1.0, 1.0, 2.0]
        )));
    }

    #[test]
    fn trace_product_matches_definition() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(trace_product(&w, &s), (w * s).trace());
    }

    #[test]
    fn compensated_sum_keeps_small_terms() {
        let mut k = KahanSum::default();
        k.add(1e16);
        for _ in 0..10 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 10.0);
    }
}
