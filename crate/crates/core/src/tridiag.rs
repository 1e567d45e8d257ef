//! Tridiagonal operators and a pre-factorized Thomas solver.

use crate::error::{Error, Result};

/// `lower[i]` multiplies `v[i-1]` in row `i` (so `lower[0]` is unused),
/// `upper[i]` multiplies `v[i+1]` (so `upper[n-1]` is unused).
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if col == row {
            self.diag[row]
        } else if col + 1 == row {
            self.lower[row]
        } else if col == row + 1 {
            self.upper[row]
        } else {
            0.0
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(v.len(), n);
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.lower[i] * v[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Tridiag::zeros(n);
        t.diag.copy_from_slice(&self.diag);
        for i in 0..n.saturating_sub(1) {
            t.upper[i] = self.lower[i + 1];
            t.lower[i + 1] = self.upper[i];
        }
        t
    }

    /// `alpha * I + beta * self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|v| beta * v).collect(),
            diag: self.diag.iter().map(|v| alpha + beta * v).collect(),
            upper: self.upper.iter().map(|v| beta * v).collect(),
        }
    }

    /// Entrywise average with `other`.
    pub fn midpoint(&self, other: &Self) -> Self {
        let avg = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        Self {
            lower: avg(&self.lower, &other.lower),
            diag: avg(&self.diag, &other.diag),
            upper: avg(&self.upper, &other.upper),
        }
    }

    /// Sum of row `i`.
    pub fn row_sum(&self, i: usize) -> f64 {
        let n = self.len();
        let mut s = self.diag[i];
        if i > 0 {
            s += self.lower[i];
        }
        if i + 1 < n {
            s += self.upper[i];
        }
        s
    }

    pub fn factor(&self) -> Result<Factored> {
        Factored::new(self)
    }
}

/// Thomas-algorithm factorization, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct Factored {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper_scaled: Vec<f64>,
}

impl Factored {
    fn new(m: &Tridiag) -> Result<Self> {
        let n = m.len();
        let mut inv_pivot = vec![0.0; n];
        let mut upper_scaled = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            let pivot = m.diag[i] - if i > 0 { m.lower[i] * prev } else { 0.0 };
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::Numerical(format!("singular tridiagonal pivot at row {i}")));
            }
            inv_pivot[i] = 1.0 / pivot;
            upper_scaled[i] = if i + 1 < n { m.upper[i] / pivot } else { 0.0 };
            prev = upper_scaled[i];
        }
        Ok(Self {
            lower: m.lower.clone(),
            inv_pivot,
            upper_scaled,
        })
    }

    /// Overwrite `rhs` with the solution.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_scaled[i] * rhs[i + 1];
        }
    }
}
