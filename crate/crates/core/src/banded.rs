//! Banded LU factorization with partial pivoting (LAPACK `gbtf2` layout).

use crate::error::{Error, Result};

/// Square matrix with `kl` sub- and `ku` super-diagonals. Storage reserves
/// `kl` further super-diagonals for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self { n, kl, ku, ldab, data: vec![0.0; ldab * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // Row `kl + ku + i − j` of column `j`.
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        i <= j + self.kl && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Adds `value` to entry `(i, j)`; panics outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band kl={}, ku={}", self.kl, self.ku);
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Factorizes in place.
    pub fn factorize(mut self) -> Result<BandLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0;
            let mut best = self.data[self.slot(j, j)].abs();
            for r in 1..=km {
                let v = self.data[self.slot(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            ipiv[j] = j + p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SingularSolve(format!("zero pivot in banded LU at column {j}")));
            }
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    let a = self.slot(j, c);
                    let b = self.slot(j + p, c);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.slot(j, j)];
            for r in 1..=km {
                let s = self.slot(j + r, j);
                self.data[s] /= pivot;
            }
            for c in j + 1..=ju {
                let ujc = self.data[self.slot(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                for r in 1..=km {
                    let l = self.data[self.slot(j + r, j)];
                    let s = self.slot(j + r, c);
                    self.data[s] -= l * ujc;
                }
            }
        }
        Ok(BandLu { m: self, ipiv })
    }
}

/// LU factors of a [`BandMatrix`].
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let n = m.n;
        let mut x = rhs.to_vec();
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let km = m.kl.min(n - 1 - j);
            let xj = x[j];
            for r in 1..=km {
                x[j + r] -= m.data[m.slot(j + r, j)] * xj;
            }
        }
        let kv = m.kl + m.ku;
        for i in (0..n).rev() {
            let hi = (i + kv).min(n - 1);
            let mut acc = x[i];
            for c in i + 1..=hi {
                acc -= m.data[m.slot(i, c)] * x[c];
            }
            x[i] = acc / m.data[m.slot(i, i)];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_dense_solve() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for &(n, kl, ku) in &[(1, 0, 0), (7, 2, 1), (40, 5, 5), (60, 3, 9)] {
            let mut band = BandMatrix::zeros(n, kl, ku);
            for i in 0..n {
                for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                    // Weak diagonal so that pivoting is exercised.
                    let v = if i == j { 0.1 * rng.random_range(-1.0..1.0) } else { rng.random_range(-1.0..1.0) };
                    band.add(i, j, v);
                }
            }
            let dense = band.to_dense();
            let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 0.5).collect();
            let rhs = band.matvec(&x_true);
            let lu = band.factorize().unwrap();
            let x = lu.solve(&rhs);
            let residual = &dense * nalgebra::DVector::from_vec(x.clone()) - nalgebra::DVector::from_vec(rhs);
            assert!(residual.amax() < 1e-10, "n={n}: {}", residual.amax());
            for (a, b) in x.iter().zip(&x_true) {
                assert!((a - b).abs() < 1e-8, "n={n}");
            }
        }
    }

    #[test]
    fn singular_detected() {
        let band = BandMatrix::zeros(4, 1, 1);
        assert!(band.factorize().is_err());
    }
}
