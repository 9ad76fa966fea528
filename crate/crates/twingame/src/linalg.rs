//! Dense and banded LU factorizations with partial pivoting.
//!
//! The Newton systems assembled by the boundary-value solvers are block
//! banded whenever the boundary conditions are separated (conditions at
//! t0 and t1 involve disjoint residual rows), which holds for every game
//! system in this crate. The banded path keeps the solve cost linear in
//! the number of mesh nodes; the dense path is the fallback for coupled
//! boundary conditions and for small systems.

use crate::error::{Error, Result};

/// Pivot magnitudes below this are treated as an exactly singular stage.
const PIVOT_TINY: f64 = 1e-300;

// ---------------------------------------------------------------------------
// Dense LU
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    /// LU factorization with partial pivoting; consumes the matrix.
    pub fn factor(mut self) -> Result<DenseLu> {
        let n = self.n;
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let mut p = j;
            let mut pmax = self.get(j, j).abs();
            for i in j + 1..n {
                let v = self.get(i, j).abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            ipiv[j] = p;
            if pmax < PIVOT_TINY {
                return Err(Error::SingularJacobian {
                    cond: f64::INFINITY,
                });
            }
            if p != j {
                for col in 0..n {
                    self.data.swap(j * n + col, p * n + col);
                }
            }
            let pivot = self.get(j, j);
            for i in j + 1..n {
                let factor = self.get(i, j) / pivot;
                self.set(i, j, factor);
                if factor != 0.0 {
                    for col in j + 1..n {
                        let v = self.get(j, col);
                        self.add(i, col, -factor * v);
                    }
                }
            }
        }
        Ok(DenseLu { mat: self, ipiv })
    }
}

#[derive(Clone, Debug)]
pub struct DenseLu {
    mat: DenseMatrix,
    ipiv: Vec<usize>,
}

impl DenseLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.mat.n;
        assert_eq!(b.len(), n);
        for j in 0..n {
            b.swap(j, self.ipiv[j]);
            let bj = b[j];
            if bj != 0.0 {
                for i in j + 1..n {
                    b[i] -= self.mat.get(i, j) * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.mat.get(j, j);
            let bj = b[j];
            if bj != 0.0 {
                for i in 0..j {
                    b[i] -= self.mat.get(i, j) * bj;
                }
            }
        }
    }

    /// Crude conditioning signal: ratio of extreme |U_jj|.
    pub fn diagonal_ratio(&self) -> f64 {
        diag_ratio((0..self.mat.n).map(|j| self.mat.get(j, j)))
    }
}

// ---------------------------------------------------------------------------
// Banded LU
// ---------------------------------------------------------------------------

/// Band matrix with `kl` subdiagonals and `ku` superdiagonals.
///
/// Storage follows the LAPACK band layout with `kl` extra superdiagonal
/// rows reserved for pivoting fill-in: entry (i, j) lives at band row
/// `i - j + kl + ku`.
#[derive(Clone, Debug)]
pub struct BandedMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ab: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let rows = 2 * kl + ku + 1;
        BandedMatrix {
            n,
            kl,
            ku,
            ab: vec![0.0; rows * n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i);
        (i + self.kl + self.ku - j) * self.n + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.ab[self.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    /// True when (i, j) falls inside the declared band (fill rows excluded).
    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        (i <= j + self.kl) && (j <= i + self.ku)
    }

    /// Banded LU with partial pivoting (row interchanges stay within the
    /// `kl` rows below the diagonal, fill-in widens the upper band to
    /// `ku + kl`).
    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut ipiv = vec![0usize; n];
        // Highest column index touched so far by eliminations/swaps.
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0usize;
            let mut pmax = self.get(j, j).abs();
            for i in 1..=km {
                let v = self.get(j + i, j).abs();
                if v > pmax {
                    pmax = v;
                    jp = i;
                }
            }
            ipiv[j] = j + jp;
            if pmax < PIVOT_TINY {
                return Err(Error::SingularJacobian {
                    cond: f64::INFINITY,
                });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                let p = j + jp;
                for col in j..=ju {
                    let a = self.idx(j, col);
                    let b = self.idx(p, col);
                    self.ab.swap(a, b);
                }
            }
            if km > 0 {
                let pivot = self.get(j, j);
                for i in 1..=km {
                    let v = self.get(j + i, j) / pivot;
                    self.set(j + i, j, v);
                }
                for col in j + 1..=ju {
                    let ujc = self.get(j, col);
                    if ujc != 0.0 {
                        for i in 1..=km {
                            let lij = self.get(j + i, j);
                            let v = self.get(j + i, col) - lij * ujc;
                            self.set(j + i, col, v);
                        }
                    }
                }
            }
        }
        Ok(BandedLu { mat: self, ipiv })
    }
}

#[derive(Clone, Debug)]
pub struct BandedLu {
    mat: BandedMatrix,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.mat.n;
        let kl = self.mat.kl;
        let ku = self.mat.ku;
        assert_eq!(b.len(), n);
        if kl > 0 {
            for j in 0..n - 1 {
                let p = self.ipiv[j];
                if p != j {
                    b.swap(j, p);
                }
                let bj = b[j];
                if bj != 0.0 {
                    let km = kl.min(n - 1 - j);
                    for i in 1..=km {
                        b[j + i] -= self.mat.get(j + i, j) * bj;
                    }
                }
            }
        }
        let band = kl + ku;
        for j in (0..n).rev() {
            b[j] /= self.mat.get(j, j);
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(band);
                for i in lo..j {
                    b[i] -= self.mat.get(i, j) * bj;
                }
            }
        }
    }

    pub fn diagonal_ratio(&self) -> f64 {
        diag_ratio((0..self.mat.n).map(|j| self.mat.get(j, j)))
    }
}

fn diag_ratio(diag: impl Iterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for d in diag {
        let a = d.abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn norm_2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded_system(
        rng: &mut ChaCha8Rng,
        n: usize,
        kl: usize,
        ku: usize,
    ) -> (BandedMatrix, DenseMatrix, Vec<f64>) {
        let mut banded = BandedMatrix::zeros(n, kl, ku);
        let mut dense = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if banded.in_band(i, j) {
                    let mut v: f64 = rng.gen_range(-1.0..1.0);
                    if i == j {
                        // Keep the system comfortably nonsingular.
                        v += 4.0 * v.signum().max(0.5);
                    }
                    banded.set(i, j, v);
                    dense.set(i, j, v);
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (banded, dense, b)
    }

    #[test]
    fn banded_matches_dense_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, kl, ku) in &[(1, 0, 0), (5, 1, 2), (12, 3, 3), (40, 6, 9), (60, 11, 5)] {
            let (banded, dense, b) = random_banded_system(&mut rng, n, kl, ku);
            let mut xb = b.clone();
            banded.factor().unwrap().solve_in_place(&mut xb);
            let mut xd = b.clone();
            dense.factor().unwrap().solve_in_place(&mut xd);
            for i in 0..n {
                assert!(
                    (xb[i] - xd[i]).abs() < 1e-10,
                    "n={n} kl={kl} ku={ku} i={i}: {} vs {}",
                    xb[i],
                    xd[i]
                );
            }
        }
    }

    #[test]
    fn dense_solves_known_system() {
        // [2 1; 1 3] x = [5; 10] -> x = [1; 3]
        let mut a = DenseMatrix::zeros(2);
        a.set(0, 0, 2.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 3.0);
        let lu = a.factor().unwrap();
        let mut b = vec![5.0, 10.0];
        lu.solve_in_place(&mut b);
        assert!((b[0] - 1.0).abs() < 1e-14);
        assert!((b[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = DenseMatrix::zeros(2);
        a.set(0, 0, 1.0);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        a.set(1, 1, 4.0);
        match a.factor() {
            Err(Error::SingularJacobian { .. }) => {}
            other => panic!("expected singular report, got {other:?}"),
        }
    }

    #[test]
    fn banded_pivoting_handles_zero_diagonal() {
        // Diagonal starts at zero; partial pivoting must still factor it.
        let mut a = BandedMatrix::zeros(3, 1, 1);
        a.set(0, 0, 0.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 2.0);
        a.set(1, 1, 1.0);
        a.set(1, 2, 1.0);
        a.set(2, 1, 1.0);
        a.set(2, 2, 3.0);
        let lu = a.factor().unwrap();
        // Solve A x = [1, 4, 7]; A = [[0,1,0],[2,1,1],[0,1,3]].
        // From row1: x2 = 1; row3: x2 + 3 x3 = 7 -> x3 = 2; row2: 2 x1 + 1 + 2 = 4 -> x1 = 0.5.
        let mut b = vec![1.0, 4.0, 7.0];
        lu.solve_in_place(&mut b);
        assert!((b[0] - 0.5).abs() < 1e-14);
        assert!((b[1] - 1.0).abs() < 1e-14);
        assert!((b[2] - 2.0).abs() < 1e-14);
    }
}
