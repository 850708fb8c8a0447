//! Uniform open-knot B-spline bases in one variable.

use crate::quad::gauss_on;

/// Maximum supported degree.
pub const MAX_DEGREE: usize = 3;

#[derive(Debug, Clone)]
pub struct Basis1d {
    pub degree: usize,
    pub cells: usize,
    pub a: f64,
    pub b: f64,
    pub h: f64,
    knots: Vec<f64>,
}

/// Values and derivatives of the nonzero basis functions at a point.
/// `d[k][j]` is the k-th derivative of basis `first + j`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub d: [[f64; MAX_DEGREE + 1]; MAX_DEGREE + 1],
}

impl Basis1d {
    pub fn new(degree: usize, cells: usize, a: f64, b: f64) -> Self {
        assert!(degree <= MAX_DEGREE && cells >= 1 && b > a);
        let h = (b - a) / cells as f64;
        let mut knots = Vec::with_capacity(cells + 2 * degree + 1);
        for _ in 0..degree {
            knots.push(a);
        }
        for i in 0..=cells {
            knots.push(if i == cells { b } else { a + i as f64 * h });
        }
        for _ in 0..degree {
            knots.push(b);
        }
        Basis1d { degree, cells, a, b, h, knots }
    }

    pub fn dim(&self) -> usize {
        self.cells + self.degree
    }

    /// Knot `i` of the open knot vector (with `degree + 1` repeated ends).
    fn t(&self, i: usize) -> f64 {
        self.knots[i]
    }

    pub fn cell_of(&self, x: f64) -> usize {
        let c = ((x - self.a) / self.h).floor();
        if c < 0.0 {
            0
        } else {
            (c as usize).min(self.cells - 1)
        }
    }

    /// Support interval [t_i, t_{i+p+1}] of basis `i`.
    pub fn support(&self, i: usize) -> (f64, f64) {
        (self.t(i), self.t(i + self.degree + 1))
    }

    /// Cells (inclusive range) on which basis `i` is nonzero.
    pub fn cell_range(&self, i: usize) -> (usize, usize) {
        let lo = i.saturating_sub(self.degree);
        let hi = i.min(self.cells - 1);
        (lo, hi)
    }

    pub fn greville(&self, i: usize) -> f64 {
        if self.degree == 0 {
            return 0.5 * (self.t(i) + self.t(i + 1));
        }
        (1..=self.degree).map(|k| self.t(i + k)).sum::<f64>() / self.degree as f64
    }

    /// Basis values and derivatives up to `nd` in the cell `cell` at `x`.
    pub fn eval_in_cell(&self, cell: usize, x: f64, nd: usize) -> LocalBasis {
        let p = self.degree;
        let span = cell + p; // index in the full knot vector
        let mut ndu = [[0.0f64; MAX_DEGREE + 1]; MAX_DEGREE + 1];
        let mut left = [0.0f64; MAX_DEGREE + 1];
        let mut right = [0.0f64; MAX_DEGREE + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.t(span + 1 - j);
            right[j] = self.t(span + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut d = [[0.0f64; MAX_DEGREE + 1]; MAX_DEGREE + 1];
        for j in 0..=p {
            d[0][j] = ndu[j][p];
        }
        let nd = nd.min(p);
        let mut a = [[0.0f64; MAX_DEGREE + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0] = [0.0; MAX_DEGREE + 1];
            a[1] = [0.0; MAX_DEGREE + 1];
            a[0][0] = 1.0;
            for k in 1..=nd {
                let mut dv = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    dv = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    dv += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    dv += a[s2][k] * ndu[r][pk];
                }
                d[k][r] = dv;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nd {
            for j in 0..=p {
                d[k][j] *= fac;
            }
            fac *= (p - k) as f64;
        }
        LocalBasis { first: cell, d }
    }

    pub fn eval(&self, x: f64, nd: usize) -> LocalBasis {
        self.eval_in_cell(self.cell_of(x), x, nd)
    }

    /// Coefficients of the derivative in the degree-(p−1) basis on the same breakpoints,
    /// as sparse rows: `(row in lower basis, col in this basis, weight)`.
    pub fn derivative_entries(&self) -> Vec<(usize, usize, f64)> {
        let p = self.degree;
        assert!(p >= 1);
        let mut out = Vec::new();
        for i in 0..self.dim() - 1 {
            let den = self.t(i + p + 1) - self.t(i + 1);
            let c = p as f64 / den;
            out.push((i, i + 1, c));
            out.push((i, i, -c));
        }
        out
    }

    /// Gram matrix ∫ N_i^{(r)} N_j^{(s)} as a dense row-major array.
    pub fn gram(&self, r: usize, s: usize) -> Vec<f64> {
        let n = self.dim();
        let mut g = vec![0.0; n * n];
        let p = self.degree;
        for c in 0..self.cells {
            let x0 = self.a + c as f64 * self.h;
            for (x, w) in gauss_on(p + 2, x0, x0 + self.h) {
                let lb = self.eval_in_cell(c, x, r.max(s));
                for a in 0..=p {
                    for b in 0..=p {
                        g[(c + a) * n + c + b] += w * lb.d[r][a] * lb.d[s][b];
                    }
                }
            }
        }
        g
    }

    /// Integrals of the basis functions.
    pub fn integrals(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.dim())
            .map(|i| (self.t(i + p + 1) - self.t(i)) / (p as f64 + 1.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_and_derivatives() {
        for p in 0..=3 {
            let b = Basis1d::new(p, 7, -0.5, 0.5);
            for k in 0..50 {
                let x = -0.5 + k as f64 / 49.0;
                let lb = b.eval(x, 3);
                let s: f64 = lb.d[0][..=p].iter().sum();
                assert!((s - 1.0).abs() < 1e-13);
                for nd in 1..=p {
                    let s: f64 = lb.d[nd][..=p].iter().sum();
                    assert!(s.abs() < 1e-9, "p={p} nd={nd} s={s}");
                }
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let b = Basis1d::new(3, 5, 0.0, 2.0);
        let eps = 1e-6;
        for k in 1..40 {
            let x = 2.0 * k as f64 / 40.0 + 0.0137;
            let c = b.cell_of(x);
            let lp = b.eval_in_cell(c, x + eps, 3);
            let lm = b.eval_in_cell(c, x - eps, 3);
            let l0 = b.eval_in_cell(c, x, 3);
            for j in 0..=3 {
                for nd in 0..3 {
                    let fd = (lp.d[nd][j] - lm.d[nd][j]) / (2.0 * eps);
                    assert!((fd - l0.d[nd + 1][j]).abs() < 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn derivative_map_is_exact() {
        let b3 = Basis1d::new(3, 6, 0.0, 1.0);
        let b2 = Basis1d::new(2, 6, 0.0, 1.0);
        let coef: Vec<f64> = (0..b3.dim()).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let mut dc = vec![0.0; b2.dim()];
        for (r, c, w) in b3.derivative_entries() {
            dc[r] += w * coef[c];
        }
        for k in 0..30 {
            let x = k as f64 / 29.0;
            let l3 = b3.eval(x, 1);
            let l2 = b2.eval(x, 0);
            let d3: f64 = (0..4).map(|j| coef[l3.first + j] * l3.d[1][j]).sum();
            let v2: f64 = (0..3).map(|j| dc[l2.first + j] * l2.d[0][j]).sum();
            assert!((d3 - v2).abs() < 1e-11);
        }
    }

    #[test]
    fn integrals_match_quadrature() {
        let b = Basis1d::new(2, 5, 0.0, 1.0);
        let g = b.gram(0, 0);
        let n = b.dim();
        let ints = b.integrals();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| g[i * n + j]).sum();
            assert!((row - ints[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn endpoint_values() {
        let b = Basis1d::new(3, 4, 0.0, 1.0);
        let l = b.eval(0.0, 1);
        assert_eq!(l.first, 0);
        assert!((l.d[0][0] - 1.0).abs() < 1e-15);
        let l = b.eval(1.0, 0);
        assert!((l.d[0][3] - 1.0).abs() < 1e-15);
    }
}
