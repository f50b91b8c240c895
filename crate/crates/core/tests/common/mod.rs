//! Independent oracles shared by the integration suites: normal-equations
//! least squares, dense matrix inversion, adaptive quadrature, and norm
//! helpers. These deliberately avoid the library's solver paths.

use ame_core::sampling::DesignMatrix;

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Solve the square system a * x = rhs by Gaussian elimination with partial
/// pivoting. `a` is row-major and consumed.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        let p = a[col][col];
        for j in col..n {
            a[col][j] /= p;
        }
        rhs[col] /= p;
        for row in 0..n {
            if row != col && a[row][col] != 0.0 {
                let f = a[row][col];
                for j in col..n {
                    a[row][j] -= f * a[col][j];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    rhs
}

/// Dense inverse via repeated solves.
pub fn invert_dense(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv_cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        inv_cols.push(solve_dense(a.to_vec(), e));
    }
    // inv_cols[j][i] = inverse[i][j]
    (0..n)
        .map(|i| (0..n).map(|j| inv_cols[j][i]).collect())
        .collect()
}

/// Gram matrix X'X of a design.
pub fn gram(design: &DesignMatrix) -> Vec<Vec<f64>> {
    let n = design.n_cols();
    let mut g = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = design.col(i).iter().zip(design.col(j)).map(|(a, b)| a * b).sum();
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

/// Least squares by normal equations: the independent oracle for the
/// lambda = 0 solver path.
pub fn ols_normal_equations(design: &DesignMatrix) -> Vec<f64> {
    let n = design.n_cols();
    let g = gram(design);
    let rhs: Vec<f64> = (0..n)
        .map(|j| design.col(j).iter().zip(&design.y).map(|(a, b)| a * b).sum())
        .collect();
    solve_dense(g, rhs)
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, m: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, 0.5 * (a + m), m);
        let right = simpson(f, m, 0.5 * (m + b), b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    recurse(f, a, b, simpson(f, a, m, b), tol, 40)
}
