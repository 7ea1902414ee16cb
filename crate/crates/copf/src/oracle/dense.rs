//! Brute-force dense arithmetic for the reference path. Independent of the
//! engine kernels; the only shared contract is the summation order (left
//! to right over columns, top to bottom over rows).

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(rows: usize, cols: usize) -> Mat {
    vec![vec![0.0; cols]; rows]
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|x| x * c).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).collect())
        .collect()
}

/// Plain product; each output entry sums over the inner index ascending.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let rows = a.len();
    let inner = b.len();
    let cols = b[0].len();
    let mut out = zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn stack(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = top.clone();
    out.extend(bottom.iter().cloned());
    out
}

pub fn sum_entries(a: &Mat) -> f64 {
    let mut acc = 0.0;
    for row in a {
        for v in row {
            acc += v;
        }
    }
    acc
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Stable log-sum-exp of a slice.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for &v in row {
        acc += (v - max).exp();
    }
    acc.ln() + max
}
