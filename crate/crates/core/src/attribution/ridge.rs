use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

/// Minimizes `|y - Xw - b|^2 + lambda |w|^2` with the intercept `b` left
/// unpenalized. `x` holds `y.len()` rows of `features` values each.
///
/// Solved through the normal equations of the design matrix augmented with
/// a constant column, factored by Cholesky.
pub fn ridge_fit(x: &[f64], features: usize, y: &[f64], lambda: f64) -> Result<RidgeFit> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("ridge observations"));
    }
    if x.len() != n * features {
        return Err(Error::Dimension(format!(
            "design of {} values for {n} rows of {features} features",
            x.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParam(format!("ridge lambda {lambda}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite ridge input".into()));
    }
    // The constant column sits last so it is the final pivot.
    let p = features + 1;
    let mut gram = vec![0f64; p * p];
    let mut rhs = vec![0f64; p];
    let mut row = vec![1f64; p];
    for (i, &yi) in y.iter().enumerate() {
        row[..features].copy_from_slice(&x[i * features..(i + 1) * features]);
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            rhs[a] += row[a] * yi;
            for b in 0..=a {
                gram[a * p + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
    }
    for j in 0..features {
        gram[j * p + j] += lambda;
    }
    let solution = cholesky_solve(&mut gram, p, &rhs)?;
    Ok(RidgeFit {
        intercept: solution[features],
        weights: solution[..features].to_vec(),
    })
}

/// Solves `A s = b` for symmetric positive definite `A` (overwritten by its
/// factor).
fn cholesky_solve(a: &mut [f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    let scale = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= scale * 1e-13 {
            return Err(Error::Numerical(format!(
                "ridge system is singular at column {j}; use a positive lambda"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= a[i * n + k] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= a[k * n + i] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    Ok(z)
}
