//! Dense helpers for the small (`d <= 3`) covariance matrices of the mixtures.
//! Matrices are row-major `d x d` slices.

/// `F Fᵀ`.
pub(super) fn outer_product(d: usize, f: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| f[i * d + k] * f[j * d + k]).sum();
        }
    }
    c
}

/// Lower Cholesky factor, or `None` if `c` is not positive definite.
pub(super) fn cholesky(d: usize, c: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = c[i * d + i] - s;
                if v <= 0.0 {
                    return None;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (c[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `C⁻¹` from the Cholesky factor `L` of `C`.
pub(super) fn spd_inverse(d: usize, l: &[f64]) -> Vec<f64> {
    // Columns of L⁻¹ by forward substitution, then C⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; d * d];
    for col in 0..d {
        for i in 0..d {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|k| l[i * d + k] * linv[k * d + col]).sum();
            linv[i * d + col] = (rhs - s) / l[i * d + i];
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            inv[i * d + j] = (0..d).map(|k| linv[k * d + i] * linv[k * d + j]).sum();
        }
    }
    inv
}
