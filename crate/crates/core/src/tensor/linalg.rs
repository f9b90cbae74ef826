//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-6;

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig<R> {
    pub values: Tensor<R>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: Tensor<R>,
}

/// Decomposes `m = V · diag(λ) · Vᵀ`.
///
/// Always iterates in `f64`; the result is cast back to `R`. Convergence is
/// declared once the off-diagonal Frobenius norm drops below `1e-12` relative
/// to the matrix norm.
pub fn sym_eig<R: Real>(m: &Tensor<R>) -> Result<SymEig<R>> {
    let [n, n2] = m.dims2()?;
    if n != n2 {
        return Err(Error::Domain(format!("sym_eig needs a square matrix, got {n}×{n2}")));
    }
    let mut a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("sym_eig", "non-finite input"));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (a[i * n + j] - a[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Domain(format!("sym_eig input is not symmetric at ({i},{j})")));
            }
        }
    }
    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= OFF_DIAGONAL_TOL * scale;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J, touching rows/columns p and q.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
        converged = off_norm(&a) <= OFF_DIAGONAL_TOL * scale;
    }
    if !converged {
        return Err(Error::numerical(
            "sym_eig",
            format!("no convergence after {MAX_SWEEPS} sweeps"),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| R::lit(a[i * n + i])).collect();
    let mut vectors = vec![R::zero(); n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = R::lit(v[row * n + src]);
        }
    }
    Ok(SymEig {
        values: Tensor::from_parts(vec![n], values),
        vectors: Tensor::from_parts(vec![n, n], vectors),
    })
}

/// `V · diag(f(λ)) · Vᵀ` for a symmetric matrix, via [`sym_eig`].
pub fn sym_matrix_function<R: Real>(m: &Tensor<R>, f: impl Fn(f64) -> f64) -> Result<Tensor<R>> {
    let eig = sym_eig(m)?;
    let n = eig.values.len();
    let vals: Vec<f64> = eig.values.data().iter().map(|v| f(v.as_f64())).collect();
    let vecs: Vec<f64> = eig.vectors.data().iter().map(|v| v.as_f64()).collect();
    let mut out = vec![R::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n).map(|k| vecs[i * n + k] * vals[k] * vecs[j * n + k]).sum();
            out[i * n + j] = R::lit(s);
        }
    }
    let out = Tensor::from_parts(vec![n, n], out);
    if !out.all_finite() {
        return Err(Error::numerical("sym_matrix_function", "non-finite result"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(e: &SymEig<f64>) -> Tensor<f64> {
        let n = e.values.len();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..n)
                .map(|k| e.vectors.at(&[i, k]) * e.values.data()[k] * e.vectors.at(&[j, k]))
                .sum()
        })
        .unwrap()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&Tensor::<f64>::eye(5).unwrap()).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diagonal_is_sorted_and_axis_aligned() {
        let m = Tensor::new(&[2, 2], vec![4.0f64, 0.0, 0.0, 1.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values.data(), &[1.0, 4.0]);
        assert_eq!(e.vectors.at(&[1, 0]).abs(), 1.0);
        assert_eq!(e.vectors.at(&[0, 1]).abs(), 1.0);
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = Tensor::<f64>::normal(&[6, 6], 1.0, &mut rng).unwrap();
            let spd = a.matmul(&a.transpose2().unwrap()).unwrap();
            let spd = Tensor::from_fn(&[6, 6], |i| spd.data()[i] + if i % 7 == 0 { 0.1 } else { 0.0 }).unwrap();
            let e = sym_eig(&spd).unwrap();
            assert!(reconstruct(&e).max_abs_diff(&spd) < 1e-8);
            assert!(e.values.data().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let m = Tensor::new(&[2, 2], vec![4.0f64, 0.0, 0.0, 1.0]).unwrap();
        let r = sym_matrix_function(&m, |l| l.powf(-0.5)).unwrap();
        assert_eq!(r.data(), &[0.5, 0.0, 0.0, 1.0]);
    }
}
