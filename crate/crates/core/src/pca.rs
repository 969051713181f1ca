//! Principal component projection via a cyclic Jacobi eigensolver on the
//! sample covariance.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// dims×d, one unit component per row, largest-magnitude entry positive.
    pub components: Tensor,
    /// Eigenvalues of the kept components, non-increasing.
    pub variances: Vec<f64>,
    /// Kept variances over total variance.
    pub explained: Vec<f64>,
    /// n×dims projected coordinates.
    pub coords: Tensor,
}

/// Eigenvalues (descending) and row eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&j| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k * n + j]).collect();
            orient(&mut col);
            col
        })
        .collect();
    (values, vectors)
}

/// Flips `v` so its largest-magnitude entry is positive.
pub fn orient(v: &mut [f64]) {
    let mut big = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[big].abs() {
            big = i;
        }
    }
    if v[big] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Mean-centred projection of the rows of `data` onto its top `dims`
/// principal components.
pub fn pca(data: &Tensor, dims: usize) -> Result<Pca> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::Degenerate(alloc::format!("PCA needs at least 2 rows, got {n}")));
    }
    if dims == 0 || dims > d {
        return Err(Error::InvalidConfig(alloc::format!(
            "cannot keep {dims} of {d} components"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|r| data.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let variances: Vec<f64> = values[..dims].iter().map(|v| v.max(0.0)).collect();
    let explained = variances
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let components: Vec<f64> = vectors[..dims].iter().flatten().copied().collect();
    let coords: Vec<f64> = centred
        .iter()
        .flat_map(|row| {
            vectors[..dims]
                .iter()
                .map(move |c| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    Ok(Pca {
        mean,
        components: Tensor::matrix(dims, d, components)?,
        variances,
        explained,
        coords: Tensor::matrix(n, dims, coords)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn axis_aligned_recovered() {
        let data = Tensor::from_rows(&[vec![-3.0, 1.0], vec![3.0, 1.0], vec![-3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        let p = pca(&data, 2).unwrap();
        assert_abs_diff_eq!(p.components.row(0)[0].abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.components.row(1)[1].abs(), 1.0, epsilon = 1e-12);
        for r in 0..4 {
            assert_abs_diff_eq!(p.coords.row(r)[0], data.row(r)[0], epsilon = 1e-12);
            assert_abs_diff_eq!(p.coords.row(r)[1], data.row(r)[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn duplicate_rows_coincide() {
        let data = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0], vec![4.0, -1.0, 2.0]]).unwrap();
        let p = pca(&data, 2).unwrap();
        assert_eq!(p.coords.row(0), p.coords.row(1));
    }

    #[test]
    fn ratios_non_increasing() {
        let data = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![5.0, 1.0, 2.0],
            vec![1.0, 3.0, 1.0],
        ])
        .unwrap();
        let p = pca(&data, 3).unwrap();
        assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert_abs_diff_eq!(p.explained.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca(&one, 1), Err(Error::Degenerate(_))));
        let two = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(pca(&two, 3).is_err());
    }
}
