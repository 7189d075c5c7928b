//! Factored second moments: a tensor with at least two dimensions is
//! summarized by exponential moving averages of its squared-gradient row and
//! column sums, reconstructed as an outer product. Memory cost is n + m
//! statistics instead of n * m entries, and the reconstruction is strictly
//! positive once any gradient mass has been seen, so it cannot reintroduce
//! zero second-moment entries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row and column statistics of a factored second moment. Tensors with more
/// than two dimensions are treated as matrices by folding every leading axis
/// into the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredPair {
    shape: Vec<usize>,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl FactoredPair {
    /// Zero statistics for a tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::Shape(
                "factored second moment requires at least 2 dimensions".into(),
            ));
        }
        let cols = shape[shape.len() - 1];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        Ok(FactoredPair {
            shape: shape.to_vec(),
            rows: vec![0.0; rows],
            cols: vec![0.0; cols],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn row_stats(&self) -> &[f64] {
        &self.rows
    }

    pub fn col_stats(&self) -> &[f64] {
        &self.cols
    }

    /// Number of stored statistics (rows + cols).
    pub fn stat_count(&self) -> usize {
        self.rows.len() + self.cols.len()
    }
}

/// Exponential-moving-average update of the factored statistics with the
/// squared gradient: rows absorb row sums of g^2, columns absorb column sums.
pub fn factored_update(f: &mut FactoredPair, g: &Tensor, beta2: f64) -> Result<()> {
    if g.shape() != f.shape {
        return Err(Error::Shape(format!(
            "gradient shape {:?} vs factored shape {:?}",
            g.shape(),
            f.shape
        )));
    }
    let n_cols = f.cols.len();
    let mut row_sums = vec![0.0f64; f.rows.len()];
    let mut col_sums = vec![0.0f64; n_cols];
    for (idx, &v) in g.data().iter().enumerate() {
        let sq = v * v;
        row_sums[idx / n_cols] += sq;
        col_sums[idx % n_cols] += sq;
    }
    for (r, s) in f.rows.iter_mut().zip(&row_sums) {
        *r = beta2 * *r + (1.0 - beta2) * s;
    }
    for (c, s) in f.cols.iter_mut().zip(&col_sums) {
        *c = beta2 * *c + (1.0 - beta2) * s;
    }
    Ok(())
}

/// Outer-product reconstruction `v[i][j] = rows[i] * cols[j] / sum(rows)`.
/// A zero denominator (fresh state) reconstructs as all zeros.
pub fn factored_reconstruct(f: &FactoredPair) -> Result<Tensor> {
    let total: f64 = f.rows.iter().sum();
    let n_cols = f.cols.len();
    let numel = f.rows.len() * n_cols;
    let data = if total > 0.0 {
        (0..numel)
            .map(|idx| f.rows[idx / n_cols] * f.cols[idx % n_cols] / total)
            .collect()
    } else {
        vec![0.0; numel]
    };
    Tensor::new(f.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_input_is_rejected() {
        assert!(FactoredPair::zeros(&[5]).is_err());
    }

    #[test]
    fn single_update_matches_outer_product_formula() {
        let g = Tensor::new(
            vec![4, 3],
            vec![
                0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.9, 0.5, 1.1, 0.2, -0.6, 0.8,
            ],
        )
        .unwrap();
        let beta2 = 0.99;
        let mut f = FactoredPair::zeros(&[4, 3]).unwrap();
        factored_update(&mut f, &g, beta2).unwrap();
        let v = factored_reconstruct(&f).unwrap();

        // brute-force oracle straight from the definition
        let sq: Vec<f64> = g.data().iter().map(|x| x * x).collect();
        let rows: Vec<f64> = (0..4)
            .map(|i| (1.0 - beta2) * sq[3 * i..3 * i + 3].iter().sum::<f64>())
            .collect();
        let cols: Vec<f64> = (0..3)
            .map(|j| (1.0 - beta2) * (sq[j] + sq[3 + j] + sq[6 + j] + sq[9 + j]))
            .collect();
        let total: f64 = rows.iter().sum();
        for i in 0..4 {
            for j in 0..3 {
                let expect = rows[i] * cols[j] / total;
                let got = v.data()[3 * i + j];
                assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
            }
        }
        assert!(v.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn rank_one_steady_state_is_exact() {
        // if the running statistics equal those of v = r c^T, the
        // reconstruction returns exactly v
        let r = [0.5, 2.0, 1.5];
        let c = [0.25, 1.0, 0.75, 0.5];
        let mut f = FactoredPair::zeros(&[3, 4]).unwrap();
        let c_sum: f64 = c.iter().sum();
        let r_sum: f64 = r.iter().sum();
        f.rows = r.iter().map(|ri| ri * c_sum).collect();
        f.cols = c.iter().map(|cj| cj * r_sum).collect();
        let v = factored_reconstruct(&f).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((v.data()[4 * i + j] - r[i] * c[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradient_decays_reconstruction_by_beta2() {
        let g = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let beta2 = 0.9;
        let mut f = FactoredPair::zeros(&[2, 2]).unwrap();
        factored_update(&mut f, &g, beta2).unwrap();
        let before = factored_reconstruct(&f).unwrap();
        factored_update(&mut f, &Tensor::zeros(vec![2, 2]), beta2).unwrap();
        let after = factored_reconstruct(&f).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            // rows and cols both shrink by beta2, the normalizer by beta2 once
            assert!((a - beta2 * b).abs() < 1e-15);
        }
    }
}
