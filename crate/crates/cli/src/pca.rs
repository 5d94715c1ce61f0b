use nalgebra::{DMatrix, SymmetricEigen};

/// Two leading principal directions of the rows of `x`, plus the mean.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

impl Pca2 {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1.0).max(1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| -> Vec<f64> {
            let Some(&col) = order.get(k) else {
                return vec![0.0; d];
            };
            let v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            // Fix the sign so repeated runs give the same picture.
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        };
        Self {
            axes: [axis(0), axis(1)],
            mean,
        }
    }

    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = row.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}
