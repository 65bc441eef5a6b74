//! Two-dimensional PCA projections of head activations for plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, ScalpelError};
use crate::gmm::Gmm;
use crate::json;
use crate::store::{ActivationTensor, ManifoldLabel};

/// Principal axes of a sample matrix (rows are samples).
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `d × m`, one unit axis per column, by decreasing variance.
    pub axes: DMatrix<f64>,
    /// Variance along each axis.
    pub variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl Pca {
    pub fn fit(x: &DMatrix<f64>, m: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(ScalpelError::TooFewSamples);
        }
        if d == 0 {
            return Err(ScalpelError::EmptyDimension);
        }
        if m == 0 || m > d {
            return Err(ScalpelError::OutOfRange {
                what: "components",
                index: m,
                limit: d + 1,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ScalpelError::NonFinite);
        }
        let mean = DVector::from_fn(d, |c, _| x.column(c).mean());
        let mut centered = x.clone();
        for c in 0..d {
            centered.column_mut(c).add_scalar_mut(-mean[c]);
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut axes = DMatrix::zeros(d, m);
        let mut variance = Vec::with_capacity(m);
        for (k, &i) in order.iter().take(m).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // sign: largest-magnitude loading positive
            let big = v.iamax();
            if v[big] < 0.0 {
                v.neg_mut();
            }
            axes.set_column(k, &v);
            variance.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            axes,
            variance,
            total_variance: cov.trace(),
        })
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Coordinates of each row along the axes.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(ScalpelError::DimensionMismatch {
                expected: self.mean.len(),
                got: x.ncols(),
            });
        }
        let mut centered = x.clone();
        for c in 0..x.ncols() {
            centered.column_mut(c).add_scalar_mut(-self.mean[c]);
        }
        Ok(centered * &self.axes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pc1: f64,
    pub pc2: f64,
    pub label: Option<ManifoldLabel>,
    /// Hard GMM assignment, when a mixture was supplied.
    pub component: Option<usize>,
}

/// Project one head's activations from several tensors onto the top two
/// principal axes of their union. Each tensor may come with the mixture used
/// for its component ids.
pub fn project_head(
    parts: &[(&ActivationTensor, Option<&Gmm>)],
    layer: usize,
    head: usize,
) -> Result<(Pca, Vec<ProjectedPoint>)> {
    let slices = parts
        .iter()
        .map(|(t, _)| t.slice_head(layer, head))
        .collect::<Result<Vec<_>>>()?;
    let d = slices.first().ok_or(ScalpelError::TooFewSamples)?.ncols();
    let n: usize = slices.iter().map(|s| s.nrows()).sum();
    let mut all = DMatrix::zeros(n, d);
    let mut row = 0;
    for s in &slices {
        all.rows_mut(row, s.nrows()).copy_from(s);
        row += s.nrows();
    }
    let pca = Pca::fit(&all, d.min(2))?;
    let coords = pca.transform(&all)?;
    let mut points = Vec::with_capacity(n);
    let mut row = 0;
    for ((t, gmm), s) in parts.iter().zip(&slices) {
        for i in 0..s.nrows() {
            let component = match gmm {
                Some(g) => {
                    let z: Vec<f64> = s.row(i).iter().copied().collect();
                    Some(g.assign(&z)?.0)
                }
                None => None,
            };
            points.push(ProjectedPoint {
                pc1: coords[(row, 0)],
                pc2: if d > 1 { coords[(row, 1)] } else { 0.0 },
                label: t.label,
                component,
            });
            row += 1;
        }
    }
    Ok((pca, points))
}

/// Write `pc1,pc2,manifold_label,component_id`; returns the SHA-256.
pub fn write_csv(points: &[ProjectedPoint], path: &Path) -> Result<String> {
    let mut out = String::from("pc1,pc2,manifold_label,component_id\n");
    for p in points {
        let label = p.label.map_or("", ManifoldLabel::as_str);
        let comp = p.component.map(|c| c.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{label},{comp}", p.pc1, p.pc2).expect("writing to a string");
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| ScalpelError::io(parent, e))?;
        }
    }
    fs::write(path, &out).map_err(|e| ScalpelError::io(path, e))?;
    Ok(json::sha256_hex(out.as_bytes()))
}
