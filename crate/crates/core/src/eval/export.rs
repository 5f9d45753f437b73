//! Token-space export: health tokens, prototypes and a 2D PCA projection as CSV.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Target, WindowSet};
use crate::error::{Error, ModelError};
use crate::model::RmGpt;
use crate::numeric::Tensor;
use crate::token_space;

/// Top-2 principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit axes, largest variance first; each has its largest-magnitude coordinate positive.
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Pca2 {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = points.len();
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if n < 2 || dim < 2 || points.iter().any(|p| p.len() != dim) {
            return Err(ModelError::Shape(format!("PCA needs at least 2 points of equal dimension >= 2, got {n}")));
        }
        let mean: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| {
            let col = eig.eigenvectors.column(order[k]);
            let mut v: Vec<f64> = col.iter().copied().collect();
            let lead = v.iter().copied().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0))).map(|(i, _)| i).unwrap_or(0);
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
            variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        })
    }

    pub fn project(&self, p: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }

    pub fn reconstruct(&self, q: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len()).map(|j| self.mean[j] + q[0] * self.axes[0][j] + q[1] * self.axes[1][j]).collect()
    }
}

/// Mean pairwise distance between class centroids over mean distance of points to their own centroid.
pub fn separation_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, ModelError> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(ModelError::BadTarget("separation needs one label per point".into()));
    }
    let dim = points[0].len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (p, &y) in points.iter().zip(labels) {
        counts[y] += 1;
        for (c, x) in centroids[y].iter_mut().zip(p) {
            *c += x;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(ModelError::BadTarget("separation needs at least two classes".into()));
    }
    for &c in &present {
        centroids[c].iter_mut().for_each(|x| *x /= counts[c] as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    let intra = points.iter().zip(labels).map(|(p, &y)| dist(p, &centroids[y])).sum::<f64>() / points.len() as f64;
    Ok(inter / pairs as f64 / intra)
}

/// Flattened standardized windows, the reference space for [`separation_ratio`].
pub fn standardized_points(set: &WindowSet) -> Result<Vec<Vec<f64>>, Error> {
    set.windows
        .iter()
        .map(|w| {
            let rows = w.raw.shape()[0];
            let sw = crate::dataset::SignalWindow::standardize(&w.raw, rows, w.source.clone())?;
            Ok(sw.values.to_f64_vec())
        })
        .collect()
}

/// Flattened health tokens, one per window, in window order.
pub fn health_points(model: &RmGpt, set: &WindowSet) -> Result<Vec<Vec<f64>>, ModelError> {
    let windows: Vec<&Tensor<f32>> = set.windows.iter().map(|w| &w.raw).collect();
    Ok(model.health_tokens(&set.dataset, &windows, 32)?.iter().map(|h| h.to_f64_vec()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub health_rows: usize,
    pub prototype_rows: usize,
    pub files: Vec<PathBuf>,
}

fn target_label(t: &Target) -> String {
    match t {
        Target::Class(c) => c.to_string(),
        Target::Rul(r) => format!("{r}"),
        Target::Unlabeled => String::new(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `health.csv`, `prototypes.csv` and `pca.csv` into `dir`.
///
/// `health.csv`: `dataset,label,h0..` (label empty for unlabeled windows).
/// `prototypes.csv`: `dataset,class,h0..`.
/// `pca.csv`: `kind,dataset,label,pc1,pc2` with kind `health` or `prototype`.
pub fn export_embeddings(model: &RmGpt, set: &WindowSet, dir: &Path) -> Result<ExportSummary, Error> {
    std::fs::create_dir_all(dir)?;
    let health = health_points(model, set)?;
    let labels: Vec<String> = set.windows.iter().map(|w| target_label(&w.target)).collect();
    let bank_name = token_space::prototypes_name(&set.dataset);
    let protos: Vec<Vec<f64>> = match model.store.get(&bank_name) {
        Some(bank) => {
            let c = bank.shape()[0];
            (0..c).map(|i| bank.slice_axis(0, i, 1).map(|t| t.to_f64_vec())).collect::<Result<_, _>>()?
        }
        None => Vec::new(),
    };
    let dim = health.first().map_or(0, |h| h.len());
    let coords = |w: &mut csv::Writer<std::fs::File>, head: [&str; 2]| -> Result<(), Error> {
        let mut row: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        row.extend((0..dim).map(|j| format!("h{j}")));
        w.write_record(&row).map_err(csv_err)
    };

    let health_path = dir.join("health.csv");
    let mut w = csv::Writer::from_path(&health_path).map_err(csv_err)?;
    coords(&mut w, ["dataset", "label"])?;
    for (h, y) in health.iter().zip(&labels) {
        let mut row = vec![set.dataset.clone(), y.clone()];
        row.extend(h.iter().map(|x| format!("{x:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;

    let proto_path = dir.join("prototypes.csv");
    let mut w = csv::Writer::from_path(&proto_path).map_err(csv_err)?;
    coords(&mut w, ["dataset", "class"])?;
    for (c, p) in protos.iter().enumerate() {
        let mut row = vec![set.dataset.clone(), c.to_string()];
        row.extend(p.iter().map(|x| format!("{x:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;

    let mut files = vec![health_path, proto_path];
    let all: Vec<Vec<f64>> = health.iter().chain(&protos).cloned().collect();
    if all.len() >= 2 && dim >= 2 {
        let pca = Pca2::fit(&all)?;
        let pca_path = dir.join("pca.csv");
        let mut w = csv::Writer::from_path(&pca_path).map_err(csv_err)?;
        w.write_record(["kind", "dataset", "label", "pc1", "pc2"]).map_err(csv_err)?;
        for (h, y) in health.iter().zip(&labels) {
            let [a, b] = pca.project(h);
            w.write_record(["health", &set.dataset, y, &format!("{a:?}"), &format!("{b:?}")]).map_err(csv_err)?;
        }
        for (c, p) in protos.iter().enumerate() {
            let [a, b] = pca.project(p);
            w.write_record(["prototype", &set.dataset, &c.to_string(), &format!("{a:?}"), &format!("{b:?}")]).map_err(csv_err)?;
        }
        w.flush()?;
        files.push(pca_path);
    }
    Ok(ExportSummary {
        health_rows: health.len(),
        prototype_rows: protos.len(),
        files,
    })
}

/// One parsed row of `health.csv` or `prototypes.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub dataset: String,
    pub label: String,
    pub values: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))))
            .collect::<Result<_, _>>()?;
        out.push(EmbeddingRow {
            dataset: rec[0].to_string(),
            label: rec[1].to_string(),
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_points_reconstruct_exactly() {
        let u = [1.0, 2.0, 0.0, -1.0, 0.5];
        let v = [0.0, 1.0, 3.0, 1.0, -2.0];
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let (a, b) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
                (0..5).map(|j| 1.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let pca = Pca2::fit(&pts).unwrap();
        for p in &pts {
            let r = pca.reconstruct(pca.project(p));
            let err = r.iter().zip(p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
        for axis in &pca.axes {
            let lead = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
        assert!(pca.variances[0] >= pca.variances[1]);
    }

    #[test]
    fn separation_of_tight_clusters_is_large() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        let r = separation_ratio(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((r - 10.0 / 0.05).abs() < 1e-9);
        assert!(separation_ratio(&pts, &[0, 0, 0, 0]).is_err());
    }
}
