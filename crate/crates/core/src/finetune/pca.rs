use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::instance_normalize;
use crate::error::{Error, Result};
use crate::model::SiameseModel;
use crate::par::Exec;
use crate::tensor::Tensor;

pub const PCA_MAX_ITERS: usize = 1000;
pub const PCA_TOL: f64 = 1e-8;

/// Leading principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit vectors; a zero vector marks a missing (degenerate) component.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Top-`k` covariance eigenvectors by power iteration with deflation.
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Data("PCA needs at least two points".into()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::shape("pca", "points must share a positive dimension"));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for p in points {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j] / (n - 1) as f64;
                }
            }
        }
        let scale = (0..d).map(|i| cov[i * d + i]).sum::<f64>().max(f64::MIN_POSITIVE);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut components = Vec::with_capacity(k);
        let mut eigenvalues = Vec::with_capacity(k);
        for _ in 0..k {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize(&mut v);
            let mut lambda = 0.0;
            for _ in 0..PCA_MAX_ITERS {
                let w = mat_vec(&cov, &v);
                if norm(&w) <= 1e-12 * scale {
                    break;
                }
                let mut w = w;
                normalize(&mut w);
                let sign = if dot(&v, &w) < 0.0 { -1.0 } else { 1.0 };
                let change = v.iter().zip(&w).map(|(a, b)| (a - sign * b).powi(2)).sum::<f64>();
                v = w;
                lambda = dot(&v, &mat_vec(&cov, &v));
                if change.sqrt() < PCA_TOL {
                    break;
                }
            }
            if lambda <= 1e-12 * scale {
                components.push(vec![0.0; d]);
                eigenvalues.push(0.0);
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] -= lambda * v[i] * v[j];
                }
            }
            components.push(v);
            eigenvalues.push(lambda);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = point.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        self.components.iter().map(|axis| dot(axis, &c)).collect()
    }

    /// True when fewer than two non-zero components were found.
    pub fn is_degenerate(&self) -> bool {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count() < self.components.len()
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
}

/// One point of the lineage-diversity scatter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaPoint {
    pub window_id: usize,
    pub lineage: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineagePca {
    pub points: Vec<PcaPoint>,
    pub degenerate: bool,
}

impl LineagePca {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_id,lineage,pc1,pc2\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{:.8},{:.8}", p.window_id, p.lineage, p.pc1, p.pc2);
        }
        s
    }
}

/// Full encodings of a raw `[T, C]` window under lineages `0..n`.
pub fn lineage_encodings(
    model: &SiameseModel<f32>,
    window: &Tensor<f32>,
    n: usize,
) -> Result<Vec<Vec<f32>>> {
    if n == 0 || n > model.config.lineages + 1 {
        return Err(Error::Config(format!(
            "lineage count {n} outside 1..={}",
            model.config.lineages + 1
        )));
    }
    let (x, _) = instance_normalize(window);
    let mut tape = model.tape();
    (0..n)
        .map(|i| {
            let h = model.encode_window(&mut tape, &x, i)?;
            Ok(tape.value(h.var).to_vec())
        })
        .collect()
}

/// Mean-pooled representation per (window, lineage), projected onto the two
/// leading principal components of all representations.
pub fn lineage_diversity_pca(
    model: &SiameseModel<f32>,
    windows: &[Tensor<f32>],
    n_lineages: usize,
    exec: Exec,
) -> Result<LineagePca> {
    if windows.len() < 2 {
        return Err(Error::Data("lineage PCA needs at least two windows".into()));
    }
    let d = model.config.d_model;
    let pooled: Vec<Vec<Vec<f64>>> = exec.try_map(windows.len(), |w| {
        let enc = lineage_encodings(model, &windows[w], n_lineages)?;
        Ok::<_, Error>(
            enc.iter()
                .map(|e| {
                    let tokens = e.len() / d;
                    (0..d)
                        .map(|j| (0..tokens).map(|t| e[t * d + j] as f64).sum::<f64>() / tokens as f64)
                        .collect()
                })
                .collect(),
        )
    })?;
    let flat: Vec<Vec<f64>> = pooled.iter().flatten().cloned().collect();
    let pca = Pca::fit(&flat, 2)?;
    let points = pooled
        .iter()
        .enumerate()
        .flat_map(|(w, per)| {
            let pca = &pca;
            per.iter().enumerate().map(move |(l, rep)| {
                let pc = pca.project(rep);
                PcaPoint {
                    window_id: w,
                    lineage: l,
                    pc1: pc[0],
                    pc2: pc[1],
                }
            })
        })
        .collect();
    Ok(LineagePca {
        points,
        degenerate: pca.is_degenerate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_series;
    use crate::model::ModelConfig;

    #[test]
    fn identical_points_sit_at_the_origin() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 5];
        let pca = Pca::fit(&pts, 2).unwrap();
        assert!(pca.is_degenerate());
        for p in &pts {
            assert_eq!(pca.project(p), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn first_component_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        for i in 0..40 {
            let centre = if i < 20 { -5.0 } else { 5.0 };
            pts.push(vec![
                centre + rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
        }
        let pca = Pca::fit(&pts, 2).unwrap();
        assert!(pca.components[0][0].abs() > 0.99);
        let side: Vec<bool> = pts.iter().map(|p| pca.project(p)[0] > 0.0).collect();
        assert!(side[..20].iter().all(|&s| s == side[0]));
        assert!(side[20..].iter().all(|&s| s != side[0]));
        // second axis is orthogonal to the first
        assert!(dot(&pca.components[0], &pca.components[1]).abs() < 1e-6);
    }

    #[test]
    fn eigenvalues_match_a_diagonal_covariance() {
        // points ±(3,0) and ±(0,1): covariance diag(18/3, 2/3) with n-1 = 3
        let pts = vec![vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let pca = Pca::fit(&pts, 2).unwrap();
        assert!((pca.eigenvalues[0] - 6.0).abs() < 1e-9);
        assert!((pca.eigenvalues[1] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_lineage_rows_collapse_the_scatter() {
        let mut model = SiameseModel::<f32>::new(ModelConfig::tiny(2), 3).unwrap();
        model.zero_lineage();
        let frame = synthetic_series(64, 2, 4);
        let windows: Vec<_> = (0..4).map(|i| frame.window(i * 10, 8).unwrap()).collect();
        let out = lineage_diversity_pca(&model, &windows, 3, Exec::Parallel).unwrap();
        assert_eq!(out.points.len(), 12);
        for w in out.points.chunks(3) {
            assert!(w.iter().all(|p| p.pc1 == w[0].pc1 && p.pc2 == w[0].pc2));
        }
        assert!(out.to_csv().starts_with("window_id,lineage,pc1,pc2\n0,0,"));
    }
}
