//! Synthetic multi-view multi-graph data with planted subject clusters.
//!
//! Every view draws its own node factor `H (M x R)` and its own cluster
//! centroids in subject-factor space; cluster memberships are shared across
//! views. Subject `n` gets `f_n = centroid(cluster(n)) + jitter`, and its
//! affinity matrix is `W_n = H diag(f_n) Hᵀ + (E + Eᵀ)/2` with
//! `E_ij ~ N(0, noise_sigma²)`, so every slice is exactly symmetric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{GraphViewTensor, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub views: usize,
    pub nodes: usize,
    /// Sizes of the planted clusters; their sum is the subject count.
    pub cluster_sizes: Vec<usize>,
    pub rank: usize,
    /// Distance between cluster centroids in subject-factor space.
    pub separation: f64,
    /// Standard deviation of the additive affinity noise before symmetrization.
    pub noise_sigma: f64,
    /// Standard deviation of each subject's offset from its centroid.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            views: 2,
            nodes: 20,
            cluster_sizes: vec![20, 20],
            rank: 4,
            separation: 5.0,
            noise_sigma: 0.05,
            jitter: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Dimensions of the HIV cohort: 90 regions, 35 patients and 35 controls.
    pub fn hiv_shape_preset() -> Self {
        SyntheticSpec {
            nodes: 90,
            cluster_sizes: vec![35, 35],
            ..Default::default()
        }
    }

    /// Dimensions of the bipolar cohort: 82 regions, 52 patients and 45 controls.
    pub fn bp_shape_preset() -> Self {
        SyntheticSpec {
            nodes: 82,
            cluster_sizes: vec![52, 45],
            ..Default::default()
        }
    }

    pub fn subjects(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.views == 0 || self.nodes == 0 || self.rank == 0 {
            return bad("views, nodes and rank must be positive".into());
        }
        if self.cluster_sizes.is_empty() || self.cluster_sizes.contains(&0) {
            return bad(format!(
                "cluster sizes must be non-empty and positive, got {:?}",
                self.cluster_sizes
            ));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("noise_sigma", self.noise_sigma),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// 1-based cluster label of every subject; clusters occupy contiguous blocks.
    pub fn labels(&self) -> Vec<usize> {
        self.cluster_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &size)| std::iter::repeat_n(k + 1, size))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub views: Vec<GraphViewTensor>,
    pub labels: Vec<usize>,
    /// Planted node factor of each view.
    pub node_factors: Vec<Matrix>,
    /// Planted subject factors of each view.
    pub subject_factors: Vec<Matrix>,
}

fn normal<G: Rng>(rng: &mut G) -> f64 {
    rng.sample(StandardNormal)
}

/// `k` centroid offsets with pairwise distance `separation`: scaled
/// orthonormal directions when `k <= dim`, random unit directions otherwise.
fn centroid_offsets<G: Rng>(k: usize, dim: usize, separation: f64, rng: &mut G) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        if dirs.len() < dim {
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    dirs.into_iter()
        .map(|d| d.into_iter().map(|x| x * scale).collect())
        .collect()
}

fn generate_view(
    spec: &SyntheticSpec,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(GraphViewTensor, Matrix, Matrix)> {
    let (m, r, n) = (spec.nodes, spec.rank, labels.len());
    let h = Matrix::random_normal(m, r, rng);
    let base: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
    let offsets = centroid_offsets(spec.clusters(), r, spec.separation, rng);
    let mut f = Matrix::zeros(n, r);
    for (s, &label) in labels.iter().enumerate() {
        let row = f.row_mut(s);
        for (j, x) in row.iter_mut().enumerate() {
            *x = base[j] + offsets[label - 1][j] + spec.jitter * normal(rng);
        }
    }

    let mut data = Vec::with_capacity(m * m * n);
    let mut noise = vec![0.0; m * m];
    for s in 0..n {
        let w = f.row(s);
        if spec.noise_sigma > 0.0 {
            for e in noise.iter_mut() {
                *e = spec.noise_sigma * normal(rng);
            }
        }
        for j in 0..m {
            let hj = h.row(j);
            for i in 0..m {
                let hi = h.row(i);
                let mut v = 0.0;
                for c in 0..r {
                    v += w[c] * (hi[c] * hj[c]);
                }
                if spec.noise_sigma > 0.0 {
                    v += 0.5 * (noise[i + m * j] + noise[j + m * i]);
                }
                data.push(v);
            }
        }
    }
    // hi*hj and the noise sum commute exactly, so slices are bitwise symmetric
    let view = GraphViewTensor::new(Tensor3::new((m, m, n), data)?, 0.0)?;
    Ok((view, h, f))
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let labels = spec.labels();
    let mut views = Vec::with_capacity(spec.views);
    let mut node_factors = Vec::with_capacity(spec.views);
    let mut subject_factors = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(v as u64);
        let (view, h, f) = generate_view(spec, &labels, &mut rng)?;
        views.push(view);
        node_factors.push(h);
        subject_factors.push(f);
    }
    Ok(SyntheticDataset {
        views,
        labels,
        node_factors,
        subject_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_partial_symmetry;

    #[test]
    fn noiseless_single_cluster_slices_identical() {
        let spec = SyntheticSpec {
            cluster_sizes: vec![6],
            noise_sigma: 0.0,
            jitter: 0.0,
            nodes: 5,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        for view in &data.views {
            let first = view.tensor().frontal_slice(0).unwrap();
            for k in 1..view.subject_count() {
                assert_eq!(view.tensor().frontal_slice(k).unwrap(), first);
            }
        }
    }

    #[test]
    fn slices_exactly_symmetric() {
        for noise_sigma in [0.0, 0.3] {
            let spec = SyntheticSpec {
                noise_sigma,
                ..Default::default()
            };
            for view in generate(&spec).unwrap().views {
                assert!(check_partial_symmetry(view.tensor(), 0.0).unwrap().symmetric);
            }
        }
    }

    #[test]
    fn presets_match_cohort_dimensions() {
        let hiv = SyntheticSpec::hiv_shape_preset();
        assert_eq!((hiv.nodes, hiv.subjects(), hiv.views), (90, 70, 2));
        assert_eq!(hiv.cluster_sizes, vec![35, 35]);
        let bp = SyntheticSpec::bp_shape_preset();
        assert_eq!((bp.nodes, bp.subjects(), bp.views), (82, 97, 2));
        assert_eq!(bp.cluster_sizes, vec![52, 45]);
    }

    #[test]
    fn centroids_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offs = centroid_offsets(3, 4, 5.0, &mut rng);
        for a in 0..3 {
            for b in 0..a {
                let d: f64 = offs[a].iter().zip(&offs[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((d.sqrt() - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.labels, spec.labels());

        let bad = SyntheticSpec {
            cluster_sizes: vec![3, 0],
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
    }
}
