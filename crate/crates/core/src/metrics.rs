//! Sample-based distances between 2D point clouds.

use std::f64::consts::TAU;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Unit directions with angles uniform on the circle.
pub fn random_directions(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = crate::rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            [a.cos(), a.sin()]
        })
        .collect()
}

fn check_points(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != 2 || b.ncols() != 2 {
        return Err(Error::Usage("point clouds must have two columns".into()));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Usage("point clouds must be nonempty".into()));
    }
    Ok(())
}

fn sorted_projection(p: ArrayView2<'_, f64>, d: [f64; 2]) -> Vec<f64> {
    let mut v: Vec<f64> = p.rows().into_iter().map(|r| r[0] * d[0] + r[1] * d[1]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean over `dirs` of the 1D 2-Wasserstein distance between projections.
pub fn sliced_w2_dirs(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, dirs: &[[f64; 2]], exec: Exec) -> Result<f64> {
    check_points(a, b)?;
    if a.nrows() != b.nrows() {
        return Err(Error::Usage(format!("sliced W2 needs equal sizes, got {} and {}", a.nrows(), b.nrows())));
    }
    if dirs.is_empty() {
        return Err(Error::Usage("sliced W2 needs at least one projection".into()));
    }
    let per = exec.map_range(dirs.len(), |k| {
        let (pa, pb) = (sorted_projection(a, dirs[k]), sorted_projection(b, dirs[k]));
        let ms = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64;
        ms.sqrt()
    });
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Sliced 2-Wasserstein distance with `n_proj` seeded random directions.
pub fn sliced_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, n_proj: usize, seed: u64) -> Result<f64> {
    sliced_w2_with(a, b, n_proj, seed, Exec::default())
}

pub fn sliced_w2_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, n_proj: usize, seed: u64, exec: Exec) -> Result<f64> {
    sliced_w2_dirs(a, b, &random_directions(n_proj, seed), exec)
}

fn kernel_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64, skip_diag: bool, exec: Exec) -> f64 {
    let rows = exec.map_range(a.nrows(), |i| {
        let (x0, x1) = (a[[i, 0]], a[[i, 1]]);
        let mut s = 0.0;
        for j in 0..b.nrows() {
            if skip_diag && i == j {
                continue;
            }
            let (d0, d1) = (x0 - b[[j, 0]], x1 - b[[j, 1]]);
            s += (-gamma * (d0 * d0 + d1 * d1)).exp();
        }
        s
    });
    rows.iter().sum()
}

/// Unbiased MMD^2 with kernel `exp(-|x - y|^2 / (2 h^2))`, clamped at zero.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: f64) -> Result<f64> {
    mmd_rbf_with(a, b, bandwidth, Exec::default())
}

pub fn mmd_rbf_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: f64, exec: Exec) -> Result<f64> {
    Ok(mmd_rbf_unclamped(a, b, bandwidth, exec)?.max(0.0))
}

/// The raw unbiased estimate, which can be slightly negative.
pub fn mmd_rbf_unclamped(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: f64, exec: Exec) -> Result<f64> {
    check_points(a, b)?;
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Usage("unbiased MMD needs at least two points per set".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Usage(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    let kxx = kernel_sum(a, a, gamma, true, exec) / (m * (m - 1.0));
    let kyy = kernel_sum(b, b, gamma, true, exec) / (n * (n - 1.0));
    let kxy = kernel_sum(a, b, gamma, false, exec) / (m * n);
    Ok(kxx + kyy - 2.0 * kxy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_w2: f64,
    pub mmd_rbf: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub n_proj: usize,
    pub bandwidth: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { n_proj: DEFAULT_PROJECTIONS, bandwidth: 0.5 }
    }
}

impl MetricReport {
    pub fn compute(samples: &Array2<f64>, reference: &Array2<f64>, cfg: &MetricConfig, seed: u64, exec: Exec) -> Result<Self> {
        Ok(MetricReport {
            sliced_w2: sliced_w2_with(samples.view(), reference.view(), cfg.n_proj, seed, exec)?,
            mmd_rbf: mmd_rbf_with(samples.view(), reference.view(), cfg.bandwidth, exec)?,
            n_samples: samples.nrows(),
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud(n: usize, seed: u64) -> Array2<f64> {
        crate::normal_matrix(&mut crate::rng_from_seed(seed), n, 2, 1.0)
    }

    #[test]
    fn identical_clouds_have_zero_distance() {
        let a = cloud(500, 1);
        assert!(sliced_w2(a.view(), a.view(), 64, 2).unwrap() <= 1e-12);
        let mmd = mmd_rbf_unclamped(a.view(), a.view(), 0.5, Exec::Sequential).unwrap();
        // For a == b the estimate is (2/m)(off-diagonal kernel mean - 1), slightly negative.
        assert!(mmd < 0.0 && mmd > -2.0 / 500.0);
        assert_eq!(mmd_rbf(a.view(), a.view(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_on_the_x_axis() {
        let a = Array2::zeros((10, 2));
        let mut b = Array2::zeros((10, 2));
        b.column_mut(0).fill(2.5);
        let d = sliced_w2_dirs(a.view(), b.view(), &[[1.0, 0.0]], Exec::Sequential).unwrap();
        assert!((d - 2.5).abs() < 1e-15);
    }

    #[test]
    fn translation_stays_in_the_projected_band() {
        let a = cloud(400, 3);
        let c = array![0.8, -0.6];
        let b = &a + &c;
        let d = sliced_w2(a.view(), b.view(), 2000, 4).unwrap();
        assert!((0.6..=1.0).contains(&d), "d = {d}");
    }

    #[test]
    fn size_mismatch_is_a_usage_error() {
        let err = sliced_w2(cloud(10, 1).view(), cloud(11, 2).view(), 8, 0).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn mmd_symmetry_and_far_clusters() {
        let a = cloud(200, 5);
        let b = cloud(200, 6) + 50.0;
        let ab = mmd_rbf(a.view(), b.view(), 0.5).unwrap();
        let ba = mmd_rbf(b.view(), a.view(), 0.5).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // Cross terms vanish, so MMD^2 is the sum of the two self-kernel means.
        let gamma = 2.0;
        let self_mean = |p: &Array2<f64>| kernel_sum(p.view(), p.view(), gamma, true, Exec::Sequential) / (200.0 * 199.0);
        assert!((ab - (self_mean(&a) + self_mean(&b))).abs() < 1e-12);
    }

    #[test]
    fn mmd_same_law_is_within_noise() {
        // Permutation oracle: spread of the estimate over random splits of one pool.
        let pool = cloud(800, 7);
        let mut rng = crate::rng_from_seed(8);
        let mut values = Vec::new();
        for _ in 0..30 {
            let mut idx: Vec<usize> = (0..800).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let a = pool.select(ndarray::Axis(0), &idx[..400]);
            let b = pool.select(ndarray::Axis(0), &idx[400..]);
            values.push(mmd_rbf_unclamped(a.view(), b.view(), 0.5, Exec::Sequential).unwrap());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt();
        let probe = mmd_rbf_unclamped(cloud(400, 9).view(), cloud(400, 10).view(), 0.5, Exec::Sequential).unwrap();
        assert!(probe.abs() < 3.0 * sd, "probe {probe}, sd {sd}");
    }

    #[test]
    fn policies_agree_bitwise() {
        let (a, b) = (cloud(300, 1), cloud(300, 2));
        let s = MetricReport::compute(&a, &b, &MetricConfig::default(), 3, Exec::Sequential).unwrap();
        let p = MetricReport::compute(&a, &b, &MetricConfig::default(), 3, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }
}
