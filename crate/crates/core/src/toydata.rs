//! Synthetic 2D conditional datasets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    GaussMix,
    TwoMoons,
    Checkerboard,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::GaussMix => "gauss-mix",
            DatasetName::TwoMoons => "two-moons",
            DatasetName::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss-mix" => Ok(DatasetName::GaussMix),
            "two-moons" => Ok(DatasetName::TwoMoons),
            "checkerboard" => Ok(DatasetName::Checkerboard),
            other => Err(Error::Config(format!("unknown dataset name `{other}`"))),
        }
    }
}

/// One isotropic Gaussian component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussComponent {
    pub mean: [f64; 2],
    pub std: f64,
    pub weight: f64,
}

/// Full description of a dataset family, including its shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum DatasetSpec {
    GaussMix { components: Vec<GaussComponent> },
    TwoMoons { noise: f64 },
    Checkerboard,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::default_for(DatasetName::GaussMix)
    }
}

impl DatasetSpec {
    /// Default parameters for a named family. The mixture has three equally
    /// weighted components on a circle of radius 1.5.
    pub fn default_for(name: DatasetName) -> Self {
        match name {
            DatasetName::GaussMix => {
                let components = (0..3)
                    .map(|k| {
                        let angle = std::f64::consts::FRAC_PI_2
                            + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        GaussComponent {
                            mean: [1.5 * angle.cos(), 1.5 * angle.sin()],
                            std: 0.35,
                            weight: 1.0,
                        }
                    })
                    .collect();
                DatasetSpec::GaussMix { components }
            }
            DatasetName::TwoMoons => DatasetSpec::TwoMoons { noise: 0.1 },
            DatasetName::Checkerboard => DatasetSpec::Checkerboard,
        }
    }

    /// A single zero-mean isotropic Gaussian with the given per-axis std.
    pub fn single_gaussian(std: f64) -> Self {
        DatasetSpec::GaussMix {
            components: vec![GaussComponent { mean: [0.0, 0.0], std, weight: 1.0 }],
        }
    }

    pub fn name(&self) -> DatasetName {
        match self {
            DatasetSpec::GaussMix { .. } => DatasetName::GaussMix,
            DatasetSpec::TwoMoons { .. } => DatasetName::TwoMoons,
            DatasetSpec::Checkerboard => DatasetName::Checkerboard,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::GaussMix { components } => components.len(),
            DatasetSpec::TwoMoons { .. } | DatasetSpec::Checkerboard => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if let DatasetSpec::GaussMix { components } = self {
            if components.is_empty() {
                return Err(Error::Config("gauss-mix needs at least one component".into()));
            }
            for c in components {
                if !(c.std > 0.0 && c.weight > 0.0) || !c.std.is_finite() || !c.weight.is_finite() {
                    return Err(Error::Config(format!("invalid mixture component {c:?}")));
                }
            }
        }
        if let DatasetSpec::TwoMoons { noise } = self {
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(Error::Config(format!("invalid two-moons noise {noise}")));
            }
        }
        Ok(())
    }
}

/// A single conditional training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub x0: [f64; 2],
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub sigma_d: f64,
}

/// Draw `n` points from the named family with default parameters.
pub fn generate(name: DatasetName, n: usize, seed: u64) -> Result<Dataset> {
    generate_from(&DatasetSpec::default_for(name), n, seed)
}

pub fn generate_from(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("dataset needs n >= 2, got {n}")));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match spec {
        DatasetSpec::GaussMix { components } => {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            for _ in 0..n {
                let u: f64 = rng.random::<f64>() * total;
                let mut k = components.len() - 1;
                let mut acc = 0.0;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let c = &components[k];
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                points.push([c.mean[0] + c.std * e0, c.mean[1] + c.std * e1]);
                labels.push(k);
            }
        }
        DatasetSpec::TwoMoons { noise } => {
            for _ in 0..n {
                let moon = usize::from(rng.random::<bool>());
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let (px, py) = if moon == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                // centre the pair of moons on the origin
                points.push([px - 0.5 + noise * e0, py - 0.25 + noise * e1]);
                labels.push(moon);
            }
        }
        DatasetSpec::Checkerboard => {
            // 4x4 tiles of side 1 on [-2, 2]^2; tiles with even (col + row) are filled.
            // Label is the column parity of the tile, giving two interleaved classes.
            let filled: Vec<(usize, usize)> = (0..4)
                .flat_map(|col| (0..4).map(move |row| (col, row)))
                .filter(|(col, row)| (col + row) % 2 == 0)
                .collect();
            for _ in 0..n {
                let (col, row) = filled[rng.random_range(0..filled.len())];
                let px = -2.0 + col as f64 + rng.random::<f64>();
                let py = -2.0 + row as f64 + rng.random::<f64>();
                points.push([px, py]);
                labels.push(col % 2);
            }
        }
    }
    let sigma_d = pooled_std(&points);
    Ok(Dataset { name: spec.name(), points, labels, num_classes: spec.num_classes(), sigma_d })
}

/// Population standard deviation of all coordinates pooled together.
pub fn pooled_std(points: &[[f64; 2]]) -> f64 {
    let count = (2 * points.len()) as f64;
    let mean = points.iter().map(|p| p[0] + p[1]).sum::<f64>() / count;
    let var = points
        .iter()
        .map(|p| (p[0] - mean).powi(2) + (p[1] - mean).powi(2))
        .sum::<f64>()
        / count;
    var.sqrt()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The index reserved for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn points_array(&self) -> Array2<f64> {
        points_to_array(&self.points)
    }

    /// Draw `b` samples uniformly with replacement.
    pub fn minibatch<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<Sample>> {
        if b == 0 {
            return Err(Error::Config("minibatch size must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(Error::State("cannot draw a minibatch from an empty dataset".into()));
        }
        Ok((0..b)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                Sample { x0: self.points[i], y: self.labels[i] }
            })
            .collect())
    }

    /// Labels drawn from the empirical class distribution.
    pub fn sample_labels<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.labels[rng.random_range(0..self.len())]).collect()
    }

    /// Write `x,y,label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_points_csv(path, &self.points_array(), &self.labels)
    }
}

/// Standalone minibatch draw, mirroring [`Dataset::minibatch`].
pub fn minibatch<R: Rng + ?Sized>(ds: &Dataset, b: usize, rng: &mut R) -> Result<Vec<Sample>> {
    ds.minibatch(b, rng)
}

/// Column-major friendly batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Array2<f64>,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut x0 = Array2::zeros((samples.len(), 2));
        for (i, s) in samples.iter().enumerate() {
            x0[[i, 0]] = s.x0[0];
            x0[[i, 1]] = s.x0[1];
        }
        Batch { x0, y: samples.iter().map(|s| s.y).collect() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn points_to_array(points: &[[f64; 2]]) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), 2));
    for (i, p) in points.iter().enumerate() {
        out[[i, 0]] = p[0];
        out[[i, 1]] = p[1];
    }
    out
}

/// Write a batch of 2D points with labels as `x,y,label` CSV.
pub fn write_points_csv(path: &Path, points: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "label"])?;
    for (row, label) in points.outer_iter().zip(labels) {
        w.write_record([row[0].to_string(), row[1].to_string(), label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a CSV written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad CSV row in {}", path.display())))
        };
        pts.push([parse(0)?, parse(1)?]);
        labels.push(parse(2)? as usize);
    }
    Ok((points_to_array(&pts), labels))
}
