//! Sample-set quality metrics and the run report.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::DetectionScores;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::image::{Image, Shape};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    images: Vec<Image>,
    pub label: String,
}

impl SampleSet {
    pub fn new(images: Vec<Image>, label: impl Into<String>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("sample set is empty".into()))?
            .shape();
        for im in &images {
            first.check(&im.shape())?;
        }
        Ok(Self {
            images,
            label: label.into(),
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.images[0].shape()
    }
}

/// Squared 2-Wasserstein distance between two 1-D empirical distributions by
/// quantile matching. Inputs are sorted in place.
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / na as f64;
    }
    // Walk the merged quantile breakpoints k/na and l/nb.
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if ua <= ub {
            i += 1;
        }
        if ub <= ua {
            j += 1;
        }
    }
    total
}

/// Seeded random unit directions in `dim` dimensions.
pub fn projections(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 0, 0, Purpose::Projection);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project(set: &SampleSet, dir: &[f64]) -> Vec<f64> {
    set.images()
        .iter()
        .map(|im| im.data().iter().zip(dir).map(|(x, d)| x * d).sum())
        .collect()
}

/// Sliced 2-Wasserstein distance: the square root of the mean squared 1-D W2 over
/// `n_projections` seeded directions.
pub fn sliced_w2(a: &SampleSet, b: &SampleSet, n_projections: usize, seed: u64) -> Result<f64> {
    a.shape().check(&b.shape())?;
    if n_projections == 0 {
        return Err(Error::Usage("sliced_w2 needs at least one projection".into()));
    }
    let dirs = projections(a.shape().len(), n_projections, seed);
    let mean_sq = dirs
        .iter()
        .map(|d| w2_squared_1d(&mut project(a, d), &mut project(b, d)))
        .sum::<f64>()
        / n_projections as f64;
    Ok(mean_sq.sqrt())
}

fn kth_radii(set: &[Image], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = set
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, y)| x.sq_dist(y))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Image], radii: &[f64], probes: &[Image]) -> f64 {
    let inside = probes
        .iter()
        .filter(|p| manifold.iter().zip(radii).any(|(m, &r)| p.sq_dist(m) <= r))
        .count();
    inside as f64 / probes.len() as f64
}

/// Manifold k-NN precision and recall on raw pixels. A point lies on a manifold
/// when it is within (≤) the k-th neighbour distance of some member; identical
/// points therefore give zero-radius balls that still cover themselves.
pub fn knn_precision_recall(real: &SampleSet, gen: &SampleSet, k: usize) -> Result<(f64, f64)> {
    real.shape().check(&gen.shape())?;
    if k == 0 || real.len() < k + 1 || gen.len() < k + 1 {
        return Err(Error::Usage(format!(
            "knn metrics need k >= 1 and at least k+1 samples per set (k={k}, real={}, gen={})",
            real.len(),
            gen.len()
        )));
    }
    let rr = kth_radii(real.images(), k);
    let rg = kth_radii(gen.images(), k);
    Ok((
        coverage(real.images(), &rr, gen.images()),
        coverage(gen.images(), &rg, real.images()),
    ))
}

pub fn nll_under_model(model: &GmmModel, x: &Image) -> Result<f64> {
    model.nll(x)
}

pub fn mean_nll(model: &GmmModel, images: &[Image]) -> Result<f64> {
    let mut s = 0.0;
    for im in images {
        s += model.nll(im)?;
    }
    Ok(s / images.len().max(1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub sliced_w2: f64,
    pub mean_nll: f64,
    /// Absent when either set is too small for the neighbourhood size.
    pub knn_precision: Option<f64>,
    pub knn_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub method: String,
    pub n_samples: usize,
    pub detection: Option<DetectionScores>,
    pub quality: QualityScores,
    /// Additional named scalars (escape rate, mean mask size, ...).
    pub extra: BTreeMap<String, f64>,
    /// Wall-clock seconds per stage.
    pub timing: BTreeMap<String, f64>,
    /// Effective configuration, flattened to `section.key` entries.
    pub config: BTreeMap<String, String>,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        let mut values = vec![self.quality.sliced_w2, self.quality.mean_nll];
        values.extend(self.quality.knn_precision);
        values.extend(self.quality.knn_recall);
        if let Some(d) = &self.detection {
            values.extend([d.precision, d.recall, d.iou]);
        }
        values.extend(self.extra.values());
        values.extend(self.timing.values());
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("report '{}' holds a non-finite metric", self.label)))
        }
    }
}
