//! Diagnostics: update-norm histograms, clip-factor statistics, empirical
//! sensitivity of local updates, and loss-landscape probes around a model.
//!
//! Probe directions use per-layer filter normalization: a Gaussian direction
//! whose block for each layer is rescaled to that layer's weight norm.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{Federation, LocalUpdateReport};
use crate::nn::{Batch, Objective, ParameterVector};
use crate::rng::{self, Purpose};

pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistogram {
    pub round: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `DEFAULT_BINS` uniform bins over `[0, 2C]`.
pub fn default_edges(clip: f64) -> Vec<f64> {
    (0..=DEFAULT_BINS)
        .map(|i| 2.0 * clip * i as f64 / DEFAULT_BINS as f64)
        .collect()
}

/// Histogram of `values`; anything outside the edges lands in the nearest
/// end bin.
pub fn histogram(values: &[f64], edges: &[f64], round: usize) -> Result<NormHistogram> {
    if edges.len() < 2 {
        return Err(Error::invalid(
            "edges",
            format!("need at least 2 edges, got {}", edges.len()),
        ));
    }
    if edges
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::invalid("edges", "must be strictly increasing"));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &v in values {
        let bin = edges
            .partition_point(|&e| e <= v)
            .saturating_sub(1)
            .min(bins - 1);
        counts[bin] += 1;
    }
    Ok(NormHistogram {
        round,
        edges: edges.to_vec(),
        counts,
    })
}

/// Histogram of the reports' pre-clip norms.
pub fn update_norm_histogram(
    reports: &[LocalUpdateReport],
    edges: &[f64],
    round: usize,
) -> Result<NormHistogram> {
    let norms: Vec<f64> = reports.iter().map(|r| r.pre_clip_norm).collect();
    histogram(&norms, edges, round)
}

pub fn histogram_csv(histograms: &[NormHistogram]) -> String {
    let mut out = String::from("round,bin_lo,bin_hi,count\n");
    for h in histograms {
        for (i, count) in h.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                h.round,
                h.edges[i],
                h.edges[i + 1],
                count
            );
        }
    }
    out
}

/// Mean clip factor and mean absolute deviation from it.
pub fn clip_factor_stats(factors: &[f64]) -> (f64, f64) {
    if factors.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = factors.len() as f64;
    let mean = factors.iter().sum::<f64>() / n;
    let mad = factors.iter().map(|a| (a - mean).abs()).sum::<f64>() / n;
    (mean, mad)
}

/// Squared distance between the client's unclipped, noiseless local updates
/// on two datasets that share the client's shard indices.
pub fn sensitivity_between(
    fed: &Federation<'_>,
    client: usize,
    global: &ParameterVector,
    round: usize,
    first: &Dataset,
    second: &Dataset,
) -> Result<f64> {
    let shard = fed.partition().shard(client);
    let a = fed.local_training(first, shard, global, round, client)?;
    let b = fed.local_training(second, shard, global, round, client)?;
    Ok(a.update.sub(&b.update).iter().map(|v| v * v).sum())
}

/// One draw of `||Delta(x) - Delta(y)||^2` where `y` replaces one random
/// example of the client's shard with a random example held by nobody else
/// in that shard. Batch order and all other seeds are shared.
pub fn empirical_sensitivity(
    fed: &Federation<'_>,
    client: usize,
    global: &ParameterVector,
    round: usize,
    seed: u64,
) -> Result<f64> {
    let train = fed.train_set();
    let shard = fed.partition().shard(client);
    if shard.len() < 2 {
        return Err(Error::invalid(
            "client",
            format!("shard of client {client} needs >= 2 examples"),
        ));
    }
    if shard.len() >= train.len() {
        return Err(Error::invalid(
            "client",
            "no example outside the shard to swap in",
        ));
    }
    let mut rng = rng::stream(seed, round as u64, client as u64, Purpose::Sensitivity);
    let target = shard[rng.random_range(0..shard.len())];
    let donor = loop {
        let candidate = rng.random_range(0..train.len());
        if shard.binary_search(&candidate).is_err() {
            break candidate;
        }
    };
    let neighbour = train.with_row_replaced(target, train, donor);
    sensitivity_between(fed, client, global, round, train, &neighbour)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessProbe {
    pub radii: Vec<f64>,
    /// Mean of `loss(w + r u) - loss(w)` over the directions, per radius.
    pub mean_increase: Vec<f64>,
    pub directions: usize,
}

/// Gaussian direction with each block rescaled to the norm of the matching
/// block of `w`.
pub fn filter_normalized_direction<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    w: &[f64],
    rng: &mut R,
) -> ParameterVector {
    let mut dir: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
    for block in objective.param_blocks() {
        let target = crate::nn::l2_norm(&w[block.clone()]);
        let current = crate::nn::l2_norm(&dir[block.clone()]);
        let scale = if current > 0.0 { target / current } else { 0.0 };
        dir[block].iter_mut().for_each(|v| *v *= scale);
    }
    ParameterVector::new(dir)
}

fn displaced(w: &[f64], steps: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = w.to_vec();
    for &(r, dir) in steps {
        out.iter_mut().zip(dir).for_each(|(x, d)| *x += r * d);
    }
    out
}

/// Mean loss increase along explicitly supplied directions.
pub fn sharpness_along<O: Objective + ?Sized>(
    objective: &O,
    w: &[f64],
    data: &Batch,
    radii: &[f64],
    directions: &[ParameterVector],
) -> Result<SharpnessProbe> {
    if directions.is_empty() {
        return Err(Error::invalid("directions", "need at least one direction"));
    }
    if !radii.contains(&0.0) {
        return Err(Error::invalid("radii", "must include 0"));
    }
    let base = objective.loss(w, data)?;
    let losses: Vec<Vec<f64>> = radii
        .par_iter()
        .map(|&r| {
            directions
                .iter()
                .map(|u| objective.loss(&displaced(w, &[(r, u)]), data))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mean_increase = losses
        .iter()
        .map(|per_dir| per_dir.iter().map(|l| l - base).sum::<f64>() / per_dir.len() as f64)
        .collect();
    Ok(SharpnessProbe {
        radii: radii.to_vec(),
        mean_increase,
        directions: directions.len(),
    })
}

pub fn sharpness_probe<O: Objective + ?Sized>(
    objective: &O,
    w: &[f64],
    data: &Batch,
    radii: &[f64],
    directions: usize,
    seed: u64,
) -> Result<SharpnessProbe> {
    if directions == 0 {
        return Err(Error::invalid("directions", "need at least one direction"));
    }
    let mut rng = rng::seeded(seed, Purpose::Probe);
    let dirs: Vec<ParameterVector> = (0..directions)
        .map(|_| filter_normalized_direction(objective, w, &mut rng))
        .collect();
    sharpness_along(objective, w, data, radii, &dirs)
}

pub fn probe_csv(probe: &SharpnessProbe) -> String {
    let mut out = String::from("radius,mean_loss_increase,directions\n");
    for (r, inc) in probe.radii.iter().zip(&probe.mean_increase) {
        let _ = writeln!(out, "{r},{inc},{}", probe.directions);
    }
    out
}

/// Loss on the plane `w + a u + b v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSlice {
    /// Grid coordinates shared by both axes.
    pub coords: Vec<f64>,
    /// Row-major: `losses[i * n + j]` is at `(a, b) = (coords[i], coords[j])`.
    pub losses: Vec<f64>,
}

impl LandscapeSlice {
    pub fn resolution(&self) -> usize {
        self.coords.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.coords.len() + j]
    }
}

/// `resolution` evenly spaced points over `[-extent, extent]`; the middle
/// point is exactly 0 for odd resolutions.
pub fn grid_coords(extent: f64, resolution: usize) -> Vec<f64> {
    let last = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| extent * (2.0 * i as f64 / last - 1.0))
        .collect()
}

pub fn landscape_slice<O: Objective + ?Sized>(
    objective: &O,
    w: &[f64],
    data: &Batch,
    extent: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeSlice> {
    if resolution < 2 {
        return Err(Error::invalid(
            "resolution",
            format!("must be >= 2, got {resolution}"),
        ));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::invalid(
            "extent",
            format!("must be finite and > 0, got {extent}"),
        ));
    }
    let mut rng = rng::seeded(seed, Purpose::Probe);
    let u = filter_normalized_direction(objective, w, &mut rng);
    let v = filter_normalized_direction(objective, w, &mut rng);
    let coords = grid_coords(extent, resolution);
    let losses: Vec<f64> = (0..resolution * resolution)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (coords[cell / resolution], coords[cell % resolution]);
            objective.loss(&displaced(w, &[(a, &u), (b, &v)]), data)
        })
        .collect::<Result<_>>()?;
    Ok(LandscapeSlice { coords, losses })
}

pub fn slice_csv(slice: &LandscapeSlice) -> String {
    let mut out = String::from("a\\b");
    for b in &slice.coords {
        let _ = write!(out, ",{b}");
    }
    out.push('\n');
    for (i, a) in slice.coords.iter().enumerate() {
        let _ = write!(out, "{a}");
        for j in 0..slice.resolution() {
            let _ = write!(out, ",{}", slice.at(i, j));
        }
        out.push('\n');
    }
    out
}
