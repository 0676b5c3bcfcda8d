//! Datasets, the on-disk binary format and client partitioning.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! b"DPFD" | u32 n | u32 dim | u32 classes | n*dim f32 inputs | n u32 labels
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::Batch;
use crate::rng::{self, Purpose};

pub const DATASET_MAGIC: [u8; 4] = *b"DPFD";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    labels: Vec<u32>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f32>, labels: Vec<u32>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        if classes == 0 {
            return Err(Error::invalid("classes", "must be >= 1"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: inputs.len(),
                context: "dataset inputs (n x dim)",
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: label as usize,
                classes,
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend(self.row(i).iter().map(|&v| f64::from(v)));
            labels.push(self.labels[i] as usize);
        }
        Batch::new(inputs, self.dim, labels).expect("rows have the dataset width")
    }

    pub fn to_batch(&self) -> Batch {
        let inputs = self.inputs.iter().map(|&v| f64::from(v)).collect();
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        Batch::new(inputs, self.dim, labels).expect("validated dataset")
    }

    pub fn class_counts(&self, indices: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for i in indices {
            counts[self.labels[i] as usize] += 1;
        }
        counts
    }

    /// Copy of the dataset with row `target` replaced by row `source` of
    /// `donor`.
    pub fn with_row_replaced(&self, target: usize, donor: &Dataset, source: usize) -> Dataset {
        let mut out = self.clone();
        out.inputs[target * self.dim..(target + 1) * self.dim].copy_from_slice(donor.row(source));
        out.labels[target] = donor.labels[source];
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.inputs.len() + self.labels.len()));
        out.extend_from_slice(&DATASET_MAGIC);
        for v in [self.len(), self.dim, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.inputs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn parse_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(&format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[0..4] != DATASET_MAGIC {
        return Err(malformed("bad magic bytes"));
    }
    let n = read_u32(bytes, 4) as usize;
    let dim = read_u32(bytes, 8) as usize;
    let classes = read_u32(bytes, 12) as usize;
    if dim == 0 || classes == 0 {
        return Err(malformed("dim and classes must be non-zero"));
    }
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_add(n))
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| malformed("declared sizes overflow"))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingData {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    let body = &bytes[HEADER_LEN..];
    let inputs: Vec<f32> = body[..4 * n * dim]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let labels: Vec<u32> = body[4 * n * dim..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Dataset::new(inputs, labels, dim, classes)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes, path)
}

/// Gaussian blobs: class `c` is `N(mu_c, I)` with pairwise mean distance
/// `separation` (exact when `classes <= dim`). Labels cycle through the
/// classes so every class is present.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid(
            "classes",
            format!("must be >= 2, got {classes}"),
        ));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    if n < classes {
        return Err(Error::invalid(
            "n",
            format!("must be >= classes ({classes}), got {n}"),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(
            "separation",
            format!("must be finite and >= 0, got {separation}"),
        ));
    }
    let mut rng = rng::seeded(seed, Purpose::Data);
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                let mut mu = vec![0.0; dim];
                mu[c] = radius;
                mu
            } else {
                let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = crate::nn::l2_norm(&dir).max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v * radius / norm).collect()
            }
        })
        .collect();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mu in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push((mu + z) as f32);
        }
        labels.push(c as u32);
    }
    Dataset::new(inputs, labels, dim, classes)
}

/// Example indices held by each client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

impl Partition {
    /// Checks disjointness, bounds and non-emptiness against a dataset of
    /// size `n`.
    pub fn new(shards: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (client, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::invalid(
                    "partition",
                    format!("client {client} has no examples"),
                ));
            }
            for &i in shard {
                if i >= n {
                    return Err(Error::invalid(
                        "partition",
                        format!("index {i} out of range {n}"),
                    ));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(
                        "partition",
                        format!("index {i} assigned twice"),
                    ));
                }
            }
        }
        Ok(Self { shards })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.shards[client]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry<'a> {
            client: usize,
            indices: &'a [usize],
        }
        let entries: Vec<Entry<'_>> = self
            .shards
            .iter()
            .enumerate()
            .map(|(client, indices)| Entry { client, indices })
            .collect();
        Ok(serde_json::to_string_pretty(&entries)?)
    }
}

/// Samples `Dir(alpha * 1_k)` in log space so tiny concentrations do not
/// underflow to an all-zero draw.
fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = if alpha >= 1.0 {
        let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
        (0..k)
            .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE).ln())
            .collect()
    } else {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
        (0..k)
            .map(|_| {
                let g: f64 = gamma.sample(rng);
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                g.max(f64::MIN_POSITIVE).ln() + u.ln() / alpha
            })
            .collect()
    };
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Largest-remainder rounding of `proportions * total`.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().take(total.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// Any empty shard takes one example from the currently largest shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    for client in 0..shards.len() {
        if !shards[client].is_empty() {
            continue;
        }
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        if let Some(i) = shards[donor].pop() {
            shards[client].push(i);
        }
    }
}

fn check_clients(ds: &Dataset, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    if ds.len() < clients {
        return Err(Error::invalid(
            "clients",
            format!(
                "{clients} clients cannot each hold one of {} examples",
                ds.len()
            ),
        ));
    }
    Ok(())
}

/// Non-IID split: for every class, client proportions are drawn from
/// `Dir(alpha)` and that class's shuffled examples are dealt out accordingly.
pub fn partition_dirichlet(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    check_clients(ds, clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(
            "dir_alpha",
            format!("must be finite and > 0, got {alpha}"),
        ));
    }
    let mut rng = rng::seeded(seed, Purpose::Partition);
    let mut shards = vec![Vec::new(); clients];
    for class in 0..ds.classes() {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.labels()[i] as usize == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let proportions = sample_dirichlet(alpha, clients, &mut rng);
        let counts = apportion(&proportions, members.len());
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    repair_empty(&mut shards);
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Partition::new(shards, ds.len())
}

/// Uniform random split into shards whose sizes differ by at most one.
pub fn partition_iid(ds: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    check_clients(ds, clients)?;
    let mut rng = rng::seeded(seed, Purpose::Partition);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let base = ds.len() / clients;
    let extra = ds.len() % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for client in 0..clients {
        let size = base + usize::from(client < extra);
        let mut shard = order[start..start + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += size;
    }
    Partition::new(shards, ds.len())
}

/// Mean total-variation distance between each client's label distribution
/// and the pooled label distribution.
pub fn heterogeneity(ds: &Dataset, partition: &Partition) -> f64 {
    let pooled: Vec<usize> = partition.shards().iter().flatten().copied().collect();
    let global = ds.class_counts(pooled.iter().copied());
    let total = pooled.len() as f64;
    let tv: f64 = partition
        .shards()
        .iter()
        .map(|shard| {
            let local = ds.class_counts(shard.iter().copied());
            let n = shard.len() as f64;
            0.5 * local
                .iter()
                .zip(&global)
                .map(|(&l, &g)| (l as f64 / n - g as f64 / total).abs())
                .sum::<f64>()
        })
        .sum();
    tv / partition.num_clients() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic(4, 3, 200, 3.0, 5).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = small();
        assert_eq!(a, small());
        assert_ne!(a, generate_synthetic(4, 3, 200, 3.0, 6).unwrap());
        assert_eq!(a.class_counts(0..a.len()), vec![50; 4]);
    }

    #[test]
    fn synthetic_means_are_separated() {
        let ds = generate_synthetic(3, 5, 30_000, 6.0, 1).unwrap();
        let mut means = vec![vec![0.0f64; 5]; 3];
        for i in 0..ds.len() {
            let c = ds.labels()[i] as usize;
            for (m, &x) in means[c].iter_mut().zip(ds.row(i)) {
                *m += f64::from(x) / 10_000.0;
            }
        }
        let d01 = crate::nn::l2_norm(
            &means[0]
                .iter()
                .zip(&means[1])
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        assert!((d01 - 6.0).abs() < 0.1, "{d01}");
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic(1, 3, 10, 1.0, 0).is_err());
        assert!(generate_synthetic(5, 3, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 0, 4, 1.0, 0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let ds = small();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), 16 + 4 * 200 * 3 + 4 * 200);
        assert_eq!(parse_dataset(&bytes, Path::new("mem")).unwrap(), ds);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let p = Path::new("mem");
        assert!(matches!(
            parse_dataset(&[], p),
            Err(Error::MalformedHeader { .. })
        ));
        let mut bytes = small().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            parse_dataset(&bytes, p),
            Err(Error::MalformedHeader { .. })
        ));

        let good = small().to_bytes();
        assert!(matches!(
            parse_dataset(&good[..good.len() - 3], p),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            parse_dataset(&long, p),
            Err(Error::TrailingData { .. })
        ));

        let mut bad_label = good;
        let last = bad_label.len() - 4;
        bad_label[last..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            parse_dataset(&bad_label, p),
            Err(Error::LabelOutOfRange {
                label: 7,
                classes: 4
            })
        ));
    }

    #[test]
    fn apportion_preserves_total() {
        let counts = apportion(&[0.5, 0.25, 0.125, 0.125], 7);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![3, 2, 1, 1]);
    }

    #[test]
    fn dirichlet_small_alpha_is_finite() {
        let mut rng = rng::seeded(3, Purpose::Partition);
        for _ in 0..100 {
            let p = sample_dirichlet(0.01, 20, &mut rng);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_single_client_holds_everything() {
        let ds = small();
        let p = partition_iid(&ds, 1, 0).unwrap();
        assert_eq!(p.shard(0), (0..ds.len()).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn iid_sizes_are_balanced() {
        let ds = small();
        let sizes = partition_iid(&ds, 7, 3).unwrap().sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let ds = generate_synthetic(2, 2, 4, 1.0, 0).unwrap();
        assert!(partition_iid(&ds, 5, 0).is_err());
        assert!(partition_dirichlet(&ds, 5, 0.5, 0).is_err());
        assert!(partition_dirichlet(&ds, 2, 0.0, 0).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0, 1], vec![1]], 3).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 3).is_err());
        assert!(Partition::new(vec![vec![0, 5]], 3).is_err());
        assert!(Partition::new(vec![vec![0, 2], vec![1]], 3).is_ok());
    }

    #[test]
    fn partition_manifest_json() {
        let p = Partition::new(vec![vec![0, 2], vec![1]], 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v[1]["client"], 1);
        assert_eq!(v[0]["indices"], serde_json::json!([0, 2]));
    }

    #[test]
    fn iid_has_low_heterogeneity() {
        let ds = generate_synthetic(2, 2, 4000, 1.0, 0).unwrap();
        let p = partition_iid(&ds, 4, 1).unwrap();
        assert!(heterogeneity(&ds, &p) < 0.05);
        let one = Partition::new(vec![(0..ds.len()).collect()], ds.len()).unwrap();
        assert_eq!(heterogeneity(&ds, &one), 0.0);
    }
}
