//! The federated training loop with client-level DP.
//!
//! Each round: sample `m` of `M` clients without replacement; every sampled
//! client starts from the global model, runs `K` local steps (SGD or SAM),
//! forms its update, optionally sparsifies it per layer, clips it to `C`,
//! adds Gaussian noise with std `sigma * C / sqrt(m)` on the retained
//! coordinates, and the server adds the average of the noised updates to the
//! global model.
//!
//! All randomness is drawn from streams keyed by `(seed, round, client,
//! purpose)`, and aggregation runs in client-id order, so a run is
//! bit-reproducible regardless of the number of worker threads.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{self, NormHistogram};
use crate::nn::{self, Batch, MlpArchitecture, Objective, ParameterVector};
use crate::optim::{sam_step, sgd_step, OptimizerConfig, OptimizerState};
use crate::privacy::{self, PrivacyLedger, PrivacySpec};
use crate::rng::{self, Purpose, NO_CLIENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DpFedAvg,
    DpFedSam,
    DpFedSamTopk,
    FedSmpTopk,
    FedSmpRandk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifyMode {
    TopK,
    RandK,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DpFedAvg,
        Method::DpFedSam,
        Method::DpFedSamTopk,
        Method::FedSmpTopk,
        Method::FedSmpRandk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DpFedAvg => "dp-fedavg",
            Method::DpFedSam => "dp-fedsam",
            Method::DpFedSamTopk => "dp-fedsam-topk",
            Method::FedSmpTopk => "fed-smp-topk",
            Method::FedSmpRandk => "fed-smp-randk",
        }
    }

    pub fn uses_sam(self) -> bool {
        matches!(self, Method::DpFedSam | Method::DpFedSamTopk)
    }

    pub fn sparsifier(self) -> Option<SparsifyMode> {
        match self {
            Method::DpFedAvg | Method::DpFedSam => None,
            Method::DpFedSamTopk | Method::FedSmpTopk => Some(SparsifyMode::TopK),
            Method::FedSmpRandk => Some(SparsifyMode::RandK),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(
                    "method",
                    format!("unknown method `{s}`, expected one of {}", names.join(", ")),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Total clients `M`.
    pub clients: usize,
    /// Client sampling ratio `q`; `m = round(q * M)` clients per round.
    pub sample_ratio: f64,
    pub rounds: usize,
    /// Local epochs; a client's `K` is `epochs * ceil(shard / batch_size)`.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub method: Method,
    /// Fraction of each layer kept by sparsified methods.
    pub sparsity: f64,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 500,
            sample_ratio: 0.1,
            rounds: 200,
            local_epochs: 30,
            batch_size: 32,
            method: Method::DpFedSam,
            sparsity: 1.0,
            clip: 0.2,
            noise_multiplier: 0.95,
            delta: 1.0 / 500.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::invalid(
                "sparsity",
                format!("must lie in (0, 1], got {}", self.sparsity),
            ));
        }
        if self.method.sparsifier().is_none() && self.sparsity != 1.0 {
            return Err(Error::invalid(
                "sparsity",
                format!(
                    "method {} does not sparsify; sparsity must be 1, got {}",
                    self.method, self.sparsity
                ),
            ));
        }
        self.optimizer.validate()?;
        self.privacy_spec().map(|_| ())
    }

    pub fn privacy_spec(&self) -> Result<PrivacySpec> {
        PrivacySpec::new(
            self.clip,
            self.noise_multiplier,
            self.sample_ratio,
            self.delta,
            self.clients,
        )
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateReport {
    pub client: usize,
    /// `w^{t,K} - w^{t,0}` before sparsification.
    pub raw_update: ParameterVector,
    /// Norm of the vector that was clipped (after sparsification, if any).
    pub pre_clip_norm: f64,
    pub clip_factor: f64,
    pub noised_update: ParameterVector,
    /// Mean minibatch loss over the local steps.
    pub train_loss: f64,
    pub local_steps: usize,
    /// Coordinates kept by sparsification; `None` when the method is dense.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean clip factor over the sampled clients.
    pub alpha_bar: f64,
    /// Mean absolute deviation of the clip factors.
    pub alpha_tilde: f64,
    pub mean_norm: f64,
    /// Pre-clip norms in client-id order.
    pub norms: Vec<f64>,
    pub histogram: NormHistogram,
    pub local_loss: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Accumulated privacy budget after this round; infinite without noise.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub params: ParameterVector,
    pub ledger: PrivacyLedger,
}

pub const RECORD_HEADER: &str =
    "t,eps,alpha_bar,alpha_tilde,mean_norm,train_loss,test_loss,test_acc";

/// One comma-separated row per round, `RECORD_HEADER` first.
pub fn records_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(RECORD_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.epsilon,
            r.alpha_bar,
            r.alpha_tilde,
            r.mean_norm,
            r.train_loss,
            r.test_loss,
            r.test_acc
        );
    }
    out
}

/// `m` distinct client ids drawn uniformly without replacement, ascending.
pub fn sample_clients<R: Rng + ?Sized>(total: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > total {
        return Err(Error::invalid(
            "sampled clients",
            format!("need 1 <= m <= M, got m={m}, M={total}"),
        ));
    }
    let mut ids = index::sample(rng, total, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Coordinates kept from a block of `len` at ratio `p`.
pub fn kept_per_block(len: usize, ratio: f64) -> usize {
    // Guard against p * len landing a hair above an integer.
    (((ratio * len as f64) - 1e-9).ceil() as usize).clamp(1, len)
}

/// Keeps `ceil(p * |block|)` coordinates of every block: the largest
/// magnitudes for top-k (ties to the lower index), a uniform subset for
/// rand-k. Returns the masked vector and the mask.
pub fn sparsify<R: Rng + ?Sized>(
    delta: &ParameterVector,
    blocks: &[Range<usize>],
    ratio: f64,
    mode: SparsifyMode,
    rng: &mut R,
) -> (ParameterVector, Vec<bool>) {
    let mut mask = vec![false; delta.len()];
    for block in blocks {
        let len = block.len();
        if len == 0 {
            continue;
        }
        let keep = kept_per_block(len, ratio);
        match mode {
            SparsifyMode::TopK => {
                let mut order: Vec<usize> = block.clone().collect();
                order.sort_by(|&a, &b| delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b)));
                order.into_iter().take(keep).for_each(|i| mask[i] = true);
            }
            SparsifyMode::RandK => {
                for i in index::sample(rng, len, keep) {
                    mask[block.start + i] = true;
                }
            }
        }
    }
    let masked = delta
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect::<Vec<_>>();
    (ParameterVector::new(masked), mask)
}

/// `global + (1/m) * sum of noised updates`, summed in client-id order.
/// `m` is the configured per-round client count.
pub fn aggregate(
    reports: &[LocalUpdateReport],
    global: &ParameterVector,
    m: usize,
) -> Result<ParameterVector> {
    if reports.is_empty() {
        return Err(Error::EmptyData("no client reports to aggregate"));
    }
    if m == 0 {
        return Err(Error::invalid("sampled clients", "must be >= 1"));
    }
    let mut ordered: Vec<&LocalUpdateReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.client);
    let mut sum = ParameterVector::zeros(global.len());
    for report in ordered {
        if report.noised_update.len() != global.len() {
            return Err(Error::DimensionMismatch {
                expected: global.len(),
                actual: report.noised_update.len(),
                context: "client update",
            });
        }
        sum.iter_mut()
            .zip(report.noised_update.iter())
            .for_each(|(s, v)| *s += v);
    }
    let scale = 1.0 / m as f64;
    Ok(global.add_scaled(scale, &sum))
}

/// Result of running a client's local optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub update: ParameterVector,
    pub mean_loss: f64,
    pub steps: usize,
}

/// A configured federation over a partitioned dataset.
#[derive(Debug, Clone)]
pub struct Federation<'a> {
    arch: &'a MlpArchitecture,
    train: &'a Dataset,
    test: &'a Dataset,
    partition: &'a Partition,
    config: FederationConfig,
    spec: PrivacySpec,
}

impl<'a> Federation<'a> {
    pub fn new(
        config: FederationConfig,
        arch: &'a MlpArchitecture,
        train: &'a Dataset,
        test: &'a Dataset,
        partition: &'a Partition,
    ) -> Result<Self> {
        config.validate()?;
        if partition.num_clients() != config.clients {
            return Err(Error::DimensionMismatch {
                expected: config.clients,
                actual: partition.num_clients(),
                context: "partition clients",
            });
        }
        for ds in [train, test] {
            if ds.dim() != arch.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: arch.input_dim(),
                    actual: ds.dim(),
                    context: "dataset input width",
                });
            }
            if ds.classes() > arch.classes() {
                return Err(Error::DimensionMismatch {
                    expected: arch.classes(),
                    actual: ds.classes(),
                    context: "dataset classes",
                });
            }
        }
        if test.is_empty() {
            return Err(Error::EmptyData("test set"));
        }
        let spec = config.privacy_spec()?;
        Ok(Self {
            arch,
            train,
            test,
            partition,
            config,
            spec,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn privacy_spec(&self) -> &PrivacySpec {
        &self.spec
    }

    pub fn arch(&self) -> &MlpArchitecture {
        self.arch
    }

    pub fn train_set(&self) -> &Dataset {
        self.train
    }

    pub fn partition(&self) -> &Partition {
        self.partition
    }

    pub fn initial_params(&self) -> ParameterVector {
        nn::init_params(self.arch, self.config.seed)
    }

    /// Runs the client's optimizer over `shard` rows of `data`, starting at
    /// `global`. Batch order comes from the client's batching stream.
    pub fn local_training(
        &self,
        data: &Dataset,
        shard: &[usize],
        global: &ParameterVector,
        round: usize,
        client: usize,
    ) -> Result<LocalTraining> {
        if shard.is_empty() {
            return Err(Error::EmptyData("client shard"));
        }
        let mut rng = rng::stream(
            self.config.seed,
            round as u64,
            client as u64,
            Purpose::Batching,
        );
        let mut state = OptimizerState::new(global.len(), self.config.optimizer, round);
        let mut w = global.clone();
        let mut order = shard.to_vec();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for _ in 0..self.config.local_epochs {
            order.shuffle(&mut rng);
            for rows in order.chunks(self.config.batch_size) {
                let batch: Batch = data.batch(rows);
                let step = if self.config.method.uses_sam() {
                    sam_step(self.arch, &w, &mut state, &batch)?
                } else {
                    sgd_step(self.arch, &w, &mut state, &batch)?
                };
                w = step.params;
                loss_sum += step.loss;
                steps += 1;
            }
        }
        let update = w.sub(global);
        if !update.is_finite() {
            return Err(Error::NonFinite("local update"));
        }
        Ok(LocalTraining {
            update,
            mean_loss: loss_sum / steps as f64,
            steps,
        })
    }

    /// Local training followed by sparsify, clip and noise.
    pub fn local_round(
        &self,
        client: usize,
        global: &ParameterVector,
        round: usize,
    ) -> Result<LocalUpdateReport> {
        let wrap = |e: Error| Error::Client {
            client,
            source: Box::new(e),
        };
        if client >= self.partition.num_clients() {
            return Err(wrap(Error::invalid(
                "client",
                format!("no shard for client {client}"),
            )));
        }
        let training = self
            .local_training(
                self.train,
                self.partition.shard(client),
                global,
                round,
                client,
            )
            .map_err(wrap)?;
        let (sparse, mask) = match self.config.method.sparsifier() {
            Some(mode) => {
                let mut rng =
                    rng::stream(self.config.seed, round as u64, client as u64, Purpose::Mask);
                let (masked, mask) = sparsify(
                    &training.update,
                    &self.arch.param_blocks(),
                    self.config.sparsity,
                    mode,
                    &mut rng,
                );
                (masked, Some(mask))
            }
            None => (training.update.clone(), None),
        };
        let clip = privacy::clip_update(&sparse, self.spec.clip());
        let mut noise_rng = rng::stream(
            self.config.seed,
            round as u64,
            client as u64,
            Purpose::Noise,
        );
        let noised = privacy::add_noise_with(
            &clip.clipped,
            mask.as_deref(),
            self.spec.noise_std(),
            &mut noise_rng,
        );
        Ok(LocalUpdateReport {
            client,
            raw_update: training.update,
            pre_clip_norm: clip.pre_clip_norm,
            clip_factor: clip.factor,
            noised_update: noised,
            train_loss: training.mean_loss,
            local_steps: training.steps,
            mask,
        })
    }

    pub fn sample_round(&self, round: usize) -> Result<Vec<usize>> {
        let mut rng = rng::stream(self.config.seed, round as u64, NO_CLIENT, Purpose::Sampling);
        sample_clients(self.config.clients, self.spec.sampled_clients(), &mut rng)
    }

    /// Runs the sampled clients of one round on `workers` threads; reports
    /// come back in client-id order.
    pub fn client_reports(
        &self,
        pool: &rayon::ThreadPool,
        sampled: &[usize],
        global: &ParameterVector,
        round: usize,
    ) -> Result<Vec<LocalUpdateReport>> {
        pool.install(|| {
            sampled
                .par_iter()
                .map(|&client| self.local_round(client, global, round))
                .collect()
        })
    }

    pub fn run(&self, workers: usize) -> Result<RunOutput> {
        self.run_with(workers, |_| {})
    }

    /// Runs every round, calling `on_round` after each one.
    pub fn run_with(
        &self,
        workers: usize,
        mut on_round: impl FnMut(&RoundRecord),
    ) -> Result<RunOutput> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::invalid("workers", e.to_string()))?;
        let train_batch = self.train.to_batch();
        let test_batch = self.test.to_batch();
        let edges = metrics::default_edges(self.spec.clip());
        let mut ledger = PrivacyLedger::default();
        let per_round = if self.spec.noise_multiplier() > 0.0 {
            Some(ledger.per_round(self.spec.sample_ratio(), self.spec.noise_multiplier())?)
        } else {
            None
        };

        let mut w = self.initial_params();
        let mut records = Vec::with_capacity(self.config.rounds);
        for round in 0..self.config.rounds {
            let sampled = self.sample_round(round)?;
            let reports = self.client_reports(&pool, &sampled, &w, round)?;
            w = aggregate(&reports, &w, self.spec.sampled_clients())?;
            if !w.is_finite() {
                return Err(Error::NonFinite("global model"));
            }

            let epsilon = match &per_round {
                Some(curve) => {
                    ledger = ledger.compose_per_round(curve, 1)?;
                    ledger.epsilon(self.spec.delta())?.0
                }
                None => f64::INFINITY,
            };
            let factors: Vec<f64> = reports.iter().map(|r| r.clip_factor).collect();
            let (alpha_bar, alpha_tilde) = metrics::clip_factor_stats(&factors);
            let norms: Vec<f64> = reports.iter().map(|r| r.pre_clip_norm).collect();
            let train_eval = nn::evaluate(&w, self.arch, &train_batch)?;
            let test_eval = nn::evaluate(&w, self.arch, &test_batch)?;
            let record = RoundRecord {
                round,
                alpha_bar,
                alpha_tilde,
                mean_norm: norms.iter().sum::<f64>() / norms.len() as f64,
                histogram: metrics::update_norm_histogram(&reports, &edges, round)?,
                norms,
                local_loss: reports.iter().map(|r| r.train_loss).sum::<f64>()
                    / reports.len() as f64,
                train_loss: train_eval.loss,
                train_acc: train_eval.accuracy,
                test_loss: test_eval.loss,
                test_acc: test_eval.accuracy,
                epsilon,
                sampled,
            };
            on_round(&record);
            records.push(record);
        }
        Ok(RunOutput {
            records,
            params: w,
            ledger,
        })
    }
}

pub fn run_experiment(
    config: FederationConfig,
    arch: &MlpArchitecture,
    train: &Dataset,
    test: &Dataset,
    partition: &Partition,
    workers: usize,
) -> Result<RunOutput> {
    Federation::new(config, arch, train, test, partition)?.run(workers)
}
