//! Subcommand bodies. Each writes its artifacts into one run directory;
//! every file is written to a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use dpfl_core::data::{
    generate_synthetic, heterogeneity, load_dataset, partition_dirichlet, partition_iid,
};
use dpfl_core::federation::records_csv;
use dpfl_core::io::{load_model, quantize_model, save_model, write_atomic};
use dpfl_core::metrics::{histogram_csv, landscape_slice, probe_csv, sharpness_probe, slice_csv};
use dpfl_core::nn::evaluate;
use dpfl_core::privacy::{budget_csv, budget_table};
use dpfl_core::{Dataset, Federation, MlpArchitecture, Partition};
use serde_json::json;

use crate::config::{parse_config, ConfigError, PartitionKind, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.csv";
pub const ROUNDS: &str = "rounds.jsonl";
pub const NORMS: &str = "norms.csv";
pub const MODEL: &str = "model.bin";
pub const REPORT: &str = "report.json";
pub const BUDGET: &str = "budget.csv";
pub const SHARPNESS: &str = "sharpness.csv";
pub const PROBE_REPORT: &str = "probe.json";
pub const LANDSCAPE: &str = "landscape.csv";
pub const PARTITION: &str = "partition.json";

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: usize,
}

impl Options {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Sharpness,
    Landscape,
}

pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match (&config.train_data, &config.test_data) {
        (Some(train), Some(test)) => {
            let train = load_dataset(train)?;
            let test = load_dataset(test)?;
            ensure!(
                train.dim() == test.dim() && train.classes() == test.classes(),
                "train data is {}-dim with {} classes but test data is {}-dim with {} classes",
                train.dim(),
                train.classes(),
                test.dim(),
                test.classes()
            );
            Ok((train, test))
        }
        _ => {
            let c = config;
            let train =
                generate_synthetic(c.classes, c.dim, c.train_size, c.separation, c.data_seed)?;
            let test = generate_synthetic(
                c.classes,
                c.dim,
                c.test_size,
                c.separation,
                c.data_seed.wrapping_add(1),
            )?;
            Ok((train, test))
        }
    }
}

pub fn architecture(config: &RunConfig, data: &Dataset) -> Result<MlpArchitecture> {
    let mut widths = vec![data.dim()];
    widths.extend(&config.hidden);
    widths.push(data.classes());
    Ok(MlpArchitecture::relu(&widths)?)
}

pub fn partition(config: &RunConfig, train: &Dataset) -> Result<Partition> {
    let clients = config.federation.clients;
    let seed = config.federation.seed;
    Ok(match config.partition {
        PartitionKind::Dirichlet => partition_dirichlet(train, clients, config.dir_alpha, seed)?,
        PartitionKind::Iid => partition_iid(train, clients, seed)?,
    })
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(&dir.join(name), bytes.as_ref()).with_context(|| format!("writing {name}"))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s
}

pub fn train(opts: &Options) -> Result<()> {
    let config = opts.resolve()?;
    let (train, test) = load_data(&config)?;
    let arch = architecture(&config, &train)?;
    let partition = partition(&config, &train)?;
    let fed = Federation::new(config.federation, &arch, &train, &test, &partition)?;

    prepare_out(&opts.out)?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let manifest = json!({
        "tool": "dpfl",
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "seed": config.federation.seed,
        "architecture": arch.widths(),
        "config": config.to_json(),
        "outputs": {
            "records": RECORDS,
            "rounds": ROUNDS,
            "norms": NORMS,
            "model": MODEL,
            "report": REPORT,
        },
    });
    write(&opts.out, MANIFEST, pretty(&manifest))?;

    let total = config.federation.rounds;
    let out = fed.run_with(opts.workers, |r| {
        eprintln!(
            "round {:>4}/{total}  test_acc {:.4}  test_loss {:.4}  mean_norm {:.4}  eps {:.4}",
            r.round + 1,
            r.test_acc,
            r.test_loss,
            r.mean_norm,
            r.epsilon
        );
    })?;

    let mut rounds = String::new();
    for r in &out.records {
        rounds.push_str(&serde_json::to_string(r)?);
        rounds.push('\n');
    }
    let histograms: Vec<_> = out.records.iter().map(|r| r.histogram.clone()).collect();
    write(&opts.out, RECORDS, records_csv(&out.records))?;
    write(&opts.out, ROUNDS, rounds)?;
    write(&opts.out, NORMS, histogram_csv(&histograms))?;
    save_model(&opts.out.join(MODEL), &out.params).context("writing model")?;

    // Report the model as stored, so later probes of the file agree with it.
    let stored = quantize_model(&out.params);
    let train_eval = evaluate(&stored, &arch, &train.to_batch())?;
    let test_eval = evaluate(&stored, &arch, &test.to_batch())?;
    let spec = fed.privacy_spec();
    let (epsilon, order) = if spec.noise_multiplier() > 0.0 {
        let (e, a) = out.ledger.epsilon(spec.delta())?;
        (json!(e), json!(a))
    } else {
        (json!("inf"), serde_json::Value::Null)
    };
    let report = json!({
        "method": config.federation.method.to_string(),
        "rounds": total,
        "parameters": out.params.len(),
        "privacy": {
            "epsilon": epsilon,
            "order": order,
            "delta": spec.delta(),
            "q": spec.sample_ratio(),
            "sigma": spec.noise_multiplier(),
            "clip": spec.clip(),
            "sampled_clients": spec.sampled_clients(),
            "noise_std": spec.noise_std(),
        },
        "final": {
            "train_loss": train_eval.loss,
            "train_acc": train_eval.accuracy,
            "test_loss": test_eval.loss,
            "test_acc": test_eval.accuracy,
        },
    });
    write(&opts.out, REPORT, pretty(&report))?;
    println!(
        "{}: {} rounds, test_acc {:.4}, epsilon {} -> {}",
        config.federation.method,
        total,
        test_eval.accuracy,
        report["privacy"]["epsilon"],
        opts.out.display()
    );
    Ok(())
}

/// Parses `100,200,300` and inclusive ranges `0..300:50`, in any mix.
pub fn parse_rounds(spec: &str) -> Result<Vec<u64>> {
    let mut rounds = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((range, step)) = item.split_once(':') {
            let (start, end) = range
                .split_once("..")
                .with_context(|| format!("round range `{item}` must look like START..END:STEP"))?;
            let start: u64 = start
                .trim()
                .parse()
                .with_context(|| format!("bad range start in `{item}`"))?;
            let end: u64 = end
                .trim()
                .parse()
                .with_context(|| format!("bad range end in `{item}`"))?;
            let step: u64 = step
                .trim()
                .parse()
                .with_context(|| format!("bad range step in `{item}`"))?;
            ensure!(
                step > 0 && start <= end,
                "round range `{item}` must have STEP > 0 and START <= END"
            );
            rounds.extend((start..=end).step_by(step as usize));
        } else {
            rounds.push(
                item.parse()
                    .with_context(|| format!("bad round count `{item}`"))?,
            );
        }
    }
    ensure!(!rounds.is_empty(), "no round counts given");
    Ok(rounds)
}

pub fn budget(opts: &Options, rounds: Option<&str>) -> Result<()> {
    let config = opts.resolve()?;
    let f = &config.federation;
    if f.noise_multiplier <= 0.0 {
        return Err(ConfigError::OutOfRange {
            key: "sigma".to_string(),
            reason: "the budget is unbounded without noise; sigma must be > 0".to_string(),
        }
        .into());
    }
    let rounds = match rounds {
        Some(spec) => parse_rounds(spec)?,
        None => {
            let step = (f.rounds as u64 / 10).max(1);
            (0..=f.rounds as u64).step_by(step as usize).collect()
        }
    };
    let rows = budget_table(f.sample_ratio, f.noise_multiplier, f.delta, &rounds)?;
    let csv = budget_csv(&rows);
    prepare_out(&opts.out)?;
    write(&opts.out, BUDGET, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn probe(opts: &Options, model: &Path, kind: ProbeKind) -> Result<()> {
    let config = opts.resolve()?;
    let (train, test) = load_data(&config)?;
    let arch = architecture(&config, &train)?;
    let params = load_model(model)?;
    if params.len() != arch.num_params() {
        bail!(
            "architecture mismatch: {} holds {} parameters but {:?} needs {}",
            model.display(),
            params.len(),
            arch.widths(),
            arch.num_params()
        );
    }
    let batch = test.to_batch();
    let seed = config.federation.seed;
    prepare_out(&opts.out)?;
    match kind {
        ProbeKind::Sharpness => {
            let base = evaluate(&params, &arch, &batch)?.loss;
            let probe = sharpness_probe(
                &arch,
                &params,
                &batch,
                &config.probe_radii,
                config.probe_directions,
                seed,
            )?;
            let losses: Vec<f64> = probe.mean_increase.iter().map(|inc| base + inc).collect();
            let report = json!({
                "probe": "sharpness",
                "model": model.display().to_string(),
                "base_loss": base,
                "radii": probe.radii,
                "mean_increase": probe.mean_increase,
                "mean_loss": losses,
                "directions": probe.directions,
            });
            write(&opts.out, SHARPNESS, probe_csv(&probe))?;
            write(&opts.out, PROBE_REPORT, pretty(&report))?;
            print!("{}", probe_csv(&probe));
        }
        ProbeKind::Landscape => {
            let slice = landscape_slice(
                &arch,
                &params,
                &batch,
                config.slice_extent,
                config.slice_resolution,
                seed,
            )?;
            write(&opts.out, LANDSCAPE, slice_csv(&slice))?;
            println!(
                "wrote {}x{} landscape to {}",
                slice.resolution(),
                slice.resolution(),
                opts.out.join(LANDSCAPE).display()
            );
        }
    }
    Ok(())
}

pub fn partition_audit(opts: &Options) -> Result<()> {
    let config = opts.resolve()?;
    let (train, _) = load_data(&config)?;
    let partition = partition(&config, &train)?;
    let sizes = partition.sizes();
    let counts: Vec<Vec<usize>> = partition
        .shards()
        .iter()
        .map(|s| train.class_counts(s.iter().copied()))
        .collect();
    let h = heterogeneity(&train, &partition);
    let report = json!({
        "clients": partition.num_clients(),
        "examples": train.len(),
        "heterogeneity": h,
        "min_shard": sizes.iter().min(),
        "max_shard": sizes.iter().max(),
        "sizes": sizes,
        "class_counts": counts,
    });
    prepare_out(&opts.out)?;
    write(&opts.out, PARTITION, pretty(&report))?;
    println!(
        "{} clients over {} examples: shard sizes {}..{}, heterogeneity {h:.4}",
        partition.num_clients(),
        train.len(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_lists_and_ranges() {
        assert_eq!(parse_rounds("100,200,300").unwrap(), vec![100, 200, 300]);
        assert_eq!(parse_rounds("0..10:5, 12").unwrap(), vec![0, 5, 10, 12]);
        assert!(parse_rounds("").is_err());
        assert!(parse_rounds("5..1:1").is_err());
        assert!(parse_rounds("0..10:0").is_err());
        assert!(parse_rounds("x").is_err());
    }
}
