//! The federated simulation loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, HEADER_LEN};
use crate::config::{Algorithm, DataConfig, ExperimentConfig, ModelConfig};
use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, write_rounds_jsonl, RoundMetrics, RoundRecord, PRUNABLE_DENSITY};
use crate::nn::{weighted_average_bits, LocalModel, ModelSpec};
use crate::partition::{dirichlet_partition, read_shards, sample_clients};
use crate::quant::{quantize, QuantizedLayer};
use crate::rng::{derive_seed, stream, Purpose};
use crate::server::{
    aggregate, binary_representation, pruning_growing, round_bitwidths, BudgetLedger, ClientUpdate, GlobalModel,
};
use crate::trainer::{evaluate, local_update, Evaluation, TrainConfig};

/// Data, partition and model shape for one configured experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Vec<usize>>,
    client_data: Vec<Dataset>,
    train_cfg: TrainConfig,
}

/// Everything the server carries between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub global: GlobalModel,
    /// Bit-widths each client will receive next, `b̂_n`.
    pub assignments: Vec<Vec<u8>>,
    pub ledger: BudgetLedger,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Test metrics of the initial model.
    pub initial: Evaluation,
    pub records: Vec<RoundRecord>,
    pub state: SimState,
}

impl RunResult {
    pub fn metrics(&self) -> Vec<RoundMetrics> {
        self.records.iter().map(|r| r.metrics.clone()).collect()
    }

    pub fn final_evaluation(&self) -> Evaluation {
        self.records.last().map_or(self.initial, |r| Evaluation {
            loss: r.metrics.test_loss,
            accuracy: r.metrics.test_accuracy,
        })
    }
}

pub fn load_data(config: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match config {
        DataConfig::Blobs(blobs) => blobs.generate(seed),
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => {
            let train = load_idx(train_images, train_labels, *classes)?;
            let classes = Some(classes.unwrap_or(train.classes));
            let test = load_idx(test_images, test_labels, classes)?;
            if test.dim() != train.dim() {
                return Err(Error::Config(format!(
                    "train samples have {} features, test samples {}",
                    train.dim(),
                    test.dim()
                )));
            }
            Ok((train, test))
        }
    }
}

pub fn build_spec(model: &ModelConfig, data: &Dataset) -> Result<ModelSpec> {
    match model {
        ModelConfig::Mlp { hidden } => ModelSpec::mlp(data.dim(), hidden, data.classes),
        ModelConfig::Conv { channels, kernel } => {
            let shape = match data.image_shape {
                Some(shape) => shape,
                None => {
                    let side = (data.dim() as f64).sqrt().round() as usize;
                    if side * side != data.dim() {
                        return Err(Error::Config(format!(
                            "conv model needs image data or a square feature count, got {}",
                            data.dim()
                        )));
                    }
                    (1, side, side)
                }
            };
            ModelSpec::conv_net(shape, channels, *kernel, data.classes)
        }
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_data(&config.data, config.seed)?;
        let shards = match &config.partition_dir {
            Some(dir) => read_shards(dir, config.clients, train.len())?,
            None => dirichlet_partition(&train.labels, config.clients, config.alpha, config.seed)?,
        };
        Self::from_parts(config, train, test, shards)
    }

    pub fn from_parts(config: ExperimentConfig, train: Dataset, test: Dataset, shards: Vec<Vec<usize>>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.clients {
            return Err(Error::shape("Experiment::from_parts", config.clients, shards.len()));
        }
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let spec = build_spec(&config.model, &train)?;
        let client_data = shards.iter().map(|s| train.subset(s)).collect();
        let train_cfg = config.effective_train();
        Ok(Experiment {
            config,
            spec,
            train,
            test,
            shards,
            client_data,
            train_cfg,
        })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    fn is_fp32(&self) -> bool {
        self.config.algorithm == Algorithm::Fp32
    }

    pub fn initial_state(&self) -> SimState {
        let (weights, biases) = self.spec.init_full(&mut stream(self.config.seed, Purpose::Init));
        let layers = self.spec.layers.len();
        let clients = self.config.clients;
        let assignments: Vec<Vec<u8>> = (0..clients).map(|n| vec![self.config.initial_bits(n); layers]).collect();
        let mean = assignments.iter().map(|a| f64::from(a[0])).sum::<f64>() / clients as f64;
        SimState {
            global: GlobalModel {
                spec: self.spec.clone(),
                weights,
                biases,
                bit_widths: vec![mean; layers],
                round: 0,
            },
            assignments,
            ledger: BudgetLedger::new(clients, layers),
        }
    }

    /// Model client `n` receives: the global weights at its assigned widths.
    pub fn client_model(&self, state: &SimState, client: usize) -> Result<LocalModel> {
        let g = &state.global;
        if self.is_fp32() {
            LocalModel::full_precision(g.spec.clone(), g.weights.clone(), g.biases.clone())
        } else {
            binary_representation(g, &state.assignments[client], self.train_cfg.scale_policy)
        }
    }

    pub fn evaluate_global(&self, global: &GlobalModel) -> Result<Evaluation> {
        let model = LocalModel::full_precision(global.spec.clone(), global.weights.clone(), global.biases.clone())?;
        evaluate(&model, &self.test, self.train_cfg.activation_bits(), self.config.execution)
    }

    fn uploaded_bits(&self, bits: &[u8]) -> u64 {
        let params = self.spec.param_counts();
        let bias_bits: u64 = self.spec.layers.iter().map(|l| 32 * l.bias_len() as u64).sum();
        let weight_bits: u64 = if self.is_fp32() {
            32 * params.iter().sum::<u64>()
        } else {
            bits.iter()
                .zip(&params)
                .map(|(&b, &m)| u64::from(b) * m + 8 * HEADER_LEN as u64)
                .sum()
        };
        weight_bits + bias_bits
    }

    fn client_average(&self, bits: &[u8]) -> f64 {
        if self.is_fp32() {
            32.0
        } else {
            weighted_average_bits(bits, &self.spec.param_counts())
        }
    }

    /// One global round. `round` counts from 1.
    pub fn run_round(&self, state: &mut SimState, round: u64) -> Result<RoundRecord> {
        let started = Instant::now();
        let cfg = &self.config;
        let participants = sample_clients(cfg.clients, cfg.participation, round, cfg.seed);
        debug!("round {round}: participants {participants:?}");

        let outcomes = cfg.execution.map(&participants, |&n| {
            let delivered = self.client_model(state, n)?;
            let mut rng = stream(
                cfg.seed,
                Purpose::Client {
                    client: n as u64,
                    round,
                },
            );
            local_update(&delivered, &self.client_data[n], &self.train_cfg, &mut rng)
        });
        let mut updates = Vec::with_capacity(participants.len());
        let mut densities = Vec::with_capacity(participants.len());
        for (&n, outcome) in participants.iter().zip(outcomes) {
            let outcome = outcome?;
            densities.push(outcome.pre_prune_density);
            updates.push(ClientUpdate {
                client_id: n,
                model: outcome.model,
                shard_size: self.client_data[n].len(),
                budget: cfg.aggregation_budget(n),
            });
        }

        let agg = aggregate(&updates, round)?;
        let delivered_bits: Vec<Vec<u8>> = participants.iter().map(|&n| state.assignments[n].clone()).collect();
        let uploaded_layer_bits: Vec<Vec<u8>> = updates.iter().map(ClientUpdate::bit_widths).collect();
        state.global = agg.model;

        let params = self.spec.param_counts();
        let mut pruned_planes = 0u64;
        if !self.is_fp32() {
            let rounded = round_bitwidths(&state.global.bit_widths);
            for ((&n, delivered), uploaded) in participants.iter().zip(&delivered_bits).zip(&uploaded_layer_bits) {
                state.ledger.record(n, delivered, uploaded)?;
                pruned_planes += state.ledger.delta(n).iter().map(|&d| u64::from(d)).sum::<u64>();
                if cfg.algorithm != Algorithm::FedMpq {
                    continue;
                }
                let budget = f64::from(cfg.budgets[n]);
                state.assignments[n] = if cfg.ablation.pruning_growing {
                    let a = pruning_growing(&rounded, state.ledger.delta(n), &params, budget)?;
                    let total = params.iter().sum::<u64>() as f64;
                    let slack = params.iter().map(|&m| m as f64 / total).fold(0.0, f64::max);
                    if a.average > budget + slack + 1e-9 {
                        return Err(Error::contract(
                            "run_round",
                            format!("client {n} assigned {:.4} bits over budget {budget}", a.average),
                        ));
                    }
                    a.bits
                } else {
                    uploaded.clone()
                };
            }
        }

        let layers = self.spec.layers.len();
        let mut msb_density = vec![0.0; layers];
        let mut counted = vec![0usize; layers];
        let mut prunable = 0u64;
        for (profiles, bits) in densities.iter().zip(&delivered_bits) {
            for (l, profile) in profiles.iter().enumerate() {
                if let Some(p) = profile {
                    let msb = p.density(p.densities().len() - 1);
                    msb_density[l] += msb;
                    counted[l] += 1;
                    if bits[l] > 1 && msb <= PRUNABLE_DENSITY {
                        prunable += 1;
                    }
                }
            }
        }
        for (d, &c) in msb_density.iter_mut().zip(&counted) {
            if c > 0 {
                *d /= c as f64;
            }
        }
        if counted.iter().all(|&c| c == 0) {
            msb_density.clear();
        }

        let eval = self.evaluate_global(&state.global)?;
        let client_bits: Vec<f64> = state.assignments.iter().map(|a| self.client_average(a)).collect();
        let metrics = RoundMetrics {
            round,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            mean_client_bits: client_bits.iter().sum::<f64>() / client_bits.len() as f64,
            client_bits,
            global_bits: state.global.bit_widths.clone(),
            msb_density,
            prunable_msb_planes: prunable,
            pruned_planes,
            uploaded_bits: uploaded_layer_bits.iter().map(|b| self.uploaded_bits(b)).collect(),
        };
        info!(
            "round {round}: loss {:.4} accuracy {:.4} mean bits {:.3}",
            metrics.test_loss, metrics.test_accuracy, metrics.mean_client_bits
        );
        Ok(RoundRecord {
            metrics,
            participants,
            aggregation_weights: agg.weights,
            delivered_bits,
            uploaded_layer_bits,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run(&self) -> Result<RunResult> {
        let mut state = self.initial_state();
        let initial = self.evaluate_global(&state.global)?;
        info!("initial: loss {:.4} accuracy {:.4}", initial.loss, initial.accuracy);
        let mut records = Vec::with_capacity(self.config.rounds as usize);
        for round in 1..=self.config.rounds {
            records.push(self.run_round(&mut state, round)?);
        }
        Ok(RunResult {
            initial,
            records,
            state,
        })
    }

    /// Final global model quantized at its rounded aggregated bit-widths.
    pub fn final_layers(&self, state: &SimState) -> Result<Vec<QuantizedLayer>> {
        let bits = if self.is_fp32() {
            vec![8; self.spec.layers.len()]
        } else {
            round_bitwidths(&state.global.bit_widths)
        };
        state
            .global
            .weights
            .iter()
            .zip(bits)
            .map(|(w, b)| quantize(w.view(), b, self.train_cfg.scale_policy))
            .collect()
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<(Experiment, RunResult)> {
    let experiment = Experiment::new(config)?;
    let result = experiment.run()?;
    Ok((experiment, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    /// Derived stream seeds, hex encoded.
    pub data: String,
    pub partition: String,
    pub init: String,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let hex = |p| format!("{:016x}", derive_seed(master, p));
        Seeds {
            master,
            data: hex(Purpose::Data),
            partition: hex(Purpose::Partition),
            init: hex(Purpose::Init),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub rounds: PathBuf,
    pub checkpoint: PathBuf,
}

/// Record of what a run used and produced; enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub parallel_enabled: bool,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub shard_sizes: Vec<usize>,
    pub param_counts: Vec<u64>,
    pub global_bits: Vec<f64>,
    pub assignments: Vec<Vec<u8>>,
    pub seeds: Seeds,
    pub artifacts: Artifacts,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoints/final.fmpq";

/// Writes metrics, per-round records, the final checkpoint and the manifest
/// into `dir`.
pub fn write_outputs(dir: &Path, experiment: &Experiment, result: &RunResult) -> Result<RunManifest> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &result.metrics())?;
    write_rounds_jsonl(&dir.join(ROUNDS_FILE), &result.records)?;
    checkpoint::write_checkpoint(&dir.join(CHECKPOINT_FILE), &experiment.final_layers(&result.state)?)?;
    let last = result.final_evaluation();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: experiment.config.hash()?,
        parallel_enabled: experiment.config.execution.is_parallel(),
        initial_loss: result.initial.loss,
        initial_accuracy: result.initial.accuracy,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        shard_sizes: experiment.shards.iter().map(Vec::len).collect(),
        param_counts: experiment.spec.param_counts(),
        global_bits: result.state.global.bit_widths.clone(),
        assignments: result.state.assignments.clone(),
        seeds: Seeds::from_master(experiment.config.seed),
        artifacts: Artifacts {
            metrics: METRICS_FILE.into(),
            rounds: ROUNDS_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
        },
        config: experiment.config.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml_string()?)?;
    Ok(manifest)
}

/// Flattened weights of a global model, for comparisons in tests.
pub fn flatten_weights(weights: &[Array2<f64>]) -> Vec<f64> {
    weights.iter().flat_map(|w| w.iter().copied()).collect()
}
