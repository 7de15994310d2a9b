use fedmpq::config::{Algorithm, DataConfig, ExperimentConfig, ModelConfig};
use fedmpq::data::BlobsConfig;
use fedmpq::nn::{weighted_average_bits, LocalModel};
use fedmpq::partition::sample_clients;
use fedmpq::rng::{stream, Purpose};
use fedmpq::sim::{run_experiment, write_outputs, Experiment, METRICS_FILE};
use fedmpq::trainer::local_update;

fn small(algorithm: Algorithm) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        algorithm,
        rounds: 4,
        data: DataConfig::Blobs(BlobsConfig {
            classes: 4,
            dim: 9,
            train_per_class: 60,
            test_per_class: 20,
            ..BlobsConfig::default()
        }),
        model: ModelConfig::Mlp { hidden: vec![12, 8] },
        ..ExperimentConfig::default()
    };
    cfg.train.local_epochs = 2;
    cfg.train.batch_size = 32;
    cfg
}

#[test]
fn single_client_fp32_is_centralized_training() {
    let cfg = ExperimentConfig {
        clients: 1,
        budgets: vec![8],
        participation: 1.0,
        rounds: 3,
        ..small(Algorithm::Fp32)
    };
    let (exp, res) = run_experiment(cfg.clone()).unwrap();
    let state = exp.initial_state();
    let g = &state.global;
    let mut model = LocalModel::full_precision(g.spec.clone(), g.weights.clone(), g.biases.clone()).unwrap();
    for round in 1..=cfg.rounds {
        let mut rng = stream(cfg.seed, Purpose::Client { client: 0, round });
        model = local_update(&model, &exp.train, exp.train_config(), &mut rng).unwrap().model;
    }
    let dense: Vec<_> = model.weights.iter().map(|w| w.to_dense()).collect();
    assert_eq!(res.state.global.weights, dense);
    assert_eq!(res.state.global.biases, model.biases);
}

#[test]
fn delivered_models_respect_budgets() {
    let cfg = small(Algorithm::FedMpq);
    let (exp, res) = run_experiment(cfg.clone()).unwrap();
    let params = exp.spec.param_counts();
    let total = params.iter().sum::<u64>() as f64;
    let slack = params.iter().map(|&m| m as f64 / total).fold(0.0, f64::max);
    for record in &res.records {
        for (n, bits) in record.participants.iter().zip(&record.delivered_bits) {
            if record.metrics.round > 1 {
                assert!(weighted_average_bits(bits, &params) <= f64::from(cfg.budgets[*n]) + slack + 1e-9);
            }
        }
        let sum: f64 = record.aggregation_weights.iter().map(|(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(record.participants, sample_clients(cfg.clients, cfg.participation, record.metrics.round, cfg.seed));
        for (up, down) in record.uploaded_layer_bits.iter().zip(&record.delivered_bits) {
            assert!(up.iter().zip(down).all(|(u, d)| u <= d));
        }
    }
}

#[test]
fn non_participants_keep_their_assignment() {
    let cfg = small(Algorithm::FedMpq);
    let exp = Experiment::new(cfg).unwrap();
    let mut state = exp.initial_state();
    let before = state.assignments.clone();
    let record = exp.run_round(&mut state, 1).unwrap();
    for (n, (now, was)) in state.assignments.iter().zip(&before).enumerate() {
        if !record.participants.contains(&n) {
            assert_eq!(now, was);
        }
    }
}

#[test]
fn ablation_toggles_are_independent() {
    let mut cfg = small(Algorithm::FedMpq);
    cfg.ablation.pruning_growing = false;
    cfg.train.epsilon = 1.0;
    let (_, res) = run_experiment(cfg).unwrap();
    let first = &res.records[0];
    assert!(first.uploaded_layer_bits.iter().all(|b| b.iter().all(|&x| x == 1)));
    assert!(res.records.iter().all(|r| r.metrics.pruned_planes > 0 || r.delivered_bits.iter().all(|b| b.iter().all(|&x| x == 1))));
}

#[test]
fn fixed_precision_uploads_at_k_bits() {
    let (_, res) = run_experiment(small(Algorithm::Fpq(3))).unwrap();
    for r in &res.records {
        assert!(r.uploaded_layer_bits.iter().all(|b| b.iter().all(|&x| x == 3)));
        assert_eq!(r.metrics.mean_client_bits, 3.0);
    }
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let (exp, res) = run_experiment(small(Algorithm::FedMpq)).unwrap();
        write_outputs(dir.path(), &exp, &res).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, METRICS_FILE), read(&b, METRICS_FILE));
    assert_eq!(read(&a, "checkpoints/final.fmpq"), read(&b, "checkpoints/final.fmpq"));
}

#[test]
fn conv_model_on_square_blobs() {
    let mut cfg = small(Algorithm::FedMpq);
    cfg.model = ModelConfig::Conv { channels: vec![2], kernel: 2 };
    cfg.rounds = 1;
    let (exp, res) = run_experiment(cfg).unwrap();
    assert_eq!(exp.spec.layers.len(), 2);
    assert!(res.final_evaluation().loss.is_finite());
}
