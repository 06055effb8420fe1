//! Federated rounds end to end: data partitioning, participant sampling,
//! local mask training, the update codec, aggregation and metrics.

mod config;
mod partition;

pub use config::{
    CodecConfig, CodecMode, ConfigError, DataConfig, EvalConfig, EvalMode, ExperimentConfig,
    FederationConfig, KappaConfig, KappaMode, ModelConfig,
};
pub use partition::{class_coverage, partition_dirichlet, partition_indices};

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aggregation::{bayes_agg, AggregationError, GlobalState};
use crate::codec::{
    bits_per_parameter, decode_update, delta_indices, encode_update, rank_topk, reconstruct_mask,
    sample_mask, BinaryMask, CodecError, DenseUpdate, EncodedUpdate, ProbabilityMask,
};
use crate::filters::hash::{hash64, role};
use crate::filters::HashSeed;
use crate::model::{
    client_update, evaluate, generate_dataset, init_model, linear_probe, Dataset, DenseLayer,
    FrozenModel, ModelError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset has {samples} samples, fewer than the {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
}

/// `κ(t) = end + (start - end)(1 + cos(π t / (R - 1))) / 2` for `0 ≤ t < R`;
/// constant mode, and runs of a single round, return `start`.
pub fn kappa_schedule(t: usize, rounds: usize, start: f64, end: f64, mode: KappaMode) -> f64 {
    match mode {
        KappaMode::Constant => start,
        KappaMode::Cosine if rounds <= 1 => start,
        KappaMode::Cosine => {
            let x = t.min(rounds - 1) as f64 / (rounds - 1) as f64;
            end + (start - end) * (1.0 + (PI * x).cos()) / 2.0
        }
    }
}

/// Seed every party derives for round `t`.
pub fn round_seed(master: u64, t: u64) -> HashSeed {
    HashSeed(hash64(master, HashSeed(t)))
}

/// `K` of the `N` clients, uniformly without replacement, ascending.
pub fn select_clients(clients: usize, k: usize, seed: HashSeed) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..clients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.with_role(role::SELECT).value());
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// Everything the server holds between rounds, plus the client shards the
/// simulator plays.
#[derive(Clone, Debug)]
pub struct SimState {
    /// Frozen backbone with the probed head.
    pub model: FrozenModel,
    pub global: GlobalState,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub probe_accuracy: f64,
    pub cum_bytes: u64,
}

impl SimState {
    /// Generates and partitions the data, builds the backbone and runs the
    /// one-round federated linear probe.
    pub fn init(config: &ExperimentConfig) -> Result<Self, SimError> {
        config.validate()?;
        let master = HashSeed(config.seed).with_role(role::DATA);
        let train = generate_dataset(&config.data.train_spec())?;
        let test = generate_dataset(&config.data.test_spec())?;
        let clients = partition_dirichlet(
            &train,
            config.federation.clients,
            config.federation.dirichlet,
            master.child(2),
        )?;
        let mut model = init_model(&config.model_spec(), master.child(1))?;
        model.head = federated_probe(&model, &clients, config, master.child(3))?;
        let probe_accuracy = evaluate(&model, &BinaryMask::ones(model.maskable_len()), &test)?;
        let global = GlobalState::new(
            model.maskable_len(),
            0.5,
            config.federation.lambda0,
            config.federation.participation,
        )?;
        Ok(Self {
            model,
            global,
            clients,
            test,
            probe_accuracy,
            cum_bytes: 0,
        })
    }

    pub fn d(&self) -> usize {
        self.model.maskable_len()
    }
}

/// Every client probes the head locally; the server averages the heads
/// weighted by shard size.
fn federated_probe(
    model: &FrozenModel,
    clients: &[Dataset],
    config: &ExperimentConfig,
    seed: HashSeed,
) -> Result<DenseLayer, SimError> {
    let heads: Vec<DenseLayer> = clients
        .par_iter()
        .enumerate()
        .map(|(c, data)| linear_probe(model, data, &config.probe, seed.child(c as u64)))
        .collect::<Result<_, _>>()?;
    let total: usize = clients.iter().map(Dataset::len).sum();
    let mut head = model.head.clone();
    head.weights.iter_mut().for_each(|w| *w = 0.0);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    for (h, data) in heads.iter().zip(clients) {
        let share = data.len() as f64 / total as f64;
        for (a, b) in head.weights.iter_mut().zip(&h.weights) {
            *a += share * b;
        }
        for (a, b) in head.bias.iter_mut().zip(&h.bias) {
            *a += share * b;
        }
    }
    Ok(head)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransmissionKind {
    Filter,
    Dense,
    /// Raw little-endian 32-bit indices (codec bypass).
    Raw,
}

/// What one client put on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientTransmission {
    pub client: usize,
    pub kind: TransmissionKind,
    pub bytes: Vec<u8>,
    pub delta: usize,
    pub delta_prime: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub clients: Vec<usize>,
    pub client_bpp: Vec<f64>,
    pub mean_bpp: f64,
    pub round_bytes: u64,
    pub cum_bytes: u64,
    pub accuracy: f64,
    pub kappa: f64,
    pub mean_delta: f64,
    pub mean_delta_prime: f64,
    pub spurious_flips: u64,
    pub dense_fallbacks: usize,
}

/// A round's metrics plus the raw material behind them.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub transmissions: Vec<ClientTransmission>,
    /// Each participant's trained probabilities, in participant order.
    pub client_theta: Vec<Vec<f64>>,
}

struct ClientWork {
    transmission: ClientTransmission,
    theta: Vec<f64>,
    delta_prime: Vec<u32>,
}

fn client_round(
    state: &SimState,
    config: &ExperimentConfig,
    t: u64,
    client: usize,
    server_mask: &BinaryMask,
    kappa: f64,
    public: HashSeed,
) -> Result<ClientWork, SimError> {
    let seed = public.with_role(role::CLIENT).child(client as u64);
    let start = ProbabilityMask::from_probabilities(&state.global.theta);
    let trained = client_update(
        &start,
        &state.model,
        &state.clients[client],
        &config.training,
        seed.child(1),
    )?;
    let theta = trained.probabilities();
    let mask = sample_mask(&theta, seed.child(2), t);
    let d = state.d();

    if config.codec.mode == CodecMode::Dense {
        let bytes = DenseUpdate {
            round: t as u32,
            mask,
        }
        .to_bytes();
        return Ok(ClientWork {
            transmission: ClientTransmission {
                client,
                kind: TransmissionKind::Dense,
                bytes,
                delta: 0,
                delta_prime: 0,
            },
            theta,
            delta_prime: Vec::new(),
        });
    }

    let delta = delta_indices(server_mask, &mask)?;
    let kept = rank_topk(&delta, &theta, &state.global.theta, kappa)?;
    let (kind, bytes) = match config.codec.mode {
        CodecMode::Bypass => (
            TransmissionKind::Raw,
            kept.indices()
                .iter()
                .flat_map(|i| i.to_le_bytes())
                .collect(),
        ),
        _ => match encode_update(
            &kept,
            d as u64,
            t as u32,
            config.codec.filter(),
            seed.child(3),
        ) {
            Ok(update) => (TransmissionKind::Filter, update.to_bytes()),
            Err(e) if e.is_construction_failure() => {
                log::warn!(
                    "round {t}: client {client} filter construction failed, sending dense mask"
                );
                let reconstructed = reconstruct_mask(server_mask, kept.indices())?;
                (
                    TransmissionKind::Dense,
                    DenseUpdate {
                        round: t as u32,
                        mask: reconstructed,
                    }
                    .to_bytes(),
                )
            }
            Err(e) => return Err(e.into()),
        },
    };
    Ok(ClientWork {
        transmission: ClientTransmission {
            client,
            kind,
            bytes,
            delta: delta.len(),
            delta_prime: kept.len(),
        },
        theta,
        delta_prime: kept.indices().to_vec(),
    })
}

/// Server side of one transmission: the client mask it implies, and the
/// number of flips the sender did not ask for.
fn server_decode(
    tx: &ClientTransmission,
    server_mask: &BinaryMask,
    intended: &[u32],
) -> Result<(BinaryMask, u64), SimError> {
    match tx.kind {
        TransmissionKind::Dense => Ok((DenseUpdate::from_bytes(&tx.bytes)?.mask, 0)),
        TransmissionKind::Raw => {
            let flips: Vec<u32> = tx
                .bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((reconstruct_mask(server_mask, &flips)?, 0))
        }
        TransmissionKind::Filter => {
            let update = EncodedUpdate::from_bytes(&tx.bytes)?;
            if update.d != server_mask.len() as u64 {
                return Err(CodecError::LengthMismatch {
                    expected: server_mask.len(),
                    found: update.d as usize,
                }
                .into());
            }
            let flips = decode_update(&update)?;
            let spurious = (flips.len() - intended.len()) as u64;
            Ok((reconstruct_mask(server_mask, &flips)?, spurious))
        }
    }
}

/// Round `t` (1-based): every party samples the shared server mask from the
/// current global probabilities, the selected clients train and transmit,
/// the server reconstructs and aggregates.
pub fn run_round(
    state: &mut SimState,
    config: &ExperimentConfig,
    t: u64,
) -> Result<RoundOutcome, SimError> {
    let fed = &config.federation;
    let public = round_seed(config.seed, t);
    let server_mask = sample_mask(&state.global.theta, public, t);
    let selected = select_clients(fed.clients, fed.clients_per_round(), public);
    let kappa = kappa_schedule(
        (t as usize).saturating_sub(1),
        fed.rounds,
        config.kappa.start,
        config.kappa.end,
        config.kappa.mode,
    );

    let snapshot: &SimState = state;
    let work: Vec<ClientWork> = selected
        .par_iter()
        .map(|&c| client_round(snapshot, config, t, c, &server_mask, kappa, public))
        .collect::<Result<_, _>>()?;

    let decoded: Vec<(BinaryMask, u64)> = work
        .par_iter()
        .map(|w| server_decode(&w.transmission, &server_mask, &w.delta_prime))
        .collect::<Result<_, _>>()?;
    let masks: Vec<BinaryMask> = decoded.iter().map(|(m, _)| m.clone()).collect();
    bayes_agg(&masks, &mut state.global)?;

    let d = state.d();
    let eval_mask = match config.eval.mode {
        EvalMode::Sampled => sample_mask(
            &state.global.theta,
            HashSeed(config.seed).with_role(role::EVAL),
            t,
        ),
        EvalMode::Thresholded => BinaryMask::from_bools(
            &state
                .global
                .theta
                .iter()
                .map(|&p| p >= 0.5)
                .collect::<Vec<_>>(),
        ),
    };
    let accuracy = evaluate(&state.model, &eval_mask, &state.test)?;

    let client_bpp: Vec<f64> = work
        .iter()
        .map(|w| bits_per_parameter(w.transmission.bytes.len(), d as u64))
        .collect();
    let round_bytes: u64 = work.iter().map(|w| w.transmission.bytes.len() as u64).sum();
    state.cum_bytes += round_bytes;
    let k = work.len() as f64;
    let metrics = RoundMetrics {
        round: t,
        clients: selected,
        mean_bpp: client_bpp.iter().sum::<f64>() / k,
        client_bpp,
        round_bytes,
        cum_bytes: state.cum_bytes,
        accuracy,
        kappa,
        mean_delta: work
            .iter()
            .map(|w| w.transmission.delta as f64)
            .sum::<f64>()
            / k,
        mean_delta_prime: work
            .iter()
            .map(|w| w.transmission.delta_prime as f64)
            .sum::<f64>()
            / k,
        spurious_flips: decoded.iter().map(|(_, s)| s).sum(),
        dense_fallbacks: work
            .iter()
            .filter(|w| {
                config.codec.mode == CodecMode::Filter
                    && w.transmission.kind == TransmissionKind::Dense
            })
            .count(),
    };
    log::debug!(
        "round {t}: accuracy {:.4}, mean bpp {:.4}, mean |delta| {:.1}",
        metrics.accuracy,
        metrics.mean_bpp,
        metrics.mean_delta
    );
    let (transmissions, client_theta) = work.into_iter().map(|w| (w.transmission, w.theta)).unzip();
    Ok(RoundOutcome {
        metrics,
        transmissions,
        client_theta,
    })
}

/// The same round with every client sending its full mask as raw bits.
pub fn dense_baseline_round(
    state: &mut SimState,
    config: &ExperimentConfig,
    t: u64,
) -> Result<RoundOutcome, SimError> {
    let mut dense = config.clone();
    dense.codec.mode = CodecMode::Dense;
    run_round(state, &dense, t)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub rounds: usize,
    pub d: usize,
    pub clients_per_round: usize,
    pub probe_accuracy: f64,
    pub final_accuracy: f64,
    /// Mean over rounds of the per-round mean bpp.
    pub average_bpp: f64,
    pub total_bytes: u64,
    /// Bytes the same participants would send as 32-bit floats.
    pub dense_float_bytes: u64,
    /// `total_bytes / dense_float_bytes`.
    pub relative_volume: f64,
    pub spurious_flips: u64,
    pub dense_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    pub state: SimState,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    run_experiment_with(config, |_| {})
}

/// [`run_experiment`] with a callback seeing every round's outcome.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundOutcome),
) -> Result<ExperimentResult, SimError> {
    let mut state = SimState::init(config)?;
    let mut metrics = Vec::with_capacity(config.federation.rounds);
    for t in 1..=config.federation.rounds as u64 {
        let outcome = run_round(&mut state, config, t)?;
        on_round(&outcome);
        metrics.push(outcome.metrics);
    }
    let summary = summarize(&state, &metrics, config);
    Ok(ExperimentResult {
        metrics,
        summary,
        state,
    })
}

fn summarize(state: &SimState, metrics: &[RoundMetrics], config: &ExperimentConfig) -> Summary {
    let d = state.d();
    let participants: usize = metrics.iter().map(|m| m.clients.len()).sum();
    let dense_float_bytes = (participants * d * 4) as u64;
    let rounds = metrics.len();
    Summary {
        rounds,
        d,
        clients_per_round: config.federation.clients_per_round(),
        probe_accuracy: state.probe_accuracy,
        final_accuracy: metrics.last().map_or(state.probe_accuracy, |m| m.accuracy),
        average_bpp: if rounds == 0 {
            0.0
        } else {
            metrics.iter().map(|m| m.mean_bpp).sum::<f64>() / rounds as f64
        },
        total_bytes: state.cum_bytes,
        dense_float_bytes,
        relative_volume: if dense_float_bytes == 0 {
            0.0
        } else {
            state.cum_bytes as f64 / dense_float_bytes as f64
        },
        spurious_flips: metrics.iter().map(|m| m.spurious_flips).sum(),
        dense_fallbacks: metrics.iter().map(|m| m.dense_fallbacks).sum(),
    }
}

/// One row per round: `t, accuracy, mean_bpp, cum_bytes, mean_delta,
/// mean_delta_prime, spurious_flips`.
pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "accuracy",
        "mean_bpp",
        "cum_bytes",
        "mean_delta",
        "mean_delta_prime",
        "spurious_flips",
    ])?;
    for m in metrics {
        w.write_record(&[
            m.round.to_string(),
            m.accuracy.to_string(),
            m.mean_bpp.to_string(),
            m.cum_bytes.to_string(),
            m.mean_delta.to_string(),
            m.mean_delta_prime.to_string(),
            m.spurious_flips.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
