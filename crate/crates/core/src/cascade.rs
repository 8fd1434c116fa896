//! Two-stage fusion cascade with periodic re-federation.
//!
//! Stage 1 freezes G1 and trains G2 on (location 1, location 2) pairs, then
//! publishes G2. Stage 2 freezes both and trains G3 on triples. The stage-2
//! loop re-fetches the latest G1 and G2 every `refresh_interval` rounds and
//! swaps them into the frozen slots, keeping G3, its discriminator, and their
//! optimizer state.

use std::io::Write;
use std::thread;
use std::time::Duration;

use crate::diffcore::{MlpSpec, Rng};
use crate::federation::{
    deserialize_generator, serialize_generator, ModelEnvelope, RegistryClient, RegistryError, Selector,
};
use crate::fusion::{build_fusion, sample_pairs, FusionNetwork, FusionTrainer, PairedDataset};
use crate::gan::{DiscriminatorModel, GanTrainConfig, GeneratorModel, LossRecord, DEFAULT_HIDDEN};
use crate::{Error, Result};

/// Stream used to initialize the trainable generator and discriminator of a stage.
const STAGE_INIT_STREAM: u64 = 30;

/// Architecture and optimizer settings for one fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub output_dim: usize,
    pub train: GanTrainConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            gen_hidden: vec![DEFAULT_HIDDEN; 2],
            disc_hidden: vec![DEFAULT_HIDDEN; 2],
            output_dim: 2,
            train: GanTrainConfig {
                steps: 3000,
                ..Default::default()
            },
        }
    }
}

impl StageConfig {
    fn specs(&self, frozen: &[GeneratorModel]) -> Result<(MlpSpec, MlpSpec)> {
        let noise = frozen
            .first()
            .ok_or_else(|| Error::Dimension("no frozen generators".into()))?
            .noise_dim();
        let g = GeneratorModel::standard_spec(noise, &self.gen_hidden, self.output_dim)?;
        let width = frozen.iter().map(GeneratorModel::output_dim).sum::<usize>() + self.output_dim;
        let d = DiscriminatorModel::standard_spec(width, &self.disc_hidden)?;
        Ok((g, d))
    }

    fn build(&self, frozen: &[GeneratorModel]) -> Result<FusionNetwork> {
        let (g, d) = self.specs(frozen)?;
        let mut rng = Rng::new(self.train.seed, STAGE_INIT_STREAM);
        build_fusion(frozen, &g, &d, &mut rng)
    }
}

/// What a stage consumed and produced.
#[derive(Clone, Debug)]
pub struct CascadeStage {
    pub stage_index: usize,
    /// `(model_id, version)` of each frozen generator.
    pub frozen_ids: Vec<(String, u32)>,
    pub trainable_gen: GeneratorModel,
    pub paired_data: PairedDataset,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: CascadeStage,
    pub network: FusionNetwork,
    pub history: Vec<LossRecord>,
    /// Registry version assigned to the uploaded generator, if any.
    pub uploaded_version: Option<u32>,
}

fn open(env: &ModelEnvelope) -> Result<GeneratorModel> {
    if !env.verify() {
        return Err(Error::Registry(RegistryError::Connection(format!(
            "envelope {}:{} failed its checksum",
            env.model_id, env.version
        ))));
    }
    Ok(deserialize_generator(&env.payload)?)
}

fn run_stage(
    index: usize,
    envelopes: &[&ModelEnvelope],
    data: &PairedDataset,
    config: &StageConfig,
) -> Result<StageOutcome> {
    let frozen = envelopes.iter().map(|e| open(e)).collect::<Result<Vec<_>>>()?;
    let net = config.build(&frozen)?;
    let mut trainer = FusionTrainer::new(net, config.train.clone())?;
    let history = trainer.run(data, config.train.steps)?;
    let network = trainer.into_network();
    Ok(StageOutcome {
        stage: CascadeStage {
            stage_index: index,
            frozen_ids: envelopes.iter().map(|e| (e.model_id.clone(), e.version)).collect(),
            trainable_gen: network.trainable().clone(),
            paired_data: data.clone(),
        },
        network,
        history,
        uploaded_version: None,
    })
}

/// Trains G2 against frozen G1 and uploads it as `g2_id`.
pub fn run_stage1(
    g1: &ModelEnvelope,
    data: &PairedDataset,
    config: &StageConfig,
    registry: &dyn RegistryClient,
    g2_id: &str,
    creator: &str,
) -> Result<StageOutcome> {
    let mut out = run_stage(1, &[g1], data, config)?;
    let version = registry.upload(g2_id, creator, &serialize_generator(&out.stage.trainable_gen))?;
    out.uploaded_version = Some(version);
    Ok(out)
}

/// Trains G3 against frozen G1 and G2 on triples.
pub fn run_stage2(
    g1: &ModelEnvelope,
    g2: &ModelEnvelope,
    data: &PairedDataset,
    config: &StageConfig,
) -> Result<StageOutcome> {
    run_stage(2, &[g1, g2], data, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CascadeSchedule {
    pub total_rounds: usize,
    pub refresh_interval: usize,
    pub steps_per_round: usize,
}

impl CascadeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 || self.refresh_interval == 0 {
            return Err(Error::Config("total_rounds and refresh_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Multiples of the refresh interval in `1..=total_rounds`.
    pub fn refresh_rounds(&self) -> Vec<usize> {
        (self.refresh_interval..=self.total_rounds)
            .step_by(self.refresh_interval.max(1))
            .collect()
    }
}

/// Bounded exponential backoff for registry calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 4,
            initial_delay: Duration::from_millis(50),
            max_delay: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    pub fn call<T>(&self, mut f: impl FnMut() -> std::result::Result<T, RegistryError>) -> std::result::Result<T, RegistryError> {
        let mut delay = self.initial_delay;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_transient() && attempt < self.attempts => {
                    thread::sleep(delay);
                    delay = (delay * 2).min(self.max_delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// One refresh: the round and the versions fetched for each frozen slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefreshEvent {
    pub round: usize,
    pub fetched: Vec<(String, u32)>,
}

#[derive(Clone, Debug)]
pub struct CascadeOutcome {
    pub network: FusionNetwork,
    pub refresh_log: Vec<RefreshEvent>,
    pub history: Vec<LossRecord>,
    pub rounds_completed: usize,
    /// Set when the loop stopped early; the other fields hold partial results.
    pub aborted: Option<String>,
}

impl CascadeOutcome {
    pub fn is_partial(&self) -> bool {
        self.aborted.is_some()
    }
}

/// Runs the stage-2 loop described in the module docs.
///
/// `frozen_ids` name the registry entries for the frozen slots, in order.
/// `before_refresh` runs just before each refresh fetch with the round number;
/// it is where simulated clients publish newer versions.
pub fn run_cascade_loop(
    schedule: &CascadeSchedule,
    registry: &dyn RegistryClient,
    frozen_ids: &[&str],
    data: &PairedDataset,
    config: &StageConfig,
    retry: &RetryPolicy,
    before_refresh: &mut dyn FnMut(usize, &dyn RegistryClient) -> Result<()>,
) -> Result<CascadeOutcome> {
    schedule.validate()?;
    let fetch_all = || -> std::result::Result<Vec<ModelEnvelope>, RegistryError> {
        frozen_ids
            .iter()
            .map(|id| retry.call(|| registry.fetch(id, Selector::Latest)))
            .collect()
    };
    let initial = fetch_all()?;
    let mut seen: Vec<u32> = initial.iter().map(|e| e.version).collect();
    let frozen = initial.iter().map(open).collect::<Result<Vec<_>>>()?;
    let mut trainer = FusionTrainer::new(config.build(&frozen)?, config.train.clone())?;

    let mut refresh_log = Vec::new();
    let mut history = Vec::new();
    let mut aborted = None;
    let mut rounds_completed = 0;
    for round in 1..=schedule.total_rounds {
        history.extend(trainer.run(data, schedule.steps_per_round)?);
        rounds_completed = round;
        if round % schedule.refresh_interval != 0 {
            continue;
        }
        if let Err(e) = before_refresh(round, registry) {
            aborted = Some(format!("round {round}: {e}"));
            break;
        }
        let envelopes = match fetch_all() {
            Ok(envs) => envs,
            Err(e) => {
                aborted = Some(format!("round {round}: {e}"));
                break;
            }
        };
        for (prev, env) in seen.iter_mut().zip(&envelopes) {
            if env.version < *prev {
                return Err(Error::Registry(RegistryError::Storage(format!(
                    "{} went backwards from version {prev} to {}",
                    env.model_id, env.version
                ))));
            }
            *prev = env.version;
        }
        let gens = envelopes.iter().map(open).collect::<Result<Vec<_>>>()?;
        trainer.replace_frozen(&gens)?;
        refresh_log.push(RefreshEvent {
            round,
            fetched: envelopes.iter().map(|e| (e.model_id.clone(), e.version)).collect(),
        });
    }
    Ok(CascadeOutcome {
        network: trainer.into_network(),
        refresh_log,
        history,
        rounds_completed,
        aborted,
    })
}

/// Samples the stage-2 network; the last component is the synthesized location-3 event.
pub fn predict_future(net: &FusionNetwork, n: usize, rng: &mut Rng) -> Result<PairedDataset> {
    sample_pairs(net, n, rng)
}

/// CSV with header `round,model_id,version`, one row per fetched model.
pub fn write_refresh_csv(log: &[RefreshEvent], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "round,model_id,version")?;
    for ev in log {
        for (id, v) in &ev.fetched {
            writeln!(out, "{},{id},{v}", ev.round)?;
        }
    }
    Ok(())
}
