//! Experiment flows shared by the subcommands and the demos.

use std::sync::Arc;
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use fedgan::cascade::{
    predict_future, run_cascade_loop, run_stage1, CascadeSchedule, RefreshEvent, RetryPolicy, StageConfig,
};
use fedgan::diffcore::{Rng, Tensor};
use fedgan::federation::{
    deserialize_generator, serialize_generator, serve, ModelRegistry, RegistryClient, RemoteRegistry, Selector,
    ServerHandle,
};
use fedgan::fusion::{build_fusion, build_fusion_with, sample_pairs, train_fusion, FusionNetwork, PairedDataset};
use fedgan::gan::{
    generate, sample_noise, streams as gan_streams, AdversarialTrainer, DiscriminatorModel, GanTrainConfig,
    GeneratorModel, LossRecord,
};
use fedgan::synthdata::{
    chain_accuracy, conditional_consistency, default_chain, default_joint, mmd2, pairing_accuracy, sample_chain,
    sample_joint, sample_marginal, ChainSpec, JointSpec, Point,
};

use crate::config::{Demo, RunConfig};

/// RNG streams, all keyed by the run seed.
pub mod streams {
    /// Local data for location `k` uses `LOCAL_DATA + k`.
    pub const LOCAL_DATA: u64 = 100;
    pub const JOINT_DATA: u64 = 110;
    pub const CHAIN_DATA: u64 = 111;
    pub const FUSION_INIT: u64 = 3;
    pub const EVAL_PAIRS: u64 = 20;
    pub const EVAL_TRIPLES: u64 = 21;
    /// Fresh oracle draws for component `k` use `EVAL_REFERENCE + k`.
    pub const EVAL_REFERENCE: u64 = 40;
    pub const EVAL_PRE_FUSION: u64 = 24;
}

/// Seed offsets separating the training contexts of one run.
const FUSION_SEED_OFFSET: u64 = 1000;
const STAGE2_SEED_OFFSET: u64 = 2000;

pub const CLIENT_IDS: [&str; 3] = ["g1", "g2", "g3"];

pub fn gan_config(cfg: &RunConfig, seed: u64) -> GanTrainConfig {
    GanTrainConfig {
        batch_size: cfg.gan.batch,
        steps: cfg.gan.steps,
        lr_g: cfg.gan.lr_g,
        lr_d: cfg.gan.lr_d,
        d_steps_per_g_step: cfg.gan.d_steps,
        seed,
        beta1: cfg.gan.beta1,
    }
}

pub fn fusion_config(cfg: &RunConfig, seed: u64) -> GanTrainConfig {
    GanTrainConfig {
        steps: cfg.fusion.steps,
        lr_g: cfg.fusion.lr,
        lr_d: cfg.fusion.lr,
        ..gan_config(cfg, seed)
    }
}

pub fn stage_config(cfg: &RunConfig, seed: u64) -> StageConfig {
    StageConfig {
        gen_hidden: cfg.fusion.hidden.clone(),
        disc_hidden: cfg.fusion.hidden.clone(),
        output_dim: 2,
        train: fusion_config(cfg, seed),
    }
}

/// Cluster centers of each location for a demo.
pub fn locations(demo: Demo) -> (Vec<Vec<Point>>, Vec<f64>, f64) {
    match demo {
        Demo::Planning | Demo::Contemplation => {
            let s = default_joint();
            (vec![s.centers_a, s.centers_b], s.weights, s.sigma)
        }
        Demo::Future => {
            let s = default_chain();
            (s.centers.to_vec(), s.weights, s.sigma)
        }
    }
}

/// Local training data of location `k`.
pub fn location_data(cfg: &RunConfig, demo: Demo, k: usize) -> Result<Tensor> {
    let (rings, weights, sigma) = locations(demo);
    let centers = rings
        .get(k)
        .ok_or_else(|| anyhow!("demo {demo} has {} locations, asked for {}", rings.len(), k + 1))?;
    let mut rng = Rng::new(cfg.seed, streams::LOCAL_DATA + k as u64);
    Ok(sample_marginal(centers, &weights, sigma, cfg.gan.samples, &mut rng))
}

/// Real rows presented to fusion discriminators for a demo.
pub fn paired_data(cfg: &RunConfig, demo: Demo) -> PairedDataset {
    match demo {
        Demo::Planning | Demo::Contemplation => {
            sample_joint(&default_joint(), cfg.fusion.samples, &mut Rng::new(cfg.seed, streams::JOINT_DATA))
        }
        Demo::Future => sample_chain(&default_chain(), cfg.fusion.samples, &mut Rng::new(cfg.seed, streams::CHAIN_DATA)),
    }
}

/// A client's private GAN, kept around so it can continue training.
pub struct LocalClient {
    trainer: AdversarialTrainer<GeneratorModel>,
    data: Tensor,
    history: Vec<LossRecord>,
}

impl LocalClient {
    /// Initializes from `seed` and trains for `gan.steps`.
    pub fn train(cfg: &RunConfig, data: Tensor, seed: u64) -> Result<Self> {
        let g_spec = GeneratorModel::standard_spec(cfg.gan.noise_dim, &cfg.gan.hidden, data.cols())?;
        let d_spec = DiscriminatorModel::standard_spec(data.cols(), &cfg.gan.hidden)?;
        let g = GeneratorModel::init(g_spec, &mut Rng::new(seed, gan_streams::INIT_G));
        let d = DiscriminatorModel::init(d_spec, &mut Rng::new(seed, gan_streams::INIT_D))?;
        let mut client = Self {
            trainer: AdversarialTrainer::new(g, d, gan_config(cfg, seed))?,
            data,
            history: Vec::new(),
        };
        client.resume(cfg.gan.steps)?;
        Ok(client)
    }

    pub fn resume(&mut self, steps: usize) -> fedgan::Result<()> {
        let h = self.trainer.run(&self.data, steps)?;
        self.history.extend(h);
        Ok(())
    }

    pub fn generator(&self) -> &GeneratorModel {
        &self.trainer.source
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }
}

/// Builds and trains a fusion net around `frozen`. The trainable slot starts
/// from `warm` when given, else from a fresh init.
pub fn fuse(
    cfg: &RunConfig,
    frozen: &[GeneratorModel],
    warm: Option<GeneratorModel>,
    data: &PairedDataset,
) -> Result<(FusionNetwork, Vec<LossRecord>)> {
    let first = frozen.first().ok_or_else(|| anyhow!("fusion needs a frozen generator"))?;
    let width: usize = data.component_dims().iter().sum();
    let out_dim = *data.component_dims().last().expect("validated dataset");
    let d_spec = DiscriminatorModel::standard_spec(width, &cfg.fusion.hidden)?;
    let mut rng = Rng::new(cfg.seed, streams::FUSION_INIT);
    let net = match warm {
        Some(g) => build_fusion_with(frozen, g, &d_spec, &mut rng)?,
        None => {
            let g_spec = GeneratorModel::standard_spec(first.noise_dim(), &cfg.fusion.hidden, out_dim)?;
            build_fusion(frozen, &g_spec, &d_spec, &mut rng)?
        }
    };
    Ok(train_fusion(net, data, &fusion_config(cfg, cfg.seed + FUSION_SEED_OFFSET))?)
}

/// Named metric values in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn push(&mut self, name: &str, value: f64) {
        self.rows.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// CSV with header `metric,value`.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.rows {
            s.push_str(&format!("{n},{v}\n"));
        }
        s.into_bytes()
    }
}

fn component_mmd(
    cfg: &RunConfig,
    eval: &mut Evaluation,
    data: &PairedDataset,
    rings: &[&[Point]],
    weights: &[f64],
    sigma: f64,
) -> Result<()> {
    for (k, centers) in rings.iter().enumerate() {
        let mut rng = Rng::new(cfg.seed, streams::EVAL_REFERENCE + k as u64);
        let reference = sample_marginal(centers, weights, sigma, data.len(), &mut rng);
        let name = format!("mmd2_{}", (b'a' + k as u8) as char);
        eval.push(&name, mmd2(&data.component(k)?, &reference, cfg.eval.bandwidth)?);
    }
    Ok(())
}

/// Pairing accuracy and per-component MMD of generated pairs.
pub fn evaluate_pairs(cfg: &RunConfig, spec: &JointSpec, pairs: &PairedDataset) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    e.push("pairing_accuracy", pairing_accuracy(spec, pairs)?);
    component_mmd(cfg, &mut e, pairs, &[&spec.centers_a, &spec.centers_b], &spec.weights, spec.sigma)?;
    Ok(e)
}

/// Chain metrics of generated triples.
pub fn evaluate_triples(cfg: &RunConfig, spec: &ChainSpec, triples: &PairedDataset) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    let first = PairedDataset::new(triples.samples().columns(0, 4)?, vec![2, 2])?;
    e.push("pairing_accuracy", pairing_accuracy(&spec.first_pair(), &first)?);
    e.push("chain_accuracy", chain_accuracy(spec, triples)?);
    e.push("conditional_consistency", conditional_consistency(spec, triples)?.fraction_consistent());
    let rings: Vec<&[Point]> = spec.centers.iter().map(Vec::as_slice).collect();
    component_mmd(cfg, &mut e, triples, &rings, &spec.weights, spec.sigma)?;
    Ok(e)
}

/// Evaluates a sample file by its width: 4 columns as pairs, 6 as triples.
pub fn evaluate_rows(cfg: &RunConfig, data: &PairedDataset) -> Result<Evaluation> {
    match data.component_dims() {
        [2, 2] => evaluate_pairs(cfg, &default_joint(), data),
        [2, 2, 2] => evaluate_triples(cfg, &default_chain(), data),
        dims => bail!("cannot evaluate rows with component dims {dims:?}"),
    }
}

/// Where models live during a run.
#[derive(Clone)]
pub enum RegistryHandle {
    Local(Arc<ModelRegistry>),
    Remote(String),
}

impl RegistryHandle {
    /// `registry.endpoint` if set, else `registry.root`, else a fresh in-memory registry.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if let Some(ep) = &cfg.registry_endpoint {
            return Ok(Self::Remote(ep.clone()));
        }
        Ok(Self::Local(Arc::new(local_registry(cfg)?)))
    }

    /// Like [`from_config`](Self::from_config) but refuses to lose uploads.
    pub fn persistent(cfg: &RunConfig) -> Result<Self> {
        if cfg.registry_endpoint.is_none() && cfg.registry_root.is_none() {
            bail!("set registry.root or registry.endpoint");
        }
        Self::from_config(cfg)
    }

    /// An independent client handle.
    pub fn connect(&self) -> Result<Box<dyn RegistryClient>> {
        Ok(match self {
            Self::Local(r) => Box::new(r.clone()),
            Self::Remote(ep) => {
                Box::new(RemoteRegistry::new(ep.as_str()).with_context(|| format!("connecting to registry at {ep}"))?)
            }
        })
    }
}

pub fn local_registry(cfg: &RunConfig) -> Result<ModelRegistry> {
    Ok(match &cfg.registry_root {
        Some(root) => ModelRegistry::open(root).with_context(|| format!("opening registry {}", root.display()))?,
        None => ModelRegistry::in_memory(),
    })
}

/// Everything a demo produces.
#[derive(Clone, Debug)]
pub struct DemoOutcome {
    /// Losses of the final fusion training.
    pub history: Vec<LossRecord>,
    pub client_histories: Vec<Vec<LossRecord>>,
    pub stage1_history: Option<Vec<LossRecord>>,
    /// Generated rows from the final network.
    pub samples: PairedDataset,
    pub evaluation: Evaluation,
    pub refresh_log: Option<Vec<RefreshEvent>>,
    pub network: FusionNetwork,
    /// Set when the run stopped early; everything else is partial.
    pub aborted: Option<String>,
}

pub fn run_demo(cfg: &RunConfig) -> Result<DemoOutcome> {
    match cfg.demo {
        Demo::Planning => planning(cfg, &RegistryHandle::from_config(cfg)?),
        Demo::Contemplation => contemplation(cfg),
        Demo::Future => future(cfg, &RegistryHandle::from_config(cfg)?),
    }
}

fn fetch_generator(reg: &dyn RegistryClient, id: &str, version: u32) -> Result<GeneratorModel> {
    let env = reg.fetch(id, Selector::Version(version)).with_context(|| format!("fetching {id} v{version}"))?;
    Ok(deserialize_generator(&env.payload).with_context(|| format!("decoding {id} v{version}"))?)
}

/// Two clients train on their own location concurrently and upload; a
/// fusion net then freezes client 1's generator and learns the pairing.
pub fn planning(cfg: &RunConfig, registry: &RegistryHandle) -> Result<DemoOutcome> {
    let spec = default_joint();
    let uploads = thread::scope(|s| -> Result<Vec<(LocalClient, u32)>> {
        let workers: Vec<_> = (0..2)
            .map(|k| {
                s.spawn(move || -> Result<(LocalClient, u32)> {
                    let reg = registry.connect()?;
                    let client = LocalClient::train(cfg, location_data(cfg, Demo::Planning, k)?, cfg.seed + k as u64)?;
                    let creator = format!("client{}", k + 1);
                    let v = reg
                        .upload(CLIENT_IDS[k], &creator, &serialize_generator(client.generator()))
                        .with_context(|| format!("uploading {}", CLIENT_IDS[k]))?;
                    Ok((client, v))
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().map_err(|_| anyhow!("client thread panicked"))?)
            .collect()
    })?;

    let reg = registry.connect()?;
    let g1 = fetch_generator(&*reg, CLIENT_IDS[0], uploads[0].1)?;
    let warm = if cfg.fusion.warm_start {
        Some(fetch_generator(&*reg, CLIENT_IDS[1], uploads[1].1)?)
    } else {
        None
    };
    let z = sample_noise(cfg.eval.samples, g1.noise_dim(), &mut Rng::new(cfg.seed, streams::EVAL_PRE_FUSION));
    let solo = generate(&g1, &z)?;
    let reference = sample_marginal(
        &spec.centers_a,
        &spec.weights,
        spec.sigma,
        solo.rows(),
        &mut Rng::new(cfg.seed, streams::EVAL_REFERENCE),
    );
    let pre = mmd2(&solo, &reference, cfg.eval.bandwidth)?;

    let (network, history) = fuse(cfg, &[g1], warm, &paired_data(cfg, Demo::Planning))?;
    let samples = sample_pairs(&network, cfg.eval.samples, &mut Rng::new(cfg.seed, streams::EVAL_PAIRS))?;
    let mut evaluation = evaluate_pairs(cfg, &spec, &samples)?;
    evaluation.push("mmd2_a_pre_fusion", pre);
    reg.upload(CLIENT_IDS[1], "fusion", &serialize_generator(network.trainable()))
        .context("uploading fused g2")?;
    Ok(DemoOutcome {
        history,
        client_histories: uploads.iter().map(|(c, _)| c.history().to_vec()).collect(),
        stage1_history: None,
        samples,
        evaluation,
        refresh_log: None,
        network,
        aborted: None,
    })
}

/// An in-process registry server, or the configured endpoint.
pub struct ServedRegistry {
    pub handle: RegistryHandle,
    _server: Option<ServerHandle>,
}

pub fn serve_for_demo(cfg: &RunConfig) -> Result<ServedRegistry> {
    if let Some(ep) = &cfg.registry_endpoint {
        return Ok(ServedRegistry {
            handle: RegistryHandle::Remote(ep.clone()),
            _server: None,
        });
    }
    let server = serve(Arc::new(local_registry(cfg)?), "127.0.0.1:0").context("starting registry server")?;
    Ok(ServedRegistry {
        handle: RegistryHandle::Remote(server.addr().to_string()),
        _server: Some(server),
    })
}

/// The planning flow with every registry call crossing TCP.
pub fn contemplation(cfg: &RunConfig) -> Result<DemoOutcome> {
    let served = serve_for_demo(cfg)?;
    planning(cfg, &served.handle)
}

/// Location 1 trains G1 locally; stage 1 fuses it into G2; the stage-2 loop
/// trains G3 against both, re-fetching them every `cascade.R` rounds.
pub fn future(cfg: &RunConfig, registry: &RegistryHandle) -> Result<DemoOutcome> {
    let chain = default_chain();
    let reg = registry.connect()?;
    let mut client = LocalClient::train(cfg, location_data(cfg, Demo::Future, 0)?, cfg.seed)?;
    let v1 = reg
        .upload(CLIENT_IDS[0], "location1", &serialize_generator(client.generator()))
        .context("uploading g1")?;
    let g1 = reg.fetch(CLIENT_IDS[0], Selector::Version(v1)).context("fetching g1")?;

    let pairs = sample_joint(&chain.first_pair(), cfg.fusion.samples, &mut Rng::new(cfg.seed, streams::JOINT_DATA));
    let stage1 = run_stage1(
        &g1,
        &pairs,
        &stage_config(cfg, cfg.seed + FUSION_SEED_OFFSET),
        &*reg,
        CLIENT_IDS[1],
        "location2",
    )
    .context("stage 1")?;

    let schedule = CascadeSchedule {
        total_rounds: cfg.cascade.rounds,
        refresh_interval: cfg.cascade.refresh_interval,
        steps_per_round: cfg.cascade.steps_per_round,
    };
    let client_steps = cfg.cascade.client_steps;
    let mut keep_learning = |_round: usize, reg: &dyn RegistryClient| -> fedgan::Result<()> {
        if client_steps > 0 {
            client.resume(client_steps)?;
            reg.upload(CLIENT_IDS[0], "location1", &serialize_generator(client.generator()))?;
        }
        Ok(())
    };
    let outcome = run_cascade_loop(
        &schedule,
        &*reg,
        &CLIENT_IDS[..2],
        &paired_data(cfg, Demo::Future),
        &stage_config(cfg, cfg.seed + STAGE2_SEED_OFFSET),
        &RetryPolicy::default(),
        &mut keep_learning,
    )
    .context("stage 2")?;

    let samples = predict_future(&outcome.network, cfg.eval.samples, &mut Rng::new(cfg.seed, streams::EVAL_TRIPLES))?;
    let mut evaluation = evaluate_triples(cfg, &chain, &samples)?;
    let stage1_pairs = sample_pairs(&stage1.network, cfg.eval.samples, &mut Rng::new(cfg.seed, streams::EVAL_PAIRS))?;
    evaluation.push("stage1_pairing_accuracy", pairing_accuracy(&chain.first_pair(), &stage1_pairs)?);
    Ok(DemoOutcome {
        history: outcome.history,
        client_histories: vec![client.history().to_vec()],
        stage1_history: Some(stage1.history),
        samples,
        evaluation,
        refresh_log: Some(outcome.refresh_log),
        network: outcome.network,
        aborted: outcome.aborted,
    })
}
