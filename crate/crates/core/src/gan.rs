//! Vanilla GAN: generator and discriminator models, losses, and the
//! alternating training loop shared with the fusion network.

use crate::diffcore::{
    adam_step, Activation, AdamConfig, AdamState, Gradients, Mlp, MlpSpec, Rng, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// RNG stream ids used inside one training context.
pub mod streams {
    pub const INIT_G: u64 = 1;
    pub const INIT_D: u64 = 2;
    pub const NOISE: u64 = 10;
    pub const DATA: u64 = 11;
    pub const SAMPLE: u64 = 20;
}

pub const DEFAULT_NOISE_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_BATCH: usize = 64;

/// Maps noise `z` to samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    net: Mlp,
}

impl GeneratorModel {
    pub fn new(net: Mlp) -> Self {
        Self { net }
    }

    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        Self::new(Mlp::init(spec, rng))
    }

    /// `noise_dim → hidden… → output_dim`, ReLU hidden layers and a linear head.
    pub fn standard_spec(noise_dim: usize, hidden: &[usize], output_dim: usize) -> Result<MlpSpec> {
        let dims: Vec<usize> = std::iter::once(noise_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        Ok(MlpSpec::uniform(&dims, Activation::Relu, Activation::Linear)?)
    }

    pub fn noise_dim(&self) -> usize {
        self.net.spec().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.spec().output_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn into_net(self) -> Mlp {
        self.net
    }
}

/// Scores samples with a probability of being real.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    net: Mlp,
}

impl DiscriminatorModel {
    pub fn new(net: Mlp) -> Result<Self> {
        let spec = net.spec();
        if spec.output_dim() != 1 || *spec.activations().last().unwrap() != Activation::Sigmoid {
            return Err(Error::Dimension(
                "discriminator must end in a single sigmoid unit".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        Self::new(Mlp::init(spec, rng))
    }

    /// `input_dim → hidden… → 1`, leaky ReLU hidden layers and a sigmoid head.
    pub fn standard_spec(input_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Ok(MlpSpec::uniform(&dims, Activation::LeakyRelu, Activation::Sigmoid)?)
    }

    pub fn input_dim(&self) -> usize {
        self.net.spec().input_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn into_net(self) -> Mlp {
        self.net
    }

    /// Probabilities for each row of `x`.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        check_features(x, self.input_dim(), "discriminator input")?;
        Ok(self.net.apply(x)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub beta1: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            steps: 2000,
            lr_g: 1e-3,
            lr_d: 1e-3,
            d_steps_per_g_step: 1,
            seed: 0,
            beta1: 0.5,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::Config("batch_size and d_steps_per_g_step must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            ..AdamConfig::new(lr)
        }
    }
}

/// Losses recorded after one generator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// CSV with header `step,d_loss,g_loss`.
pub fn write_history_csv(history: &[LossRecord], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,d_loss,g_loss")?;
    for r in history {
        writeln!(out, "{},{},{}", r.step, r.d_loss, r.g_loss)?;
    }
    Ok(())
}

pub(crate) fn check_features(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    match x.shape() {
        [_, d] if *d == expected => Ok(()),
        s => Err(Error::Dimension(format!(
            "{what}: expected feature dim {expected}, got shape {s:?}"
        ))),
    }
}

/// `n × d_z` standard normal noise.
pub fn sample_noise(n: usize, d_z: usize, rng: &mut Rng) -> Tensor {
    assert!(n >= 1 && d_z >= 1, "noise batch must be non-empty");
    let data = (0..n * d_z).map(|_| rng.normal()).collect();
    Tensor::matrix(n, d_z, data).expect("finite noise")
}

pub fn generate(g: &GeneratorModel, z: &Tensor) -> Result<Tensor> {
    check_features(z, g.noise_dim(), "noise")?;
    Ok(g.net.apply(z)?)
}

/// `-mean ln D(real) - mean ln(1 - D(fake))` from recorded discriminator outputs.
pub fn d_loss_on_tape(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = tape.ln_clamped(d_real)?;
    let lr = tape.mean(lr)?;
    let one_minus = tape.one_minus(d_fake)?;
    let lf = tape.ln_clamped(one_minus)?;
    let lf = tape.mean(lf)?;
    let s = tape.add(lr, lf)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Non-saturating generator loss `-mean ln D(fake)`.
pub fn g_loss_on_tape(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    let l = tape.ln_clamped(d_fake)?;
    let l = tape.mean(l)?;
    Ok(tape.scale(l, -1.0)?)
}

pub fn d_loss(d: &DiscriminatorModel, real: &Tensor, fake: &Tensor) -> Result<f64> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_features(real, d.input_dim(), "real batch")?;
    check_features(fake, d.input_dim(), "fake batch")?;
    let mut tape = Tape::new();
    let bound = d.net.bind(&mut tape);
    let r = tape.leaf(real.clone());
    let f = tape.leaf(fake.clone());
    let dr = d.net.forward(&mut tape, &bound, r)?;
    let df = d.net.forward(&mut tape, &bound, f)?;
    let loss = d_loss_on_tape(&mut tape, dr, df)?;
    Ok(tape.scalar(loss))
}

pub fn g_loss(d: &DiscriminatorModel, fake: &Tensor) -> Result<f64> {
    if fake.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_features(fake, d.input_dim(), "fake batch")?;
    let mut tape = Tape::new();
    let bound = d.net.bind(&mut tape);
    let f = tape.leaf(fake.clone());
    let df = d.net.forward(&mut tape, &bound, f)?;
    let loss = g_loss_on_tape(&mut tape, df)?;
    Ok(tape.scalar(loss))
}

/// Anything that turns a noise batch into fake samples for a discriminator.
pub trait FakeSource {
    fn noise_dim(&self) -> usize;
    fn sample_dim(&self) -> usize;
    /// Records the fake batch; returns it with one binding list per generator.
    fn record(&self, tape: &mut Tape, z: Var) -> Result<(Var, Vec<Vec<Var>>)>;
    /// Accumulates gradients and runs one optimizer step per generator.
    fn apply_grads(
        &mut self,
        tape: &Tape,
        grads: &Gradients,
        bound: &[Vec<Var>],
        adam: &AdamConfig,
        states: &mut [AdamState],
    );
    fn generator_count(&self) -> usize;

    fn fake_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let (out, _) = self.record(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}

impl FakeSource for GeneratorModel {
    fn noise_dim(&self) -> usize {
        GeneratorModel::noise_dim(self)
    }

    fn sample_dim(&self) -> usize {
        self.output_dim()
    }

    fn record(&self, tape: &mut Tape, z: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let bound = self.net.bind(tape);
        let out = self.net.forward(tape, &bound, z)?;
        Ok((out, vec![bound]))
    }

    fn apply_grads(
        &mut self,
        tape: &Tape,
        grads: &Gradients,
        bound: &[Vec<Var>],
        adam: &AdamConfig,
        states: &mut [AdamState],
    ) {
        self.net.accumulate_grads(tape, grads, &bound[0]);
        adam_step(self.net.params_mut(), adam, &mut states[0]);
    }

    fn generator_count(&self) -> usize {
        1
    }
}

/// Alternating D/G updates with persistent optimizer state.
///
/// Noise and minibatch indices come from two streams of `config.seed`, so a
/// run is a pure function of its inputs.
#[derive(Clone, Debug)]
pub struct AdversarialTrainer<S> {
    pub source: S,
    pub discriminator: DiscriminatorModel,
    config: GanTrainConfig,
    d_state: AdamState,
    g_states: Vec<AdamState>,
    noise_rng: Rng,
    data_rng: Rng,
    step: usize,
}

impl<S: FakeSource> AdversarialTrainer<S> {
    pub fn new(source: S, discriminator: DiscriminatorModel, config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        if source.sample_dim() != discriminator.input_dim() {
            return Err(Error::Dimension(format!(
                "generator output {} != discriminator input {}",
                source.sample_dim(),
                discriminator.input_dim()
            )));
        }
        let g_states = vec![AdamState::new(); source.generator_count()];
        Ok(Self {
            noise_rng: Rng::new(config.seed, streams::NOISE),
            data_rng: Rng::new(config.seed, streams::DATA),
            source,
            discriminator,
            config,
            d_state: AdamState::new(),
            g_states,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &GanTrainConfig {
        &self.config
    }

    /// Optimizer state per generator, in the source's order.
    pub fn generator_states(&self) -> &[AdamState] {
        &self.g_states
    }

    pub fn into_parts(self) -> (S, DiscriminatorModel) {
        (self.source, self.discriminator)
    }

    fn real_batch(&mut self, data: &Tensor) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.data_rng.index(data.rows()))
            .collect();
        Ok(data.select_rows(&idx)?)
    }

    fn d_step(&mut self, data: &Tensor) -> Result<f64> {
        let real = self.real_batch(data)?;
        let z = sample_noise(self.config.batch_size, self.source.noise_dim(), &mut self.noise_rng);
        let fake = self.source.fake_batch(&z)?;
        let net = &mut self.discriminator.net;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let r = tape.leaf(real);
        let f = tape.leaf(fake);
        let dr = net.forward(&mut tape, &bound, r)?;
        let df = net.forward(&mut tape, &bound, f)?;
        let loss = d_loss_on_tape(&mut tape, dr, df)?;
        let grads = tape.backward(loss)?;
        net.accumulate_grads(&tape, &grads, &bound);
        adam_step(net.params_mut(), &self.config.adam(self.config.lr_d), &mut self.d_state);
        Ok(tape.scalar(loss))
    }

    fn g_step(&mut self) -> Result<f64> {
        let z = sample_noise(self.config.batch_size, self.source.noise_dim(), &mut self.noise_rng);
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let (fake, g_bound) = self.source.record(&mut tape, zv)?;
        let d_bound = self.discriminator.net.bind(&mut tape);
        let df = self.discriminator.net.forward(&mut tape, &d_bound, fake)?;
        let loss = g_loss_on_tape(&mut tape, df)?;
        let grads = tape.backward(loss)?;
        let adam = self.config.adam(self.config.lr_g);
        self.source.apply_grads(&tape, &grads, &g_bound, &adam, &mut self.g_states);
        Ok(tape.scalar(loss))
    }

    /// One generator step preceded by `d_steps_per_g_step` discriminator steps.
    pub fn step(&mut self, data: &Tensor) -> Result<LossRecord> {
        check_features(data, self.discriminator.input_dim(), "dataset")?;
        let mut d_loss = 0.0;
        for _ in 0..self.config.d_steps_per_g_step {
            d_loss = self.d_step(data)?;
        }
        let g_loss = self.g_step()?;
        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            d_loss,
            g_loss,
        })
    }

    pub fn run(&mut self, data: &Tensor, steps: usize) -> Result<Vec<LossRecord>> {
        (0..steps).map(|_| self.step(data)).collect()
    }
}

/// Result of [`train_gan`].
#[derive(Clone, Debug)]
pub struct TrainedGan {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub history: Vec<LossRecord>,
}

/// Trains `g` against `d` on `dataset` for `config.steps` generator steps.
pub fn train_gan(
    g: GeneratorModel,
    d: DiscriminatorModel,
    dataset: &Tensor,
    config: &GanTrainConfig,
) -> Result<TrainedGan> {
    if dataset.rows() == 0 {
        return Err(Error::Empty("dataset"));
    }
    check_features(dataset, g.output_dim(), "dataset")?;
    let mut trainer = AdversarialTrainer::new(g, d, config.clone())?;
    let history = trainer.run(dataset, config.steps)?;
    let (generator, discriminator) = trainer.into_parts();
    Ok(TrainedGan {
        generator,
        discriminator,
        history,
    })
}
