//! Frozen-generator fusion.
//!
//! A [`FusionNetwork`] holds generators downloaded from other clients with
//! every parameter frozen, one trainable generator, and a discriminator. One
//! noise batch feeds every generator; their outputs are concatenated (frozen
//! first, in registration order) and the discriminator learns to tell these
//! rows from real combinations. Only the trainable generator and the
//! discriminator move, so the new generator learns whatever partner
//! distribution makes the concatenation look real.

use crate::diffcore::{adam_step, AdamConfig, AdamState, Gradients, MlpSpec, Rng, Tape, Tensor, Var};
use crate::gan::{
    check_features, sample_noise, AdversarialTrainer, DiscriminatorModel, FakeSource, GanTrainConfig,
    GeneratorModel, LossRecord,
};
use crate::{Error, Result};

/// Rows of concatenated components with their widths.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    samples: Tensor,
    component_dims: Vec<usize>,
}

impl PairedDataset {
    pub fn new(samples: Tensor, component_dims: Vec<usize>) -> Result<Self> {
        let (_, d) = samples.ensure_matrix()?;
        if component_dims.is_empty() || component_dims.iter().any(|&c| c == 0) {
            return Err(Error::Dimension(format!("component dims {component_dims:?}")));
        }
        if component_dims.iter().sum::<usize>() != d {
            return Err(Error::Dimension(format!(
                "components {component_dims:?} do not sum to feature dim {d}"
            )));
        }
        Ok(Self {
            samples,
            component_dims,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn into_samples(self) -> Tensor {
        self.samples
    }

    pub fn component_dims(&self) -> &[usize] {
        &self.component_dims
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column block of component `k`.
    pub fn component(&self, k: usize) -> Result<Tensor> {
        let start: usize = self.component_dims[..k].iter().sum();
        Ok(self.samples.columns(start, start + self.component_dims[k])?)
    }
}

/// Frozen generators plus the trainable one, all fed from the same noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGenerators {
    frozen: Vec<GeneratorModel>,
    trainable: GeneratorModel,
}

impl FusionGenerators {
    pub fn frozen(&self) -> &[GeneratorModel] {
        &self.frozen
    }

    pub fn trainable(&self) -> &GeneratorModel {
        &self.trainable
    }

    fn all(&self) -> impl Iterator<Item = &GeneratorModel> {
        self.frozen.iter().chain(std::iter::once(&self.trainable))
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.all().map(GeneratorModel::output_dim).collect()
    }
}

impl FakeSource for FusionGenerators {
    fn noise_dim(&self) -> usize {
        self.trainable.noise_dim()
    }

    fn sample_dim(&self) -> usize {
        self.output_dims().iter().sum()
    }

    fn record(&self, tape: &mut Tape, z: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut outs = Vec::new();
        let mut bound = Vec::new();
        for g in self.all() {
            let b = g.net().bind(tape);
            outs.push(g.net().forward(tape, &b, z)?);
            bound.push(b);
        }
        Ok((tape.concat(&outs)?, bound))
    }

    fn apply_grads(
        &mut self,
        tape: &Tape,
        grads: &Gradients,
        bound: &[Vec<Var>],
        adam: &AdamConfig,
        states: &mut [AdamState],
    ) {
        let gens = self
            .frozen
            .iter_mut()
            .chain(std::iter::once(&mut self.trainable));
        for ((g, b), st) in gens.zip(bound).zip(states.iter_mut()) {
            // Frozen tensors still receive gradients; the optimizer skips them.
            g.net_mut().accumulate_grads(tape, grads, b);
            adam_step(g.net_mut().params_mut(), adam, st);
        }
    }

    fn generator_count(&self) -> usize {
        self.frozen.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    pub generators: FusionGenerators,
    pub discriminator: DiscriminatorModel,
}

fn check_shared_noise(frozen: &[GeneratorModel], noise_dim: usize) -> Result<()> {
    if let Some(g) = frozen.iter().find(|g| g.noise_dim() != noise_dim) {
        return Err(Error::Dimension(format!(
            "all generators must share one noise dim: {} vs {noise_dim}",
            g.noise_dim()
        )));
    }
    Ok(())
}

fn frozen_copies(frozen: &[GeneratorModel]) -> Vec<GeneratorModel> {
    frozen
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.net_mut().set_trainable(false);
            g
        })
        .collect()
}

/// Assembles a fusion network around deep copies of `frozen`.
///
/// The new generator is initialized before the discriminator, both from `rng`.
pub fn build_fusion(
    frozen: &[GeneratorModel],
    new_gen_spec: &MlpSpec,
    d_spec: &MlpSpec,
    rng: &mut Rng,
) -> Result<FusionNetwork> {
    check_shared_noise(frozen, new_gen_spec.input_dim())?;
    let trainable = GeneratorModel::init(new_gen_spec.clone(), rng);
    build_fusion_with(frozen, trainable, d_spec, rng)
}

/// Like [`build_fusion`] but with a caller-supplied trainable generator.
pub fn build_fusion_with(
    frozen: &[GeneratorModel],
    trainable: GeneratorModel,
    d_spec: &MlpSpec,
    rng: &mut Rng,
) -> Result<FusionNetwork> {
    if frozen.is_empty() {
        return Err(Error::Dimension("fusion needs at least one frozen generator".into()));
    }
    check_shared_noise(frozen, trainable.noise_dim())?;
    let expected: usize = frozen.iter().map(GeneratorModel::output_dim).sum::<usize>() + trainable.output_dim();
    if d_spec.input_dim() != expected {
        return Err(Error::Dimension(format!(
            "discriminator input {} != sum of generator outputs {expected}",
            d_spec.input_dim()
        )));
    }
    let mut trainable = trainable;
    trainable.net_mut().set_trainable(true);
    let discriminator = DiscriminatorModel::init(d_spec.clone(), rng)?;
    Ok(FusionNetwork {
        generators: FusionGenerators {
            frozen: frozen_copies(frozen),
            trainable,
        },
        discriminator,
    })
}

impl FusionNetwork {
    pub fn noise_dim(&self) -> usize {
        self.generators.noise_dim()
    }

    pub fn frozen(&self) -> &[GeneratorModel] {
        &self.generators.frozen
    }

    pub fn trainable(&self) -> &GeneratorModel {
        &self.generators.trainable
    }

    pub fn component_dims(&self) -> Vec<usize> {
        self.generators.output_dims()
    }
}

/// `concat(G1(z), …, Gk(z), G_new(z))`.
pub fn fusion_forward(net: &FusionNetwork, z: &Tensor) -> Result<Tensor> {
    check_features(z, net.noise_dim(), "noise")?;
    net.generators.fake_batch(z)
}

/// `n` fused rows on fresh noise.
pub fn sample_pairs(net: &FusionNetwork, n: usize, rng: &mut Rng) -> Result<PairedDataset> {
    let z = sample_noise(n, net.noise_dim(), rng);
    PairedDataset::new(fusion_forward(net, &z)?, net.component_dims())
}

/// Adversarial training of a fusion network with persistent optimizer state.
#[derive(Clone, Debug)]
pub struct FusionTrainer {
    inner: AdversarialTrainer<FusionGenerators>,
}

impl FusionTrainer {
    pub fn new(net: FusionNetwork, config: GanTrainConfig) -> Result<Self> {
        let inner = AdversarialTrainer::new(net.generators, net.discriminator, config)?;
        Ok(Self { inner })
    }

    pub fn step(&mut self, data: &PairedDataset) -> Result<LossRecord> {
        self.check_data(data)?;
        self.inner.step(data.samples())
    }

    pub fn run(&mut self, data: &PairedDataset, steps: usize) -> Result<Vec<LossRecord>> {
        self.check_data(data)?;
        self.inner.run(data.samples(), steps)
    }

    fn check_data(&self, data: &PairedDataset) -> Result<()> {
        let dims = self.inner.source.output_dims();
        if data.component_dims() != dims.as_slice() {
            return Err(Error::Dimension(format!(
                "data components {:?} != generator outputs {dims:?}",
                data.component_dims()
            )));
        }
        Ok(())
    }

    pub fn steps_done(&self) -> usize {
        self.inner.steps_done()
    }

    pub fn frozen(&self) -> &[GeneratorModel] {
        &self.inner.source.frozen
    }

    pub fn trainable(&self) -> &GeneratorModel {
        &self.inner.source.trainable
    }

    /// Adam state of the trainable generator.
    pub fn trainable_state(&self) -> &AdamState {
        self.inner.generator_states().last().unwrap()
    }

    /// Swaps in new frozen generators of identical shape, keeping the
    /// trainable generator, discriminator, and optimizer state.
    pub fn replace_frozen(&mut self, frozen: &[GeneratorModel]) -> Result<()> {
        let current = &self.inner.source.frozen;
        if frozen.len() != current.len()
            || frozen
                .iter()
                .zip(current)
                .any(|(a, b)| a.net().spec() != b.net().spec())
        {
            return Err(Error::Dimension("replacement generators must match the frozen slots".into()));
        }
        self.inner.source.frozen = frozen_copies(frozen);
        Ok(())
    }

    pub fn network(&self) -> FusionNetwork {
        FusionNetwork {
            generators: self.inner.source.clone(),
            discriminator: self.inner.discriminator.clone(),
        }
    }

    pub fn into_network(self) -> FusionNetwork {
        let (generators, discriminator) = self.inner.into_parts();
        FusionNetwork {
            generators,
            discriminator,
        }
    }
}

/// Trains for `config.steps` generator steps.
pub fn train_fusion(
    net: FusionNetwork,
    data: &PairedDataset,
    config: &GanTrainConfig,
) -> Result<(FusionNetwork, Vec<LossRecord>)> {
    if data.is_empty() {
        return Err(Error::Empty("paired dataset"));
    }
    let mut trainer = FusionTrainer::new(net, config.clone())?;
    let history = trainer.run(data, config.steps)?;
    Ok((trainer.into_network(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Mlp, ParamTensor};
    use crate::federation::serialize_generator;
    use crate::gan::{g_loss_on_tape, streams};

    fn identity_gen(d: usize) -> GeneratorModel {
        let spec = MlpSpec::new(vec![d, d], vec![Activation::Linear]).unwrap();
        let mut w = vec![0.0; d * d];
        (0..d).for_each(|i| w[i * d + i] = 1.0);
        let params = vec![
            ParamTensor::new(Tensor::matrix(d, d, w).unwrap(), true),
            ParamTensor::new(Tensor::zeros(&[d]), true),
        ];
        GeneratorModel::new(Mlp::from_parts(spec, params).unwrap())
    }

    fn random_gen(noise: usize, out: usize, seed: u64) -> GeneratorModel {
        GeneratorModel::init(
            GeneratorModel::standard_spec(noise, &[16], out).unwrap(),
            &mut Rng::new(seed, streams::INIT_G),
        )
    }

    fn d_spec(input: usize) -> MlpSpec {
        DiscriminatorModel::standard_spec(input, &[16]).unwrap()
    }

    #[test]
    fn discriminator_width_is_checked() {
        let g1 = random_gen(8, 2, 1);
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let mut rng = Rng::new(0, 0);
        assert!(build_fusion(&[g1.clone()], &spec, &d_spec(4), &mut rng).is_ok());
        assert!(matches!(
            build_fusion(&[g1], &spec, &d_spec(3), &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn noise_dims_must_agree() {
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let r = build_fusion(&[random_gen(8, 2, 1), random_gen(4, 2, 2)], &spec, &d_spec(6), &mut Rng::new(0, 0));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn frozen_copies_match_source() {
        let g1 = random_gen(8, 2, 3);
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let net = build_fusion(&[g1.clone()], &spec, &d_spec(4), &mut Rng::new(0, 0)).unwrap();
        let mut expected = g1;
        expected.net_mut().set_trainable(false);
        assert_eq!(serialize_generator(&net.frozen()[0]), serialize_generator(&expected));
        assert!(net.frozen()[0].net().is_frozen());
        assert!(net.trainable().net().params().iter().all(|p| p.trainable));
    }

    #[test]
    fn forward_concatenates_in_order() {
        let mut rng = Rng::new(0, 0);
        let net = build_fusion_with(&[identity_gen(2)], identity_gen(2), &d_spec(4), &mut rng).unwrap();
        let z = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(fusion_forward(&net, &z).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
        assert!(fusion_forward(&net, &Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn shared_noise_reproduces_each_component() {
        let spec = GeneratorModel::standard_spec(8, &[16], 3).unwrap();
        let frozen = [random_gen(8, 2, 1), random_gen(8, 2, 2)];
        let net = build_fusion(&frozen, &spec, &d_spec(7), &mut Rng::new(9, 0)).unwrap();
        let z = sample_noise(6, 8, &mut Rng::new(1, 1));
        let fused = fusion_forward(&net, &z).unwrap();
        assert_eq!(fused.cols(), 7);
        let parts: Vec<Tensor> = net
            .generators
            .all()
            .map(|g| crate::gan::generate(g, &z).unwrap())
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert!(Tensor::concat_cols(&refs).unwrap().bit_eq(&fused));
    }

    #[test]
    fn sample_pairs_dims_and_seed() {
        let spec = GeneratorModel::standard_spec(8, &[16], 3).unwrap();
        let net = build_fusion(&[random_gen(8, 2, 1)], &spec, &d_spec(5), &mut Rng::new(9, 0)).unwrap();
        let a = sample_pairs(&net, 20, &mut Rng::new(4, 0)).unwrap();
        let b = sample_pairs(&net, 20, &mut Rng::new(4, 0)).unwrap();
        assert_eq!(a.component_dims(), &[2, 3]);
        assert!(a.samples().bit_eq(b.samples()));
        assert!(a.samples().all_finite());
    }

    #[test]
    fn trainable_generator_receives_gradient() {
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let net = build_fusion(&[random_gen(8, 2, 1)], &spec, &d_spec(4), &mut Rng::new(5, 0)).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(sample_noise(32, 8, &mut Rng::new(6, 0)));
        let (fake, bound) = net.generators.record(&mut tape, z).unwrap();
        let db = net.discriminator.net().bind(&mut tape);
        let df = net.discriminator.net().forward(&mut tape, &db, fake).unwrap();
        let loss = g_loss_on_tape(&mut tape, df).unwrap();
        let grads = tape.backward(loss).unwrap();
        let norm: f64 = bound[1]
            .iter()
            .flat_map(|&v| grads.wrt_f64(&tape, v))
            .map(|g| g * g)
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn training_leaves_frozen_bytes_alone() {
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let g1 = random_gen(8, 2, 1);
        let net = build_fusion(&[g1], &spec, &d_spec(4), &mut Rng::new(5, 0)).unwrap();
        let before = serialize_generator(&net.frozen()[0]);
        let data = PairedDataset::new(sample_noise(40, 4, &mut Rng::new(0, 3)), vec![2, 2]).unwrap();
        let cfg = GanTrainConfig {
            steps: 100,
            batch_size: 16,
            ..Default::default()
        };
        let (trained, hist) = train_fusion(net.clone(), &data, &cfg).unwrap();
        assert_eq!(hist.len(), 100);
        assert_eq!(serialize_generator(&trained.frozen()[0]), before);
        assert!(!trained.trainable().net().bit_eq(net.trainable().net()));

        let zero = GanTrainConfig { steps: 0, ..cfg };
        let (same, _) = train_fusion(net.clone(), &data, &zero).unwrap();
        assert_eq!(same, net);
    }

    #[test]
    fn data_dims_must_match() {
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let net = build_fusion(&[random_gen(8, 2, 1)], &spec, &d_spec(4), &mut Rng::new(5, 0)).unwrap();
        let data = PairedDataset::new(sample_noise(10, 4, &mut Rng::new(0, 3)), vec![1, 3]).unwrap();
        assert!(train_fusion(net, &data, &GanTrainConfig::default()).is_err());
    }

    #[test]
    fn replace_frozen_keeps_optimizer_state() {
        let spec = GeneratorModel::standard_spec(8, &[16], 2).unwrap();
        let net = build_fusion(&[random_gen(8, 2, 1)], &spec, &d_spec(4), &mut Rng::new(5, 0)).unwrap();
        let data = PairedDataset::new(sample_noise(40, 4, &mut Rng::new(0, 3)), vec![2, 2]).unwrap();
        let cfg = GanTrainConfig {
            batch_size: 8,
            ..Default::default()
        };
        let mut t = FusionTrainer::new(net, cfg).unwrap();
        t.run(&data, 5).unwrap();
        let state = t.trainable_state().clone();
        let replacement = random_gen(8, 2, 77);
        t.replace_frozen(&[replacement.clone()]).unwrap();
        assert_eq!(t.trainable_state(), &state);
        assert!(t.frozen()[0].net().is_frozen());
        assert!(t.replace_frozen(&[random_gen(8, 3, 1)]).is_err());
    }
}
