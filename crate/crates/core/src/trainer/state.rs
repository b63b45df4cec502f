use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objectives::{discriminator_objective, extractor_objective, generator_objective, Objective};
use super::run::Batch;
use super::{lr_at, Ablation, ModelParams, Net, RunConfig};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nets::Networks;
use crate::params::Adam;
use crate::tensor::Tensor;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub params: ModelParams<f32>,
    /// One optimizer per network, in [`Net::ALL`] order.
    pub optim: [Adam<f32>; 4],
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Parameters are drawn from a stream separate from the sampling RNG.
    pub fn init(nets: &Networks, cfg: &RunConfig) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(crate::phantom::derive_seed(cfg.seed, 1, 0));
        let params = ModelParams::init(nets, cfg.ablation, &mut init_rng);
        let optim = Net::ALL.map(|n| Adam::new(params.get(n)));
        let rng = ChaCha8Rng::seed_from_u64(crate::phantom::derive_seed(cfg.seed, 2, 0));
        Self { iteration: 0, params, optim, rng }
    }

    pub fn adam(&self, net: Net) -> &Adam<f32> {
        &self.optim[net as usize]
    }
}

/// Reconstructions produced by the generator step, reused by the
/// discriminator step.
pub struct GeneratorOutput {
    pub recon: f64,
    pub adv_g: f64,
    pub total_g: f64,
    pub gs: Tensor<f32>,
    pub gt: Tensor<f32>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub nets: Networks,
    pub state: TrainState,
}

fn finite(v: f64, what: &str, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string(), iteration })
    }
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config.net)?;
        let state = TrainState::init(&nets, &config);
        Ok(Self { config, nets, state })
    }

    pub fn from_state(config: RunConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config.net)?;
        state.params.check(&nets, config.ablation)?;
        Ok(Self { config, nets, state })
    }

    pub fn mode(&self) -> Ablation {
        self.config.ablation
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.state.iteration, &self.config)
    }

    fn apply(&mut self, obj: &Objective<f32>, what: &str) -> Result<()> {
        finite(obj.value(), what, self.state.iteration)?;
        let lr = self.lr();
        for (net, grads) in obj.gradients()? {
            self.state.optim[net as usize].step(self.state.params.get_mut(net), &grads, lr)?;
        }
        Ok(())
    }

    /// Updates the generator only.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GeneratorOutput> {
        let xt = batch.target.as_ref().ok_or_else(|| Error::Config("generator step needs a target batch".into()))?;
        let obj = generator_objective(&self.nets, &self.state.params, self.mode(), &batch.source, xt)?;
        self.apply(&obj, "total_g")?;
        let it = self.state.iteration;
        Ok(GeneratorOutput {
            recon: finite(obj.term("recon").unwrap(), "recon", it)?,
            adv_g: finite(obj.term("adv_g").unwrap(), "adv_g", it)?,
            total_g: obj.value(),
            gs: obj.output(0).clone(),
            gt: obj.output(1).clone(),
        })
    }

    /// Updates the discriminator only. `recon` is required in image-space modes.
    pub fn discriminator_step(&mut self, batch: &Batch, recon: Option<(&Tensor<f32>, &Tensor<f32>)>) -> Result<f64> {
        let xt = batch.target.as_ref().ok_or_else(|| Error::Config("discriminator step needs a target batch".into()))?;
        let obj = discriminator_objective(&self.nets, &self.state.params, self.mode(), &batch.source, xt, recon)?;
        self.apply(&obj, "total_d")?;
        Ok(obj.value())
    }

    /// Updates the extractor and classifier; returns `(seg, adv_cross, total_f)`.
    pub fn extractor_step(&mut self, batch: &Batch) -> Result<(f64, Option<f64>, f64)> {
        let xt = if self.mode().adversarial() { batch.target.as_ref() } else { None };
        let obj = extractor_objective(
            &self.nets,
            &self.state.params,
            self.mode(),
            self.config.alpha,
            &batch.source,
            &batch.mask,
            xt,
        )?;
        self.apply(&obj, "total_f")?;
        Ok((obj.term("seg").unwrap(), obj.term("adv_cross"), obj.value()))
    }

    /// One iteration in the order generator, discriminator, extractor+classifier.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut report = LossReport::default();
        match self.mode() {
            m if m.image_space() => {
                let g = self.generator_step(batch)?;
                report.recon = Some(g.recon);
                report.adv_g = Some(g.adv_g);
                report.total_g = Some(g.total_g);
                let d = self.discriminator_step(batch, Some((&g.gs, &g.gt)))?;
                report.adv_d = Some(d);
                report.total_d = Some(d);
            }
            Ablation::FeatureSpace => {
                let d = self.discriminator_step(batch, None)?;
                report.adv_d = Some(d);
                report.total_d = Some(d);
            }
            _ => {}
        }
        let (seg, adv, total) = self.extractor_step(batch)?;
        report.seg = seg;
        report.adv_cross = adv;
        report.total_f = total;
        self.state.iteration += 1;
        Ok(report)
    }
}
