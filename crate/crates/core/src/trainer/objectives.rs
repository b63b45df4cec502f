use rand::Rng;

use super::Ablation;
use crate::error::{Error, Result};
use crate::losses;
use crate::nets::Networks;
use crate::params::{Bound, Layout, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Extractor,
    Classifier,
    Generator,
    Discriminator,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Extractor, Net::Classifier, Net::Generator, Net::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Net::Extractor => "extractor",
            Net::Classifier => "classifier",
            Net::Generator => "generator",
            Net::Discriminator => "discriminator",
        }
    }
}

/// The four parameter sets. In `feature_space` mode the discriminator slot
/// holds the feature-space discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub extractor: ParamStore<T>,
    pub classifier: ParamStore<T>,
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
}

pub(crate) fn discriminator_layout(nets: &Networks, mode: Ablation) -> &Layout {
    if mode == Ablation::FeatureSpace {
        nets.feature_discriminator.layout()
    } else {
        nets.discriminator.layout()
    }
}

impl<T: Real> ModelParams<T> {
    /// Draws all four sets from `rng` in the order extractor, classifier,
    /// generator, discriminator.
    pub fn init<R: Rng>(nets: &Networks, mode: Ablation, rng: &mut R) -> Self {
        Self {
            extractor: nets.extractor.layout().init(rng),
            classifier: nets.classifier.layout().init(rng),
            generator: nets.generator.layout().init(rng),
            discriminator: discriminator_layout(nets, mode).init(rng),
        }
    }

    pub fn get(&self, net: Net) -> &ParamStore<T> {
        match net {
            Net::Extractor => &self.extractor,
            Net::Classifier => &self.classifier,
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        }
    }

    pub fn get_mut(&mut self, net: Net) -> &mut ParamStore<T> {
        match net {
            Net::Extractor => &mut self.extractor,
            Net::Classifier => &mut self.classifier,
            Net::Generator => &mut self.generator,
            Net::Discriminator => &mut self.discriminator,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            extractor: self.extractor.cast(),
            classifier: self.classifier.cast(),
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
        }
    }

    pub fn check(&self, nets: &Networks, mode: Ablation) -> Result<()> {
        let layouts = [
            nets.extractor.layout(),
            nets.classifier.layout(),
            nets.generator.layout(),
            discriminator_layout(nets, mode),
        ];
        for (net, layout) in Net::ALL.into_iter().zip(layouts) {
            if !self.get(net).matches(layout) {
                return Err(Error::Checkpoint(format!("{} parameters do not match the configuration", net.name())));
            }
        }
        Ok(())
    }
}

/// A loss on a tape, with the bindings needed to pull parameter gradients.
pub struct Objective<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    bound: Vec<(Net, Bound, bool)>,
    terms: Vec<(&'static str, Var)>,
    outputs: Vec<Var>,
}

impl<T: Real> Objective<T> {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item().to_f64().unwrap()
    }

    /// Named scalar sub-terms, such as `recon` or `adv_g`.
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| self.graph.value(v).item().to_f64().unwrap())
    }

    pub fn output(&self, i: usize) -> &Tensor<T> {
        self.graph.value(self.outputs[i])
    }

    pub fn trainable(&self) -> Vec<Net> {
        self.bound.iter().filter(|b| b.2).map(|b| b.0).collect()
    }

    /// Gradients of the loss for each trainable network, in parameter order.
    pub fn gradients(&self) -> Result<Vec<(Net, Vec<Tensor<T>>)>> {
        let grads = self.graph.backward(self.loss)?;
        Ok(self.bound.iter().filter(|b| b.2).map(|(n, b, _)| (*n, b.grads(&grads))).collect())
    }
}

struct Binder<'a, T> {
    params: &'a ModelParams<T>,
    bound: Vec<(Net, Bound, bool)>,
}

impl<'a, T: Real> Binder<'a, T> {
    fn new(params: &'a ModelParams<T>) -> Self {
        Self { params, bound: Vec::new() }
    }

    fn bind(&mut self, g: &mut Graph<T>, net: Net, trainable: bool) -> Bound {
        let b = self.params.get(net).bind(g, trainable);
        self.bound.push((net, b.clone(), trainable));
        b
    }
}

fn check_mode_for_image(mode: Ablation) -> Result<()> {
    if !mode.image_space() {
        return Err(Error::Config(format!("mode {} has no image-space generator step", mode.name())));
    }
    Ok(())
}

/// Reconstruction plus within-domain adversarial loss. Only the generator is
/// trainable; gradients pass through the frozen discriminator. Outputs are the
/// two reconstructions.
pub fn generator_objective<T: Real>(
    nets: &Networks,
    params: &ModelParams<T>,
    mode: Ablation,
    xs: &Tensor<T>,
    xt: &Tensor<T>,
) -> Result<Objective<T>> {
    check_mode_for_image(mode)?;
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let fp = b.bind(&mut g, Net::Extractor, false);
    let gp = b.bind(&mut g, Net::Generator, true);
    let dp = b.bind(&mut g, Net::Discriminator, false);
    let (a, t) = (g.input(xs.clone()), g.input(xt.clone()));
    let ps = nets.extractor.forward(&mut g, &fp, a)?;
    let pt = nets.extractor.forward(&mut g, &fp, t)?;
    let gs = nets.generator.forward(&mut g, &gp, &ps)?;
    let gt = nets.generator.forward(&mut g, &gp, &pt)?;
    let terms = losses::generator_loss(&mut g, &nets.discriminator, &dp, gs, gt, a, t)?;
    Ok(Objective {
        graph: g,
        loss: terms.total,
        bound: b.bound,
        terms: vec![("recon", terms.recon), ("adv_g", terms.adv), ("total_g", terms.total)],
        outputs: vec![gs, gt],
    })
}

/// Within-domain critic loss. Image-space modes score `xs`, `xt` as real and
/// the given reconstructions as fake; feature-space mode scores the deepest
/// feature maps of `xs`, `xt` with their own domains' real labels.
pub fn discriminator_objective<T: Real>(
    nets: &Networks,
    params: &ModelParams<T>,
    mode: Ablation,
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    recon: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Objective<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let (a, t) = (g.input(xs.clone()), g.input(xt.clone()));
    let loss = match mode {
        Ablation::FeatureSpace => {
            let fp = b.bind(&mut g, Net::Extractor, false);
            let dp = b.bind(&mut g, Net::Discriminator, true);
            let fs = nets.extractor.forward(&mut g, &fp, a)?.levels[4];
            let ft = nets.extractor.forward(&mut g, &fp, t)?.levels[4];
            losses::domain_critic_loss(&mut g, &nets.feature_discriminator, &dp, fs, ft)?
        }
        m if m.image_space() => {
            let (gs, gt) = recon.ok_or_else(|| Error::Config("discriminator step needs reconstructions".into()))?;
            let dp = b.bind(&mut g, Net::Discriminator, true);
            let (gs, gt) = (g.input(gs.clone()), g.input(gt.clone()));
            losses::discriminator_loss(&mut g, &nets.discriminator, &dp, a, t, gs, gt)?
        }
        m => return Err(Error::Config(format!("mode {} has no discriminator", m.name()))),
    };
    Ok(Objective { graph: g, loss, bound: b.bound, terms: vec![("adv_d", loss), ("total_d", loss)], outputs: vec![] })
}

/// Segmentation loss on `(xs, mask)` plus, in adversarial modes, `alpha`
/// times the cross-domain term scored through the frozen generator and
/// discriminator. Extractor and classifier are trainable.
pub fn extractor_objective<T: Real>(
    nets: &Networks,
    params: &ModelParams<T>,
    mode: Ablation,
    alpha: f64,
    xs: &Tensor<T>,
    mask: &[u8],
    xt: Option<&Tensor<T>>,
) -> Result<Objective<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let fp = b.bind(&mut g, Net::Extractor, true);
    let cp = b.bind(&mut g, Net::Classifier, true);
    let a = g.input(xs.clone());
    let ps = nets.extractor.forward(&mut g, &fp, a)?;
    let logits = nets.classifier.forward(&mut g, &cp, &ps)?;
    let need_target = || xt.ok_or_else(|| Error::Config(format!("mode {} needs a target batch", mode.name())));
    let terms = match mode {
        m if m.image_space() => {
            let t = g.input(need_target()?.clone());
            let pt = nets.extractor.forward(&mut g, &fp, t)?;
            let gp = b.bind(&mut g, Net::Generator, false);
            let dp = b.bind(&mut g, Net::Discriminator, false);
            let gs = nets.generator.forward(&mut g, &gp, &ps)?;
            let gt = nets.generator.forward(&mut g, &gp, &pt)?;
            losses::extractor_loss(&mut g, logits, mask, Some((&nets.discriminator, &dp, gs, gt)), alpha)?
        }
        Ablation::FeatureSpace => {
            let t = g.input(need_target()?.clone());
            let pt = nets.extractor.forward(&mut g, &fp, t)?;
            let dp = b.bind(&mut g, Net::Discriminator, false);
            let adv = Some((&nets.feature_discriminator, &dp, ps.levels[4], pt.levels[4]));
            losses::extractor_loss(&mut g, logits, mask, adv, alpha)?
        }
        _ => losses::extractor_loss::<T, crate::nets::Discriminator>(&mut g, logits, mask, None, alpha)?,
    };
    let mut named = vec![("seg", terms.seg), ("total_f", terms.total)];
    if let Some(v) = terms.adv_cross {
        named.push(("adv_cross", v));
    }
    Ok(Objective { graph: g, loss: terms.total, bound: b.bound, terms: named, outputs: vec![logits] })
}
