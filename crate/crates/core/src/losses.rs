//! Reconstruction, adversarial and segmentation objectives, and the 4-way
//! patch labels they are scored against.
//!
//! All reductions are means (over pixels or patches), so the adversarial weight
//! and learning rate carry over between image sizes. Softmax lives here, never
//! in the networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, FeatureDiscriminator, NUM_CLASSES};
use crate::params::Bound;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn flip(self) -> Self {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realness {
    Real,
    Fake,
}

/// Joint domain/realness class of one discriminator patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PatchLabel {
    SourceReal = 0,
    SourceFake = 1,
    TargetReal = 2,
    TargetFake = 3,
}

impl PatchLabel {
    pub const ALL: [PatchLabel; 4] =
        [PatchLabel::SourceReal, PatchLabel::SourceFake, PatchLabel::TargetReal, PatchLabel::TargetFake];

    pub fn new(domain: Domain, realness: Realness) -> Self {
        match (domain, realness) {
            (Domain::Source, Realness::Real) => PatchLabel::SourceReal,
            (Domain::Source, Realness::Fake) => PatchLabel::SourceFake,
            (Domain::Target, Realness::Real) => PatchLabel::TargetReal,
            (Domain::Target, Realness::Fake) => PatchLabel::TargetFake,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            PatchLabel::SourceReal | PatchLabel::SourceFake => Domain::Source,
            _ => Domain::Target,
        }
    }

    pub fn realness(self) -> Realness {
        match self {
            PatchLabel::SourceReal | PatchLabel::TargetReal => Realness::Real,
            _ => Realness::Fake,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

/// A constant grid of patch labels (one label per image, broadcast to every patch).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLabelMap {
    label: PatchLabel,
    rows: usize,
    cols: usize,
}

impl PatchLabelMap {
    pub fn label(&self) -> PatchLabel {
        self.label
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Same grid with the opposite domain and unchanged realness.
    pub fn flip_domain(self) -> Self {
        let l = self.label;
        Self { label: PatchLabel::new(l.domain().flip(), l.realness()), ..self }
    }

    /// Flat label ids for a batch of `n` images, matching `[n, 4, rows, cols]` logits.
    pub fn ids(&self, n: usize) -> Vec<u8> {
        vec![self.label.id(); n * self.rows * self.cols]
    }
}

pub fn make_label_map(domain: Domain, realness: Realness, grid: (usize, usize)) -> Result<PatchLabelMap> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Shape(format!("label map grid must be positive, got {grid:?}")));
    }
    Ok(PatchLabelMap { label: PatchLabel::new(domain, realness), rows: grid.0, cols: grid.1 })
}

/// Per-iteration loss values. Terms that a run mode does not compute are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_d: Option<f64>,
    pub seg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_cross: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total_d: Option<f64>,
    pub total_f: f64,
}

impl LossReport {
    /// Present `(key, value)` pairs in field order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let opt = [("recon", self.recon), ("adv_g", self.adv_g), ("adv_d", self.adv_d)];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out.push(("seg", self.seg));
        let opt = [("adv_cross", self.adv_cross), ("total_g", self.total_g), ("total_d", self.total_d)];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out.push(("total_f", self.total_f));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_finite())
    }
}

/// Anything that maps an input to 4-way patch logits.
pub trait PatchCritic {
    fn critique<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var>;
}

impl PatchCritic for Discriminator {
    fn critique<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward(g, p, x)
    }
}

impl PatchCritic for FeatureDiscriminator {
    fn critique<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward(g, p, x)
    }
}

pub fn recon_l1<T: Real>(g: &mut Graph<T>, recon: Var, x: Var) -> Result<Var> {
    g.l1_mean(recon, x)
}

pub fn adv_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &PatchLabelMap) -> Result<Var> {
    let [n, c, h, w] = g.shape(logits);
    if c != NUM_CLASSES || (h, w) != labels.grid() {
        return Err(Error::Shape(format!("patch logits {:?} vs label grid {:?}", g.shape(logits), labels.grid())));
    }
    g.cross_entropy(logits, &labels.ids(n))
}

pub fn seg_ce<T: Real>(g: &mut Graph<T>, logits: Var, mask: &[u8]) -> Result<Var> {
    let [_, c, _, _] = g.shape(logits);
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("segmentation logits have {c} channels")));
    }
    g.cross_entropy(logits, mask)
}

fn critic_ce<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    d: &D,
    dp: &Bound,
    x: Var,
    domain: Domain,
    realness: Realness,
) -> Result<Var> {
    let logits = d.critique(g, dp, x)?;
    let [_, _, h, w] = g.shape(logits);
    let map = make_label_map(domain, realness, (h, w))?;
    adv_ce(g, logits, &map)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub recon: Var,
    pub adv: Var,
    pub total: Var,
}

/// L1 reconstruction of both domains plus the within-domain "real" adversarial terms.
/// Bind the critic frozen so only the generator side receives gradients.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    d: &D,
    dp: &Bound,
    gs: Var,
    gt: Var,
    xs: Var,
    xt: Var,
) -> Result<GeneratorTerms> {
    let rs = recon_l1(g, gs, xs)?;
    let rt = recon_l1(g, gt, xt)?;
    let recon = g.add(rs, rt)?;
    let a_s = critic_ce(g, d, dp, gs, Domain::Source, Realness::Real)?;
    let a_t = critic_ce(g, d, dp, gt, Domain::Target, Realness::Real)?;
    let adv = g.add(a_s, a_t)?;
    let total = g.add(recon, adv)?;
    Ok(GeneratorTerms { recon, adv, total })
}

/// Within-domain critic objective over real inputs and (detached) reconstructions.
pub fn discriminator_loss<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    d: &D,
    dp: &Bound,
    xs: Var,
    xt: Var,
    gs: Var,
    gt: Var,
) -> Result<Var> {
    let (gs, gt) = (g.detach(gs), g.detach(gt));
    let terms = [
        critic_ce(g, d, dp, xs, Domain::Source, Realness::Real)?,
        critic_ce(g, d, dp, xt, Domain::Target, Realness::Real)?,
        critic_ce(g, d, dp, gs, Domain::Source, Realness::Fake)?,
        critic_ce(g, d, dp, gt, Domain::Target, Realness::Fake)?,
    ];
    sum(g, &terms)
}

/// Critic objective on real inputs only (no reconstructions), for feature-space training.
pub fn domain_critic_loss<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    d: &D,
    dp: &Bound,
    fs: Var,
    ft: Var,
) -> Result<Var> {
    let (fs, ft) = (g.detach(fs), g.detach(ft));
    let a = critic_ce(g, d, dp, fs, Domain::Source, Realness::Real)?;
    let b = critic_ce(g, d, dp, ft, Domain::Target, Realness::Real)?;
    g.add(a, b)
}

/// Cross-domain adversarial term: each domain's output is scored against the
/// other domain's "real" label.
pub fn cross_domain_adv<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    d: &D,
    dp: &Bound,
    from_source: Var,
    from_target: Var,
) -> Result<Var> {
    let a = critic_ce(g, d, dp, from_source, Domain::Target, Realness::Real)?;
    let b = critic_ce(g, d, dp, from_target, Domain::Source, Realness::Real)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractorTerms {
    pub seg: Var,
    pub adv_cross: Option<Var>,
    pub total: Var,
}

/// Segmentation cross-entropy plus `alpha` times the cross-domain adversarial
/// term. `adversarial` carries the critic and the two inputs it scores; `None`
/// (or `alpha == 0`) reduces the objective to the segmentation loss alone.
pub fn extractor_loss<T: Real, D: PatchCritic>(
    g: &mut Graph<T>,
    seg_logits: Var,
    mask: &[u8],
    adversarial: Option<(&D, &Bound, Var, Var)>,
    alpha: f64,
) -> Result<ExtractorTerms> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    let seg = seg_ce(g, seg_logits, mask)?;
    let Some((d, dp, from_s, from_t)) = adversarial else {
        return Ok(ExtractorTerms { seg, adv_cross: None, total: seg });
    };
    let adv = cross_domain_adv(g, d, dp, from_s, from_t)?;
    let total = if alpha == 0.0 {
        seg
    } else {
        let weighted = g.scale(adv, alpha);
        g.add(seg, weighted)?
    };
    Ok(ExtractorTerms { seg, adv_cross: Some(adv), total })
}

fn sum<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Value-level helpers for callers that hold plain tensors.
pub mod values {
    use super::*;

    pub fn recon_l1<T: Real>(recon: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.input(recon.clone()), g.input(x.clone()));
        let l = super::recon_l1(&mut g, a, b)?;
        Ok(g.value(l).item().to_f64().unwrap())
    }

    pub fn adv_ce<T: Real>(logits: &Tensor<T>, labels: &PatchLabelMap) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(logits.clone());
        let l = super::adv_ce(&mut g, v, labels)?;
        Ok(g.value(l).item().to_f64().unwrap())
    }

    pub fn seg_ce<T: Real>(logits: &Tensor<T>, mask: &[u8]) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(logits.clone());
        let l = super::seg_ce(&mut g, v, mask)?;
        Ok(g.value(l).item().to_f64().unwrap())
    }
}
