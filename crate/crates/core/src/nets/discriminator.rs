use super::layers::{Act, Conv, ResBlock};
use super::{check_input, check_store, NetConfig, NUM_CLASSES};
use crate::error::Result;
use crate::params::{Bound, Layout, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

const RES_BLOCKS: usize = 9;

/// Patch discriminator: 4x4 stride-2 convolution, nine residual blocks (the
/// first one strided), and a final 4x4 stride-2 convolution to 4-way logits
/// (source-real, source-fake, target-real, target-fake) on a 1/8 grid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layout: Layout,
    stem: Conv,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig) -> Self {
        let c = cfg.base_width;
        let mut layout = Layout::new();
        let stem = Conv::new(&mut layout, "conv1", 1, c, 4, 2, 1);
        let blocks = (0..RES_BLOCKS)
            .map(|i| {
                let (cin, stride) = if i == 0 { (c, 2) } else { (2 * c, 1) };
                ResBlock::new(&mut layout, &format!("res{}", i + 1), cin, 2 * c, stride, Act::Leaky)
            })
            .collect();
        let head = Conv::new(&mut layout, "conv2", 2 * c, NUM_CLASSES, 4, 2, 1);
        Self { layout, stem, blocks, head }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        check_input(g.shape(x))?;
        let h = self.stem.forward(g, p, x)?;
        let mut h = Act::Leaky.apply(g, h);
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
            h = Act::Leaky.apply(g, h);
        }
        self.head.forward(g, p, h)
    }

    /// Evaluation-mode patch logits for a `[N, 1, H, W]` batch.
    pub fn discriminate<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_store(params, &self.layout, "discriminator")?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Reduced discriminator over the deepest (1/16) feature map, used when the
/// adversarial loss is computed in feature space instead of image space.
#[derive(Clone, Debug)]
pub struct FeatureDiscriminator {
    layout: Layout,
    stem: Conv,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl FeatureDiscriminator {
    pub fn new(cfg: &NetConfig) -> Self {
        let c = cfg.base_width;
        let mut layout = Layout::new();
        let stem = Conv::new(&mut layout, "conv1", cfg.level_width(4), 2 * c, 3, 1, 1);
        let blocks =
            (0..2).map(|i| ResBlock::new(&mut layout, &format!("res{}", i + 1), 2 * c, 2 * c, 1, Act::Leaky)).collect();
        let head = Conv::new(&mut layout, "conv2", 2 * c, NUM_CLASSES, 1, 1, 0);
        Self { layout, stem, blocks, head }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let h = self.stem.forward(g, p, features)?;
        let mut h = Act::Leaky.apply(g, h);
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
            h = Act::Leaky.apply(g, h);
        }
        self.head.forward(g, p, h)
    }
}
