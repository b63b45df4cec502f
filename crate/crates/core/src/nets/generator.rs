use super::extractor::FeaturePyramid;
use super::layers::{Act, Conv, ConvT, Norm, ResBlock};
use super::{check_store, NetConfig, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::params::{Bound, Layout, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

const STAGES: usize = 4;

#[derive(Clone, Debug)]
struct Stage {
    up: ConvT,
    norm: Norm,
    blocks: [ResBlock; 2],
    /// Shallower selected level (0-based) fused after this stage, with its 1x1 projection.
    fuse: Option<(usize, Conv)>,
}

/// Reconstructs the input image from three selected pyramid levels.
///
/// The deepest selected level enters a trunk of four stages, each a 3x3
/// transposed convolution and two residual blocks. Stages upsample 2x until
/// full resolution is reached; when the deepest level is shallower than 1/16
/// the leading stages keep stride 1 so the trunk depth stays the same. The two
/// shallower levels are projected by 1x1 convolutions and added to the stage
/// output at their resolution.
#[derive(Clone, Debug)]
pub struct Generator {
    layout: Layout,
    trunk_level: usize,
    stages: Vec<Stage>,
    head: Conv,
}

/// Generator channel width at downsampling exponent `k` (scale 1/2^k).
fn width(cfg: &NetConfig, k: usize) -> usize {
    let c = cfg.base_width;
    ((c << k) / 2).clamp((c / 2).max(1), 4 * c)
}

impl Generator {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let sel: Vec<usize> = cfg.feature_selection.iter().map(|l| l - 1).collect();
        let trunk_level = sel[2];
        let mut layout = Layout::new();
        let mut cin = cfg.level_width(trunk_level);
        let mut exp = trunk_level;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let stride = if i < STAGES - trunk_level { 1 } else { 2 };
            if stride == 2 {
                exp -= 1;
            }
            let cout = width(cfg, exp);
            let name = format!("stage{}", i + 1);
            let up = ConvT::new(&mut layout, &format!("{name}.up"), cin, cout, stride);
            let norm = Norm::new(&mut layout, &format!("{name}.norm"), cout);
            let blocks = [
                ResBlock::new(&mut layout, &format!("{name}.res1"), cout, cout, 1, Act::Relu),
                ResBlock::new(&mut layout, &format!("{name}.res2"), cout, cout, 1, Act::Relu),
            ];
            let fuse = (stride == 2)
                .then(|| sel[..2].iter().copied().find(|&l| l == exp))
                .flatten()
                .map(|l| (l, Conv::new(&mut layout, &format!("{name}.proj"), cfg.level_width(l), cout, 1, 1, 0)));
            stages.push(Stage { up, norm, blocks, fuse });
            cin = cout;
        }
        debug_assert_eq!(exp, 0);
        let head = Conv::new(&mut layout, "head", cin, 1, 1, 1, 0);
        Ok(Self { layout, trunk_level, stages, head })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pyr: &FeaturePyramid) -> Result<Var> {
        let mut h = pyr.levels[self.trunk_level];
        for st in &self.stages {
            h = st.up.forward(g, p, h)?;
            h = st.norm.forward(g, p, h)?;
            h = g.relu(h);
            for b in &st.blocks {
                h = b.forward(g, p, h)?;
            }
            if let Some((level, proj)) = &st.fuse {
                let f = proj.forward(g, p, pyr.levels[*level])?;
                h = g.add(h, f)?;
            }
        }
        let h = self.head.forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }

    /// Evaluation-mode reconstruction from pyramid tensors.
    pub fn reconstruct<T: Real>(&self, params: &ParamStore<T>, pyramid: &[Tensor<T>]) -> Result<Tensor<T>> {
        check_store(params, &self.layout, "generator")?;
        if pyramid.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("pyramid has {} levels", pyramid.len())));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let levels: Vec<Var> = pyramid.iter().map(|t| g.input(t.clone())).collect();
        let pyr = FeaturePyramid { levels: levels.try_into().unwrap() };
        let out = self.forward(&mut g, &p, &pyr)?;
        Ok(g.value(out).clone())
    }
}
