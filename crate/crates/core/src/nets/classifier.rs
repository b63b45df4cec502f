use super::extractor::FeaturePyramid;
use super::layers::{Conv, ConvT};
use super::{check_store, NetConfig, NUM_CLASSES, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::params::{Bound, Layout, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
struct Stage {
    up: ConvT,
    fuse: Conv,
    skip_level: usize,
}

/// Three learned 2x upsampling stages (1/16 -> 1/2), each optionally
/// concatenated with the matching pyramid level, then a fixed bilinear 2x
/// upsampling and a 1x1 convolution to four class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    layout: Layout,
    stages: Vec<Stage>,
    head: Conv,
    skips: bool,
}

impl Classifier {
    pub fn new(cfg: &NetConfig) -> Self {
        let skips = cfg.use_skip_connections;
        let mut layout = Layout::new();
        let mut cin = cfg.level_width(4);
        let stages = [3usize, 2, 1]
            .iter()
            .enumerate()
            .map(|(i, &skip_level)| {
                let cout = cfg.level_width(skip_level - 1);
                let up = ConvT::new(&mut layout, &format!("up{}", i + 1), cin, cout, 2);
                let fuse_in = if skips { cout + cfg.level_width(skip_level) } else { cout };
                let fuse = Conv::new(&mut layout, &format!("fuse{}", i + 1), fuse_in, cout, 3, 1, 1);
                cin = cout;
                Stage { up, fuse, skip_level }
            })
            .collect();
        let head = Conv::new(&mut layout, "head", cin, NUM_CLASSES, 1, 1, 0);
        Self { layout, stages, head, skips }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn uses_skips(&self) -> bool {
        self.skips
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pyr: &FeaturePyramid) -> Result<Var> {
        let mut h = pyr.levels[NUM_LEVELS - 1];
        for st in &self.stages {
            h = st.up.forward(g, p, h)?;
            h = g.relu(h);
            if self.skips {
                h = g.concat(h, pyr.levels[st.skip_level])?;
            }
            h = st.fuse.forward(g, p, h)?;
            h = g.relu(h);
        }
        let h = g.upsample2(h);
        self.head.forward(g, p, h)
    }

    /// Evaluation-mode logits from pyramid tensors.
    pub fn classify<T: Real>(&self, params: &ParamStore<T>, pyramid: &[Tensor<T>]) -> Result<Tensor<T>> {
        check_store(params, &self.layout, "classifier")?;
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
