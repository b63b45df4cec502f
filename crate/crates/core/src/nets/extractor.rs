use super::layers::Conv;
use super::{check_input, check_store, NetConfig, NUM_LEVELS};
use crate::error::Result;
use crate::params::{Bound, Layout, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Five feature maps at scales 1, 1/2, 1/4, 1/8 and 1/16 of the input.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; NUM_LEVELS],
}

/// Four 3x3 convolutions, each followed by 2x2 max pooling. Level 0 is the
/// first (pre-pool) convolution output; level 4 is the last pooled map.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layout: Layout,
    convs: Vec<Conv>,
}

impl FeatureExtractor {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut layout = Layout::new();
        let mut cin = 1;
        let convs = (0..4)
            .map(|i| {
                let cout = cfg.level_width(i);
                let c = Conv::new(&mut layout, &format!("conv{}", i + 1), cin, cout, 3, 1, 1);
                cin = cout;
                c
            })
            .collect();
        Self { layout, convs }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FeaturePyramid> {
        check_input(g.shape(x))?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.max_pool2(h)?;
            }
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
            levels.push(h);
        }
        levels.push(g.max_pool2(h)?);
        Ok(FeaturePyramid { levels: levels.try_into().expect("five levels") })
    }

    /// Evaluation-mode pyramid of a `[N, 1, H, W]` batch.
    pub fn extract<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        check_store(params, &self.layout, "extractor")?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let pyr = self.forward(&mut g, &p, xv)?;
        Ok(pyr.levels.iter().map(|&v| g.value(v).clone()).collect())
    }
}
