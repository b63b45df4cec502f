use crate::error::Result;
use crate::params::{Bound, Init, Layout, ParamId};
use crate::tensor::{Graph, Real, Var};

pub(crate) const WEIGHT_STD: f64 = 0.02;
pub(crate) const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(l: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: l.add(format!("{name}.weight"), [cout, cin, k, k], Init::Normal(WEIGHT_STD)),
            b: l.add(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// 3x3 transposed convolution; doubles the spatial size when `stride == 2`.
#[derive(Clone, Debug)]
pub(crate) struct ConvT {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvT {
    pub fn new(l: &mut Layout, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            w: l.add(format!("{name}.weight"), [cin, cout, 3, 3], Init::Normal(WEIGHT_STD)),
            b: l.add(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let out_pad = usize::from(self.stride == 2);
        g.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, 1, out_pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(l: &mut Layout, name: &str, c: usize) -> Self {
        Self {
            gamma: l.add(format!("{name}.gamma"), [1, c, 1, 1], Init::Ones),
            beta: l.add(format!("{name}.beta"), [1, c, 1, 1], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Act {
    Relu,
    Leaky,
}

impl Act {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Act::Relu => g.relu(x),
            Act::Leaky => g.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

/// conv-norm-act-conv-norm plus identity (or strided 1x1 projection) shortcut.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
    shortcut: Option<Conv>,
    act: Act,
}

impl ResBlock {
    pub fn new(l: &mut Layout, name: &str, cin: usize, cout: usize, stride: usize, act: Act) -> Self {
        let shortcut =
            (cin != cout || stride != 1).then(|| Conv::new(l, &format!("{name}.shortcut"), cin, cout, 1, stride, 0));
        Self {
            c1: Conv::new(l, &format!("{name}.conv1"), cin, cout, 3, stride, 1),
            n1: Norm::new(l, &format!("{name}.norm1"), cout),
            c2: Conv::new(l, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            n2: Norm::new(l, &format!("{name}.norm2"), cout),
            shortcut,
            act,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, p, x)?;
        let h = self.n1.forward(g, p, h)?;
        let h = self.act.apply(g, h);
        let h = self.c2.forward(g, p, h)?;
        let h = self.n2.forward(g, p, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, s)
    }
}
