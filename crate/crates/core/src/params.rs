//! Parameter layouts, parameter storage and the adaptive-moment optimizer.
//!
//! A network is described once by a [`Layout`] (names, shapes, initializers);
//! its values live in a [`ParamStore`] that can be instantiated in any
//! precision. Binding a store onto a [`Graph`] creates one leaf per tensor, so
//! whether the network is trainable in a given pass is decided at bind time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<[usize; 4]>,
    inits: Vec<Init>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: [usize; 4], init: Init) -> ParamId {
        self.names.push(name.into());
        self.shapes.push(shape);
        self.inits.push(init);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[[usize; 4]] {
        &self.shapes
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.inits)
            .map(|(&shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
                    Tensor::from_vec(shape, data).unwrap()
                }
            })
            .collect();
        ParamStore { names: self.names.clone(), tensors }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        Ok(Self { names, tensors })
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Checks that this store has exactly the names and shapes of `layout`.
    pub fn matches(&self, layout: &Layout) -> bool {
        self.names == layout.names && self.tensors.iter().map(Tensor::shape).eq(layout.shapes.iter().copied())
    }

    /// Puts every tensor on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Parameter leaves of one network on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order (zeros where nothing flowed).
    pub fn grads<T: Real>(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Adaptive-moment optimizer state for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.tensors.len() || self.m.len() != grads.len() {
            return Err(Error::Shape(format!("adam: {} grads for {} params", grads.len(), store.tensors.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (((p, g), m), v) in store.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("adam: grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_initializers() {
        let mut layout = Layout::new();
        let w = layout.add("w", [4, 3, 3, 3], Init::Normal(0.02));
        let b = layout.add("b", [1, 4, 1, 1], Init::Zeros);
        let g = layout.add("g", [1, 4, 1, 1], Init::Ones);
        let store: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(layout.numel(), 108 + 8);
        assert!(store.get(b).data().iter().all(|&v| v == 0.0));
        assert!(store.get(g).data().iter().all(|&v| v == 1.0));
        let std = (store.get(w).data().iter().map(|v| v * v).sum::<f64>() / 108.0).sqrt();
        assert!(std > 0.01 && std < 0.03, "std {std}");
        assert!(store.matches(&layout));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut layout = Layout::new();
        layout.add("p", [1, 1, 1, 2], Init::Zeros);
        let mut store: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut adam = Adam::new(&store);
        let grad = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[grad], 0.1).unwrap();
        let d = store.tensors()[0].data();
        assert!((d[0] + 0.1).abs() < 1e-6 && (d[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut layout = Layout::new();
        layout.add("p", [1, 1, 1, 1], Init::Zeros);
        let mut store: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.tensors()[0].item();
            let grad = Tensor::scalar(2.0 * (x - 1.5));
            adam.step(&mut store, &[grad], 0.01).unwrap();
        }
        assert!((store.tensors()[0].item() - 1.5).abs() < 1e-2);
    }
}
