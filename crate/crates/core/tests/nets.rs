use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udaseg::nets::{NetConfig, Networks, NUM_CLASSES};
use udaseg::params::ParamStore;
use udaseg::tensor::{Graph, Tensor, Var};

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec([1, 1, h, w], (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn nets(c: usize, skips: bool) -> Networks {
    Networks::new(&NetConfig { base_width: c, use_skip_connections: skips, ..Default::default() }).unwrap()
}

#[test]
fn output_shapes_at_desk_and_full_size() {
    for skips in [true, false] {
        let n = nets(4, skips);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fp: ParamStore<f32> = n.extractor.layout().init(&mut rng);
        let cp: ParamStore<f32> = n.classifier.layout().init(&mut rng);
        let gp: ParamStore<f32> = n.generator.layout().init(&mut rng);
        let dp: ParamStore<f32> = n.discriminator.layout().init(&mut rng);
        for size in [128, 512] {
            let x = image(size, size, 2).cast::<f32>();
            let pyr = n.extractor.extract(&fp, &x).unwrap();
            assert_eq!(pyr[4].shape()[2..], [size / 16, size / 16]);
            assert_eq!(n.classifier.classify(&cp, &pyr).unwrap().shape(), [1, NUM_CLASSES, size, size]);
            assert_eq!(n.generator.reconstruct(&gp, &pyr).unwrap().shape(), [1, 1, size, size]);
            assert_eq!(n.discriminator.discriminate(&dp, &x).unwrap().shape(), [1, NUM_CLASSES, size / 8, size / 8]);
        }
    }
}

#[test]
fn discriminator_cells_follow_an_eight_pixel_shift() {
    // Content sits on a zero margin, so shifting by one output stride only
    // moves it; instance normalization and padding keep this approximate.
    let n = nets(4, true);
    let dp: ParamStore<f64> = n.discriminator.layout().init(&mut ChaCha8Rng::seed_from_u64(3));
    let (size, margin, shift) = (128, 32, 8);
    let content = image(size, size, 4);
    let place = |dx: usize| {
        let mut t = Tensor::<f64>::zeros([1, 1, size, size]);
        for r in margin..size - margin {
            for c in margin..size - margin - shift {
                t.data_mut()[r * size + c + dx] = content.data()[r * size + c];
            }
        }
        t
    };
    let a = n.discriminator.discriminate(&dp, &place(0)).unwrap();
    let b = n.discriminator.discriminate(&dp, &place(shift)).unwrap();
    let grid = size / 8;
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for k in 0..NUM_CLASSES {
        for r in 3..grid - 3 {
            for c in 3..grid - 4 {
                let va = a.data()[(k * grid + r) * grid + c];
                let vb = b.data()[(k * grid + r) * grid + c + 1];
                worst = worst.max((va - vb).abs());
                scale = scale.max(va.abs());
            }
        }
    }
    assert!(worst <= 0.05 * scale, "max interior deviation {worst} vs logit scale {scale}");
    // A one-pixel shift does not line up with the grid.
    let off = n.discriminator.discriminate(&dp, &place(1)).unwrap();
    assert_ne!(off, a);
}

#[test]
fn one_extractor_set_serves_both_domains() {
    let n = nets(2, true);
    let fp: ParamStore<f64> = n.extractor.layout().init(&mut ChaCha8Rng::seed_from_u64(5));
    let (xs, xt) = (image(32, 32, 6), image(32, 32, 7));
    let labels: Vec<u8> = vec![0, 1, 2, 3];
    let head = |g: &mut Graph<f64>, lvl: Var| {
        let w = g.input(Tensor::full([4, 16, 1, 1], 0.1));
        let z = g.conv2d(lvl, w, None, 1, 0).unwrap();
        g.cross_entropy(z, &labels).unwrap()
    };
    let grads = |inputs: &[&Tensor<f64>]| {
        let mut g = Graph::new();
        let b = fp.bind(&mut g, true);
        let mut total: Option<Var> = None;
        for x in inputs {
            let v = g.input((*x).clone());
            let pyr = n.extractor.forward(&mut g, &b, v).unwrap();
            let l = head(&mut g, pyr.levels[4]);
            total = Some(match total {
                Some(t) => g.add(t, l).unwrap(),
                None => l,
            });
        }
        let gr = g.backward(total.unwrap()).unwrap();
        (b.vars().len(), b.grads(&gr))
    };
    let (count, both) = grads(&[&xs, &xt]);
    assert_eq!(count, fp.len());
    let (_, gs) = grads(&[&xs]);
    let (_, gt) = grads(&[&xt]);
    for ((b, s), t) in both.iter().zip(&gs).zip(&gt) {
        for ((b, s), t) in b.data().iter().zip(s.data()).zip(t.data()) {
            assert!((b - (s + t)).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn parameter_sets_are_disjoint() {
    let n = nets(4, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stores: Vec<ParamStore<f32>> = vec![
        n.extractor.layout().init(&mut rng),
        n.classifier.layout().init(&mut rng),
        n.generator.layout().init(&mut rng),
        n.discriminator.layout().init(&mut rng),
    ];
    let mut g = Graph::<f32>::new();
    let bound: Vec<_> = stores.iter().map(|s| s.bind(&mut g, true)).collect();
    let mut seen = std::collections::HashSet::new();
    for b in &bound {
        for v in b.vars() {
            assert!(seen.insert(*v), "parameter bound twice");
        }
    }
    assert_eq!(seen.len(), stores.iter().map(|s| s.len()).sum::<usize>());
}

/// Central differences of `f` at 12 random parameters of `store`, checked
/// against the analytic gradient `grad`. Biases feeding an instance norm have
/// a zero true gradient, hence the absolute floor.
fn check_fd(store: &ParamStore<f64>, grad: &[Tensor<f64>], f: &dyn Fn(&ParamStore<f64>) -> f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    for _ in 0..12 {
        let t = rng.random_range(0..store.len());
        let i = rng.random_range(0..store.tensors()[t].numel());
        let mut p = store.clone();
        p.tensors_mut()[t].data_mut()[i] += eps;
        let up = f(&p);
        p.tensors_mut()[t].data_mut()[i] -= 2.0 * eps;
        let down = f(&p);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad[t].data()[i];
        let err = (numeric - analytic).abs();
        assert!(
            err <= 1e-2 * numeric.abs().max(analytic.abs()) || err <= 1e-6,
            "{}[{i}]: analytic {analytic} numeric {numeric}",
            store.names()[t]
        );
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let n = nets(2, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fp: ParamStore<f64> = n.extractor.layout().init(&mut rng);
    let cp: ParamStore<f64> = n.classifier.layout().init(&mut rng);
    let gp: ParamStore<f64> = n.generator.layout().init(&mut rng);
    let dp: ParamStore<f64> = n.discriminator.layout().init(&mut rng);
    let x = image(32, 32, 10);
    let target = image(32, 32, 11);
    let seg_labels: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(0..4)).collect();
    let patch_labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..4)).collect();

    // Each closure builds a scalar reduction of one network's output with
    // only that network's parameters trainable.
    let seg = |c: &ParamStore<f64>, f: &ParamStore<f64>, train_f: bool| {
        let mut g = Graph::new();
        let fb = f.bind(&mut g, train_f);
        let cb = c.bind(&mut g, !train_f);
        let xv = g.input(x.clone());
        let pyr = n.extractor.forward(&mut g, &fb, xv).unwrap();
        let z = n.classifier.forward(&mut g, &cb, &pyr).unwrap();
        let l = g.cross_entropy(z, &seg_labels).unwrap();
        let grads = g.backward(l).unwrap();
        let b = if train_f { fb } else { cb };
        (g.value(l).item(), b.grads(&grads))
    };
    let (_, gf) = seg(&cp, &fp, true);
    check_fd(&fp, &gf, &|p| seg(&cp, p, true).0, 1);
    let (_, gc) = seg(&cp, &fp, false);
    check_fd(&cp, &gc, &|p| seg(p, &fp, false).0, 2);

    let recon = |gpar: &ParamStore<f64>| {
        let mut g = Graph::new();
        let fb = fp.bind(&mut g, false);
        let gb = gpar.bind(&mut g, true);
        let xv = g.input(x.clone());
        let tv = g.input(target.clone());
        let pyr = n.extractor.forward(&mut g, &fb, xv).unwrap();
        let r = n.generator.forward(&mut g, &gb, &pyr).unwrap();
        let l = g.l1_mean(r, tv).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), gb.grads(&grads))
    };
    let (_, gg) = recon(&gp);
    check_fd(&gp, &gg, &|p| recon(p).0, 3);

    let critic = |d: &ParamStore<f64>| {
        let mut g = Graph::new();
        let db = d.bind(&mut g, true);
        let xv = g.input(x.clone());
        let z = n.discriminator.forward(&mut g, &db, xv).unwrap();
        let l = g.cross_entropy(z, &patch_labels).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), db.grads(&grads))
    };
    let (_, gd) = critic(&dp);
    check_fd(&dp, &gd, &|p| critic(p).0, 4);
}
