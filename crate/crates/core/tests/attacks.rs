//! Metamers, interpolation, pre-images, slices, sphere classifiers and probes.

use invlens_core::attacks::*;
use invlens_core::bijective::{CouplingKind, FullyInvertibleNet, NetSpec};
use invlens_core::datagen::{LabeledBatch, SpheresSpec};
use invlens_core::objectives::{ce_step, minibatches, TrainOptions};
use invlens_core::rng::rng_from_seed;
use invlens_core::{Error, Optimizer, OptimizerKind, Parameter, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn perturbed_net(spec: &NetSpec, seed: u64) -> FullyInvertibleNet {
    let mut rng = rng_from_seed(seed);
    let mut net = FullyInvertibleNet::build(spec, &mut rng).unwrap();
    let x = Tensor::randn(&[16, spec.dim()], 1.0, &mut rng).reshape(&[&[16][..], &spec.input_shape[..]].concat()).unwrap();
    net.initialize(&x).unwrap();
    for p in net.params_mut() {
        let p: &mut Parameter = p;
        for v in p.value.data_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    net
}

fn dense_spec(d: usize, c: usize, affine: bool) -> NetSpec {
    let mut s = NetSpec::dense(d, c, 3, 16);
    if affine {
        s.coupling = CouplingKind::Affine;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_metamers_keep_logits_and_decisions(seed in any::<u64>(), affine in any::<bool>()) {
        let net = perturbed_net(&dense_spec(10, 3, affine), seed % 10_000);
        let mut rng = rng_from_seed(seed);
        let xs = Tensor::randn(&[6, 10], 1.0, &mut rng);
        let xn = Tensor::randn(&[6, 10], 4.0, &mut rng);
        let m = metamer_exact(&net, &xs, &xn).unwrap();
        prop_assert!(m.semantic_residual < 1e-6);
        prop_assert_eq!(net.classify(&m.metamer).unwrap(), net.classify(&xs).unwrap());
        prop_assert_eq!(m.decision_agreement(), 1.0);
        let (code, _) = net.encode(&m.metamer).unwrap();
        let (nui, _) = net.encode(&xn).unwrap();
        prop_assert!(code.zn.max_abs_diff(&nui.zn).unwrap() < 1e-6);
    }

    #[test]
    fn preimage_levels_nest(seed in any::<u64>(), kind in 0usize..3) {
        let net = perturbed_net(&dense_spec(8, 2, true), seed % 10_000);
        let mut rng = rng_from_seed(seed);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let other = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let x_star = match kind {
            0 => x.clone(),
            1 => metamer_exact(&net, &x, &other).unwrap().metamer,
            _ => other,
        };
        let layers = net.intermediates(&x).unwrap().len();
        let logit = preimage_membership(&net, &x, &x_star, PreimageLevel::Logit, 1e-6).unwrap();
        let argmax = preimage_membership(&net, &x, &x_star, PreimageLevel::Argmax, 0.0).unwrap();
        for i in 0..layers {
            let layer = preimage_membership(&net, &x, &x_star, PreimageLevel::Layer(i), 1e-6).unwrap();
            for k in 0..5 {
                prop_assert!(!layer[k] || logit[k]);
            }
        }
        for k in 0..5 {
            prop_assert!(!logit[k] || argmax[k]);
        }
        if kind < 2 {
            prop_assert!(logit.iter().chain(&argmax).all(|&b| b));
        }
        if kind == 0 {
            let last = preimage_membership(&net, &x, &x_star, PreimageLevel::Layer(layers - 1), 0.0).unwrap();
            prop_assert!(last.iter().all(|&b| b));
        }
    }

    #[test]
    fn misaligned_classifier_ignores_the_last_coordinate(seed in any::<u64>(), xd in -50.0f64..50.0) {
        let mut x = Tensor::randn(&[20], 2.0, &mut rng_from_seed(seed)).into_data();
        let before = misaligned_sphere_classifier(&x, 1.0, 10.0);
        x[19] = xd;
        prop_assert_eq!(misaligned_sphere_classifier(&x, 1.0, 10.0), before);
    }
}

#[test]
fn self_pair_metamer_is_the_input() {
    let spec = NetSpec::image([1, 4, 4], 2, 2, 2, 8);
    let net = perturbed_net(&spec, 3);
    let x = Tensor::randn(&[3, 1, 4, 4], 1.0, &mut rng_from_seed(4));
    let m = metamer_exact(&net, &x, &x).unwrap();
    assert!(m.metamer.max_abs_diff(&x).unwrap() < 1e-8);
    assert!(m.semantic_residual < 1e-8);
}

#[test]
fn interpolation_endpoints_and_shared_logits() {
    let net = perturbed_net(&dense_spec(12, 4, true), 5);
    let mut rng = rng_from_seed(6);
    let x = Tensor::randn(&[4, 12], 1.0, &mut rng);
    let target = Tensor::randn(&[4, 12], 3.0, &mut rng);
    let path = interpolate_nuisance(&net, &x, &target, 7).unwrap();
    assert_eq!(path.len(), 7);
    assert!(path[0].max_abs_diff(&x).unwrap() < 1e-8);
    let zs = net.logits(&x).unwrap();
    for step in &path {
        assert!(net.logits(step).unwrap().max_abs_diff(&zs).unwrap() < 1e-6);
    }
    let end = metamer_exact(&net, &x, &target).unwrap().metamer;
    assert!(path[6].max_abs_diff(&end).unwrap() < 1e-8);
    assert!(matches!(interpolate_nuisance(&net, &x, &target, 1), Err(Error::Config(_))));
}

#[test]
fn invalid_layer_index_is_rejected() {
    let net = perturbed_net(&dense_spec(6, 2, false), 7);
    let x = Tensor::randn(&[1, 6], 1.0, &mut rng_from_seed(8));
    let n = net.intermediates(&x).unwrap().len();
    let r = preimage_membership(&net, &x, &x, PreimageLevel::Layer(n), 1e-6);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn collinear_anchors_are_degenerate() {
    let c = FnClassifier(|_: &[f64]| 0);
    let p0 = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
    let p1 = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let p2 = Tensor::from_vec(vec![-2.0, -4.0, -6.0]);
    assert!(matches!(scan_decision_slice(&c, &p0, &p1, &p2, 5), Err(Error::DegeneratePlane(_))));
    assert!(matches!(scan_decision_slice(&c, &p0, &p1, &p1, 5), Err(Error::DegeneratePlane(_))));
    let p2 = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
    assert!(matches!(scan_decision_slice(&c, &p0, &p1, &p2, 1), Err(Error::Config(_))));
}

#[test]
fn constant_classifier_gives_a_uniform_map() {
    let c = FnClassifier(|_: &[f64]| 3);
    let p0 = Tensor::from_vec(vec![1.0, 1.0]);
    let p1 = Tensor::from_vec(vec![2.0, 1.0]);
    let p2 = Tensor::from_vec(vec![1.0, 5.0]);
    let scan = scan_decision_slice(&c, &p0, &p1, &p2, 9).unwrap();
    assert_eq!(scan.decisions.len(), 81);
    assert!(scan.decisions.iter().all(|&d| d == 3));
    assert_eq!(scan.coordinate(0), SLICE_LO);
    assert_eq!(scan.coordinate(8), SLICE_HI);
    assert_eq!(scan.fraction(|_, c| c == 3), 1.0);
}

#[test]
fn norm_classifier_draws_rings_through_the_origin() {
    let (r1, r2) = (1.0, 10.0);
    let c = FnClassifier(move |p: &[f64]| norm_sphere_classifier(p, r1, r2));
    let mut p1 = vec![0.0; 50];
    let mut p2 = vec![0.0; 50];
    p1[0] = 6.0;
    p2[7] = 6.0;
    let origin = Tensor::zeros(&[50]);
    let scan = scan_decision_slice(&c, &origin, &Tensor::from_vec(p1), &Tensor::from_vec(p2), 61).unwrap();
    let g = scan.grid;
    for ib in 0..g {
        for ia in 0..g {
            let (a, b) = (scan.coordinate(ia), scan.coordinate(ib));
            let want = usize::from(6.0 * (a * a + b * b).sqrt() > 5.5);
            assert_eq!(scan.decision(ia, ib), want, "a={a} b={b}");
            // symmetric under swapping and mirroring the axes
            assert_eq!(scan.decision(ia, ib), scan.decision(ib, ia));
            assert_eq!(scan.decision(ia, ib), scan.decision(g - 1 - ia, ib));
        }
    }
    let inner = scan.fraction(|_, c| c == 0);
    let disk = std::f64::consts::PI * (5.5f64 / 6.0).powi(2) / 9.0;
    assert!((inner - disk).abs() < 0.02, "{inner} vs {disk}");
}

#[test]
fn slice_files_have_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let c = FnClassifier(|p: &[f64]| usize::from(p[0] > 0.0));
    let scan = scan_decision_slice(
        &c,
        &Tensor::from_vec(vec![0.0, 0.0]),
        &Tensor::from_vec(vec![1.0, 0.0]),
        &Tensor::from_vec(vec![0.0, 1.0]),
        3,
    )
    .unwrap();
    let csv = dir.path().join("s.csv");
    scan.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "a,b,class");
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[1], "-1.5,-1.5,0");
    assert_eq!(lines[3], "1.5,-1.5,1");
    let pgm = dir.path().join("s.pgm");
    scan.write_pgm(&pgm, 2).unwrap();
    let (h, w, _) = invlens_core::datagen::read_pgm(&pgm).unwrap();
    assert_eq!((h, w), (3, 3));
}

fn spheres(d: usize, n: usize, seed: u64) -> (LabeledBatch, LabeledBatch, SpheresSpec) {
    let spec = SpheresSpec {
        d,
        n_train: n,
        n_test: n,
        seed,
        ..SpheresSpec::default()
    };
    (spec.train().unwrap(), spec.test().unwrap(), spec)
}

#[test]
fn misaligned_classifier_is_perfect_then_at_chance() {
    let (_, test, spec) = spheres(100, 4000, 9);
    let c = FnClassifier(|p: &[f64]| misaligned_sphere_classifier(p, 1.0, 10.0));
    assert_eq!(classifier_accuracy(&c, &test.inputs, &test.labels, 512).unwrap(), 1.0);
    let adv = adversarial_last_coordinate(&test, &spec).unwrap();
    assert_eq!(adv.flipped + adv.skipped, test.len());
    let acc = classifier_accuracy(&c, &adv.batch.inputs, &adv.batch.labels, 512).unwrap();
    assert!((acc - 0.5).abs() < 0.02, "accuracy {acc}");
    for i in 0..adv.batch.len() {
        let norm = adv.batch.inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = spec.radius(adv.batch.labels[i]);
        assert!((norm - r).abs() < 1e-9);
    }
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let mut rng = rng_from_seed(10);
    let x = Tensor::randn(&[3000, 20], 1.0, &mut rng);
    let y: Vec<usize> = (0..3000).map(|_| rng.random_range(0..10)).collect();
    let (tr, te): (Vec<usize>, Vec<usize>) = ((0..2000).collect(), (2000..3000).collect());
    let ytr: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| y[i]).collect();
    let opts = ProbeOptions {
        hidden: 64,
        layers: 2,
        epochs: 5,
        ..ProbeOptions::default()
    };
    let r = train_probe_on_features(&x.select_rows(&tr), &ytr, &x.select_rows(&te), &yte, 10, opts, &mut rng).unwrap();
    assert!((r.test_error - 0.9).abs() < 0.04, "test error {}", r.test_error);
    assert!(r.mi_lower_bound < 0.05);
}

fn train_invertible_on_spheres(d: usize, seed: u64) -> (FullyInvertibleNet, LabeledBatch) {
    let (train, test, _) = spheres(d, 2000, seed);
    let mut spec = NetSpec::dense(d, 2, 4, 64);
    spec.coupling = CouplingKind::Affine;
    let mut rng = rng_from_seed(seed);
    let mut net = FullyInvertibleNet::build(&spec, &mut rng).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
    for _ in 0..5 {
        for idx in minibatches(train.len(), 64, &mut rng) {
            let b = train.select(&idx);
            ce_step(&mut net, &mut opt, &b.inputs, &b.labels).unwrap();
        }
    }
    (net, test)
}

#[test]
fn trained_invertible_net_separates_classes_and_gradient_attack_finds_metamer_logits() {
    let (net, test) = train_invertible_on_spheres(10, 11);
    assert!(classifier_accuracy(&net, &test.inputs, &test.labels, 512).unwrap() > 0.97);
    // different-class pairs fall outside each other's argmax pre-image
    let inner: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == 0).take(200).collect();
    let outer: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == 1).take(200).collect();
    let a = test.inputs.select_rows(&inner);
    let b = test.inputs.select_rows(&outer);
    let same = preimage_membership(&net, &a, &b, PreimageLevel::Argmax, 0.0).unwrap();
    assert!(same.iter().filter(|&&s| s).count() < 10);

    let xs = a.select_rows(&[0, 1, 2]);
    let xi = b.select_rows(&[0, 1, 2]);
    let zero = metamer_gradient(&net, &xs, &xs, GradientMetamerOptions { iterations: 0, lr: 0.01 }).unwrap();
    assert_eq!(zero.mse, 0.0);
    let exact = metamer_exact(&net, &xs, &xi).unwrap();
    // Adam moves the input about lr per step and the outer start is ~9 away,
    // so this pair needs more than the default 3000 iterations
    let opts = GradientMetamerOptions {
        iterations: 10_000,
        ..GradientMetamerOptions::default()
    };
    let grad = metamer_gradient(&net, &xs, &xi, opts).unwrap();
    let mse = grad.achieved_logits.zip_map(&exact.achieved_logits, |p, q| (p - q) * (p - q)).unwrap().sum() / 6.0;
    assert!(mse < 1e-3, "mse to exact logits {mse}");
}

#[test]
fn gradient_attack_moves_outer_point_onto_inner_logits_of_a_baseline() {
    let (train, test, _) = spheres(10, 2000, 12);
    let mut rng = rng_from_seed(13);
    let mut net = BaselineNet::new(BaselineArch::Dense(vec![10, 64, 64, 2]), &mut rng).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
    let opts = TrainOptions {
        epochs: 10,
        batch_size: 64,
        lr_decay: 1.0,
    };
    net.fit(&mut opt, &train.inputs, &train.labels, opts, &mut rng, |t, _| Ok(t), |_, _| Ok(())).unwrap();
    assert!(classifier_accuracy(&net, &test.inputs, &test.labels, 512).unwrap() > 0.97);
    let inner = test.labels.iter().position(|&l| l == 0).unwrap();
    let outer = test.labels.iter().position(|&l| l == 1).unwrap();
    let xs = test.inputs.select_rows(&[inner]);
    let xi = test.inputs.select_rows(&[outer]);
    let r = metamer_gradient(&net, &xs, &xi, GradientMetamerOptions::default()).unwrap();
    assert!(r.mse < 1e-4, "mse {}", r.mse);
    assert_eq!(net.predict(&r.metamer).unwrap(), vec![0]);
}

#[test]
fn baseline_outputs_distributions_and_round_trips() {
    let arch = BaselineArch::Conv {
        input: [1, 8, 8],
        filters: [4, 6],
        classes: 3,
    };
    let net = BaselineNet::new(arch, &mut rng_from_seed(14)).unwrap();
    let x = Tensor::uniform(&[5, 1, 8, 8], 0.0, 1.0, &mut rng_from_seed(15));
    let logits = net.logits(&x).unwrap();
    assert_eq!(logits.shape(), &[5, 3]);
    for i in 0..5 {
        let m = logits.row(i).iter().cloned().fold(f64::MIN, f64::max);
        let p: f64 = logits.row(i).iter().map(|v| (v - m).exp()).sum::<f64>();
        let probs: f64 = logits.row(i).iter().map(|v| (v - m).exp() / p).sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }
    let back = BaselineNet::from_section(&net.to_section("baseline")).unwrap();
    assert_eq!(back.logits(&x).unwrap(), logits);
    assert!(preimage_membership(&net, &x, &x, PreimageLevel::Layer(0), 0.0).is_err());
}
