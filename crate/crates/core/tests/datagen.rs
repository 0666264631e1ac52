//! Dataset generators and the IDX reader.

use std::path::{Path, PathBuf};

use invlens_core::attacks::{classifier_accuracy, BaselineArch, BaselineNet};
use invlens_core::datagen::*;
use invlens_core::objectives::TrainOptions;
use invlens_core::rng::rng_from_seed;
use invlens_core::{Error, Optimizer, OptimizerKind, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Digit-like 28x28 images: a bright ring of random size and position away
/// from the borders, with soft edge values.
fn fake_digits(n: usize, seed: u64) -> LabeledBatch {
    let mut rng = rng_from_seed(seed);
    let mut data = vec![0.0; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (cy, cx) = (rng.random_range(10.0..18.0), rng.random_range(10.0..18.0));
        let (ry, rx) = (rng.random_range(3.0..7.0), rng.random_range(2.0..6.0));
        for r in 4..24 {
            for c in 4..24 {
                let d = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
                let v: f64 = 1.0 - (d.sqrt() - 1.0).abs() * 3.0;
                data[i * 784 + r * 28 + c] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        labels.push(i % 10);
    }
    LabeledBatch::new(Tensor::new(&[n, 1, 28, 28], data).unwrap(), labels, SplitTag::Train).unwrap()
}

fn small_spec(d: usize, n: usize, seed: u64) -> SpheresSpec {
    SpheresSpec {
        d,
        r1: 1.0,
        r2: 10.0,
        n_train: n,
        n_test: n,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sphere_samples_sit_on_their_radius(seed in any::<u64>(), d in 2usize..120, half in 1usize..40) {
        let spec = small_spec(d, 2 * half, seed);
        let b = spec.train().unwrap();
        prop_assert_eq!(b.inputs.shape(), &[2 * half, d]);
        prop_assert_eq!(b.labels.iter().filter(|&&l| l == 0).count(), half);
        for (i, &l) in b.labels.iter().enumerate() {
            let norm = b.inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - spec.radius(l)).abs() < 1e-9);
        }
        prop_assert_eq!(spec.train().unwrap(), b);
    }

    #[test]
    fn rotation_preserves_norm(seed in any::<u64>(), angle in -7.0f64..7.0) {
        let x = Tensor::randn(&[30], 3.0, &mut rng_from_seed(seed)).into_data();
        let y = rotate_sphere(&x, 3, 17, angle).unwrap();
        let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((n(&x) - n(&y)).abs() < 1e-12);
    }

    #[test]
    fn shift_conserves_mass_minus_cropped_margin(seed in any::<u64>(), dx in -3i64..=3, dy in -3i64..=3) {
        let img = Tensor::uniform(&[2, 9, 11], 0.0, 1.0, &mut rng_from_seed(seed)).into_data();
        let out = shift_image(&img, 2, 9, 11, dx, dy);
        let mut cropped = 0.0;
        for ch in 0..2 {
            for r in 0..9i64 {
                for c in 0..11i64 {
                    let (nr, nc) = (r + dy, c + dx);
                    if !(0..9).contains(&nr) || !(0..11).contains(&nc) {
                        cropped += img[(ch * 9 + r as usize) * 11 + c as usize];
                    }
                }
            }
        }
        let total: f64 = img.iter().sum();
        prop_assert!((out.iter().sum::<f64>() - (total - cropped)).abs() < 1e-9);
    }
}

#[test]
fn default_spheres_geometry() {
    let spec = SpheresSpec::default();
    assert_eq!((spec.d, spec.r1, spec.r2), (100, 1.0, 10.0));
    assert!(small_spec(5, 4, 0).validate().is_ok());
    let bad = SpheresSpec {
        r1: 10.0,
        r2: 1.0,
        ..spec
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn circle_angles_are_uniform() {
    let spec = small_spec(2, 16_000, 0);
    let b = sample_spheres(&spec, 16_000, &mut rng_from_seed(77), SplitTag::Train).unwrap();
    let mut bins = [0usize; 16];
    for i in 0..b.len() {
        let r = b.inputs.row(i);
        let t = r[1].atan2(r[0]) + std::f64::consts::PI;
        bins[((t / (2.0 * std::f64::consts::PI) * 16.0) as usize).min(15)] += 1;
    }
    let (n, p) = (16_000.0, 1.0 / 16.0);
    let sigma = n * p * (1.0 - p);
    for (k, &c) in bins.iter().enumerate() {
        assert!((c as f64 - n * p).abs() < 3.0 * sigma.sqrt(), "bin {k}: {c}");
    }
}

#[test]
fn norm_perturbation() {
    let x = vec![0.6, 0.0, -0.8];
    let y = perturb_sphere_norm(&x, 10.0).unwrap();
    assert!((y.iter().map(|v| v * v).sum::<f64>().sqrt() - 10.0).abs() < 1e-12);
    assert_eq!(perturb_sphere_norm(&x, 1.0).unwrap(), x);
    assert!(perturb_sphere_norm(&[0.0, 0.0], 1.0).is_err());
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn hand_built_idx_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11) as u8).collect();
    let img_path = dir.path().join("imgs");
    std::fs::write(&img_path, idx_bytes(0x803, &[2, 3, 4], &pixels)).unwrap();
    let t = read_idx_images(&img_path).unwrap();
    assert_eq!(t.shape(), &[2, 1, 3, 4]);
    for (v, &p) in t.data().iter().zip(&pixels) {
        assert_eq!(*v, f64::from(p) / 255.0);
    }
    let again = dir.path().join("again");
    write_idx_images(&again, &t).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&img_path).unwrap());

    let lab_path = dir.path().join("labs");
    write_idx_labels(&lab_path, &[7, 0]).unwrap();
    assert_eq!(read_idx_labels(&lab_path).unwrap(), vec![7, 0]);
    // an images file is not a labels file and vice versa
    let e = read_idx_labels(&img_path).unwrap_err().to_string();
    assert!(e.contains("0x00000803"), "{e}");
    assert!(read_idx_images(&lab_path).is_err());
}

#[test]
fn truncated_idx_reports_byte_counts() {
    let p = Path::new("t.idx");
    let bytes = idx_bytes(0x803, &[2, 3, 4], &[0; 20]);
    let e = parse_idx(&bytes, 0x803, p).unwrap_err().to_string();
    assert!(e.contains("expected 40") && e.contains("found 36"), "{e}");
    assert!(parse_idx(&[0, 0], 0x803, p).is_err());
}

#[test]
fn standard_train_header_parses_to_sixty_thousand_images() {
    let bytes = idx_bytes(0x803, &[60_000, 28, 28], &vec![0; 60_000 * 784]);
    let idx = parse_idx(&bytes, 0x803, Path::new("train-images-idx3-ubyte")).unwrap();
    assert_eq!(idx.dims, vec![60_000, 28, 28]);
}

fn bundled_mnist() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn bundled_mnist_loads() {
    let dir = bundled_mnist();
    if !dir.exists() {
        eprintln!("skipping: no MNIST files at {}", dir.display());
        return;
    }
    for train in [true, false] {
        let b = load_mnist(&dir, train).unwrap();
        assert_eq!(&b.inputs.shape()[1..], &[1, 28, 28]);
        assert!(b.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut counts = [0usize; 10];
        b.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c > 0));
    }
}

#[test]
fn dequantization_statistics() {
    let mut rng = rng_from_seed(5);
    let levels: Vec<f64> = (0..1_000_000).map(|_| f64::from(rng.random_range(0u8..=255)) / 255.0).collect();
    let x = Tensor::from_vec(levels);
    let a = dequantize(&x, &mut rng_from_seed(6));
    assert_eq!(a, dequantize(&x, &mut rng_from_seed(6)));
    assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    // noise is added on the 256-level grid k / 256
    let shift: f64 = a
        .data()
        .iter()
        .zip(x.data())
        .map(|(d, v)| d - (v * 255.0).round() / 256.0)
        .sum::<f64>()
        / 1e6;
    assert!((shift - 1.0 / 512.0).abs() < 1e-4, "{shift}");
    assert!(a.zip_map(&x, |d, v| d * 256.0 - (v * 255.0).round()).unwrap().data().iter().all(|&u| (0.0..1.0).contains(&u)));
}

#[test]
fn binary_code_is_a_one_pixel_shortcut() {
    let clean = fake_digits(300, 1);
    let mut rng = rng_from_seed(2);
    let (planted, ids) = make_binary_shift(&clean, Coupling::Planted, &mut rng).unwrap();
    let (removed, none) = make_binary_shift(&planted, Coupling::Removed, &mut rng).unwrap();
    assert!(none.iter().all(Option::is_none));
    assert_eq!(removed.tag, SplitTag::TestAdv);
    assert_eq!(removed.inputs, planted.inputs);
    for i in 0..clean.len() {
        let diff = planted.inputs.row(i).iter().zip(clean.inputs.row(i)).filter(|(a, b)| a != b).count();
        assert!(diff <= 1);
        // lookup rule: which code pixel is lit
        let lit: Vec<usize> = (0..10)
            .filter(|&c| {
                let (r, col) = code_pixel(c);
                planted.inputs.row(i)[r * 28 + col] == 1.0
            })
            .collect();
        assert_eq!(lit, vec![clean.labels[i]]);
        assert_eq!(ids[i], Some(clean.labels[i]));
    }
}

#[test]
fn randomized_shortcuts_carry_no_label_information() {
    let clean = fake_digits(10_000, 3);
    let mut rng = rng_from_seed(4);
    let bank = TextureBank::procedural(0.5);
    let (_, bin) = make_binary_shift(&clean, Coupling::Randomized, &mut rng).unwrap();
    let (_, tex) = make_texture_shift(&clean.take(10_000), Coupling::Randomized, &bank, MASK_THRESHOLD, &mut rng).unwrap();
    for ids in [bin, tex] {
        let ids: Vec<usize> = ids.into_iter().map(Option::unwrap).collect();
        let mi = plugin_mutual_information(&ids, &clean.labels);
        assert!(mi < 0.01, "mi {mi}");
        assert!(plugin_mutual_information(&clean.labels, &clean.labels) > 2.0);
    }
}

#[test]
fn texture_compositing_keeps_the_foreground() {
    let clean = fake_digits(100, 5);
    let bank = TextureBank::procedural(0.5);
    let (planted, _) = make_texture_shift(&clean, Coupling::Planted, &bank, MASK_THRESHOLD, &mut rng_from_seed(6)).unwrap();
    let mut background_changed = 0;
    for i in 0..clean.len() {
        for (a, b) in clean.inputs.row(i).iter().zip(planted.inputs.row(i)) {
            if *a > MASK_THRESHOLD {
                assert_eq!(a, b);
            } else if a != b {
                background_changed += 1;
            }
        }
    }
    assert!(background_changed > 100 * 300);
}

fn blanked_backgrounds(coupling: Coupling, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let clean = fake_digits(n, seed);
    let bank = TextureBank::procedural(0.5);
    let (mut shifted, _) = make_texture_shift(&clean, coupling, &bank, MASK_THRESHOLD, &mut rng_from_seed(seed + 1)).unwrap();
    for i in 0..n {
        let mask: Vec<bool> = clean.inputs.row(i).iter().map(|&v| v > MASK_THRESHOLD).collect();
        for (p, m) in shifted.inputs.row_mut(i).iter_mut().zip(mask) {
            if m {
                *p = 0.0;
            }
        }
    }
    (shifted.inputs, shifted.labels)
}

#[test]
fn texture_alone_predicts_planted_labels_only() {
    let (x, y) = blanked_backgrounds(Coupling::Planted, 2000, 10);
    let mut rng = rng_from_seed(11);
    let arch = BaselineArch::Conv {
        input: [1, 28, 28],
        filters: [8, 16],
        classes: 10,
    };
    let mut net = BaselineNet::new(arch, &mut rng).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 3e-3);
    let opts = TrainOptions {
        epochs: 4,
        batch_size: 32,
        lr_decay: 1.0,
    };
    net.fit(&mut opt, &x, &y, opts, &mut rng, |t, _| Ok(t), |_, _| Ok(())).unwrap();
    let (xp, yp) = blanked_backgrounds(Coupling::Planted, 1000, 20);
    let (xr, yr) = blanked_backgrounds(Coupling::Randomized, 1000, 30);
    let planted = classifier_accuracy(&net, &xp, &yp, 250).unwrap();
    let randomized = classifier_accuracy(&net, &xr, &yr, 250).unwrap();
    assert!(planted > 0.95, "planted accuracy {planted}");
    assert!(randomized <= 0.15, "randomized accuracy {randomized}");
}

#[test]
fn augmentation_offsets_stay_in_range() {
    let x = fake_digits(50, 40).inputs;
    let mass = |t: &Tensor, i: usize| t.row(i).iter().sum::<f64>();
    let out = augment_shift(&x, 3, &mut rng_from_seed(41));
    for i in 0..50 {
        // blobs stay inside rows/cols 4..24, so no shift up to 3 crops them
        assert!((mass(&out, i) - mass(&x, i)).abs() < 1e-9);
        let found = (-3..=3)
            .flat_map(|dx| (-3..=3).map(move |dy| (dx, dy)))
            .any(|(dx, dy)| shift_image(x.row(i), 1, 28, 28, dx, dy) == out.row(i));
        assert!(found, "image {i} is not a shift within 3 pixels");
    }
    assert_eq!(augment_shift(&x, 0, &mut rng_from_seed(42)), x);
}
