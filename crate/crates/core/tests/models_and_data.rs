use dsv_autograd::Tensor;
use dsv_core::data::{gen_blobs2d, gen_glyphs, gen_glyphs_with, load_idx, write_idx, AugmentFamily, Augmentation, GlyphSpec};
use dsv_core::nn::{accuracy, Arch, Model, ParamMask};
use dsv_core::optim::{hinge_loss, train_classifier, train_hinge_linear, Optimizer, TrainConfig};
use dsv_core::svm::{solve_hard_margin, SvmOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch_strategy() -> impl Strategy<Value = Arch> {
    prop_oneof![
        (2usize..5, 2usize..5).prop_map(|(d, c)| Arch::Linear { input: vec![d], classes: c }),
        (2usize..5, 1usize..6, 2usize..5).prop_map(|(d, h, c)| Arch::Mlp {
            input: vec![d],
            hidden: vec![h],
            classes: c
        }),
        (1usize..3, 1usize..4, 2usize..4).prop_map(|(b, w, c)| Arch::ConvNet {
            input: [1, 8, 8],
            blocks: b,
            width: w,
            classes: c
        }),
    ]
}

fn probe_batch(arch: &Arch, seed: u64) -> Tensor {
    let mut shape = vec![3];
    shape.extend(arch.input_shape());
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&shape, (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    #[test]
    fn permuting_class_heads_permutes_logits(arch in arch_strategy(), seed in 0u64..1000, shift in 1usize..4) {
        let m = Model::new(arch.clone(), seed).unwrap();
        let c = m.classes();
        let perm: Vec<usize> = (0..c).map(|k| (k + shift) % c).collect();
        let params: Vec<(String, Tensor)> = m.params().iter().map(|(name, t)| {
            if !name.starts_with("fc.") {
                return (name.clone(), t.clone());
            }
            let row = t.len() / c;
            let data = perm.iter().flat_map(|&p| t.data()[p * row..(p + 1) * row].to_vec()).collect();
            (name.clone(), Tensor::new(t.shape(), data).unwrap())
        }).collect();
        let permuted = Model::from_params(arch.clone(), params).unwrap();
        let x = probe_batch(&arch, seed);
        let (a, b) = (m.forward(&x).unwrap(), permuted.forward(&x).unwrap());
        for r in 0..3 {
            for k in 0..c {
                prop_assert_eq!(b.data()[r * c + k].to_bits(), a.data()[r * c + perm[k]].to_bits());
            }
        }
    }

    #[test]
    fn flatten_unflatten_round_trips(arch in arch_strategy(), seed in 0u64..1000, last in any::<bool>()) {
        let m = Model::new(arch, seed).unwrap();
        let mask = if last { ParamMask::LastLayer } else { ParamMask::Full };
        let flat = m.flatten(&mask).unwrap();
        let expected: usize = m.params().iter().filter(|(n, _)| !last || n.starts_with("fc.")).map(|(_, t)| t.len()).sum();
        prop_assert_eq!(flat.len(), expected);
        let back = m.unflatten(&mask, flat.data()).unwrap();
        for ((n1, t1), (n2, t2)) in m.params().iter().zip(back.params()) {
            prop_assert_eq!(n1, n2);
            prop_assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn checkpoint_preserves_logits_bit_exactly(arch in arch_strategy(), seed in 0u64..1000) {
        let m = Model::new(arch.clone(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dsvc");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        prop_assert_eq!(back.arch(), m.arch());
        let x = probe_batch(&arch, seed ^ 7);
        prop_assert!(m.forward(&x).unwrap().bit_eq(&back.forward(&x).unwrap()));
        prop_assert_eq!(m.forward(&x).unwrap().len(), 3 * m.classes());
    }

    #[test]
    fn augmentations_keep_shape_and_range(seed in 0u64..1000, size in prop::sample::select(vec![8usize, 16]), points in any::<bool>()) {
        let data = if points { gen_blobs2d(2, 3, 4.0, seed).unwrap() } else { gen_glyphs(2, 3, size, 0.3, seed).unwrap() };
        let fam = AugmentFamily::for_features(data.feature_shape());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let a = fam.sample(&mut rng);
            if points {
                let jitter = matches!(a, Augmentation::Jitter { .. });
                prop_assert!(jitter);
            }
            let out = a.apply(data.features(), data.feature_shape().len(), 0).unwrap();
            prop_assert_eq!(out.shape(), data.features().shape());
            if !points {
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible(seed in 0u64..10_000, sigma in 0.0f64..0.5) {
        prop_assert_eq!(gen_glyphs(3, 4, 8, sigma, seed).unwrap().digest(), gen_glyphs(3, 4, 8, sigma, seed).unwrap().digest());
        prop_assert_eq!(gen_blobs2d(3, 4, 4.0, seed).unwrap().digest(), gen_blobs2d(3, 4, 4.0, seed).unwrap().digest());
        let d = gen_glyphs_with(&GlyphSpec { classes: 3, per_class: 2, size: 8, noise: vec![0.0, sigma, 1.0], seed }).unwrap();
        prop_assert!(d.labels().iter().all(|&l| l < 3));
        prop_assert!(d.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hinge_training_reaches_zero_loss_on_separable_data(seed in 0u64..1000) {
        let d = gen_blobs2d(2, 10, 6.0, seed).unwrap();
        let (rows, y) = (d.rows(), d.signed_labels().unwrap());
        prop_assume!(solve_hard_margin(&rows, &y, &SvmOptions::default()).is_ok());
        let w = train_hinge_linear(&rows, &y, 0.05, 20_000).unwrap();
        prop_assert_eq!(hinge_loss(&rows, &y, &w), 0.0);
    }
}

#[test]
fn blobs_feasibility_follows_separation() {
    let sep = gen_blobs2d(2, 20, 6.0, 0).unwrap();
    assert!(solve_hard_margin(&sep.rows(), &sep.signed_labels().unwrap(), &SvmOptions::default()).is_ok());
    let mixed = gen_blobs2d(2, 20, 0.0, 0).unwrap();
    let err = solve_hard_margin(&mixed.rows(), &mixed.signed_labels().unwrap(), &SvmOptions::default()).unwrap_err();
    assert_eq!(err.code(), "infeasible");
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn idx_fixture_loads_and_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    let pixels: Vec<u8> = (0..4 * 2 * 2).map(|v| (v * 17) as u8).collect();
    std::fs::write(&img, idx_bytes(0x803, &[4, 2, 2], &pixels)).unwrap();
    std::fs::write(&lab, idx_bytes(0x801, &[4], &[0, 1, 2, 1])).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    assert_eq!((d.len(), d.classes(), d.feature_shape()), (4, 3, &[1usize, 2, 2][..]));
    assert_eq!(d.features().data()[15], 255.0 / 255.0);

    // round trip through the writer
    let (img2, lab2) = (dir.path().join("img2"), dir.path().join("lab2"));
    write_idx(&d, &img2, &lab2).unwrap();
    assert_eq!(std::fs::read(&img2).unwrap(), std::fs::read(&img).unwrap());

    assert_eq!(load_idx(&lab, &lab).unwrap_err().code(), "bad-magic");
    std::fs::write(&lab2, idx_bytes(0x801, &[3], &[0, 1, 2])).unwrap();
    assert_eq!(load_idx(&img, &lab2).unwrap_err().code(), "count-mismatch");
    std::fs::write(&img2, idx_bytes(0x803, &[4, 2, 2], &pixels[..10])).unwrap();
    assert_eq!(load_idx(&img2, &lab).unwrap_err().code(), "truncated");
}

#[test]
fn convnet_fits_noisy_glyphs_quickly() {
    let data = gen_glyphs(3, 100, 16, 0.1, 0).unwrap();
    let m = Model::new(Arch::convnet([1, 16, 16], 3), 0).unwrap();
    let mut opt = Optimizer::adam(1e-3).unwrap().with_weight_decay(0.005);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        target_accuracy: Some(0.99),
        ..TrainConfig::default()
    };
    let (m, log) = train_classifier(&m, &data, &mut opt, &cfg).unwrap();
    // recorded golden: the first epoch already clears the target
    assert_eq!(log.len(), 1);
    assert!(accuracy(&m, &data).unwrap() >= 0.99, "{:?}", log.last());
}
