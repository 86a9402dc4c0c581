mod common;

use std::collections::{BTreeMap, HashSet};

use common::*;
use edgebin_core::data::{
    augment, decode_ppm, encode_ppm, load_image, resize_bilinear, save_image, split, split_sizes, AugmentConfig, Entry,
    Flip, Manifest, Source,
};
use edgebin_core::{Tensor, WasteClass};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn manifest(counts: &[(WasteClass, usize)]) -> Manifest {
    let entries = counts
        .iter()
        .flat_map(|&(c, n)| {
            (0..n).map(move |i| Entry {
                path: format!("{c}/{i:04}.ppm"),
                label: c,
                source: if i % 3 == 0 { Source::Collected } else { Source::Trashnet },
            })
        })
        .collect();
    Manifest::new(entries).unwrap()
}

fn trashnet() -> Manifest {
    use WasteClass::*;
    manifest(&[(Cardboard, 403), (Glass, 501), (Paper, 594), (Plastic, 482), (Metal, 410)])
}

#[test]
fn trashnet_test_split_is_238() {
    let m = trashnet();
    let a = split(&m, [0.72, 0.18, 0.10], 7).unwrap();
    assert_eq!(a.test.len(), 238);
    assert_eq!(a.train.len() + a.val.len() + a.test.len(), 2390);
    assert_eq!(a, split(&m, [0.72, 0.18, 0.10], 7).unwrap());
    assert_ne!(a.test, split(&m, [0.72, 0.18, 0.10], 8).unwrap().test);
}

#[test]
fn empty_class_is_rejected() {
    let counts: BTreeMap<_, _> = [(WasteClass::Glass, 3), (WasteClass::Hand, 0)].into_iter().collect();
    assert!(split_sizes(&counts, [0.7, 0.15, 0.15]).is_err());
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = trashnet();
    m.save(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), m);
}

#[test]
fn all_black_image_is_zero() {
    let mut bytes = b"P6\n3 2\n255\n".to_vec();
    bytes.extend([0u8; 18]);
    let t = decode_ppm(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 3, 3]);
    assert!(t.as_f32().unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn image_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
    let img = Tensor::from_f32(vec![4, 5, 3], data).unwrap();
    save_image(&img, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
}

#[test]
fn resize_matches_closed_form() {
    let img = uniform(&mut rng(2), &[7, 5, 3], 0.0, 1.0);
    let got = resize_bilinear(&img, (9, 4)).unwrap();
    assert_eq!(got.shape(), &[4, 9, 3]);
    let want = bilinear(&Nhwc { data: img.as_f32().unwrap(), h: 7, w: 5, c: 3 }, 4, 9);
    for (g, w) in got.as_f32().unwrap().iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-6);
    }
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 100,
        rng_seed: RngSeed::Fixed(17),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn split_is_an_exact_stratified_partition(
        counts in prop::collection::vec(1usize..60, 1..8),
        raw in prop::array::uniform3(0.0f64..1.0),
        seed: u64,
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-3);
        let ratios = raw.map(|r| r / total);
        let counts: Vec<(WasteClass, usize)> = counts.iter().enumerate().take(7).map(|(i, &n)| (WasteClass::ALL[i], n)).collect();
        let m = manifest(&counts);
        let s = split(&m, ratios, seed).unwrap();
        let mut seen = HashSet::new();
        for part in [&s.train, &s.val, &s.test] {
            for e in &part.entries {
                prop_assert!(seen.insert(e.path.clone()));
            }
        }
        prop_assert_eq!(seen.len(), m.len());
        for &(class, n) in &counts {
            for (part, r) in [(&s.train, ratios[0]), (&s.val, ratios[1]), (&s.test, ratios[2])] {
                let k = part.entries.iter().filter(|e| e.label == class).count();
                prop_assert!((k as f64 - n as f64 * r).abs() < 1.0);
            }
        }
        prop_assert_eq!(s, split(&m, ratios, seed).unwrap());
    }

    #[test]
    fn augmentation_stays_in_range_and_repeats(
        h in 2usize..12, w in 2usize..12, seed: u64, draw: u64,
        rot in 0.0f64..180.0, shift in 0.0f64..1.0, zoom in 0.0f64..1.0, shear in 0.0f64..1.0,
    ) {
        let img = uniform(&mut rng(seed), &[h, w, 3], 0.0, 1.0);
        let cfg = AugmentConfig {
            flip: Flip::Hv,
            max_rotation_deg: rot,
            max_translation_frac: shift,
            max_zoom_frac: zoom,
            max_shear_frac: shear,
            seed,
        };
        prop_assert!(cfg.validate().is_ok());
        let a = augment(&img, &cfg, draw).unwrap();
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.as_f32().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &augment(&img, &cfg, draw).unwrap());
        let t = cfg.sample(draw);
        prop_assert!(t.rotation_deg.abs() <= rot && t.shear.abs() <= shear);
        prop_assert!((t.zoom - 1.0).abs() <= zoom);
        prop_assert!(t.translate.0.abs() <= shift && t.translate.1.abs() <= shift);
    }

    #[test]
    fn eight_bit_pixmaps_round_trip(h in 1usize..10, w in 1usize..10, bytes in prop::collection::vec(any::<u8>(), 300)) {
        let data: Vec<f32> = bytes.iter().cycle().take(h * w * 3).map(|&b| b as f32 / 255.0).collect();
        let img = Tensor::from_f32(vec![h, w, 3], data).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
    }
}
