mod common;

use common::*;
use edgebin_core::format;
use edgebin_core::graph::{validate, GraphBuilder};
use edgebin_core::passes::{check_target, optimize, Pass, TargetProfile, MB};
use edgebin_core::quant::{calibrate, quantize, Scheme};
use edgebin_core::zoo::{build, estimate_file_size, head_param_count, param_count, Family, ModelSpec};
use edgebin_core::{run, DType, ExecPath, Op, OpKind, Tensor};

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= target * tol
}

#[test]
fn v3_parameter_counts_and_sizes() {
    let large = build(&ModelSpec::new(Family::MobilenetV3Large, 1.0, 224, 224, 7), 0).unwrap();
    let small = build(&ModelSpec::new(Family::MobilenetV3Small, 1.0, 224, 224, 7), 0).unwrap();
    assert_eq!(param_count(&large), 3_003_079);
    assert_eq!(param_count(&small), 943_159);
    assert!(within(param_count(&large) as f64, 3.0e6, 0.05));
    assert!(within(param_count(&small) as f64, 0.94e6, 0.05));
    let (lf, sf) = (estimate_file_size(&large, DType::F32), estimate_file_size(&small, DType::F32));
    assert!(within(lf as f64, 11.7 * MB as f64, 0.10), "{lf}");
    assert!(within(sf as f64, 3.87 * MB as f64, 0.10), "{sf}");
    assert_eq!(lf, format::encode(&large).unwrap().len());
    let half = estimate_file_size(&large, DType::F16);
    let overhead = lf - large.weight_bytes();
    assert_eq!(half, lf / 2 + overhead / 2 + overhead % 2);
}

#[test]
fn dense_768_to_7_head() {
    let mut b = GraphBuilder::new("head");
    let x = b.input("x", &[1, 768]);
    let d = b.dense("d", x, Tensor::zeros(vec![768, 7]), Some(Tensor::zeros(vec![7])));
    b.output(d);
    let g = b.finish();
    assert_eq!(param_count(&g), 5383);
    assert_eq!(head_param_count(&g), 5383);
}

#[test]
fn v1_uses_only_small_kernels() {
    let g = build(&ModelSpec::new(Family::MobilenetV1, 0.75, 224, 224, 7), 0).unwrap();
    for n in g.nodes() {
        if let Some(a) = n.op.conv_attrs() {
            assert!(a.kernel == [1, 1] || a.kernel == [3, 3], "{}", n.name);
        }
    }
    let convs = g.nodes().iter().filter(|n| n.kind() == OpKind::DepthwiseConv2D).count();
    assert_eq!(convs, 13);
}

#[test]
fn width_multiplier_grows_parameters() {
    for family in [Family::MobilenetV1, Family::MobilenetV3Large, Family::MobilenetV3Small] {
        let counts: Vec<usize> = [0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&a| param_count(&build(&ModelSpec::new(family, a, 96, 96, 7), 0).unwrap()))
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{family}: {counts:?}");
    }
    let body = |a| {
        let g = build(&ModelSpec::new(Family::MobilenetV1, a, 96, 96, 7), 0).unwrap();
        (param_count(&g) - head_param_count(&g)) as f64
    };
    let ratio = body(1.0) / body(0.5);
    assert!((3.5..=4.1).contains(&ratio), "{ratio}");
}

#[test]
fn every_family_builds_and_classifies() {
    for family in [Family::MobilenetV1, Family::MobilenetV3Large, Family::MobilenetV3Small] {
        for alpha in [0.25, 1.0] {
            let spec = ModelSpec::new(family, alpha, 64, 64, 7);
            let g = build(&spec, 8).unwrap();
            assert!(validate(&g).is_empty());
            let x = uniform(&mut rng(1), &[1, 64, 64, 3], 0.0, 1.0);
            let y = run(&annotate(&g), &x, ExecPath::Optimized).unwrap();
            assert_eq!(y.shape(), &[1, 7]);
            let p = y.as_f32().unwrap();
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            assert_eq!(g.metadata().class_labels.len(), 7);
        }
    }
}

#[test]
fn resize_front_accepts_camera_frames() {
    let spec = ModelSpec::new(Family::MobilenetV3Small, 0.25, 512, 384, 7).with_resize(224, 224);
    let g = annotate(&build(&spec, 0).unwrap());
    assert_eq!(g.input_shape().unwrap(), &[1, 384, 512, 3]);
    assert!(matches!(g.nodes()[1].op, Op::Resize { size: [224, 224] }));
}

#[test]
fn same_seed_same_blob() {
    let spec = ModelSpec::new(Family::MobilenetV3Small, 0.5, 96, 96, 7);
    let a = format::encode(&build(&spec, 77).unwrap()).unwrap();
    let b = format::encode(&build(&spec, 77).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn int8_v1_075_fits_k210() {
    let g = annotate(&build(&ModelSpec::new(Family::MobilenetV1, 0.75, 224, 224, 7), 1).unwrap());
    let (opt, _) = optimize(&g, &Pass::PIPELINE, &TargetProfile::k210()).unwrap();
    let calib: Vec<Tensor> = (0..2).map(|s| uniform(&mut rng(s), &[1, 224, 224, 3], 0.0, 1.0)).collect();
    let stats = calibrate(&opt, &calib).unwrap();
    let (q, _) = quantize(&opt, Some(&stats), Scheme::I8).unwrap();
    let report = check_target(&q, &TargetProfile::k210());
    assert!(report.fits, "{:?}", report.violations);
    assert!(report.weight_bytes < 6 * MB);
    assert!(within(report.weight_bytes as f64, param_count(&opt) as f64, 0.05));
}
