mod common;

use common::*;
use edgebin_core::graph::Graph;
use edgebin_core::passes::{
    check_target, fold_constants, fuse_activation, fuse_conv_bn, optimize, replace_ops, Pass, PassError, TargetProfile,
    Violation,
};
use edgebin_core::zoo::{build, random_graph, Family, ModelSpec};
use edgebin_core::{plan, ExecPath, Op, OpKind};

fn k210_any_kernel() -> TargetProfile {
    TargetProfile {
        allowed_kernel_sizes: None,
        ..TargetProfile::k210()
    }
}

/// Max output deviation between two graphs over `n` seeded inputs.
fn deviation(a: &Graph, b: &Graph, n: usize, seed: u64, path: ExecPath) -> f32 {
    let (pa, pb) = (plan(a, path).unwrap(), plan(b, path).unwrap());
    let shape = a.input_shape().unwrap().to_vec();
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            let (ya, yb) = (pa.run(&x).unwrap(), pb.run(&x).unwrap());
            max_abs_diff(ya.as_f32().unwrap(), yb.as_f32().unwrap())
        })
        .fold(0.0, f32::max)
}

/// Apply the pipeline one pass at a time and check each step.
fn check_each_pass(g: &Graph, profile: &TargetProfile, inputs: usize, path: ExecPath) {
    let mut cur = annotate(g);
    for pass in Pass::PIPELINE {
        let (next, report) = optimize(&cur, &[pass], profile).unwrap();
        let r = &report[0];
        assert_eq!(r.nodes_before + r.added - r.removed, r.nodes_after, "{pass} counts");
        let d = deviation(&cur, &next, inputs, 1234, path);
        assert!(d <= 1e-5, "{} after {pass}: {d}", g.metadata().name);
        cur = next;
    }
}

#[test]
fn every_pass_preserves_random_graphs() {
    for seed in 0..24 {
        check_each_pass(&random_graph(seed), &TargetProfile::k210(), 100, ExecPath::Reference);
    }
}

#[test]
fn every_pass_preserves_small_mobilenets() {
    let v1 = build(&ModelSpec::new(Family::MobilenetV1, 0.25, 96, 96, 7), 2).unwrap();
    check_each_pass(&v1, &TargetProfile::k210(), 100, ExecPath::Optimized);
    let v3 = build(&ModelSpec::new(Family::MobilenetV3Small, 1.0, 96, 96, 7), 2).unwrap();
    check_each_pass(&v3, &k210_any_kernel(), 100, ExecPath::Optimized);
}

#[test]
fn pipeline_is_idempotent() {
    let mut corpus: Vec<Graph> = (0..24).map(random_graph).collect();
    corpus.push(build(&ModelSpec::new(Family::MobilenetV1, 0.5, 128, 128, 7), 1).unwrap());
    corpus.push(build(&ModelSpec::new(Family::MobilenetV3Large, 1.0, 96, 96, 7), 1).unwrap());
    for g in corpus {
        let profile = k210_any_kernel();
        let (once, _) = optimize(&annotate(&g), &Pass::PIPELINE, &profile).unwrap();
        let (twice, reports) = optimize(&once, &Pass::PIPELINE, &profile).unwrap();
        assert_eq!(once, twice, "{}", g.metadata().name);
        assert!(reports.iter().all(|r| r.removed == 0 && r.added == 0));
    }
}

#[test]
fn batch_norms_after_convolutions_are_all_fused() {
    for family in [Family::MobilenetV1, Family::MobilenetV3Large, Family::MobilenetV3Small] {
        let g = annotate(&build(&ModelSpec::new(family, 1.0, 96, 96, 7), 4).unwrap());
        let bns = g.nodes().iter().filter(|n| n.kind() == OpKind::BatchNorm).count();
        assert!(bns > 0);
        let (f, report) = fuse_conv_bn(&g).unwrap();
        assert_eq!(f.nodes().iter().filter(|n| n.kind() == OpKind::BatchNorm).count(), 0);
        assert_eq!(report.fused, bns);
    }
}

#[test]
fn activation_fusion_removes_each_standalone_activation() {
    let g = annotate(&build(&ModelSpec::new(Family::MobilenetV1, 0.75, 128, 128, 7), 4).unwrap());
    let (g, _) = fuse_conv_bn(&g).unwrap();
    let standalone = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::ReLU | Op::ReLU6 | Op::HardSwish))
        .count();
    let (f, report) = fuse_activation(&g).unwrap();
    assert_eq!(g.nodes().len() - f.nodes().len(), standalone);
    assert_eq!(report.fused, standalone);
    assert!(deviation(&g, &f, 3, 8, ExecPath::Optimized) <= 1e-6);
}

#[test]
fn dense_head_becomes_seven_filter_pointwise_conv() {
    let g = annotate(&build(&ModelSpec::new(Family::MobilenetV1, 1.0, 64, 64, 7), 6).unwrap());
    let (r, _) = replace_ops(&g, &TargetProfile::k210()).unwrap();
    assert!(!r.nodes().iter().any(|n| matches!(n.op, Op::Dense { .. } | Op::GlobalAvgPool)));
    let head = r.nodes().iter().rev().find(|n| n.kind() == OpKind::Conv2D).unwrap();
    assert_eq!(head.op.conv_attrs().unwrap().kernel, [1, 1]);
    assert_eq!(r.weight(head.inputs[1]).unwrap().shape(), &[1, 1, 1024, 7]);
    assert!(r.nodes().iter().any(|n| n.kind() == OpKind::Softmax && n.host_fallback));
    assert!(deviation(&g, &r, 5, 9, ExecPath::Optimized) <= 1e-6);
}

#[test]
fn constant_branches_fold_exactly() {
    let mut folded_any = false;
    for seed in 0..24 {
        let g = annotate(&random_graph(seed));
        let (f, report) = fold_constants(&g).unwrap();
        folded_any |= report.fused > 0;
        for n in f.nodes() {
            if !n.inputs.is_empty() {
                assert!(!n.inputs.iter().all(|&i| f.is_const(i)), "{} still foldable", n.name);
            }
        }
        assert!(deviation(&g, &f, 100, seed, ExecPath::Reference) <= 1e-6);
    }
    assert!(folded_any);
}

#[test]
fn mobilenet_v3_cannot_target_k210() {
    let g = annotate(&build(&ModelSpec::new(Family::MobilenetV3Large, 1.0, 224, 224, 7), 1).unwrap());
    let first_5x5 = g
        .nodes()
        .iter()
        .find(|n| n.op.conv_attrs().is_some_and(|a| a.kernel == [5, 5]))
        .unwrap();
    assert_eq!(first_5x5.kind(), OpKind::DepthwiseConv2D);
    match optimize(&g, &Pass::PIPELINE, &TargetProfile::k210()) {
        Err(PassError::Unreplaceable { node, .. }) => assert_eq!(node, first_5x5.id),
        other => panic!("expected Unreplaceable, got {other:?}"),
    }
    let report = check_target(&g, &TargetProfile::k210());
    assert!(!report.fits);
    assert!(report.violations.iter().any(|v| matches!(v, Violation::ModelSize { .. })));
}

#[test]
fn oversized_input_violates_k210() {
    let g = annotate(&build(&ModelSpec::new(Family::MobilenetV1, 0.25, 352, 288, 7), 1).unwrap());
    let report = check_target(&g, &TargetProfile::k210());
    assert!(report
        .violations
        .iter()
        .any(|v| matches!(v, Violation::InputResolution { width: 352, height: 288, .. })));
}
