//! Latency, throughput and memory measurement.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::exec::{plan_with, ExecError, ExecPath};
use crate::graph::{infer_shapes, Graph};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("need at least 10 iterations and 1 warmup run (got {iterations}, {warmup})")]
    TooFewRuns { iterations: usize, warmup: usize },
    #[error("output of iteration {0} differs from the first run")]
    NonDeterministic(usize),
    #[error("reports were measured on different input shapes: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Latency {
    /// Summary of per-run wall times in seconds.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Latency {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.50),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub path: ExecPath,
    pub parallel: bool,
    pub input_shape: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    /// Seconds.
    pub latency: Latency,
    pub ips: f64,
    pub weight_bytes: usize,
    pub peak_activation_bytes: usize,
}

/// Inferences per second for a mean latency in seconds.
pub fn ips_from_latency(mean_s: f64) -> f64 {
    1.0 / mean_s
}

/// Time `iterations` runs of `graph` on `input` after `warmup` untimed runs.
/// Every timed output must equal the first bit for bit.
pub fn measure(
    graph: &Graph,
    input: &Tensor,
    path: ExecPath,
    iterations: usize,
    warmup: usize,
    parallel: bool,
) -> Result<BenchReport, BenchError> {
    if iterations < 10 || warmup < 1 {
        return Err(BenchError::TooFewRuns { iterations, warmup });
    }
    let annotated;
    let g = if graph.nodes().iter().all(|n| n.shape.is_some()) {
        graph
    } else {
        annotated = infer_shapes(graph).map_err(ExecError::from)?;
        &annotated
    };
    let p = plan_with(g, path, parallel)?;
    let mut reference = None;
    for _ in 0..warmup {
        reference = Some(p.run(input)?);
    }
    let reference = reference.expect("warmup >= 1");
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let t0 = Instant::now();
        let out = p.run(input)?;
        samples.push(t0.elapsed().as_secs_f64());
        if out.to_le_bytes() != reference.to_le_bytes() {
            return Err(BenchError::NonDeterministic(i));
        }
    }
    let latency = Latency::from_samples(&samples);
    Ok(BenchReport {
        model: g.metadata().name.clone(),
        path,
        parallel: p.is_parallel(),
        input_shape: input.shape().to_vec(),
        iterations,
        warmup,
        ips: ips_from_latency(latency.mean),
        latency,
        weight_bytes: g.weight_bytes(),
        peak_activation_bytes: p.peak_activation_bytes(),
    })
}

/// Wall time of one closure call, for preprocessing stages.
pub fn time<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `a.mean / b.mean`; above 1 means `b` is faster.
    pub speedup: f64,
    /// `b.ips / a.ips`.
    pub ips_ratio: f64,
}

pub fn compare(a: &BenchReport, b: &BenchReport) -> Result<Comparison, BenchError> {
    if a.input_shape != b.input_shape {
        return Err(BenchError::ShapeMismatch(a.input_shape.clone(), b.input_shape.clone()));
    }
    Ok(Comparison {
        speedup: a.latency.mean / b.latency.mean,
        ips_ratio: b.ips / a.ips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weight_bytes: usize,
    pub peak_activation_bytes: usize,
}

pub fn memory_estimate(graph: &Graph) -> Result<MemoryEstimate, ExecError> {
    let annotated;
    let g = if graph.nodes().iter().all(|n| n.shape.is_some()) {
        graph
    } else {
        annotated = infer_shapes(graph)?;
        &annotated
    };
    let p = plan_with(g, ExecPath::Reference, false)?;
    Ok(MemoryEstimate {
        weight_bytes: g.weight_bytes(),
        peak_activation_bytes: p.peak_activation_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mean: f64) -> BenchReport {
        BenchReport {
            model: "m".into(),
            path: ExecPath::Reference,
            parallel: false,
            input_shape: vec![1, 8, 8, 3],
            iterations: 10,
            warmup: 1,
            latency: Latency {
                mean,
                p50: mean,
                p95: mean,
            },
            ips: ips_from_latency(mean),
            weight_bytes: 0,
            peak_activation_bytes: 0,
        }
    }

    #[test]
    fn latency_to_ips() {
        assert!((ips_from_latency(0.066) - 15.15).abs() < 0.005);
        assert!((ips_from_latency(0.025) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn compare_relations() {
        let a = report(1.0 / 13.0);
        let b = report(1.0 / 40.0);
        let c = compare(&a, &b).unwrap();
        assert!((c.ips_ratio - 3.0769).abs() < 1e-3);
        assert!((c.speedup * compare(&b, &a).unwrap().speedup - 1.0).abs() < 1e-12);
        assert_eq!(compare(&a, &a).unwrap().speedup, 1.0);
        let mut d = report(1.0);
        d.input_shape = vec![1];
        assert!(matches!(compare(&a, &d), Err(BenchError::ShapeMismatch(..))));
    }

    #[test]
    fn percentiles_are_ordered() {
        let l = Latency::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0, 9.0, 7.0, 8.0, 6.0, 10.0]);
        assert_eq!(l.mean, 5.5);
        assert_eq!(l.p50, 5.0);
        assert_eq!(l.p95, 10.0);
    }
}
