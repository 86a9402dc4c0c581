//! Browser bindings. Each export takes plain numbers or CSV text and returns
//! a JSON string for the page script to draw. The `*_json` functions hold the
//! logic and are callable natively.

use edgebin_core::binctl::{read_trace, step, Action, BinState, ControllerConfig};
use edgebin_core::data::splitmix64;
use edgebin_core::power::{feasibility, required_irradiation, IrradiationSeries, PowerProfile, SolarRig};
use edgebin_core::quant::quantize_weight;
use edgebin_core::tensor::QuantParams;
use edgebin_core::Tensor;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

pub type Result<T> = std::result::Result<T, String>;

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Monthly energy and the feasibility verdict. An empty `irradiation_csv`
/// uses the built-in synthetic year.
pub fn energy_curve_json(
    area_cm2: f64,
    efficiency: f64,
    battery_wh: f64,
    round_trip: f64,
    load_w: f64,
    irradiation_csv: &str,
) -> Result<String> {
    if load_w.is_nan() || load_w <= 0.0 {
        return Err(format!("load must be positive, got {load_w} W"));
    }
    let mut rig = SolarRig::from_cm2(area_cm2, efficiency, battery_wh).map_err(|e| e.to_string())?;
    rig.round_trip = round_trip;
    rig.validate().map_err(|e| e.to_string())?;
    let series = if irradiation_csv.trim().is_empty() {
        IrradiationSeries::synthetic()
    } else {
        IrradiationSeries::from_csv(irradiation_csv.as_bytes()).map_err(|e| e.to_string())?
    };
    let profile = PowerProfile::new("load", load_w, 0.0).map_err(|e| e.to_string())?;
    let report = feasibility(&rig, &series, &profile).map_err(|e| e.to_string())?;
    Ok(to_json(&json!({
        "report": report,
        "required_h": required_irradiation(&rig, load_w),
    })))
}

/// Seeded Gaussian-ish weights with a few outliers.
fn sample_weights(n: usize, spread: f32, outlier: f32, seed: u64) -> Vec<f32> {
    let mut state = seed;
    let mut unit = || {
        state = splitmix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n)
        .map(|i| {
            // sum of four uniforms, centred and scaled to unit variance
            let g = ((0..4).map(|_| unit()).sum::<f64>() - 2.0) * 3f64.sqrt();
            let v = g as f32 * spread;
            if outlier > 0.0 && i % 97 == 13 {
                v.signum() * outlier
            } else {
                v
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SchemeError {
    scale: f32,
    zero_point: i32,
    max_abs_error: f32,
    rms_error: f32,
}

fn errors(values: &[f32], restored: &[f32]) -> (f32, f32) {
    let mut max = 0.0f32;
    let mut sq = 0.0f64;
    for (a, b) in values.iter().zip(restored) {
        let d = (a - b).abs();
        max = max.max(d);
        sq += f64::from(d) * f64::from(d);
    }
    (max, (sq / values.len().max(1) as f64).sqrt() as f32)
}

fn with_params(values: &[f32], q: QuantParams) -> (SchemeError, Vec<i64>) {
    let restored: Vec<f32> = values.iter().map(|&v| q.dequantize(q.quantize(v))).collect();
    let (max_abs_error, rms_error) = errors(values, &restored);
    let mut hist = vec![0i64; 256];
    for &v in values {
        hist[(i32::from(q.quantize(v)) + 128) as usize] += 1;
    }
    let e = SchemeError {
        scale: q.scale,
        zero_point: q.zero_point,
        max_abs_error,
        rms_error,
    };
    (e, hist)
}

/// Compare symmetric i8, asymmetric i8 and f16 storage of a weight tensor.
/// `values_csv` overrides the generated weights when non-empty.
pub fn quantization_json(n: usize, spread: f32, outlier: f32, seed: u64, values_csv: &str) -> Result<String> {
    let values: Vec<f32> = if values_csv.trim().is_empty() {
        if n == 0 || n > 1_000_000 {
            return Err(format!("count must be in 1..=1000000, got {n}"));
        }
        sample_weights(n, spread, outlier, seed)
    } else {
        values_csv
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|e| format!("{s:?}: {e}")))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err("need at least one finite value".into());
    }
    let t = Tensor::from_f32(vec![values.len()], values.clone()).map_err(|e| e.to_string())?;
    let (sym_t, degenerate) = quantize_weight(&t);
    let sym_q = sym_t.quant().expect("quantized tensor has params");
    let (symmetric, sym_hist) = with_params(&values, sym_q);
    let (min, max) = values.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let asym_q = QuantParams::asymmetric(min, max).unwrap_or(sym_q);
    let (asymmetric, asym_hist) = with_params(&values, asym_q);
    let halves: Vec<f32> = values.iter().map(|&v| half::f16::from_f32(v).to_f32()).collect();
    let (f16_max, f16_rms) = errors(&values, &halves);
    let bytes = values.len();
    Ok(to_json(&json!({
        "count": values.len(),
        "min": min,
        "max": max,
        "degenerate": degenerate,
        "symmetric": symmetric,
        "symmetric_histogram": sym_hist,
        "asymmetric": asymmetric,
        "asymmetric_histogram": asym_hist,
        "f16": { "max_abs_error": f16_max, "rms_error": f16_rms },
        "bytes": { "f32": 4 * bytes, "f16": 2 * bytes, "i8": bytes },
    })))
}

/// Replay an `event,label,confidence` trace, recording the state after every
/// event.
pub fn bin_simulation_json(trace_csv: &str, stability_window: u32, confidence_threshold: f32, sort_timeout: u32) -> Result<String> {
    let cfg = ControllerConfig {
        stability_window,
        confidence_threshold,
        sort_timeout,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let events = read_trace(trace_csv.as_bytes()).map_err(|e| e.to_string())?;
    let mut state = BinState::Idle;
    let mut steps = Vec::with_capacity(events.len());
    for (i, ev) in events.iter().enumerate() {
        let (next, actions, error) = match step(state, *ev, &cfg) {
            Ok((next, actions)) => (next, actions, None),
            Err(e) => (state, Vec::new(), Some(e.to_string())),
        };
        let actions: Vec<String> = actions
            .iter()
            .map(|a| match a {
                Action::OpenDoor(c) => format!("open {c}"),
                Action::Alarm => "alarm".into(),
            })
            .collect();
        steps.push(json!({
            "index": i,
            "event": ev,
            "state": next,
            "label": next.to_string(),
            "actions": actions,
            "error": error,
        }));
        state = next;
    }
    Ok(to_json(&json!({ "config": cfg, "steps": steps, "final_state": state })))
}

#[wasm_bindgen]
pub fn energy_curve(
    area_cm2: f64,
    efficiency: f64,
    battery_wh: f64,
    round_trip: f64,
    load_w: f64,
    irradiation_csv: &str,
) -> std::result::Result<String, JsError> {
    energy_curve_json(area_cm2, efficiency, battery_wh, round_trip, load_w, irradiation_csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn quantization(n: usize, spread: f32, outlier: f32, seed: u32, values_csv: &str) -> std::result::Result<String, JsError> {
    quantization_json(n, spread, outlier, u64::from(seed), values_csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn bin_simulation(
    trace_csv: &str,
    stability_window: u32,
    confidence_threshold: f32,
    sort_timeout: u32,
) -> std::result::Result<String, JsError> {
    bin_simulation_json(trace_csv, stability_window, confidence_threshold, sort_timeout).map_err(|e| JsError::new(&e))
}
