use edgebin_web::{bin_simulation_json, energy_curve_json, quantization_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn energy_curve_matches_the_roof_panel() {
    let v = parse(energy_curve_json(1600.0, 0.22, 48.0, 1.0, 0.89, "").unwrap());
    let r = &v["report"];
    assert_eq!(r["months"].as_array().unwrap().len(), 12);
    assert_eq!(r["feasible"], true);
    assert!((r["worst_sustainable_w"].as_f64().unwrap() - 1.9).abs() < 1e-3);
    let need = v["required_h"].as_f64().unwrap();
    let v = parse(energy_curve_json(1600.0, 0.22, 48.0, 1.0, 0.89, &format!("month,h\nA,{need}\n")).unwrap());
    assert_eq!(v["report"]["feasible"], true);
    let v = parse(energy_curve_json(1600.0, 0.22, 48.0, 1.0, 0.89, &format!("month,h\nA,{}\n", need * 0.99)).unwrap());
    assert_eq!(v["report"]["feasible"], false);
    assert!(energy_curve_json(1600.0, 1.4, 48.0, 1.0, 0.89, "").is_err());
    assert!(energy_curve_json(1600.0, 0.22, 48.0, 1.0, 0.0, "").is_err());
}

#[test]
fn quantization_errors_are_bounded_by_half_a_step() {
    let v = parse(quantization_json(5000, 0.1, 0.0, 3, "").unwrap());
    for scheme in ["symmetric", "asymmetric"] {
        let s = &v[scheme];
        let half = s["scale"].as_f64().unwrap() / 2.0;
        assert!(s["max_abs_error"].as_f64().unwrap() <= half * 1.0001, "{scheme}: {s}");
        let hist: i64 = v[format!("{scheme}_histogram")].as_array().unwrap().iter().map(|c| c.as_i64().unwrap()).sum();
        assert_eq!(hist, 5000);
    }
    assert_eq!(v["symmetric"]["zero_point"], 0);
    assert!(v["f16"]["max_abs_error"].as_f64().unwrap() < v["symmetric"]["max_abs_error"].as_f64().unwrap());
    assert_eq!(v["bytes"]["i8"], 5000);
    assert_eq!(quantization_json(5000, 0.1, 0.0, 3, "").unwrap(), quantization_json(5000, 0.1, 0.0, 3, "").unwrap());
}

#[test]
fn outliers_coarsen_the_step() {
    let clean = parse(quantization_json(2000, 0.05, 0.0, 1, "").unwrap());
    let spiky = parse(quantization_json(2000, 0.05, 2.0, 1, "").unwrap());
    assert!(spiky["symmetric"]["scale"].as_f64().unwrap() > 10.0 * clean["symmetric"]["scale"].as_f64().unwrap());
    assert!(spiky["symmetric"]["rms_error"].as_f64().unwrap() > clean["symmetric"]["rms_error"].as_f64().unwrap());
}

#[test]
fn explicit_values_and_constant_tensors() {
    let v = parse(quantization_json(0, 0.0, 0.0, 0, "-1, 0.5, 1").unwrap());
    assert_eq!(v["count"], 3);
    assert!((v["symmetric"]["scale"].as_f64().unwrap() - 1.0 / 127.0).abs() < 1e-7);
    let v = parse(quantization_json(0, 0.0, 0.0, 0, "0 0 0").unwrap());
    assert_eq!(v["degenerate"], true);
    assert!(quantization_json(0, 0.0, 0.0, 0, "").is_err());
    assert!(quantization_json(0, 0.0, 0.0, 0, "1,x").is_err());
}

#[test]
fn bin_timeline_records_every_event() {
    let trace = "classified,hand,0.2\nclassified,glass,0.9\nclassified,glass,0.9\nclassified,glass,0.9\ntick,,\nsort_complete,,\nsort_complete,,\n";
    let v = parse(bin_simulation_json(trace, 3, 0.6, 50).unwrap());
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 7);
    assert_eq!(steps[0]["state"]["state"], "hand_hold");
    assert_eq!(steps[1]["state"]["state"], "observing");
    assert_eq!(steps[3]["actions"], serde_json::json!(["open glass"]));
    assert_eq!(steps[4]["state"]["elapsed"], 1);
    assert_eq!(steps[5]["state"]["state"], "idle");
    assert!(steps[6]["error"].is_string());
    assert!(bin_simulation_json(trace, 0, 0.6, 50).is_err());
    assert!(bin_simulation_json("jump,,\n", 3, 0.6, 50).is_err());
}
