//! Battery life and solar budget arithmetic.
//!
//! A panel of area `A` (m²) and efficiency `r` under a daily irradiation `H`
//! (Wh/m²/day) yields `E = A * r * H` Wh per day, which can sustain an average
//! load of `E / 24` W.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

/// Bundled twelve-month series with made-up values (November lowest).
pub const SYNTHETIC_IRRADIATION_CSV: &str = include_str!("../data/irradiation_synthetic.csv");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PowerError {
    #[error("power draw must be positive")]
    ZeroDraw,
    #[error("irradiation series is empty")]
    EmptySeries,
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("irradiation file: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub device: String,
    pub active_w: f64,
    pub standby_w: f64,
}

impl PowerProfile {
    pub fn new(device: impl Into<String>, active_w: f64, standby_w: f64) -> Result<Self, PowerError> {
        if !(standby_w >= 0.0 && active_w >= standby_w) {
            return Err(PowerError::Invalid(format!(
                "need 0 <= standby ({standby_w}) <= active ({active_w})"
            )));
        }
        Ok(PowerProfile {
            device: device.into(),
            active_w,
            standby_w,
        })
    }

    /// The K210 board running the classifier; it boots in seconds and so has
    /// no standby draw.
    pub fn k210() -> Self {
        PowerProfile {
            device: "k210".into(),
            active_w: 0.89,
            standby_w: 0.0,
        }
    }

    /// Jetson Nano at 5 W mode with MobileNet V3 Large loaded.
    pub fn jetson_nano() -> Self {
        PowerProfile {
            device: "jetson_nano".into(),
            active_w: 4.698,
            standby_w: 3.97,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthSample {
    pub month: String,
    pub h: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IrradiationSeries {
    pub samples: Vec<MonthSample>,
}

impl IrradiationSeries {
    pub fn new(samples: Vec<MonthSample>) -> Result<Self, PowerError> {
        if let Some(s) = samples.iter().find(|s| !(s.h >= 0.0 && s.h.is_finite())) {
            return Err(PowerError::Invalid(format!("irradiation {} for {}", s.h, s.month)));
        }
        Ok(IrradiationSeries { samples })
    }

    /// Read `month,h` rows; `#` starts a comment line.
    pub fn from_csv(reader: impl Read) -> Result<Self, PowerError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let samples = rdr
            .deserialize()
            .collect::<Result<Vec<MonthSample>, _>>()
            .map_err(|e| PowerError::Csv(e.to_string()))?;
        IrradiationSeries::new(samples)
    }

    pub fn synthetic() -> Self {
        IrradiationSeries::from_csv(SYNTHETIC_IRRADIATION_CSV.as_bytes()).expect("bundled series parses")
    }

    pub fn scaled(&self, k: f64) -> Self {
        IrradiationSeries {
            samples: self
                .samples
                .iter()
                .map(|s| MonthSample {
                    month: s.month.clone(),
                    h: s.h * k,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarRig {
    pub area_m2: f64,
    pub efficiency: f64,
    pub battery_wh: f64,
    /// Fraction of harvested energy that survives the battery; 1 is ideal.
    #[serde(default = "one")]
    pub round_trip: f64,
}

fn one() -> f64 {
    1.0
}

impl SolarRig {
    pub fn new(area_m2: f64, efficiency: f64, battery_wh: f64) -> Result<Self, PowerError> {
        let rig = SolarRig {
            area_m2,
            efficiency,
            battery_wh,
            round_trip: 1.0,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn from_cm2(area_cm2: f64, efficiency: f64, battery_wh: f64) -> Result<Self, PowerError> {
        SolarRig::new(area_cm2 / 10_000.0, efficiency, battery_wh)
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        if !(self.area_m2 > 0.0) {
            return Err(PowerError::Invalid(format!("panel area {} m²", self.area_m2)));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(PowerError::Invalid(format!("efficiency {}", self.efficiency)));
        }
        if !(0.0..=1.0).contains(&self.round_trip) {
            return Err(PowerError::Invalid(format!("round-trip factor {}", self.round_trip)));
        }
        if !(self.battery_wh >= 0.0) {
            return Err(PowerError::Invalid(format!("battery {} Wh", self.battery_wh)));
        }
        Ok(())
    }
}

pub fn battery_life_hours(capacity_wh: f64, draw_w: f64) -> Result<f64, PowerError> {
    if !(draw_w > 0.0) {
        return Err(PowerError::ZeroDraw);
    }
    Ok(capacity_wh / draw_w)
}

/// Daily panel output in Wh.
pub fn daily_energy_wh(rig: &SolarRig, h: f64) -> f64 {
    rig.area_m2 * rig.efficiency * h
}

/// Irradiation needed for the rig to sustain `load_w` around the clock.
pub fn required_irradiation(rig: &SolarRig, load_w: f64) -> f64 {
    load_w * 24.0 / (rig.area_m2 * rig.efficiency * rig.round_trip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthReport {
    pub month: String,
    pub h: f64,
    pub e_day_wh: f64,
    pub sustainable_w: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub device: String,
    pub load_w: f64,
    pub months: Vec<MonthReport>,
    pub worst_month: String,
    pub worst_sustainable_w: f64,
    pub feasible: bool,
    /// Hours the battery alone runs the load.
    pub battery_hours: f64,
}

pub fn feasibility(
    rig: &SolarRig,
    series: &IrradiationSeries,
    profile: &PowerProfile,
) -> Result<FeasibilityReport, PowerError> {
    if series.samples.is_empty() {
        return Err(PowerError::EmptySeries);
    }
    let months: Vec<MonthReport> = series
        .samples
        .iter()
        .map(|s| {
            let e = daily_energy_wh(rig, s.h);
            let sustainable_w = e * rig.round_trip / 24.0;
            MonthReport {
                month: s.month.clone(),
                h: s.h,
                e_day_wh: e,
                sustainable_w,
                feasible: sustainable_w >= profile.active_w,
            }
        })
        .collect();
    let worst = months
        .iter()
        .min_by(|a, b| a.e_day_wh.total_cmp(&b.e_day_wh))
        .expect("nonempty");
    Ok(FeasibilityReport {
        device: profile.device.clone(),
        load_w: profile.active_w,
        worst_month: worst.month.clone(),
        worst_sustainable_w: worst.sustainable_w,
        feasible: worst.feasible,
        battery_hours: battery_life_hours(rig.battery_wh, profile.active_w).unwrap_or(f64::INFINITY),
        months,
    })
}

/// `month,h,e_day_wh` CSV, one row per sample.
pub fn emit_energy_curve(rig: &SolarRig, series: &IrradiationSeries, writer: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["month", "h", "e_day_wh"])?;
    for s in &series.samples {
        w.write_record([s.month.clone(), s.h.to_string(), daily_energy_wh(rig, s.h).to_string()])?;
    }
    w.flush()
}
