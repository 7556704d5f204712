//! Seeded synthetic load and solar profiles.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeederModel, GridConditions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// First instance, minutes after midnight.
    pub start_min: f64,
    /// Last instance (inclusive if it falls on the grid).
    pub end_min: f64,
    pub interval_min: f64,
    /// Multiplies every bus's nominal peak load.
    pub load_scale: f64,
    /// Overrides the feeder's per-bus peaks when set.
    pub load_peaks: Option<Vec<f64>>,
    /// Multiplies every inverter's peak solar; 0 disables solar.
    pub solar_scale: f64,
    /// Relative std of per-bus, per-instance load noise.
    pub load_noise: f64,
    /// Relative depth of the shared cloud attenuation.
    pub cloud_noise: f64,
    /// Median-filter order applied to each noisy series; 1 disables filtering.
    pub median_order: usize,
    /// Range of lagging power factors, drawn once per bus.
    pub pf_range: (f64, f64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            start_min: 420.0,
            end_min: 1200.0,
            interval_min: 1.0,
            load_scale: 1.0,
            load_peaks: None,
            solar_scale: 1.0,
            load_noise: 0.15,
            cloud_noise: 0.3,
            median_order: 31,
            pf_range: (0.9, 1.0),
        }
    }
}

impl ScenarioConfig {
    fn validate(&self, f: &FeederModel) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scenario config: {m}")));
        if !(self.interval_min > 0.0) || !(self.end_min >= self.start_min) {
            return bad("need interval > 0 and end >= start");
        }
        if !(self.load_scale >= 0.0) || !(self.solar_scale >= 0.0) {
            return bad("scales must be nonnegative");
        }
        if !(self.load_noise >= 0.0) || !(0.0..=1.0).contains(&self.cloud_noise) {
            return bad("load_noise >= 0 and cloud_noise in [0, 1]");
        }
        let (lo, hi) = self.pf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("pf_range must satisfy 0 < lo <= hi <= 1");
        }
        if self.median_order == 0 {
            return bad("median_order must be >= 1");
        }
        if let Some(p) = &self.load_peaks {
            if p.len() != f.n() || p.iter().any(|&v| !(v >= 0.0)) {
                return bad("load_peaks must have one nonnegative entry per bus");
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        let k = ((self.end_min - self.start_min) / self.interval_min + 1e-9).floor() as usize;
        (0..=k)
            .map(|i| self.start_min + i as f64 * self.interval_min)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Minutes after midnight.
    pub t: f64,
    pub conditions: GridConditions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub fingerprint: String,
    pub config: ScenarioConfig,
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
}

/// Residential double-hump shape, peak ≈ 1 in the evening.
fn load_template(hour: f64) -> f64 {
    let g = |c: f64, w: f64| (-((hour - c) / w).powi(2)).exp();
    0.3 + 0.45 * g(8.0, 1.5) + 0.7 * g(19.0, 2.0)
}

/// Clear-sky bell between 6:00 and 20:00, peak 1 at 13:00.
fn solar_template(hour: f64) -> f64 {
    if hour <= 6.0 || hour >= 20.0 {
        0.0
    } else {
        (std::f64::consts::PI * (hour - 6.0) / 14.0).sin().powi(2)
    }
}

/// Sliding-window median. Even orders round up; near the edges the window
/// shrinks symmetrically so it always has odd length.
pub fn median_filter(series: &[f64], order: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidInput("median filter of empty series".into()));
    }
    if order == 0 {
        return Err(Error::InvalidInput("median filter order must be >= 1".into()));
    }
    let half = order / 2;
    let n = series.len();
    let mut buf = Vec::with_capacity(2 * half + 1);
    Ok((0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&series[i - h..=i + h]);
            buf.sort_by(|a, b| a.total_cmp(b));
            buf[h]
        })
        .collect())
}

pub fn gen_scenarios(f: &FeederModel, config: &ScenarioConfig, seed: u64) -> Result<ScenarioSet> {
    config.validate(f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = config.times();
    let k = times.len();
    let n = f.n();
    let (lo, hi) = config.pf_range;
    let tan_phi: Vec<f64> = (0..n)
        .map(|_| {
            let pf = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            pf.acos().tan()
        })
        .collect();
    let peaks = config.load_peaks.clone().unwrap_or_else(|| f.p_peak.clone());
    let mut loads = Vec::with_capacity(n);
    for &peak in &peaks {
        let noisy: Vec<f64> = times
            .iter()
            .map(|&t| {
                let e: f64 = rng.sample(StandardNormal);
                (1.0 + config.load_noise * e).max(0.0) * load_template(t / 60.0)
            })
            .collect();
        let smooth = median_filter(&noisy, config.median_order)?;
        loads.push(smooth.into_iter().map(|v| v * peak * config.load_scale).collect::<Vec<_>>());
    }
    let cloud: Vec<f64> = (0..k)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            (1.0 - config.cloud_noise * e.abs()).clamp(0.0, 1.0)
        })
        .collect();
    let cloud = median_filter(&cloud, config.median_order)?;
    let scenarios = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let p_load = DVector::from_fn(n, |b, _| loads[b][i]);
            let q_load = DVector::from_fn(n, |b, _| p_load[b] * tan_phi[b]);
            let sun = solar_template(t / 60.0) * cloud[i] * config.solar_scale;
            let pg_cap = DVector::from_fn(f.ng(), |g, _| f.inverters[g].solar_peak * sun);
            Scenario {
                t,
                conditions: GridConditions { p_load, q_load, pg_cap },
            }
        })
        .collect();
    Ok(ScenarioSet {
        fingerprint: f.fingerprint(),
        config: config.clone(),
        seed,
        scenarios,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    t: f64,
    bus: u32,
    p_load: f64,
    q_load: f64,
    pg_cap: Option<f64>,
}

/// Writes `t,bus,p_load,q_load,pg_cap`, one row per bus per instance, external bus ids.
pub fn write_scenarios_csv(f: &FeederModel, scenarios: &[Scenario], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in scenarios {
        let c = &s.conditions;
        for b in 1..=f.n() {
            w.serialize(Row {
                t: s.t,
                bus: f.bus_ids[b - 1],
                p_load: c.p_load[b - 1],
                q_load: c.q_load[b - 1],
                pg_cap: f.inverter_at(b).map(|g| c.pg_cap[g]),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the scenario CSV back; instances are grouped by `t` in file order.
pub fn read_scenarios_csv(f: &FeederModel, path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<Scenario> = Vec::new();
    let mut filled: Vec<Vec<bool>> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let b = f
            .bus_number(row.bus)
            .filter(|&b| b > 0)
            .ok_or_else(|| Error::InvalidInput(format!("scenario row for unknown bus {}", row.bus)))?;
        if out.last().map(|s| s.t) != Some(row.t) {
            out.push(Scenario { t: row.t, conditions: GridConditions::zeros(f) });
            filled.push(vec![false; f.n()]);
        }
        let s = out.last_mut().unwrap();
        let seen = filled.last_mut().unwrap();
        if seen[b - 1] {
            return Err(Error::InvalidInput(format!("duplicate row t={} bus={}", row.t, row.bus)));
        }
        seen[b - 1] = true;
        s.conditions.p_load[b - 1] = row.p_load;
        s.conditions.q_load[b - 1] = row.q_load;
        match (f.inverter_at(b), row.pg_cap) {
            (Some(g), Some(c)) if c >= 0.0 => s.conditions.pg_cap[g] = c,
            (Some(_), _) => {
                return Err(Error::InvalidInput(format!("bus {} needs a nonnegative pg_cap", row.bus)))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidInput(format!("bus {} has no inverter", row.bus)))
            }
            (None, None) => {}
        }
    }
    if let Some(i) = filled.iter().position(|s| s.iter().any(|&v| !v)) {
        return Err(Error::InvalidInput(format!("instance t={} misses buses", out[i].t)));
    }
    Ok(out)
}
