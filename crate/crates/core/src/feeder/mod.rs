//! Radial feeder model, grid-condition vectors and file ingestion.

mod scenario;

pub use scenario::{
    gen_scenarios, median_filter, read_scenarios_csv, write_scenarios_csv, Scenario,
    ScenarioConfig, ScenarioSet,
};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

/// Default inverter oversize relative to peak solar when a rating is not given.
pub const DEFAULT_OVERSIZE: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum V0Mode {
    Variable,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inverter {
    /// Internal bus number, 1..=N.
    pub bus: usize,
    /// Apparent power rating (pu).
    pub sbar: f64,
    /// Peak solar output used by the scenario generator (pu).
    pub solar_peak: f64,
}

/// Radial feeder with buses renumbered so that every parent precedes its child.
///
/// Bus 0 is the substation. Per-bus vectors are indexed by `n - 1` for bus `n`;
/// line `n` connects bus `n` to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub name: String,
    /// External id of each internal bus 1..=N.
    pub bus_ids: Vec<u32>,
    /// Parent bus number of bus `n` at index `n - 1`; always `< n`.
    pub parent: Vec<usize>,
    pub r: Vec<f64>,
    pub x: Vec<f64>,
    /// Squared-current limit (pu²).
    pub lbar: Vec<f64>,
    /// Squared-voltage bounds (pu²).
    pub vmin: Vec<f64>,
    pub vmax: Vec<f64>,
    /// Nominal peak active load (pu), used by the scenario generator.
    pub p_peak: Vec<f64>,
    /// Sorted by bus.
    pub inverters: Vec<Inverter>,
    pub v0_mode: V0Mode,
    children: Vec<Vec<usize>>,
    inv_at: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusEntry {
    pub id: u32,
    pub vmin: f64,
    pub vmax: f64,
    #[serde(default)]
    pub p_peak: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineEntry {
    pub bus: u32,
    pub parent: u32,
    pub r: f64,
    pub x: f64,
    pub lbar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverterEntry {
    pub bus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solar_peak: Option<f64>,
}

/// On-disk feeder description. Bus id 0 is the substation and is not listed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederFile {
    pub name: String,
    pub v0_mode: V0Mode,
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    pub inverters: Vec<InverterEntry>,
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    let text = std::fs::read_to_string(path)?;
    let file: FeederFile = serde_json::from_str(&text)?;
    FeederModel::from_file(&file)
}

impl FeederModel {
    pub fn from_file(file: &FeederFile) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidFeeder(m));
        let n = file.buses.len();
        if n == 0 {
            return bad("no buses".into());
        }
        let mut bus_of: HashMap<u32, &BusEntry> = HashMap::new();
        for b in &file.buses {
            if b.id == 0 {
                return bad("bus id 0 is reserved for the substation".into());
            }
            if bus_of.insert(b.id, b).is_some() {
                return bad(format!("duplicate bus {}", b.id));
            }
            if !(b.vmin > 0.0 && b.vmin < b.vmax) {
                return bad(format!("bus {}: need 0 < vmin < vmax", b.id));
            }
            if !(b.p_peak >= 0.0) {
                return bad(format!("bus {}: negative p_peak", b.id));
            }
        }
        let mut line_of: HashMap<u32, &LineEntry> = HashMap::new();
        for l in &file.lines {
            if !bus_of.contains_key(&l.bus) {
                return bad(format!("line to unknown bus {}", l.bus));
            }
            if l.parent != 0 && !bus_of.contains_key(&l.parent) {
                return bad(format!("line from unknown parent {}", l.parent));
            }
            if line_of.insert(l.bus, l).is_some() {
                return bad(format!("not a tree: bus {} has two parents", l.bus));
            }
            if !(l.r > 0.0) || !l.x.is_finite() || !(l.lbar > 0.0) {
                return bad(format!("line {}: need r > 0, finite x, lbar > 0", l.bus));
            }
        }
        if line_of.len() != n {
            return bad("not a tree: every bus needs exactly one parent line".into());
        }
        // Children lists keyed by external id, then a preorder walk from the root.
        let mut kids: HashMap<u32, Vec<u32>> = HashMap::new();
        for l in &file.lines {
            kids.entry(l.parent).or_default().push(l.bus);
        }
        for v in kids.values_mut() {
            v.sort_unstable();
        }
        let mut ids: Vec<u32> = file.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        let already = ids.iter().enumerate().all(|(i, &id)| id as usize == i + 1)
            && file.lines.iter().all(|l| l.parent < l.bus);
        let order: Vec<u32> = if already {
            ids.clone()
        } else {
            let mut order = Vec::with_capacity(n);
            let mut stack = vec![0u32];
            while let Some(b) = stack.pop() {
                if b != 0 {
                    order.push(b);
                }
                if let Some(k) = kids.get(&b) {
                    stack.extend(k.iter().rev());
                }
            }
            order
        };
        if order.len() != n || order.iter().collect::<HashSet<_>>().len() != n {
            return bad("not a tree: some buses are unreachable from the substation".into());
        }
        let mut num: HashMap<u32, usize> = HashMap::new();
        num.insert(0, 0);
        for (i, &id) in order.iter().enumerate() {
            num.insert(id, i + 1);
        }
        let mut f = FeederModel {
            name: file.name.clone(),
            bus_ids: order.clone(),
            parent: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            lbar: Vec::with_capacity(n),
            vmin: Vec::with_capacity(n),
            vmax: Vec::with_capacity(n),
            p_peak: Vec::with_capacity(n),
            inverters: Vec::new(),
            v0_mode: file.v0_mode,
            children: Vec::new(),
            inv_at: Vec::new(),
        };
        for (i, id) in order.iter().enumerate() {
            let l = line_of[id];
            let p = num[&l.parent];
            if p > i {
                return bad("not a tree".into());
            }
            let b = bus_of[id];
            f.parent.push(p);
            f.r.push(l.r);
            f.x.push(l.x);
            f.lbar.push(l.lbar);
            f.vmin.push(b.vmin);
            f.vmax.push(b.vmax);
            f.p_peak.push(b.p_peak);
        }
        let mut seen = HashSet::new();
        for inv in &file.inverters {
            let Some(&bus) = num.get(&inv.bus).filter(|&&b| b > 0) else {
                return bad(format!("inverter at unknown bus {}", inv.bus));
            };
            if !seen.insert(bus) {
                return bad(format!("duplicate inverter at bus {}", inv.bus));
            }
            let solar_peak = inv.solar_peak.unwrap_or(f.p_peak[bus - 1]);
            let sbar = inv.sbar.unwrap_or(DEFAULT_OVERSIZE * solar_peak);
            if !(sbar > 0.0) || !(solar_peak >= 0.0) {
                return bad(format!("inverter {}: need sbar > 0", inv.bus));
            }
            f.inverters.push(Inverter { bus, sbar, solar_peak });
        }
        f.inverters.sort_by_key(|i| i.bus);
        if let V0Mode::Fixed(v0) = f.v0_mode {
            if !(v0 > 0.0) {
                return bad("fixed v0 must be positive".into());
            }
        }
        f.index();
        Ok(f)
    }

    fn index(&mut self) {
        let n = self.n();
        self.children = vec![Vec::new(); n + 1];
        for b in 1..=n {
            self.children[self.parent[b - 1]].push(b);
        }
        self.inv_at = vec![None; n];
        for (k, inv) in self.inverters.iter().enumerate() {
            self.inv_at[inv.bus - 1] = Some(k);
        }
    }

    pub fn to_file(&self) -> FeederFile {
        let id = |b: usize| if b == 0 { 0 } else { self.bus_ids[b - 1] };
        FeederFile {
            name: self.name.clone(),
            v0_mode: self.v0_mode,
            buses: (0..self.n())
                .map(|i| BusEntry {
                    id: self.bus_ids[i],
                    vmin: self.vmin[i],
                    vmax: self.vmax[i],
                    p_peak: self.p_peak[i],
                })
                .collect(),
            lines: (0..self.n())
                .map(|i| LineEntry {
                    bus: self.bus_ids[i],
                    parent: id(self.parent[i]),
                    r: self.r[i],
                    x: self.x[i],
                    lbar: self.lbar[i],
                })
                .collect(),
            inverters: self
                .inverters
                .iter()
                .map(|inv| InverterEntry {
                    bus: id(inv.bus),
                    sbar: Some(inv.sbar),
                    solar_peak: Some(inv.solar_peak),
                })
                .collect(),
        }
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.parent.len()
    }

    pub fn ng(&self) -> usize {
        self.inverters.len()
    }

    /// Length of the grid-condition vector, 2N + N_g.
    pub fn m(&self) -> usize {
        2 * self.n() + self.ng()
    }

    /// Children of bus `b` (0 for the substation).
    pub fn children(&self, b: usize) -> &[usize] {
        &self.children[b]
    }

    /// Buses from `b` up to (excluding) the substation.
    pub fn path(&self, b: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = b;
        while k != 0 {
            out.push(k);
            k = self.parent[k - 1];
        }
        out
    }

    /// Index into `inverters` of the inverter at bus `b`.
    pub fn inverter_at(&self, b: usize) -> Option<usize> {
        self.inv_at.get(b.wrapping_sub(1)).copied().flatten()
    }

    /// Internal bus number of an external id.
    pub fn bus_number(&self, id: u32) -> Option<usize> {
        if id == 0 {
            return Some(0);
        }
        self.bus_ids.iter().position(|&b| b == id).map(|i| i + 1)
    }

    pub fn fixed_v0(&self) -> Option<f64> {
        match self.v0_mode {
            V0Mode::Fixed(v) => Some(v),
            V0Mode::Variable => None,
        }
    }

    /// Content hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(&self.to_file()).expect("feeder serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads, reactive loads and solar caps for one OPF instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConditions {
    pub p_load: DVector<f64>,
    pub q_load: DVector<f64>,
    /// Inverter order (ascending bus).
    pub pg_cap: DVector<f64>,
}

impl GridConditions {
    pub fn zeros(f: &FeederModel) -> Self {
        GridConditions {
            p_load: DVector::zeros(f.n()),
            q_load: DVector::zeros(f.n()),
            pg_cap: DVector::zeros(f.ng()),
        }
    }

    /// θ = [p_load; q_load; pg_cap].
    pub fn theta(&self) -> DVector<f64> {
        let (n, g) = (self.p_load.len(), self.pg_cap.len());
        let mut t = DVector::zeros(2 * n + g);
        t.rows_mut(0, n).copy_from(&self.p_load);
        t.rows_mut(n, n).copy_from(&self.q_load);
        t.rows_mut(2 * n, g).copy_from(&self.pg_cap);
        t
    }
}

pub fn pack_theta(
    f: &FeederModel,
    p_load: &DVector<f64>,
    q_load: &DVector<f64>,
    pg_cap: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("p_load", f.n(), p_load.len())?;
    check_len("q_load", f.n(), q_load.len())?;
    check_len("pg_cap", f.ng(), pg_cap.len())?;
    if pg_cap.iter().any(|&c| !(c >= 0.0)) {
        return Err(Error::InvalidInput("negative pg_cap".into()));
    }
    Ok(GridConditions {
        p_load: p_load.clone(),
        q_load: q_load.clone(),
        pg_cap: pg_cap.clone(),
    }
    .theta())
}

pub fn unpack_theta(f: &FeederModel, theta: &DVector<f64>) -> Result<GridConditions> {
    check_len("theta", f.m(), theta.len())?;
    let n = f.n();
    Ok(GridConditions {
        p_load: theta.rows(0, n).into_owned(),
        q_load: theta.rows(n, n).into_owned(),
        pg_cap: theta.rows(2 * n, f.ng()).into_owned(),
    })
}

/// Bundled synthetic feeders.
pub mod fixtures {
    use super::*;

    pub const FEEDER_13: &str = include_str!("../../data/feeder13.json");
    pub const FEEDER_123: &str = include_str!("../../data/feeder123.json");

    pub fn feeder13() -> FeederModel {
        FeederModel::from_file(&serde_json::from_str(FEEDER_13).unwrap()).unwrap()
    }

    pub fn feeder123() -> FeederModel {
        FeederModel::from_file(&serde_json::from_str(FEEDER_123).unwrap()).unwrap()
    }

    /// Chain of `n` identical lines with an inverter on every bus in `inv`.
    pub fn chain(n: usize, r: f64, x: f64, inv: &[(usize, f64)]) -> FeederModel {
        let file = FeederFile {
            name: format!("chain-{n}"),
            v0_mode: V0Mode::Fixed(1.0),
            buses: (1..=n as u32)
                .map(|id| BusEntry { id, vmin: 0.9, vmax: 1.1, p_peak: 0.0 })
                .collect(),
            lines: (1..=n as u32)
                .map(|id| LineEntry { bus: id, parent: id - 1, r, x, lbar: 10.0 })
                .collect(),
            inverters: inv
                .iter()
                .map(|&(b, s)| InverterEntry { bus: b as u32, sbar: Some(s), solar_peak: Some(s) })
                .collect(),
        };
        FeederModel::from_file(&file).unwrap()
    }
}
