//! Physical network model: scenarios, interference, and per-pattern spectral
//! efficiencies.
//!
//! Path loss is `max(d, 1 m)^-exponent` with the exponent belonging to the
//! transmitting BTS. The interference figure for a UE is referred to the
//! serving link, i.e. `(noise + sum_j p_j g_j) / g_serving`, so that the
//! efficiency is `(W / L) log2(1 + p_i / I)`. For a UE colocated with its BTS
//! (serving gain 1) this is the plain noise-plus-interference PSD.
//!
//! A cell serving several demand points gets the arithmetic mean of the
//! per-point efficiencies; interference is never averaged first.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{ReusePattern, MAX_BTS};

/// Constants used throughout the reference experiments.
pub mod defaults {
    /// Total bandwidth `W` in Hz.
    pub const BANDWIDTH_HZ: f64 = 20e6;
    /// Mean packet length `L` in bits.
    pub const PACKET_BITS: f64 = 1e6;
    /// Noise PSD in uW/Hz.
    pub const NOISE_PSD: f64 = 0.125e-6;
    /// Homogeneous (pico) transmit PSD in uW/Hz and path-loss exponent.
    pub const PICO_PSD: f64 = 1.0;
    pub const PICO_EXPONENT: f64 = 3.0;
    /// Heterogeneous setup: macro and pico parameters.
    pub const HET_MACRO_PSD: f64 = 10.0;
    pub const HET_MACRO_EXPONENT: f64 = 2.8;
    pub const HET_PICO_PSD: f64 = 1.0;
    pub const HET_PICO_EXPONENT: f64 = 3.4;
    /// Hexagonal drop area and nearest-center spacing, in meters.
    pub const AREA_SIDE_M: f64 = 100.0;
    pub const HEX_SPACING_M: f64 = 20.0;
}

/// Distances below this are clamped before applying the path-loss law.
pub const MIN_DISTANCE_M: f64 = 1.0;

pub fn path_gain(distance: f64, exponent: f64) -> f64 {
    distance.max(MIN_DISTANCE_M).powf(-exponent)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bts {
    /// Position in meters.
    pub position: [f64; 2],
    /// Transmit PSD in uW/Hz.
    pub tx_psd: f64,
    pub pathloss_exp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandPoint {
    pub position: [f64; 2],
    /// Index of the serving BTS.
    pub bts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bts: Vec<Bts>,
    /// uW/Hz
    pub noise_psd: f64,
    /// `W`, Hz
    pub bandwidth_w: f64,
    /// `L`, bits
    pub packet_len_l: f64,
    pub demand_points: Vec<DemandPoint>,
    /// `lambda_i`, packets/second
    pub arrival_rates: Vec<f64>,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.bts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if n == 0 {
            return bad("at least one BTS is required".into());
        }
        if n > MAX_BTS {
            return Err(Error::ExponentialSize { n, cap: MAX_BTS });
        }
        if !(self.bandwidth_w > 0.0 && self.bandwidth_w.is_finite()) {
            return bad(format!("bandwidth must be positive, got {}", self.bandwidth_w));
        }
        if !(self.packet_len_l > 0.0 && self.packet_len_l.is_finite()) {
            return bad(format!("packet length must be positive, got {}", self.packet_len_l));
        }
        if !(self.noise_psd > 0.0 && self.noise_psd.is_finite()) {
            return bad(format!("noise PSD must be positive, got {}", self.noise_psd));
        }
        if self.arrival_rates.len() != n {
            return bad(format!("{} arrival rates for {} BTSs", self.arrival_rates.len(), n));
        }
        if let Some((i, l)) = self.arrival_rates.iter().enumerate().find(|(_, l)| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("arrival rate of BTS {i} must be finite and >= 0, got {l}"));
        }
        for (i, b) in self.bts.iter().enumerate() {
            if !(b.tx_psd >= 0.0 && b.tx_psd.is_finite()) {
                return bad(format!("BTS {i}: transmit PSD must be >= 0"));
            }
            if !(b.pathloss_exp > 0.0 && b.pathloss_exp.is_finite()) {
                return bad(format!("BTS {i}: path-loss exponent must be positive"));
            }
        }
        let mut served = vec![false; n];
        for (k, d) in self.demand_points.iter().enumerate() {
            if d.bts >= n {
                return bad(format!("demand point {k} references BTS {} but n = {n}", d.bts));
            }
            served[d.bts] = true;
        }
        if let Some(i) = served.iter().position(|s| !s) {
            return bad(format!("BTS {i} serves no demand point"));
        }
        Ok(())
    }

    /// Copy with the transmit PSDs replaced.
    pub fn with_psd(&self, psd: &[f64]) -> Scenario {
        let mut sc = self.clone();
        for (b, p) in sc.bts.iter_mut().zip(psd) {
            b.tx_psd = *p;
        }
        sc
    }

    pub fn with_arrival_rates(&self, rates: Vec<f64>) -> Scenario {
        Scenario { arrival_rates: rates, ..self.clone() }
    }

    fn points_of(&self, i: usize) -> impl Iterator<Item = &DemandPoint> {
        self.demand_points.iter().filter(move |d| d.bts == i)
    }

    /// Noise plus interference at `point` from the other members of `pattern`,
    /// referred to the serving link gain.
    fn referred_interference(&self, i: usize, pattern: ReusePattern, point: &DemandPoint) -> f64 {
        let own = &self.bts[i];
        let serving = path_gain(distance(own.position, point.position), own.pathloss_exp);
        let mut total = self.noise_psd;
        for j in pattern.members().filter(|&j| j != i) {
            let b = &self.bts[j];
            total += b.tx_psd * path_gain(distance(b.position, point.position), b.pathloss_exp);
        }
        total / serving
    }
}

/// Maps a signal-to-interference ratio to bits/s/Hz. Shannon capacity is the
/// default; an ergodic-capacity or MCS-table model can be slotted in here.
pub trait LinkModel: Sync {
    fn bits_per_hz(&self, sinr: f64) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Shannon;

impl LinkModel for Shannon {
    fn bits_per_hz(&self, sinr: f64) -> f64 {
        (1.0 + sinr).log2()
    }
}

/// Noise-plus-interference PSD (uW/Hz) seen by each demand point of cell `i`
/// when exactly the BTSs in `pattern` transmit. One value per demand point, in
/// scenario order.
pub fn interference_psd(sc: &Scenario, i: usize, pattern: ReusePattern) -> Result<Vec<f64>> {
    if i >= sc.n() || !pattern.contains(i) {
        return Err(Error::NotInPattern { bts: i, pattern: pattern.to_string() });
    }
    Ok(sc.points_of(i).map(|d| sc.referred_interference(i, pattern, d)).collect())
}

/// `s_{i,A}` in packets/second under the default Shannon link model.
pub fn spectral_efficiency(sc: &Scenario, i: usize, pattern: ReusePattern) -> f64 {
    spectral_efficiency_with(sc, i, pattern, &Shannon)
}

pub fn spectral_efficiency_with(sc: &Scenario, i: usize, pattern: ReusePattern, link: &dyn LinkModel) -> f64 {
    if !pattern.contains(i) {
        return 0.0;
    }
    let p = sc.bts[i].tx_psd;
    let scale = sc.bandwidth_w / sc.packet_len_l;
    let (sum, count) = sc
        .points_of(i)
        .map(|d| link.bits_per_hz(p / sc.referred_interference(i, pattern, d)))
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        scale * sum / count as f64
    }
}

/// Spectral efficiency `s[i, A]` (packets/second) for every BTS and pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    n: usize,
    /// Pattern-major: entry `(i, A)` lives at `A * n + i`.
    s: Vec<f64>,
}

/// Relative slack allowed when checking monotonicity of user-provided tables.
const MONOTONE_RTOL: f64 = 1e-12;

impl EfficiencyTable {
    /// Builds a table from a closure and checks its invariants.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, ReusePattern) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidScenario("empty network".into()));
        }
        if n > MAX_BTS {
            return Err(Error::ExponentialSize { n, cap: MAX_BTS });
        }
        let mut s = vec![0.0; n << n];
        for a in ReusePattern::all(n) {
            for i in a.members() {
                s[a.index() * n + i] = f(i, a);
            }
        }
        let t = EfficiencyTable { n, s };
        t.validate()?;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_patterns(&self) -> usize {
        1 << self.n
    }

    #[inline]
    pub fn get(&self, i: usize, a: ReusePattern) -> f64 {
        self.s[a.index() * self.n + i]
    }

    /// The efficiency vector `(s[0, A], ..., s[n-1, A])`.
    #[inline]
    pub fn column(&self, a: ReusePattern) -> &[f64] {
        let k = a.index() * self.n;
        &self.s[k..k + self.n]
    }

    pub fn full(&self) -> ReusePattern {
        ReusePattern::full(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.s.len() != n << n {
            return Err(Error::Dimension(format!("table has {} entries, expected {}", self.s.len(), n << n)));
        }
        for a in ReusePattern::all(n) {
            for i in 0..n {
                let v = self.get(i, a);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::TableInvariant(format!("s[{i},{a}] = {v} is not finite and >= 0")));
                }
                if !a.contains(i) && v != 0.0 {
                    return Err(Error::TableInvariant(format!("s[{i},{a}] = {v} but BTS {i} is not in the pattern")));
                }
            }
            for i in a.members() {
                for j in (0..n).filter(|&j| !a.contains(j)) {
                    let (lo, hi) = (self.get(i, a.with(j)), self.get(i, a));
                    if lo > hi * (1.0 + MONOTONE_RTOL) {
                        return Err(Error::TableInvariant(format!(
                            "s[{i},{}] = {lo} exceeds s[{i},{a}] = {hi}",
                            a.with(j)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fills all `n 2^n` entries with the Shannon model.
pub fn build_table(sc: &Scenario) -> Result<EfficiencyTable> {
    build_table_with(sc, &Shannon)
}

pub fn build_table_with(sc: &Scenario, link: &dyn LinkModel) -> Result<EfficiencyTable> {
    sc.validate()?;
    EfficiencyTable::from_fn(sc.n(), |i, a| spectral_efficiency_with(sc, i, a, link))
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

pub const SCENARIO_SCHEMA: &str = "specalloc.scenario/1";

/// Parsed scenario description. Every unset physical constant falls back to
/// the reference-experiment value in [`defaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub bandwidth_hz: Option<f64>,
    #[serde(default)]
    pub packet_bits: Option<f64>,
    #[serde(default)]
    pub noise_psd: Option<f64>,
    pub layout: LayoutConfig,
    pub traffic: TrafficConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtsConfig {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub psd: Option<f64>,
    #[serde(default)]
    pub exponent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub x: f64,
    pub y: f64,
    /// Zero-based serving BTS index.
    pub bts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    #[serde(default = "macro_psd")]
    pub psd: f64,
    #[serde(default = "macro_exponent")]
    pub exponent: f64,
}

fn macro_psd() -> f64 {
    defaults::HET_MACRO_PSD
}
fn macro_exponent() -> f64 {
    defaults::HET_MACRO_EXPONENT
}
fn area_side() -> f64 {
    defaults::AREA_SIDE_M
}
fn hex_spacing() -> f64 {
    defaults::HEX_SPACING_M
}
fn ue_spacing() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayoutConfig {
    /// Explicit BTS list. Without demand points every BTS serves a colocated UE.
    Explicit {
        bts: Vec<BtsConfig>,
        #[serde(default)]
        demand_points: Option<Vec<DemandConfig>>,
    },
    /// BTSs dropped uniformly at random on hexagon vertices; UEs at hexagon
    /// centers, served by the nearest BTS.
    HexDrop {
        #[serde(default = "area_side")]
        width: f64,
        #[serde(default = "area_side")]
        height: f64,
        #[serde(default = "hex_spacing")]
        spacing: f64,
        count: usize,
        seed: u64,
        #[serde(default)]
        psd: Option<f64>,
        #[serde(default)]
        exponent: Option<f64>,
        /// Adds a macro BTS at the area center as BTS 0.
        #[serde(default, rename = "macro")]
        macro_bts: Option<MacroConfig>,
    },
    /// BTSs dropped uniformly on a segment; UEs on a regular grid along it.
    Line {
        length: f64,
        count: usize,
        seed: u64,
        #[serde(default = "ue_spacing")]
        ue_spacing: f64,
        #[serde(default)]
        psd: Option<f64>,
        #[serde(default)]
        exponent: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrafficConfig {
    Explicit { rates: Vec<f64> },
    /// `lambda_i` proportional to the full-reuse rate `s[i, N]`, scaled so the
    /// mean over BTSs equals `mean`.
    ProportionalWorstCase { mean: f64 },
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config { field, reason: e.into_inner().to_string() }
        })
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Homogeneous reference setup: `count` picos on the 100 m hexagon grid.
    pub fn hex_drop(count: usize, seed: u64, traffic: TrafficConfig) -> Self {
        ScenarioConfig {
            schema: Some(SCENARIO_SCHEMA.into()),
            bandwidth_hz: None,
            packet_bits: None,
            noise_psd: None,
            layout: LayoutConfig::HexDrop {
                width: defaults::AREA_SIDE_M,
                height: defaults::AREA_SIDE_M,
                spacing: defaults::HEX_SPACING_M,
                count,
                seed,
                psd: None,
                exponent: None,
                macro_bts: None,
            },
            traffic,
        }
    }
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

/// Realizes a config into a validated [`Scenario`]. Deterministic in the seed.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    if let Some(s) = &cfg.schema {
        if s != SCENARIO_SCHEMA {
            return Err(cfg_err("schema", format!("unsupported schema `{s}`, expected `{SCENARIO_SCHEMA}`")));
        }
    }
    let (bts, demand_points) = match &cfg.layout {
        LayoutConfig::Explicit { bts, demand_points } => explicit_layout(bts, demand_points.as_deref())?,
        LayoutConfig::HexDrop { width, height, spacing, count, seed, psd, exponent, macro_bts } => {
            let het = macro_bts.is_some();
            let pico = Bts {
                position: [0.0, 0.0],
                tx_psd: psd.unwrap_or(if het { defaults::HET_PICO_PSD } else { defaults::PICO_PSD }),
                pathloss_exp: exponent.unwrap_or(if het { defaults::HET_PICO_EXPONENT } else { defaults::PICO_EXPONENT }),
            };
            hex_drop_layout(*width, *height, *spacing, *count, *seed, pico, macro_bts.as_ref())?
        }
        LayoutConfig::Line { length, count, seed, ue_spacing, psd, exponent } => {
            let proto = Bts {
                position: [0.0, 0.0],
                tx_psd: psd.unwrap_or(defaults::PICO_PSD),
                pathloss_exp: exponent.unwrap_or(defaults::PICO_EXPONENT),
            };
            line_layout(*length, *count, *seed, *ue_spacing, proto)?
        }
    };
    let n = bts.len();
    let mut sc = Scenario {
        bts,
        noise_psd: cfg.noise_psd.unwrap_or(defaults::NOISE_PSD),
        bandwidth_w: cfg.bandwidth_hz.unwrap_or(defaults::BANDWIDTH_HZ),
        packet_len_l: cfg.packet_bits.unwrap_or(defaults::PACKET_BITS),
        demand_points,
        arrival_rates: vec![0.0; n],
    };
    sc.arrival_rates = match &cfg.traffic {
        TrafficConfig::Explicit { rates } => {
            if rates.len() != n {
                return Err(cfg_err("traffic.rates", format!("{} rates for {n} BTSs", rates.len())));
            }
            rates.clone()
        }
        TrafficConfig::ProportionalWorstCase { mean } => {
            if !(*mean >= 0.0 && mean.is_finite()) {
                return Err(cfg_err("traffic.mean", "must be finite and >= 0"));
            }
            sc.validate()?;
            proportional_rates(&sc, *mean)
        }
    };
    sc.validate()?;
    Ok(sc)
}

/// Arrival rates proportional to each cell's full-reuse rate with the given
/// mean over cells.
pub fn proportional_rates(sc: &Scenario, mean: f64) -> Vec<f64> {
    let full = ReusePattern::full(sc.n());
    let worst: Vec<f64> = (0..sc.n()).map(|i| spectral_efficiency(sc, i, full)).collect();
    proportional_to(&worst, mean)
}

pub fn proportional_to(weights: &[f64], mean: f64) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let n = weights.len() as f64;
    if total <= 0.0 {
        return vec![mean; weights.len()];
    }
    weights.iter().map(|w| mean * n * w / total).collect()
}

fn explicit_layout(bts: &[BtsConfig], demand: Option<&[DemandConfig]>) -> Result<(Vec<Bts>, Vec<DemandPoint>)> {
    if bts.is_empty() {
        return Err(cfg_err("layout.bts", "at least one BTS is required"));
    }
    let stations: Vec<Bts> = bts
        .iter()
        .map(|b| Bts {
            position: [b.x, b.y],
            tx_psd: b.psd.unwrap_or(defaults::PICO_PSD),
            pathloss_exp: b.exponent.unwrap_or(defaults::PICO_EXPONENT),
        })
        .collect();
    let points = match demand {
        None => stations.iter().enumerate().map(|(i, b)| DemandPoint { position: b.position, bts: i }).collect(),
        Some(d) => {
            if let Some((k, p)) = d.iter().enumerate().find(|(_, p)| p.bts >= stations.len()) {
                return Err(cfg_err(
                    &format!("layout.demand_points[{k}].bts"),
                    format!("BTS index {} out of range for {} BTSs", p.bts, stations.len()),
                ));
            }
            d.iter().map(|p| DemandPoint { position: [p.x, p.y], bts: p.bts }).collect()
        }
    };
    Ok((stations, points))
}

/// Hexagon centers with nearest-center distance `spacing` covering the
/// `width x height` rectangle, row-offset (pointy-top) lattice.
pub fn hex_centers(width: f64, height: f64, spacing: f64) -> Vec<[f64; 2]> {
    let row_h = spacing * 3f64.sqrt() / 2.0;
    let eps = 1e-9;
    let mut out = Vec::new();
    let mut row = 0usize;
    loop {
        let y = row as f64 * row_h;
        if y > height + eps {
            break;
        }
        let offset = if row % 2 == 1 { spacing / 2.0 } else { 0.0 };
        let mut col = 0usize;
        loop {
            let x = offset + col as f64 * spacing;
            if x > width + eps {
                break;
            }
            out.push([x, y]);
            col += 1;
        }
        row += 1;
    }
    out
}

/// Distinct vertices of the hexagons around `centers` that fall inside the area.
pub fn hex_vertices(centers: &[[f64; 2]], width: f64, height: f64, spacing: f64) -> Vec<[f64; 2]> {
    let radius = spacing / 3f64.sqrt();
    let eps = 1e-9;
    let mut verts: Vec<[f64; 2]> = Vec::new();
    for c in centers {
        for k in 0..6 {
            let ang = (30.0 + 60.0 * k as f64).to_radians();
            let v = [c[0] + radius * ang.cos(), c[1] + radius * ang.sin()];
            if v[0] < -eps || v[1] < -eps || v[0] > width + eps || v[1] > height + eps {
                continue;
            }
            if !verts.iter().any(|u| distance(*u, v) < 1e-6) {
                verts.push(v);
            }
        }
    }
    verts.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
    verts
}

fn nearest(points: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = 0;
    for (k, q) in points.iter().enumerate() {
        if distance(*q, p) < distance(points[best], p) {
            best = k;
        }
    }
    best
}

/// Assigns each UE location to its nearest BTS; a BTS left without UEs gets
/// the location closest to it as its own demand point.
fn assign_demand(stations: &[Bts], ue: &[[f64; 2]]) -> Vec<DemandPoint> {
    let pos: Vec<[f64; 2]> = stations.iter().map(|b| b.position).collect();
    let mut points: Vec<DemandPoint> = ue.iter().map(|&u| DemandPoint { position: u, bts: nearest(&pos, u) }).collect();
    for (i, b) in stations.iter().enumerate() {
        if !points.iter().any(|d| d.bts == i) {
            let k = nearest(ue, b.position);
            points.push(DemandPoint { position: ue[k], bts: i });
        }
    }
    points
}

fn hex_drop_layout(
    width: f64,
    height: f64,
    spacing: f64,
    count: usize,
    seed: u64,
    pico: Bts,
    macro_bts: Option<&MacroConfig>,
) -> Result<(Vec<Bts>, Vec<DemandPoint>)> {
    if !(width > 0.0 && height > 0.0) {
        return Err(cfg_err("layout.width", "area dimensions must be positive"));
    }
    if !(spacing > 0.0) {
        return Err(cfg_err("layout.spacing", "must be positive"));
    }
    let centers = hex_centers(width, height, spacing);
    let verts = hex_vertices(&centers, width, height, spacing);
    if count == 0 || count > verts.len() {
        return Err(cfg_err("layout.count", format!("must be in 1..={} for this grid", verts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..verts.len()).collect();
    idx.shuffle(&mut rng);
    let mut stations = Vec::with_capacity(count + 1);
    if let Some(m) = macro_bts {
        stations.push(Bts { position: [width / 2.0, height / 2.0], tx_psd: m.psd, pathloss_exp: m.exponent });
    }
    stations.extend(idx[..count].iter().map(|&k| Bts { position: verts[k], ..pico.clone() }));
    let points = assign_demand(&stations, &centers);
    Ok((stations, points))
}

fn line_layout(length: f64, count: usize, seed: u64, ue_spacing: f64, proto: Bts) -> Result<(Vec<Bts>, Vec<DemandPoint>)> {
    if !(length > 0.0) {
        return Err(cfg_err("layout.length", "must be positive"));
    }
    if count == 0 {
        return Err(cfg_err("layout.count", "must be at least 1"));
    }
    if !(ue_spacing > 0.0 && ue_spacing <= length) {
        return Err(cfg_err("layout.ue_spacing", "must be in (0, length]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..length)).collect();
    xs.sort_by(f64::total_cmp);
    let stations: Vec<Bts> = xs.iter().map(|&x| Bts { position: [x, 0.0], ..proto.clone() }).collect();
    let m = (length / ue_spacing).floor() as usize;
    let ue: Vec<[f64; 2]> = (0..m).map(|k| [(k as f64 + 0.5) * ue_spacing, 0.0]).collect();
    Ok((stations.clone(), assign_demand(&stations, &ue)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bts(d: f64) -> Scenario {
        Scenario {
            bts: vec![
                Bts { position: [0.0, 0.0], tx_psd: 1.0, pathloss_exp: 3.0 },
                Bts { position: [d, 0.0], tx_psd: 1.0, pathloss_exp: 3.0 },
            ],
            noise_psd: defaults::NOISE_PSD,
            bandwidth_w: defaults::BANDWIDTH_HZ,
            packet_len_l: defaults::PACKET_BITS,
            demand_points: vec![
                DemandPoint { position: [0.0, 0.0], bts: 0 },
                DemandPoint { position: [d, 0.0], bts: 1 },
            ],
            arrival_rates: vec![1.0, 1.0],
        }
    }

    #[test]
    fn interference_alone_is_noise() {
        let mut sc = two_bts(10.0);
        sc.bts.truncate(1);
        sc.demand_points.truncate(1);
        sc.arrival_rates.truncate(1);
        let i = interference_psd(&sc, 0, ReusePattern::singleton(0)).unwrap();
        assert_eq!(i, vec![0.125e-6]);
    }

    #[test]
    fn interference_from_neighbor_at_ten_meters() {
        let sc = two_bts(10.0);
        let i = interference_psd(&sc, 0, ReusePattern::full(2)).unwrap();
        assert!((i[0] - (0.125e-6 + 1e-3)).abs() < 1e-15);
        let alone = interference_psd(&sc, 0, ReusePattern::singleton(0)).unwrap();
        assert_eq!(alone[0], sc.noise_psd);
    }

    #[test]
    fn interference_requires_membership() {
        let sc = two_bts(10.0);
        assert!(matches!(
            interference_psd(&sc, 0, ReusePattern::singleton(1)),
            Err(Error::NotInPattern { bts: 0, .. })
        ));
    }

    #[test]
    fn shannon_arithmetic() {
        // p/I = 1 and p/I = 3 with W/L = 20
        let mut sc = two_bts(10.0);
        sc.bts.truncate(1);
        sc.demand_points.truncate(1);
        sc.arrival_rates.truncate(1);
        sc.noise_psd = 1.0;
        assert!((spectral_efficiency(&sc, 0, ReusePattern::singleton(0)) - 20.0).abs() < 1e-12);
        sc.noise_psd = 1.0 / 3.0;
        assert!((spectral_efficiency(&sc, 0, ReusePattern::singleton(0)) - 40.0).abs() < 1e-12);
        assert_eq!(spectral_efficiency(&sc, 0, ReusePattern::EMPTY), 0.0);
    }

    #[test]
    fn multi_point_cell_averages_efficiencies() {
        let mut sc = two_bts(40.0);
        sc.demand_points.push(DemandPoint { position: [5.0, 0.0], bts: 0 });
        let a = ReusePattern::full(2);
        let scale = sc.bandwidth_w / sc.packet_len_l;
        let noise = sc.noise_psd;
        // colocated point: serving gain 1, interferer at 40 m
        let i0 = noise + 40f64.powi(-3);
        // point at 5 m: serving gain 5^-3, interferer at 35 m
        let i1 = (noise + 35f64.powi(-3)) / 5f64.powi(-3);
        let got = interference_psd(&sc, 0, a).unwrap();
        assert!((got[0] - i0).abs() < 1e-15 && (got[1] - i1).abs() < 1e-12);
        let expect = scale * ((1.0 + 1.0 / i0).log2() + (1.0 + 1.0 / i1).log2()) / 2.0;
        assert!((spectral_efficiency(&sc, 0, a) - expect).abs() < 1e-9);
    }

    #[test]
    fn single_bts_table() {
        let mut sc = two_bts(10.0);
        sc.bts.truncate(1);
        sc.demand_points.truncate(1);
        sc.arrival_rates.truncate(1);
        let t = build_table(&sc).unwrap();
        assert_eq!(t.get(0, ReusePattern::EMPTY), 0.0);
        assert!(t.get(0, ReusePattern::singleton(0)) > 0.0);
    }

    #[test]
    fn symmetric_pair_has_symmetric_table() {
        let t = build_table(&two_bts(15.0)).unwrap();
        let (s1, s2, n) = (ReusePattern::singleton(0), ReusePattern::singleton(1), ReusePattern::full(2));
        assert!((t.get(0, s1) - t.get(1, s2)).abs() < 1e-9);
        assert!((t.get(0, n) - t.get(1, n)).abs() < 1e-9);
        assert!(t.get(0, s1) >= t.get(0, n));
    }

    #[test]
    fn table_rejects_too_many_bts() {
        assert!(matches!(
            EfficiencyTable::from_fn(17, |_, _| 1.0),
            Err(Error::ExponentialSize { n: 17, cap: 16 })
        ));
    }

    #[test]
    fn table_rejects_non_monotone() {
        let r = EfficiencyTable::from_fn(2, |_, a| if a.len() == 2 { 5.0 } else { 1.0 });
        assert!(matches!(r, Err(Error::TableInvariant(_))));
    }

    #[test]
    fn explicit_one_bts_config() {
        let cfg = ScenarioConfig::from_json(
            r#"{"layout":{"kind":"explicit","bts":[{"x":0,"y":0}]},"traffic":{"kind":"explicit","rates":[3]}}"#,
        )
        .unwrap();
        let sc = build_scenario(&cfg).unwrap();
        assert_eq!(sc.n(), 1);
        assert_eq!(sc.arrival_rates, vec![3.0]);
        assert_eq!(sc.noise_psd, defaults::NOISE_PSD);
    }

    #[test]
    fn malformed_config_names_the_field() {
        let err = ScenarioConfig::from_json(
            r#"{"layout":{"kind":"hex_drop","seed":1},"traffic":{"kind":"explicit","rates":[]}}"#,
        )
        .unwrap_err();
        match err {
            Error::Config { field, reason } => {
                assert!(field.starts_with("layout"), "{field}");
                assert!(reason.contains("count"), "{reason}");
            }
            e => panic!("unexpected {e}"),
        }
        let err = ScenarioConfig::from_json(
            r#"{"layout":{"kind":"explicit","bts":[{"x":0,"y":"a"}]},"traffic":{"kind":"explicit","rates":[1]}}"#,
        )
        .unwrap_err();
        // internally tagged layouts are buffered, so the path stops at the variant
        assert!(matches!(err, Error::Config { ref field, ref reason } if field.starts_with("layout") && reason.contains("f64")), "{err}");
    }

    #[test]
    fn hex_drop_seven_bts() {
        let cfg = ScenarioConfig::hex_drop(7, 11, TrafficConfig::ProportionalWorstCase { mean: 10.0 });
        let sc = build_scenario(&cfg).unwrap();
        assert_eq!(sc.n(), 7);
        let centers = hex_centers(100.0, 100.0, 20.0);
        // every center is a demand point of its nearest BTS
        let pos: Vec<[f64; 2]> = sc.bts.iter().map(|b| b.position).collect();
        for c in &centers {
            let d = sc.demand_points.iter().find(|d| d.position == *c).unwrap();
            assert_eq!(d.bts, nearest(&pos, *c));
        }
        let mean = sc.arrival_rates.iter().sum::<f64>() / 7.0;
        assert!((mean - 10.0).abs() < 1e-9);
        // deterministic in the seed
        assert_eq!(sc, build_scenario(&cfg).unwrap());
    }

    #[test]
    fn hex_vertices_are_spaced_by_circumradius() {
        let centers = hex_centers(100.0, 100.0, 20.0);
        let verts = hex_vertices(&centers, 100.0, 100.0, 20.0);
        let r = 20.0 / 3f64.sqrt();
        for v in &verts {
            let d = centers.iter().map(|c| distance(*c, *v)).fold(f64::INFINITY, f64::min);
            assert!((d - r).abs() < 1e-9);
        }
    }

    #[test]
    fn heterogeneous_profile() {
        let json = r#"{"layout":{"kind":"hex_drop","count":7,"seed":3,"macro":{}},
                       "traffic":{"kind":"explicit","rates":[1,1,1,1,1,1,1,1]}}"#;
        let sc = build_scenario(&ScenarioConfig::from_json(json).unwrap()).unwrap();
        assert_eq!(sc.n(), 8);
        assert_eq!((sc.bts[0].tx_psd, sc.bts[0].pathloss_exp), (10.0, 2.8));
        assert!(sc.bts[1..].iter().all(|b| b.tx_psd == 1.0 && b.pathloss_exp == 3.4));
        assert_eq!(sc.bts[0].position, [50.0, 50.0]);
    }

    #[test]
    fn line_layout_serves_every_bts() {
        let json = r#"{"layout":{"kind":"line","length":200,"count":7,"seed":5},
                       "traffic":{"kind":"proportional_worst_case","mean":5}}"#;
        let sc = build_scenario(&ScenarioConfig::from_json(json).unwrap()).unwrap();
        assert_eq!(sc.n(), 7);
        assert!(sc.bts.iter().all(|b| b.position[1] == 0.0));
        build_table(&sc).unwrap();
    }

    #[test]
    fn rejects_bad_traffic_length() {
        let json = r#"{"layout":{"kind":"explicit","bts":[{"x":0,"y":0}]},"traffic":{"kind":"explicit","rates":[1,2]}}"#;
        let err = build_scenario(&ScenarioConfig::from_json(json).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "traffic.rates"));
    }
}
