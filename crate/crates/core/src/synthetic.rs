//! Seeded synthetic worlds: a tree-shaped sensor network, storm rainfall on a
//! grid, and stage series routed through the tree by a fixed law.
//!
//! Every random draw comes from one ChaCha8 stream seeded with
//! [`WorldConfig::seed`], in a fixed order, so a seed names a world.
//!
//! Geography: sensor `S00` is the outlet. Sensor `i > 0` drains into a sensor
//! drawn uniformly from `floor(i/2) ..= i-1`, with an integer edge lag drawn
//! from `lag_hours`; `td_outlet` accumulates those lags. Each grid parcel
//! belongs to the local catchment of its nearest sensor; a sensor's watershed
//! is its local catchment plus those of all its ancestors. A parcel in the
//! local catchment of `v`, seen from `s`, has travel time
//! `td(v, s) + 1 + distance(parcel, v) * parcel_hours_per_cell`.
//!
//! Rain: storms arrive as a Poisson process (`storm_rate_per_day`). Duration
//! (rounded to whole hours, at least 1), radius and intensity are each
//! uniform on `[0.5, 1.5]` times `storm_duration_hours`,
//! `storm_radius_cells` and `storm_intensity_mm_h`. A storm adds `intensity * max(0, 1 - (d/r)^2)`
//! to each parcel at distance `d` from its centre, every hour it is active.
//!
//! Stage, at every 15-minute instant `t` with hour `h = floor_hour(t)`:
//!
//! ```text
//! A(s, t) = gain * sum_{k=1..6} W[k] * Rloc(s, h - k)
//!         + attenuation * sum_{u in parents(s)} A(u, t - lag(u, s))
//! stage(s, t) = baseflow + A(s, t)
//! ```
//!
//! where `Rloc(s, h)` is the mean rainfall over the local catchment of `s` in
//! the frame of hour `h` (0 for an empty catchment), `W` is [`KERNEL`], and
//! `A` is 0 before the world starts.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, TimeDelta, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OUTPUT_LEN;
use crate::ingestion::{format_utc, is_hour_aligned, is_stage_aligned, parse_utc, PrecipFieldSeries, StageSeries};
use crate::sensor_network::{GraphError, GraphSpec, IoError, ParcelRecord, ParcelRef, Sensor, SensorGraph, SensorId};

/// Triangular response kernel over the 6 hours after rainfall; sums to 1.
pub const KERNEL: [f64; 6] = [1.0 / 12.0, 2.0 / 12.0, 3.0 / 12.0, 3.0 / 12.0, 2.0 / 12.0, 1.0 / 12.0];

pub const GRAPH_FILE: &str = "graph.txt";
pub const STAGE_FILE: &str = "stage.csv";
pub const PRECIP_FILE: &str = "precip.txt";

const STEPS_PER_HOUR: i64 = 4;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("{t} is outside the forecastable range of the world")]
    OutOfRange { t: DateTime<Utc> },
    #[error("unknown sensor `{0}`")]
    UnknownSensor(SensorId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for SyntheticError {
    fn from(e: std::io::Error) -> Self {
        SyntheticError::Io(IoError(e))
    }
}

pub type Result<T, E = SyntheticError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub sensor_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// First instant, on an hour boundary, e.g. `2010-04-01T00:00Z`.
    pub start: String,
    pub days: u32,
    pub storm_rate_per_day: f64,
    pub storm_intensity_mm_h: f64,
    pub storm_duration_hours: f64,
    pub storm_radius_cells: f64,
    /// Inclusive range of whole-hour edge lags.
    pub lag_hours: [u32; 2],
    pub parcel_hours_per_cell: f64,
    pub baseflow_ft: f64,
    pub gain_ft_per_mm: f64,
    pub attenuation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            sensor_count: 10,
            grid_rows: 16,
            grid_cols: 16,
            start: "2010-04-01T00:00Z".into(),
            days: 60,
            storm_rate_per_day: 0.2,
            storm_intensity_mm_h: 3.0,
            storm_duration_hours: 12.0,
            storm_radius_cells: 30.0,
            lag_hours: [4, 10],
            parcel_hours_per_cell: 0.5,
            baseflow_ft: 2.0,
            gain_ft_per_mm: 0.3,
            attenuation: 0.95,
        }
    }
}

impl WorldConfig {
    pub fn start_time(&self) -> Result<DateTime<Utc>> {
        let t = parse_utc(&self.start)
            .ok_or_else(|| SyntheticError::InvalidConfig(format!("bad start time `{}`", self.start)))?;
        if !is_hour_aligned(t) {
            return Err(SyntheticError::InvalidConfig("start must be on an hour boundary".into()));
        }
        Ok(t)
    }

    pub fn end_time(&self) -> Result<DateTime<Utc>> {
        Ok(self.start_time()? + TimeDelta::days(i64::from(self.days)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SyntheticError::InvalidConfig(m.into()));
        self.start_time()?;
        if !(self.storm_rate_per_day.is_finite() && self.storm_rate_per_day >= 0.0) {
            return bad("storm_rate_per_day must be non-negative");
        }
        let positive = [
            ("storm_intensity_mm_h", self.storm_intensity_mm_h),
            ("storm_duration_hours", self.storm_duration_hours),
            ("storm_radius_cells", self.storm_radius_cells),
            ("parcel_hours_per_cell", self.parcel_hours_per_cell),
            ("baseflow_ft", self.baseflow_ft),
            ("gain_ft_per_mm", self.gain_ft_per_mm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive, got {v}"));
            }
        }
        if self.sensor_count < 5 {
            return bad("sensor_count must be at least 5");
        }
        if self.sensor_count > 1000 {
            return bad("sensor_count must be at most 1000");
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid must be non-empty");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        let [lo, hi] = self.lag_hours;
        if lo == 0 || lo > hi {
            return bad("lag_hours must be [min, max] with 1 <= min <= max");
        }
        if !(self.attenuation > 0.0 && self.attenuation < 1.0) {
            return bad("attenuation must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Storm {
    pub start_hour: i64,
    pub hours: i64,
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

/// A generated world. Hour indices count from [`World::start`].
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub graph: SensorGraph,
    pub precip: PrecipFieldSeries,
    pub stage: StageSeries,
    pub storms: Vec<Storm>,
    start: DateTime<Utc>,
    hours: i64,
    /// Local catchment parcels of each sensor, in id order.
    local: BTreeMap<SensorId, Vec<ParcelRef>>,
    /// Direct upstream sensors of each sensor with their edge lags (hours).
    parents: BTreeMap<SensorId, Vec<(SensorId, i64)>>,
}

fn sensor_id(i: usize, n: usize) -> SensorId {
    let width = (n - 1).to_string().len().max(2);
    SensorId::new(format!("S{i:0width$}")).expect("valid id")
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let u: f64 = rng.random();
    -mean * (1.0 - u).ln()
}

/// Builds the world described by `cfg`.
pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.sensor_count;
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);

    // network
    let ids: Vec<SensorId> = (0..n).map(|i| sensor_id(i, n)).collect();
    let mut down = vec![usize::MAX; n];
    let mut lag = vec![0i64; n];
    let mut td = vec![0i64; n];
    for i in 1..n {
        down[i] = rng.random_range(i / 2..i);
        lag[i] = i64::from(rng.random_range(cfg.lag_hours[0]..=cfg.lag_hours[1]));
        td[i] = td[down[i]] + lag[i];
    }
    let locations: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..cols as f64), rng.random_range(0.0..rows as f64)))
        .collect();

    // local catchments: nearest sensor by parcel centre, ties to the lower index
    let mut local_idx: Vec<Vec<ParcelRef>> = vec![Vec::new(); n];
    let dist = |p: ParcelRef, (x, y): (f64, f64)| {
        let (px, py) = (p.col as f64 + 0.5, p.row as f64 + 0.5);
        ((px - x).powi(2) + (py - y).powi(2)).sqrt()
    };
    for row in 0..rows {
        for col in 0..cols {
            let p = ParcelRef::new(row, col);
            let best = (0..n)
                .min_by(|&a, &b| dist(p, locations[a]).total_cmp(&dist(p, locations[b])))
                .expect("at least one sensor");
            local_idx[best].push(p);
        }
    }

    let mut spec = GraphSpec::default();
    for i in 0..n {
        spec.sensors.push(Sensor {
            id: ids[i].clone(),
            td_outlet: td[i] as f64,
            location: locations[i],
        });
        if i > 0 {
            spec.edges.push((ids[i].clone(), ids[down[i]].clone()));
        }
    }
    // every sensor sees its own local parcels and those of all its ancestors
    for s in 0..n {
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for &p in &local_idx[v] {
                spec.parcels.push(ParcelRecord {
                    sensor: ids[s].clone(),
                    parcel: p,
                    td_hours: (td[v] - td[s]) as f64 + 1.0 + dist(p, locations[v]) * cfg.parcel_hours_per_cell,
                });
            }
            stack.extend((0..n).filter(|&c| c > 0 && down[c] == v));
        }
    }
    let graph = SensorGraph::build(spec)?;

    // storms
    let start = cfg.start_time()?;
    let hours = i64::from(cfg.days) * 24;
    let mut storms = Vec::new();
    let mut clock = 0.0;
    let rate = cfg.storm_rate_per_day;
    loop {
        if rate == 0.0 {
            break;
        }
        clock += exp_sample(&mut rng, 24.0 / rate);
        if clock >= hours as f64 {
            break;
        }
        storms.push(Storm {
            start_hour: clock.floor() as i64,
            hours: (cfg.storm_duration_hours * rng.random_range(0.5..1.5)).round().max(1.0) as i64,
            center: (rng.random_range(0.0..cols as f64), rng.random_range(0.0..rows as f64)),
            radius: cfg.storm_radius_cells * rng.random_range(0.5..1.5),
            intensity: cfg.storm_intensity_mm_h * rng.random_range(0.5..1.5),
        });
    }
    let mut grids = vec![vec![0.0; rows * cols]; hours as usize];
    for st in &storms {
        for h in st.start_hour..(st.start_hour + st.hours).min(hours) {
            let g = &mut grids[h as usize];
            for row in 0..rows {
                for col in 0..cols {
                    let d = dist(ParcelRef::new(row, col), st.center);
                    let f = 1.0 - (d / st.radius).powi(2);
                    if f > 0.0 {
                        g[row * cols + col] += st.intensity * f;
                    }
                }
            }
        }
    }
    let mut precip = PrecipFieldSeries::new(rows, cols);
    for (h, g) in grids.into_iter().enumerate() {
        precip.insert_frame(start + TimeDelta::hours(h as i64), g);
    }

    let local: BTreeMap<SensorId, Vec<ParcelRef>> =
        (0..n).map(|i| (ids[i].clone(), local_idx[i].clone())).collect();
    let parents: BTreeMap<SensorId, Vec<(SensorId, i64)>> = (0..n)
        .map(|s| {
            let mut ps: Vec<(SensorId, i64)> = (1..n)
                .filter(|&c| down[c] == s)
                .map(|c| (ids[c].clone(), lag[c]))
                .collect();
            ps.sort();
            (ids[s].clone(), ps)
        })
        .collect();

    let mut world = World {
        config: cfg.clone(),
        graph,
        precip,
        stage: StageSeries::new(),
        storms,
        start,
        hours,
        local,
        parents,
    };
    world.stage = world.route();
    Ok(world)
}

impl World {
    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    /// First instant after the world.
    pub fn end(&self) -> DateTime<Utc> {
        self.start + TimeDelta::hours(self.hours)
    }

    pub fn local_catchment(&self, s: &SensorId) -> Option<&[ParcelRef]> {
        self.local.get(s).map(Vec::as_slice)
    }

    /// Parents of `s` with their whole-hour lags, sorted by id.
    pub fn parents_of(&self, s: &SensorId) -> Option<&[(SensorId, i64)]> {
        self.parents.get(s).map(Vec::as_slice)
    }

    fn local_mean(&self, s: &SensorId, hour: i64) -> f64 {
        let parcels = &self.local[s];
        if hour < 0 || hour >= self.hours || parcels.is_empty() {
            return 0.0;
        }
        let frame = self
            .precip
            .frame(self.start + TimeDelta::hours(hour))
            .expect("frame for every hour");
        let cols = self.config.grid_cols;
        parcels.iter().map(|p| frame[p.row * cols + p.col]).sum::<f64>() / parcels.len() as f64
    }

    fn local_term(&self, s: &SensorId, hour: i64) -> f64 {
        let mut acc = 0.0;
        for (k, w) in KERNEL.iter().enumerate() {
            acc += w * self.local_mean(s, hour - (k as i64 + 1));
        }
        self.config.gain_ft_per_mm * acc
    }

    /// Forward fill of every anomaly series in topological order.
    fn route(&self) -> StageSeries {
        let steps = (self.hours * STEPS_PER_HOUR) as usize;
        let mut anomaly: BTreeMap<&SensorId, Vec<f64>> = BTreeMap::new();
        for s in self.graph.topological_order() {
            let local: Vec<f64> = (0..self.hours).map(|h| self.local_term(s, h)).collect();
            let mut a = vec![0.0; steps];
            for (i, v) in a.iter_mut().enumerate() {
                *v = local[i / STEPS_PER_HOUR as usize];
                for (u, lag) in &self.parents[s] {
                    if let Some(j) = i.checked_sub((lag * STEPS_PER_HOUR) as usize) {
                        *v += self.config.attenuation * anomaly[u][j];
                    }
                }
            }
            anomaly.insert(s, a);
        }
        let mut stage = StageSeries::new();
        for (s, a) in anomaly {
            for (i, v) in a.into_iter().enumerate() {
                let t = self.start + TimeDelta::minutes(15 * i as i64);
                stage.insert(s, t, self.config.baseflow_ft + v);
            }
        }
        stage
    }

    /// Anomaly of `s` at step `i` (15-minute steps from the start), by direct
    /// recursion over the generative law.
    fn anomaly_at(&self, s: &SensorId, i: i64) -> f64 {
        if i < 0 {
            return 0.0;
        }
        let mut v = self.local_term(s, i.div_euclid(STEPS_PER_HOUR));
        for (u, lag) in &self.parents[s] {
            v += self.config.attenuation * self.anomaly_at(u, i - lag * STEPS_PER_HOUR);
        }
        v
    }

    /// Exact stages of `s` at `t, t+1h, ..., t+23h`, recomputed from the
    /// rainfall frames.
    pub fn oracle(&self, s: &SensorId, t: DateTime<Utc>) -> Result<Vec<f64>> {
        if !self.local.contains_key(s) {
            return Err(SyntheticError::UnknownSensor(s.clone()));
        }
        let last = t + TimeDelta::hours(OUTPUT_LEN as i64 - 1);
        if !is_stage_aligned(t) || t < self.start || last >= self.end() {
            return Err(SyntheticError::OutOfRange { t });
        }
        let i0 = (t - self.start).num_minutes() / 15;
        Ok((0..OUTPUT_LEN as i64)
            .map(|h| self.config.baseflow_ft + self.anomaly_at(s, i0 + h * STEPS_PER_HOUR))
            .collect())
    }

    /// Writes the graph, stage and precipitation files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut g = Vec::new();
        self.graph.to_spec().write(&mut g)?;
        std::fs::write(dir.join(GRAPH_FILE), g)?;
        let mut s = Vec::new();
        self.stage.write(&mut s)?;
        std::fs::write(dir.join(STAGE_FILE), s)?;
        let mut p = Vec::new();
        self.precip.write(&mut p)?;
        std::fs::write(dir.join(PRECIP_FILE), p)?;
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "{} sensors, {}x{} grid, {} storms, {} .. {}",
            self.graph.len(),
            self.config.grid_rows,
            self.config.grid_cols,
            self.storms.len(),
            format_utc(self.start),
            format_utc(self.end())
        )
    }
}

/// Free-function form of [`World::oracle`].
pub fn world_oracle(world: &World, s: &SensorId, t: DateTime<Utc>) -> Result<Vec<f64>> {
    world.oracle(s, t)
}
