//! Dataset compilation.
//!
//! One entry for sensor `S` at instant `t` concatenates
//!
//! - the height vector: for each of the 4 nearest upstream sensors `U` with
//!   travel time `td` (rounded to whole hours), the stages at
//!   `t-td-(n-1) ... t-td` hours, oldest first; then `S`'s own stages at
//!   `t-m ... t-1`;
//! - the precipitation vector: slot `k` (1-based) is the mean rainfall at
//!   `t-k` over the exclusive-watershed parcels that are `k` hours away from
//!   `S`; empty buckets read 0, buckets beyond the vector length are dropped;
//!
//! and targets the 24 hourly stages `t ... t+23`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ingestion::{
    self, format_utc, is_stage_aligned, IngestError, PrecipFieldSeries, StageSeries,
    STAGE_STEP_SECS,
};
use crate::sensor_network::{
    GraphError, IoError, ParcelBuckets, SensorGraph, SensorId, DEFAULT_UPSTREAM_COUNT,
};

pub const OUTPUT_LEN: usize = 24;
pub const DATASET_MAGIC: &[u8] = b"STAGECAST-DS v1\n";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sensor {sensor} has {found} upstream sensors, {needed} required")]
    InsufficientUpstream {
        sensor: SensorId,
        found: usize,
        needed: usize,
    },
    #[error("empty time range")]
    EmptyRange,
    #[error("range bound {0} is not on a 15-minute boundary")]
    MisalignedRange(DateTime<Utc>),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("split leaves {train} training and {test} test entries")]
    DegenerateSplit { train: usize, test: usize },
    #[error("entry for {sensor} has input length {input}/output length {output}, variant expects {expected}/24")]
    ShapeMismatch {
        sensor: SensorId,
        input: usize,
        output: usize,
        expected: usize,
    },
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(IoError(e))
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// The two input layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    /// 4 h per upstream, 3 h self, 20 precipitation slots: 39 inputs.
    Smaller,
    /// 24 h per upstream, 24 h self, 40 precipitation slots: 160 inputs.
    Larger,
}

impl DatasetVariant {
    pub fn upstream_hours(self) -> usize {
        match self {
            DatasetVariant::Smaller => 4,
            DatasetVariant::Larger => 24,
        }
    }

    pub fn self_hours(self) -> usize {
        match self {
            DatasetVariant::Smaller => 3,
            DatasetVariant::Larger => 24,
        }
    }

    pub fn precip_len(self) -> usize {
        match self {
            DatasetVariant::Smaller => 20,
            DatasetVariant::Larger => 40,
        }
    }

    pub fn upstream_count(self) -> usize {
        DEFAULT_UPSTREAM_COUNT
    }

    pub fn height_len(self) -> usize {
        self.upstream_count() * self.upstream_hours() + self.self_hours()
    }

    pub fn input_len(self) -> usize {
        self.height_len() + self.precip_len()
    }

    pub fn output_len(self) -> usize {
        OUTPUT_LEN
    }

    /// Index of `H^S_{t-1}` within the input vector.
    pub fn last_self_index(self) -> usize {
        self.height_len() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetVariant::Smaller => "smaller",
            DatasetVariant::Larger => "larger",
        }
    }

    fn code(self) -> u8 {
        match self {
            DatasetVariant::Smaller => 0,
            DatasetVariant::Larger => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DatasetVariant::Smaller),
            1 => Some(DatasetVariant::Larger),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "smaller" => Ok(DatasetVariant::Smaller),
            "larger" => Ok(DatasetVariant::Larger),
            other => Err(format!("unknown dataset variant `{other}` (smaller|larger)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub sensor: SensorId,
    pub t: DateTime<Utc>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SkipReason {
    MissingStage,
    MissingPrecip,
    MissingOutput,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::MissingStage => "missing_stage",
            SkipReason::MissingPrecip => "missing_precip",
            SkipReason::MissingOutput => "missing_output",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-sensor constants shared by every entry of that sensor.
#[derive(Debug, Clone)]
pub struct SensorContext {
    pub sensor: SensorId,
    /// Selected upstream sensors with travel time rounded to whole hours.
    pub upstream: Vec<(SensorId, i64)>,
    pub buckets: ParcelBuckets,
}

impl SensorContext {
    pub fn new(graph: &SensorGraph, s: &SensorId, upstream_count: usize) -> Result<Self> {
        let upstream_ids = graph.upstream_of(s, upstream_count)?;
        if upstream_ids.len() < upstream_count {
            return Err(DatasetError::InsufficientUpstream {
                sensor: s.clone(),
                found: upstream_ids.len(),
                needed: upstream_count,
            });
        }
        let upstream = upstream_ids
            .iter()
            .map(|u| Ok((u.clone(), graph.time_distance(u, s)?.round() as i64)))
            .collect::<Result<Vec<_>>>()?;
        let buckets = graph.parcel_buckets(s, &upstream_ids)?;
        Ok(SensorContext {
            sensor: s.clone(),
            upstream,
            buckets,
        })
    }

    /// Timestamps read by each height-vector slot, in vector order.
    pub fn height_slot_times(&self, t: DateTime<Utc>, v: DatasetVariant) -> Vec<DateTime<Utc>> {
        let uh = v.upstream_hours() as i64;
        let sh = v.self_hours() as i64;
        let mut times = Vec::with_capacity(v.height_len());
        for &(_, lag) in &self.upstream {
            times.extend((0..uh).rev().map(|j| t - TimeDelta::hours(lag + j)));
        }
        times.extend((1..=sh).rev().map(|j| t - TimeDelta::hours(j)));
        times
    }

    fn height_vector(&self, stage: &StageSeries, t: DateTime<Utc>, v: DatasetVariant) -> Option<Vec<f64>> {
        let uh = v.upstream_hours();
        let times = self.height_slot_times(t, v);
        let mut out = Vec::with_capacity(times.len());
        for (i, &at) in times.iter().enumerate() {
            let sensor = match self.upstream.get(i / uh) {
                Some((u, _)) => u,
                None => &self.sensor,
            };
            out.push(stage.stage_at(sensor, at)?);
        }
        Some(out)
    }
}

/// Height vector `H` for sensor `s` at `t`; `Ok(None)` when any slot is
/// missing.
pub fn build_height_vector(
    stage: &StageSeries,
    graph: &SensorGraph,
    s: &SensorId,
    t: DateTime<Utc>,
    v: DatasetVariant,
) -> Result<Option<Vec<f64>>> {
    let ctx = SensorContext::new(graph, s, v.upstream_count())?;
    Ok(ctx.height_vector(stage, t, v))
}

/// Precipitation vector `P` of length `len`; `Ok(None)` when a needed frame is
/// missing.
pub fn build_precip_vector(
    precip: &PrecipFieldSeries,
    buckets: &ParcelBuckets,
    t: DateTime<Utc>,
    len: usize,
) -> Result<Option<Vec<f64>>, IngestError> {
    let mut out = vec![0.0; len];
    for (&k, parcels) in buckets.buckets.range(1..=len as u32) {
        let at = t - TimeDelta::hours(i64::from(k));
        let mut sum = 0.0;
        for &p in parcels {
            match precip.precip_at(p, at)? {
                Some(v) => sum += v,
                None => return Ok(None),
            }
        }
        out[k as usize - 1] = sum / parcels.len() as f64;
    }
    Ok(Some(out))
}

/// Output vector `O`: stages at `t, t+1h, ..., t+23h`.
pub fn build_output_vector(stage: &StageSeries, s: &SensorId, t: DateTime<Utc>) -> Option<Vec<f64>> {
    (0..OUTPUT_LEN as i64)
        .map(|k| stage.stage_at(s, t + TimeDelta::hours(k)))
        .collect()
}

/// Concatenates `H ++ P`; the first missing component decides the skip reason.
pub fn build_entry(
    sensor: &SensorId,
    t: DateTime<Utc>,
    height: Option<Vec<f64>>,
    precip: Option<Vec<f64>>,
    output: Option<Vec<f64>>,
) -> Result<DatasetEntry, SkipReason> {
    let mut input = height.ok_or(SkipReason::MissingStage)?;
    input.extend(precip.ok_or(SkipReason::MissingPrecip)?);
    let output = output.ok_or(SkipReason::MissingOutput)?;
    Ok(DatasetEntry {
        sensor: sensor.clone(),
        t,
        input,
        output,
    })
}

/// Half-open `[start, end)` range of 15-minute instants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeRange {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if start >= end {
            return Err(DatasetError::EmptyRange);
        }
        for b in [start, end] {
            if !is_stage_aligned(b) {
                return Err(DatasetError::MisalignedRange(b));
            }
        }
        Ok(TimeRange { start, end })
    }

    /// From the first stage sample to one step past the last.
    pub fn covering(stage: &StageSeries) -> Result<Self> {
        let mut bounds: Option<(i64, i64)> = None;
        for s in stage.sensors() {
            for (t, _) in stage.samples(s) {
                let x = ingestion::to_secs(t);
                bounds = Some(bounds.map_or((x, x), |(lo, hi)| (lo.min(x), hi.max(x))));
            }
        }
        let (lo, hi) = bounds.ok_or(DatasetError::EmptyRange)?;
        TimeRange::new(ingestion::from_secs(lo), ingestion::from_secs(hi + STAGE_STEP_SECS))
    }

    pub fn instants(&self) -> impl Iterator<Item = DateTime<Utc>> {
        let (start, end) = (ingestion::to_secs(self.start), ingestion::to_secs(self.end));
        (start..end)
            .step_by(STAGE_STEP_SECS as usize)
            .map(ingestion::from_secs)
    }

    pub fn instant_count(&self) -> usize {
        ((self.end - self.start).num_seconds() / STAGE_STEP_SECS) as usize
    }
}

impl std::str::FromStr for TimeRange {
    type Err = String;

    /// `START..END`, both `YYYY-MM-DDTHH:MM[Z]`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("range `{s}` must look like START..END"))?;
        let start = ingestion::parse_utc(a).ok_or_else(|| format!("bad range start `{a}`"))?;
        let end = ingestion::parse_utc(b).ok_or_else(|| format!("bad range end `{b}`"))?;
        TimeRange::new(start, end).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<(SensorId, DateTime<Utc>, SkipReason)>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<SkipReason, usize> {
        let mut counts = BTreeMap::new();
        for (_, _, r) in &self.skipped {
            *counts.entry(*r).or_insert(0) += 1;
        }
        counts
    }

    /// CSV `sensor,t,reason`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sensor,t,reason")?;
        for (s, t, r) in &self.skipped {
            writeln!(w, "{s},{},{r}", format_utc(*t))?;
        }
        Ok(())
    }
}

/// Builds one attempted entry per usable sensor per 15-minute instant of
/// `range`. `workers` sets the thread count; output order does not depend
/// on it.
pub fn build_dataset(
    range: TimeRange,
    graph: &SensorGraph,
    stage: &StageSeries,
    precip: &PrecipFieldSeries,
    v: DatasetVariant,
    workers: usize,
) -> Result<(Dataset, SkipReport)> {
    let contexts = graph
        .usable_sensors(v.upstream_count())
        .iter()
        .map(|s| SensorContext::new(graph, s, v.upstream_count()))
        .collect::<Result<Vec<_>>>()?;
    for ctx in &contexts {
        for parcels in ctx.buckets.buckets.values() {
            for &p in parcels {
                precip.check_parcel(p)?;
            }
        }
    }

    let build_sensor = |ctx: &SensorContext| {
        let mut entries = Vec::new();
        let mut skipped = Vec::new();
        for t in range.instants() {
            let h = ctx.height_vector(stage, t, v);
            let p = build_precip_vector(precip, &ctx.buckets, t, v.precip_len())
                .expect("parcels checked against grid");
            let o = build_output_vector(stage, &ctx.sensor, t);
            match build_entry(&ctx.sensor, t, h, p, o) {
                Ok(e) => entries.push(e),
                Err(r) => skipped.push((ctx.sensor.clone(), t, r)),
            }
        }
        (entries, skipped)
    };

    let per_sensor: Vec<_> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| contexts.par_iter().map(build_sensor).collect())
    } else {
        contexts.iter().map(build_sensor).collect()
    };

    let mut entries = Vec::new();
    let mut report = SkipReport::default();
    for (e, s) in per_sensor {
        entries.extend(e);
        report.skipped.extend(s);
    }
    Ok((Dataset { variant: v, entries }, report))
}

/// How [`split`] partitions entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Seeded shuffle, then cut.
    Random,
    /// Earliest instants train, latest test.
    Chronological,
}

/// Homogeneous, `(sensor, t)`-sorted collection of entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    variant: DatasetVariant,
    entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Validates shapes and finiteness, then sorts by `(sensor, t)`.
    pub fn new(variant: DatasetVariant, mut entries: Vec<DatasetEntry>) -> Result<Self> {
        for e in &entries {
            if e.input.len() != variant.input_len() || e.output.len() != OUTPUT_LEN {
                return Err(DatasetError::ShapeMismatch {
                    sensor: e.sensor.clone(),
                    input: e.input.len(),
                    output: e.output.len(),
                    expected: variant.input_len(),
                });
            }
        }
        entries.sort_by(|a, b| a.sensor.cmp(&b.sensor).then(a.t.cmp(&b.t)));
        Ok(Dataset { variant, entries })
    }

    pub fn variant(&self) -> DatasetVariant {
        self.variant
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<DatasetEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn filter_sensor(&self, s: &SensorId) -> Dataset {
        self.filter(|e| &e.sensor == s)
    }

    /// Entries satisfying `keep`, order preserved.
    pub fn filter<F: Fn(&DatasetEntry) -> bool>(&self, keep: F) -> Dataset {
        Dataset {
            variant: self.variant,
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&[self.variant.code()])?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let id = e.sensor.as_str().as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&e.t.timestamp().to_le_bytes())?;
            for v in e.input.iter().chain(&e.output) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = 4 + 8 + 8 * (self.variant.input_len() + OUTPUT_LEN);
        let mut buf = Vec::with_capacity(DATASET_MAGIC.len() + 9 + self.len() * (width + 8));
        self.write(&mut buf).expect("write to Vec");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(DATASET_MAGIC.len())? != DATASET_MAGIC {
            return Err(DatasetError::Corrupt("bad magic".into()));
        }
        let code = cur.take(1)?[0];
        let variant = DatasetVariant::from_code(code)
            .ok_or_else(|| DatasetError::Corrupt(format!("unknown variant code {code}")))?;
        let count = cur.u64()?;
        let per_entry_min = 4 + 8 + 8 * (variant.input_len() + OUTPUT_LEN) as u64;
        if count.saturating_mul(per_entry_min) > (bytes.len() - cur.pos) as u64 {
            return Err(DatasetError::Corrupt(format!(
                "header claims {count} entries, file too short"
            )));
        }
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id_len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| DatasetError::Corrupt("sensor id not UTF-8".into()))?;
            let sensor = SensorId::new(id).map_err(DatasetError::Corrupt)?;
            let secs = cur.i64()?;
            let t = DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| DatasetError::Corrupt(format!("timestamp {secs} out of range")))?;
            let mut read_vec = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        let v = cur.f64()?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(DatasetError::Corrupt("non-finite value".into()))
                        }
                    })
                    .collect()
            };
            let input = read_vec(variant.input_len())?;
            let output = read_vec(OUTPUT_LEN)?;
            entries.push(DatasetEntry {
                sensor,
                t,
                input,
                output,
            });
        }
        if cur.pos != bytes.len() {
            return Err(DatasetError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        let sorted = entries
            .windows(2)
            .all(|w| (&w[0].sensor, w[0].t) < (&w[1].sensor, w[1].t));
        if !sorted {
            return Err(DatasetError::Corrupt("entries not sorted by (sensor, t)".into()));
        }
        Ok(Dataset { variant, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DatasetError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Partitions `d` into `(train, test)` with `|train| = round(fraction * N)`.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64, mode: SplitMode) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let n = d.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DatasetError::DegenerateSplit {
            train: n_train,
            test: n - n_train,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        SplitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        SplitMode::Chronological => {
            order.sort_by(|&a, &b| {
                let (ea, eb) = (&d.entries[a], &d.entries[b]);
                ea.t.cmp(&eb.t).then(ea.sensor.cmp(&eb.sensor))
            });
        }
    }
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Dataset {
            variant: d.variant,
            entries: idx.into_iter().map(|i| d.entries[i].clone()).collect(),
        }
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
