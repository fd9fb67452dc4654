//! Stage and precipitation file ingestion.
//!
//! Stage files are CSV records `sensor_id,timestamp,utc_offset_minutes,height_feet`
//! where `timestamp` is local wall time (`YYYY-MM-DDTHH:MM`); the offset is
//! subtracted to obtain UTC. Precipitation files hold hourly rainfall grids in
//! mm/h. Both formats start with a magic line carrying the format version.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDateTime, TimeDelta, Utc};
use thiserror::Error;

use crate::sensor_network::{IoError, ParcelRef, SensorId};

pub const STAGE_MAGIC: &str = "STAGECAST-STAGE v1";
pub const PRECIP_MAGIC: &str = "STAGECAST-PRECIP v1";

/// Stage sampling interval, seconds.
pub const STAGE_STEP_SECS: i64 = 15 * 60;
const HOUR_SECS: i64 = 3600;
/// Largest distance from a query instant to either bracketing sample for
/// which interpolation is still attempted.
pub const MAX_INTERPOLATION_GAP_SECS: i64 = 2 * HOUR_SECS;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("line {line}: timestamp {ts} is not aligned to {step_minutes} minutes")]
    NonAlignedTimestamp {
        line: usize,
        ts: DateTime<Utc>,
        step_minutes: i64,
    },
    #[error("line {line}: expected {expected} values, found {found}")]
    ShapeMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: negative rainfall {value}")]
    NegativeRainfall { line: usize, value: f64 },
    #[error("parcel ({}, {}) outside {rows}x{cols} grid", .parcel.row, .parcel.col)]
    ParcelOutOfBounds {
        parcel: ParcelRef,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for IngestError {
    fn from(e: std::io::Error) -> Self {
        IngestError::Io(IoError(e))
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

pub(crate) fn to_secs(t: DateTime<Utc>) -> i64 {
    t.timestamp()
}

pub(crate) fn from_secs(secs: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(secs, 0).expect("timestamp in range")
}

/// Truncates to the start of the containing UTC hour.
pub fn floor_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    from_secs(to_secs(t).div_euclid(HOUR_SECS) * HOUR_SECS)
}

pub fn is_stage_aligned(t: DateTime<Utc>) -> bool {
    to_secs(t).rem_euclid(STAGE_STEP_SECS) == 0
}

pub fn is_hour_aligned(t: DateTime<Utc>) -> bool {
    to_secs(t).rem_euclid(HOUR_SECS) == 0
}

/// Formats as `YYYY-MM-DDTHH:MMZ`.
pub fn format_utc(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%MZ").to_string()
}

/// Accepts `YYYY-MM-DDTHH:MM[:SS][Z]`, interpreted as UTC.
pub fn parse_utc(s: &str) -> Option<DateTime<Utc>> {
    parse_naive(s.trim().trim_end_matches('Z')).map(|n| n.and_utc())
}

fn parse_naive(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

/// Gage heights (feet) per sensor, keyed by 15-minute UTC slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageSeries {
    // slot = unix seconds / STAGE_STEP_SECS
    sensors: BTreeMap<SensorId, BTreeMap<i64, f64>>,
}

/// Result of parsing a stage file.
#[derive(Debug, Clone)]
pub struct StageParse {
    pub series: StageSeries,
    /// Records that overwrote an earlier (sensor, timestamp) record.
    pub duplicates: usize,
}

impl StageSeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a sample, replacing any previous value. Returns the replaced
    /// value.
    ///
    /// # Panics
    /// If `t` is not on a 15-minute boundary or `height` is not finite.
    pub fn insert(&mut self, sensor: &SensorId, t: DateTime<Utc>, height: f64) -> Option<f64> {
        assert!(is_stage_aligned(t), "stage timestamp {t} not 15-minute aligned");
        assert!(height.is_finite(), "stage height must be finite");
        self.sensors
            .entry(sensor.clone())
            .or_default()
            .insert(to_secs(t) / STAGE_STEP_SECS, height)
    }

    pub fn sensors(&self) -> impl Iterator<Item = &SensorId> {
        self.sensors.keys()
    }

    pub fn len(&self) -> usize {
        self.sensors.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw sample at exactly `t`.
    pub fn sample(&self, s: &SensorId, t: DateTime<Utc>) -> Option<f64> {
        if !is_stage_aligned(t) {
            return None;
        }
        self.sensors
            .get(s)?
            .get(&(to_secs(t) / STAGE_STEP_SECS))
            .copied()
    }

    pub fn samples(&self, s: &SensorId) -> impl Iterator<Item = (DateTime<Utc>, f64)> + '_ {
        self.sensors
            .get(s)
            .into_iter()
            .flat_map(|m| m.iter().map(|(&k, &v)| (from_secs(k * STAGE_STEP_SECS), v)))
    }

    /// Stage at instant `t`: the sample at `t` if present, otherwise linear
    /// interpolation between the nearest samples on either side when both lie
    /// within two hours of `t`, otherwise `None`.
    pub fn stage_at(&self, s: &SensorId, t: DateTime<Utc>) -> Option<f64> {
        let series = self.sensors.get(s)?;
        let secs = to_secs(t);
        if secs.rem_euclid(STAGE_STEP_SECS) == 0 {
            if let Some(&v) = series.get(&(secs / STAGE_STEP_SECS)) {
                return Some(v);
            }
        }
        // slots strictly before / after t
        let before_limit = secs.div_euclid(STAGE_STEP_SECS)
            - i64::from(secs.rem_euclid(STAGE_STEP_SECS) == 0);
        let (&k0, &v0) = series.range(..=before_limit).next_back()?;
        let (&k1, &v1) = series.range(before_limit + 1..).next()?;
        let (t0, t1) = (k0 * STAGE_STEP_SECS, k1 * STAGE_STEP_SECS);
        if secs - t0 > MAX_INTERPOLATION_GAP_SECS || t1 - secs > MAX_INTERPOLATION_GAP_SECS {
            return None;
        }
        let w = (secs - t0) as f64 / (t1 - t0) as f64;
        Some(v0 + w * (v1 - v0))
    }

    /// Hourly lookup; identical to [`StageSeries::stage_at`] on an hour
    /// boundary.
    pub fn stage_at_hour(&self, s: &SensorId, t: DateTime<Utc>) -> Option<f64> {
        debug_assert!(is_hour_aligned(t));
        self.stage_at(s, t)
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<StageParse> {
        let mut lines = reader.lines().enumerate();
        expect_magic(&mut lines, STAGE_MAGIC)?;
        let mut series = StageSeries::new();
        let mut duplicates = 0;
        for (n, line) in lines {
            let line_no = n + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let bad = |msg: String| IngestError::MalformedRecord { line: line_no, msg };
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", fields.len())));
            }
            let sensor = SensorId::new(fields[0]).map_err(bad)?;
            let local = parse_naive(fields[1])
                .ok_or_else(|| bad(format!("bad timestamp `{}`", fields[1])))?;
            let offset: i64 = fields[2]
                .parse()
                .map_err(|e| bad(format!("bad utc offset `{}`: {e}", fields[2])))?;
            let height: f64 = fields[3]
                .parse()
                .map_err(|e| bad(format!("bad height `{}`: {e}", fields[3])))?;
            if !height.is_finite() {
                return Err(bad(format!("non-finite height `{}`", fields[3])));
            }
            let utc = (local - TimeDelta::minutes(offset)).and_utc();
            if !is_stage_aligned(utc) {
                return Err(IngestError::NonAlignedTimestamp {
                    line: line_no,
                    ts: utc,
                    step_minutes: STAGE_STEP_SECS / 60,
                });
            }
            if series.insert(&sensor, utc, height).is_some() {
                duplicates += 1;
            }
        }
        if duplicates > 0 {
            log::warn!("stage file: {duplicates} duplicate (sensor, timestamp) records, last kept");
        }
        Ok(StageParse { series, duplicates })
    }

    /// Canonical form: UTC timestamps, offset 0, sorted by (sensor, time).
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{STAGE_MAGIC}")?;
        for (sensor, samples) in &self.sensors {
            for (&slot, &h) in samples {
                let t = from_secs(slot * STAGE_STEP_SECS);
                writeln!(w, "{sensor},{},0,{h}", t.format("%Y-%m-%dT%H:%M"))?;
            }
        }
        Ok(())
    }
}

fn expect_magic<I>(lines: &mut I, magic: &str) -> Result<()>
where
    I: Iterator<Item = (usize, std::io::Result<String>)>,
{
    check_magic(lines.next().map(|(_, l)| l), magic)
}

fn check_magic(line: Option<std::io::Result<String>>, magic: &str) -> Result<()> {
    match line.transpose()? {
        Some(l) if l.trim_end() == magic => Ok(()),
        _ => Err(IngestError::MalformedRecord {
            line: 1,
            msg: format!("missing `{magic}` header"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Precipitation
// ---------------------------------------------------------------------------

/// Hourly rainfall grids (mm/h), all frames sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecipFieldSeries {
    rows: usize,
    cols: usize,
    // hour index = unix seconds / 3600 -> row-major grid
    frames: BTreeMap<i64, Vec<f64>>,
}

impl PrecipFieldSeries {
    pub fn new(rows: usize, cols: usize) -> Self {
        PrecipFieldSeries {
            rows,
            cols,
            frames: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// # Panics
    /// On a non-hour timestamp, wrong grid size, or negative/non-finite values.
    pub fn insert_frame(&mut self, t: DateTime<Utc>, grid: Vec<f64>) {
        assert!(is_hour_aligned(t), "precip frame {t} not on the hour");
        assert_eq!(grid.len(), self.rows * self.cols, "precip frame shape");
        assert!(
            grid.iter().all(|v| v.is_finite() && *v >= 0.0),
            "rainfall must be finite and non-negative"
        );
        self.frames.insert(to_secs(t) / HOUR_SECS, grid);
    }

    pub fn frame(&self, t: DateTime<Utc>) -> Option<&[f64]> {
        self.frames
            .get(&(to_secs(t).div_euclid(HOUR_SECS)))
            .map(Vec::as_slice)
    }

    pub fn frames(&self) -> impl Iterator<Item = (DateTime<Utc>, &[f64])> + '_ {
        self.frames
            .iter()
            .map(|(&h, g)| (from_secs(h * HOUR_SECS), g.as_slice()))
    }

    pub fn check_parcel(&self, p: ParcelRef) -> Result<()> {
        if p.row < self.rows && p.col < self.cols {
            Ok(())
        } else {
            Err(IngestError::ParcelOutOfBounds {
                parcel: p,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// Rainfall at parcel `p` during the hour containing `t`.
    pub fn precip_at(&self, p: ParcelRef, t: DateTime<Utc>) -> Result<Option<f64>> {
        self.check_parcel(p)?;
        Ok(self.frame(t).map(|g| g[p.row * self.cols + p.col]))
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l))
            .filter(|(_, l)| {
                l.as_ref()
                    .map(|s| !s.trim().is_empty() && !s.trim_start().starts_with('#'))
                    .unwrap_or(true)
            });
        check_magic(lines.next().map(|(_, l)| l), PRECIP_MAGIC)?;
        let (line_no, header) = lines.next().ok_or(IngestError::MalformedRecord {
            line: 2,
            msg: "missing `rows cols` header".into(),
        })?;
        let header = header?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| IngestError::MalformedRecord {
                line: line_no,
                msg: format!("bad grid header: {e}"),
            })?;
        let [rows, cols] = dims[..] else {
            return Err(IngestError::MalformedRecord {
                line: line_no,
                msg: "grid header must be `rows cols`".into(),
            });
        };
        let mut series = PrecipFieldSeries::new(rows, cols);

        while let Some((line_no, line)) = lines.next() {
            let line = line?;
            let bad = |msg: String| IngestError::MalformedRecord { line: line_no, msg };
            let ts = line
                .trim()
                .strip_prefix("t=")
                .ok_or_else(|| bad("expected frame header `t=<timestamp>`".into()))?;
            let t = parse_utc(ts).ok_or_else(|| bad(format!("bad timestamp `{ts}`")))?;
            if !is_hour_aligned(t) {
                return Err(IngestError::NonAlignedTimestamp {
                    line: line_no,
                    ts: t,
                    step_minutes: 60,
                });
            }
            if series.frame(t).is_some() {
                return Err(bad(format!("duplicate frame {}", format_utc(t))));
            }
            let mut grid = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (row_no, row) = match lines.next() {
                    Some((n, row)) => (n, row?),
                    None => {
                        return Err(IngestError::ShapeMismatch {
                            line: line_no,
                            expected: rows * cols,
                            found: grid.len(),
                        })
                    }
                };
                if row.trim_start().starts_with("t=") {
                    return Err(IngestError::ShapeMismatch {
                        line: row_no,
                        expected: rows * cols,
                        found: grid.len(),
                    });
                }
                let before = grid.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|e| IngestError::MalformedRecord {
                        line: row_no,
                        msg: format!("bad rainfall `{tok}`: {e}"),
                    })?;
                    if !v.is_finite() {
                        return Err(IngestError::MalformedRecord {
                            line: row_no,
                            msg: format!("non-finite rainfall `{tok}`"),
                        });
                    }
                    if v < 0.0 {
                        return Err(IngestError::NegativeRainfall {
                            line: row_no,
                            value: v,
                        });
                    }
                    grid.push(v);
                }
                if grid.len() - before != cols {
                    return Err(IngestError::ShapeMismatch {
                        line: row_no,
                        expected: cols,
                        found: grid.len() - before,
                    });
                }
            }
            series.frames.insert(to_secs(t) / HOUR_SECS, grid);
        }
        Ok(series)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PRECIP_MAGIC}")?;
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for (t, grid) in self.frames() {
            writeln!(w, "t={}", t.format("%Y-%m-%dT%H:%M:%SZ"))?;
            for row in grid.chunks(self.cols.max(1)) {
                let mut first = true;
                for v in row {
                    if !first {
                        w.write_all(b" ")?;
                    }
                    write!(w, "{v}")?;
                    first = false;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}
