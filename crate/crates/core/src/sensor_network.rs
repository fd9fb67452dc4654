//! River sensor network as a directed acyclic graph.
//!
//! Edges point downstream: an edge `A -> B` means water passing sensor `A`
//! later reaches sensor `B`. Every sensor carries its water travel time to the
//! watershed outlet (`td_outlet`, hours); the time distance between an
//! upstream sensor and a downstream one is the difference of those values.
//!
//! Watersheds are sets of precipitation-grid parcels. Each parcel in a
//! sensor's watershed carries its own travel time to that sensor, which is
//! what [`bucket_parcels`] uses to group rainfall by arrival hour.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of upstream sensors feeding each forecast.
pub const DEFAULT_UPSTREAM_COUNT: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate sensor id `{0}`")]
    DuplicateSensor(SensorId),
    #[error("edge {up} -> {down} references an unknown sensor")]
    UnknownEdgeEndpoint { up: SensorId, down: SensorId },
    #[error("sensor graph contains a cycle through `{0}`")]
    CycleDetected(SensorId),
    #[error("time distance does not decrease along edge {up} ({up_td} h) -> {down} ({down_td} h)")]
    NonMonotoneTimeDistance {
        up: SensorId,
        down: SensorId,
        up_td: f64,
        down_td: f64,
    },
    #[error("unknown sensor `{0}`")]
    UnknownSensor(SensorId),
    #[error("`{up}` is not upstream of `{down}`")]
    NotUpstream { up: SensorId, down: SensorId },
    #[error("parcel ({}, {}) has no time distance", .0.row, .0.col)]
    MissingTimeDistance(ParcelRef),
    #[error("invalid time distance {value} for {what}")]
    InvalidTimeDistance { what: String, value: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` wrapper so `GraphError` can stay `PartialEq` for tests.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct IoError(#[from] pub std::io::Error);

impl PartialEq for IoError {
    fn eq(&self, other: &Self) -> bool {
        self.0.kind() == other.0.kind()
    }
}

impl From<std::io::Error> for GraphError {
    fn from(e: std::io::Error) -> Self {
        GraphError::Io(IoError(e))
    }
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SensorId(String);

impl SensorId {
    /// Fails on empty ids or ids that would break the comma-separated formats.
    pub fn new(id: impl Into<String>) -> Result<Self, String> {
        let id = id.into();
        if id.is_empty() {
            return Err("sensor id must be non-empty".into());
        }
        if id.contains([',', '\n', '\r']) || id.trim() != id {
            return Err(format!("sensor id `{id}` contains separators or padding"));
        }
        Ok(SensorId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for SensorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SensorId::new(s)
    }
}

/// One precipitation-grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParcelRef {
    pub row: usize,
    pub col: usize,
}

impl ParcelRef {
    pub fn new(row: usize, col: usize) -> Self {
        ParcelRef { row, col }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub id: SensorId,
    /// Water travel time to the watershed outlet, hours.
    pub td_outlet: f64,
    pub location: (f64, f64),
}

/// A watershed parcel record: `parcel` drains to `sensor` in `td_hours`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelRecord {
    pub sensor: SensorId,
    pub parcel: ParcelRef,
    pub td_hours: f64,
}

/// Unvalidated input to [`SensorGraph::build`]; also the in-memory form of
/// the graph spec file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphSpec {
    pub sensors: Vec<Sensor>,
    pub edges: Vec<(SensorId, SensorId)>,
    pub parcels: Vec<ParcelRecord>,
}

/// Parcels grouped by arrival hour `k = ceil(td)`; empty buckets are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParcelBuckets {
    pub buckets: BTreeMap<u32, BTreeSet<ParcelRef>>,
}

impl ParcelBuckets {
    pub fn get(&self, hour: u32) -> Option<&BTreeSet<ParcelRef>> {
        self.buckets.get(&hour)
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn max_hour(&self) -> Option<u32> {
        self.buckets.keys().next_back().copied()
    }
}

/// Validated, immutable sensor DAG.
#[derive(Debug, Clone)]
pub struct SensorGraph {
    // sorted by id; indices below refer to this order
    sensors: Vec<Sensor>,
    index: HashMap<SensorId, usize>,
    parents: Vec<BTreeSet<usize>>,
    children: Vec<BTreeSet<usize>>,
    ancestors: Vec<BTreeSet<usize>>,
    topo_order: Vec<usize>,
    watersheds: Vec<BTreeMap<ParcelRef, f64>>,
}

impl SensorGraph {
    pub fn build(spec: GraphSpec) -> Result<Self> {
        let GraphSpec {
            mut sensors,
            edges,
            parcels,
        } = spec;
        sensors.sort_by(|a, b| a.id.cmp(&b.id));

        let mut index = HashMap::with_capacity(sensors.len());
        for (i, s) in sensors.iter().enumerate() {
            if !(s.td_outlet.is_finite() && s.td_outlet >= 0.0) {
                return Err(GraphError::InvalidTimeDistance {
                    what: format!("sensor {}", s.id),
                    value: s.td_outlet,
                });
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateSensor(s.id.clone()));
            }
        }

        let n = sensors.len();
        let mut parents = vec![BTreeSet::new(); n];
        let mut children = vec![BTreeSet::new(); n];
        for (up, down) in &edges {
            let (Some(&u), Some(&d)) = (index.get(up), index.get(down)) else {
                return Err(GraphError::UnknownEdgeEndpoint {
                    up: up.clone(),
                    down: down.clone(),
                });
            };
            children[u].insert(d);
            parents[d].insert(u);
        }

        // Kahn's algorithm; whatever is left unvisited sits on a cycle.
        let mut indegree: Vec<usize> = parents.iter().map(BTreeSet::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut topo_order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            topo_order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo_order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member");
            return Err(GraphError::CycleDetected(sensors[stuck].id.clone()));
        }

        for (u, downs) in children.iter().enumerate() {
            for &d in downs {
                if sensors[u].td_outlet <= sensors[d].td_outlet {
                    return Err(GraphError::NonMonotoneTimeDistance {
                        up: sensors[u].id.clone(),
                        down: sensors[d].id.clone(),
                        up_td: sensors[u].td_outlet,
                        down_td: sensors[d].td_outlet,
                    });
                }
            }
        }

        let mut ancestors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &i in &topo_order {
            let mut acc = BTreeSet::new();
            for &p in &parents[i] {
                acc.insert(p);
                acc.extend(ancestors[p].iter().copied());
            }
            ancestors[i] = acc;
        }

        let mut watersheds = vec![BTreeMap::new(); n];
        for rec in parcels {
            let &i = index
                .get(&rec.sensor)
                .ok_or_else(|| GraphError::UnknownSensor(rec.sensor.clone()))?;
            if !(rec.td_hours.is_finite() && rec.td_hours > 0.0) {
                return Err(GraphError::InvalidTimeDistance {
                    what: format!(
                        "parcel ({}, {}) of sensor {}",
                        rec.parcel.row, rec.parcel.col, rec.sensor
                    ),
                    value: rec.td_hours,
                });
            }
            watersheds[i].insert(rec.parcel, rec.td_hours);
        }

        Ok(SensorGraph {
            sensors,
            index,
            parents,
            children,
            ancestors,
            topo_order,
            watersheds,
        })
    }

    fn idx(&self, s: &SensorId) -> Result<usize> {
        self.index
            .get(s)
            .copied()
            .ok_or_else(|| GraphError::UnknownSensor(s.clone()))
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn contains(&self, s: &SensorId) -> bool {
        self.index.contains_key(s)
    }

    /// Sensors sorted by id.
    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn sensor(&self, s: &SensorId) -> Result<&Sensor> {
        Ok(&self.sensors[self.idx(s)?])
    }

    /// Edges as `(upstream, downstream)` pairs in id order.
    pub fn edges(&self) -> impl Iterator<Item = (&SensorId, &SensorId)> + '_ {
        self.children.iter().enumerate().flat_map(move |(u, downs)| {
            downs
                .iter()
                .map(move |&d| (&self.sensors[u].id, &self.sensors[d].id))
        })
    }

    /// Direct upstream neighbours of `s`.
    pub fn parents(&self, s: &SensorId) -> Result<Vec<&SensorId>> {
        let i = self.idx(s)?;
        Ok(self.parents[i].iter().map(|&p| &self.sensors[p].id).collect())
    }

    /// Upstream sensors first.
    pub fn topological_order(&self) -> Vec<&SensorId> {
        self.topo_order.iter().map(|&i| &self.sensors[i].id).collect()
    }

    pub fn ancestors(&self, s: &SensorId) -> Result<Vec<&SensorId>> {
        let i = self.idx(s)?;
        Ok(self.ancestors[i].iter().map(|&a| &self.sensors[a].id).collect())
    }

    pub fn is_upstream(&self, u: &SensorId, s: &SensorId) -> Result<bool> {
        let (u, s) = (self.idx(u)?, self.idx(s)?);
        Ok(self.ancestors[s].contains(&u))
    }

    /// Ancestors of `s` ordered by time distance to `s` (ties by id),
    /// truncated to `k`.
    pub fn upstream_of(&self, s: &SensorId, k: usize) -> Result<Vec<SensorId>> {
        let i = self.idx(s)?;
        let td_s = self.sensors[i].td_outlet;
        let mut ups: Vec<(f64, &SensorId)> = self.ancestors[i]
            .iter()
            .map(|&a| (self.sensors[a].td_outlet - td_s, &self.sensors[a].id))
            .collect();
        ups.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        Ok(ups.into_iter().take(k).map(|(_, id)| id.clone()).collect())
    }

    /// Travel time in hours from upstream sensor `u` to `s`.
    pub fn time_distance(&self, u: &SensorId, s: &SensorId) -> Result<f64> {
        let (ui, si) = (self.idx(u)?, self.idx(s)?);
        if !self.ancestors[si].contains(&ui) {
            return Err(GraphError::NotUpstream {
                up: u.clone(),
                down: s.clone(),
            });
        }
        Ok(self.sensors[ui].td_outlet - self.sensors[si].td_outlet)
    }

    /// Sensors with at least `min_upstream` ancestors, in id order.
    pub fn usable_sensors(&self, min_upstream: usize) -> Vec<SensorId> {
        self.sensors
            .iter()
            .zip(&self.ancestors)
            .filter(|(_, anc)| anc.len() >= min_upstream)
            .map(|(s, _)| s.id.clone())
            .collect()
    }

    /// All parcels draining to `s` with their travel times to `s`.
    pub fn watershed(&self, s: &SensorId) -> Result<&BTreeMap<ParcelRef, f64>> {
        Ok(&self.watersheds[self.idx(s)?])
    }

    /// Watershed of `s` minus the watersheds of `upstreams`.
    pub fn exclusive_watershed(
        &self,
        s: &SensorId,
        upstreams: &[SensorId],
    ) -> Result<BTreeSet<ParcelRef>> {
        let si = self.idx(s)?;
        let mut excluded = BTreeSet::new();
        for u in upstreams {
            let ui = self.idx(u)?;
            if !self.ancestors[si].contains(&ui) {
                return Err(GraphError::NotUpstream {
                    up: u.clone(),
                    down: s.clone(),
                });
            }
            excluded.extend(self.watersheds[ui].keys().copied());
        }
        Ok(self.watersheds[si]
            .keys()
            .filter(|p| !excluded.contains(p))
            .copied()
            .collect())
    }

    /// Exclusive watershed of `s` against `upstreams`, bucketed by the
    /// parcels' stored travel times to `s`.
    pub fn parcel_buckets(&self, s: &SensorId, upstreams: &[SensorId]) -> Result<ParcelBuckets> {
        let parcels = self.exclusive_watershed(s, upstreams)?;
        bucket_parcels(&parcels, self.watershed(s)?)
    }

    pub fn to_spec(&self) -> GraphSpec {
        let parcels = self
            .sensors
            .iter()
            .zip(&self.watersheds)
            .flat_map(|(s, ws)| {
                ws.iter().map(move |(&parcel, &td_hours)| ParcelRecord {
                    sensor: s.id.clone(),
                    parcel,
                    td_hours,
                })
            })
            .collect();
        GraphSpec {
            sensors: self.sensors.clone(),
            edges: self.edges().map(|(u, d)| (u.clone(), d.clone())).collect(),
            parcels,
        }
    }
}

/// Groups parcels into hourly buckets: a parcel with travel time `t` lands in
/// bucket `ceil(t)`.
pub fn bucket_parcels(
    parcels: &BTreeSet<ParcelRef>,
    parcel_td: &BTreeMap<ParcelRef, f64>,
) -> Result<ParcelBuckets> {
    let mut buckets: BTreeMap<u32, BTreeSet<ParcelRef>> = BTreeMap::new();
    for p in parcels {
        let td = *parcel_td.get(p).ok_or(GraphError::MissingTimeDistance(*p))?;
        if !(td.is_finite() && td > 0.0) {
            return Err(GraphError::InvalidTimeDistance {
                what: format!("parcel ({}, {})", p.row, p.col),
                value: td,
            });
        }
        buckets.entry(td.ceil() as u32).or_default().insert(*p);
    }
    Ok(ParcelBuckets { buckets })
}

// ---------------------------------------------------------------------------
// Graph spec text format
// ---------------------------------------------------------------------------

const SECTION_SENSORS: &str = "[sensors]";
const SECTION_EDGES: &str = "[edges]";
const SECTION_PARCELS: &str = "[parcels]";

#[derive(Clone, Copy)]
enum Section {
    Sensors,
    Edges,
    Parcels,
}

impl GraphSpec {
    /// Reads the section-delimited graph format:
    ///
    /// ```text
    /// # comment
    /// [sensors]
    /// id,td_outlet_hours,x,y
    /// [edges]
    /// up_id,down_id
    /// [parcels]
    /// sensor_id,row,col,td_hours
    /// ```
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut spec = GraphSpec::default();
        let mut section = None;
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                SECTION_SENSORS => section = Some(Section::Sensors),
                SECTION_EDGES => section = Some(Section::Edges),
                SECTION_PARCELS => section = Some(Section::Parcels),
                _ => {
                    let err = |msg: String| GraphError::Parse { line: line_no, msg };
                    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                    let id = |s: &str| SensorId::new(s).map_err(err);
                    let num = |s: &str| -> Result<f64> {
                        s.parse::<f64>()
                            .map_err(|e| err(format!("bad number `{s}`: {e}")))
                    };
                    let index = |s: &str| -> Result<usize> {
                        s.parse::<usize>()
                            .map_err(|e| err(format!("bad grid index `{s}`: {e}")))
                    };
                    let want = |k: usize| -> Result<()> {
                        if fields.len() == k {
                            Ok(())
                        } else {
                            Err(err(format!("expected {k} fields, got {}", fields.len())))
                        }
                    };
                    match section {
                        None => return Err(err("record before any section header".into())),
                        Some(Section::Sensors) => {
                            want(4)?;
                            spec.sensors.push(Sensor {
                                id: id(fields[0])?,
                                td_outlet: num(fields[1])?,
                                location: (num(fields[2])?, num(fields[3])?),
                            });
                        }
                        Some(Section::Edges) => {
                            want(2)?;
                            spec.edges.push((id(fields[0])?, id(fields[1])?));
                        }
                        Some(Section::Parcels) => {
                            want(4)?;
                            spec.parcels.push(ParcelRecord {
                                sensor: id(fields[0])?,
                                parcel: ParcelRef::new(index(fields[1])?, index(fields[2])?),
                                td_hours: num(fields[3])?,
                            });
                        }
                    }
                }
            }
        }
        Ok(spec)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# stagecast sensor graph")?;
        writeln!(w, "{SECTION_SENSORS}")?;
        for s in &self.sensors {
            writeln!(w, "{},{},{},{}", s.id, s.td_outlet, s.location.0, s.location.1)?;
        }
        writeln!(w, "{SECTION_EDGES}")?;
        for (u, d) in &self.edges {
            writeln!(w, "{u},{d}")?;
        }
        writeln!(w, "{SECTION_PARCELS}")?;
        for p in &self.parcels {
            writeln!(w, "{},{},{},{}", p.sensor, p.parcel.row, p.parcel.col, p.td_hours)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(s: &str) -> SensorId {
        SensorId::new(s).unwrap()
    }

    fn sensor(id: &str, td: f64) -> Sensor {
        Sensor {
            id: sid(id),
            td_outlet: td,
            location: (0.0, 0.0),
        }
    }

    fn graph(sensors: &[(&str, f64)], edges: &[(&str, &str)]) -> Result<SensorGraph> {
        SensorGraph::build(GraphSpec {
            sensors: sensors.iter().map(|&(id, td)| sensor(id, td)).collect(),
            edges: edges.iter().map(|&(u, d)| (sid(u), sid(d))).collect(),
            parcels: vec![],
        })
    }

    #[test]
    fn minimal_chain_is_valid() {
        let g = graph(&[("A", 10.0), ("B", 4.0)], &[("A", "B")]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.topological_order(), vec![&sid("A"), &sid("B")]);
    }

    #[test]
    fn two_cycle_rejected() {
        let err = graph(&[("A", 10.0), ("B", 4.0)], &[("A", "B"), ("B", "A")]).unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)), "{err:?}");
    }

    #[test]
    fn self_loop_rejected() {
        let err = graph(&[("A", 1.0)], &[("A", "A")]).unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)));
    }

    #[test]
    fn uphill_time_distance_rejected() {
        let err = graph(&[("A", 3.0), ("B", 4.0)], &[("A", "B")]).unwrap_err();
        assert!(matches!(err, GraphError::NonMonotoneTimeDistance { .. }));
        let err = graph(&[("A", 4.5), ("B", 4.5)], &[("A", "B")]).unwrap_err();
        assert!(matches!(err, GraphError::NonMonotoneTimeDistance { .. }));
    }

    #[test]
    fn duplicate_and_unknown_rejected() {
        let err = graph(&[("A", 3.0), ("A", 4.0)], &[]).unwrap_err();
        assert_eq!(err, GraphError::DuplicateSensor(sid("A")));
        let err = graph(&[("A", 3.0)], &[("A", "Z")]).unwrap_err();
        assert!(matches!(err, GraphError::UnknownEdgeEndpoint { .. }));
    }

    #[test]
    fn empty_and_separator_ids_rejected() {
        assert!(SensorId::new("").is_err());
        assert!(SensorId::new("a,b").is_err());
        assert!(SensorId::new(" a").is_err());
    }

    #[test]
    fn upstream_on_chain() {
        let g = graph(
            &[("A", 0.0), ("B", 2.0), ("C", 5.0)],
            &[("C", "B"), ("B", "A")],
        )
        .unwrap();
        assert_eq!(g.upstream_of(&sid("A"), 2).unwrap(), vec![sid("B"), sid("C")]);
        assert_eq!(g.upstream_of(&sid("A"), 4).unwrap().len(), 2);
        assert_eq!(g.upstream_of(&sid("C"), 4).unwrap(), Vec::<SensorId>::new());
        assert!(matches!(
            g.upstream_of(&sid("Q"), 1),
            Err(GraphError::UnknownSensor(_))
        ));
    }

    #[test]
    fn upstream_on_diamond() {
        // td(B,A)=2, td(C,A)=5, D above both
        let g = graph(
            &[("A", 1.0), ("B", 3.0), ("C", 6.0), ("D", 9.0)],
            &[("D", "B"), ("D", "C"), ("B", "A"), ("C", "A")],
        )
        .unwrap();
        assert_eq!(
            g.upstream_of(&sid("A"), 4).unwrap(),
            vec![sid("B"), sid("C"), sid("D")]
        );
    }

    #[test]
    fn upstream_ties_break_by_id() {
        let g = graph(
            &[("S", 0.0), ("b", 2.0), ("a", 2.0)],
            &[("b", "S"), ("a", "S")],
        )
        .unwrap();
        assert_eq!(g.upstream_of(&sid("S"), 2).unwrap(), vec![sid("a"), sid("b")]);
    }

    #[test]
    fn time_distance_subtracts() {
        let g = graph(&[("U", 10.0), ("S", 4.0)], &[("U", "S")]).unwrap();
        assert_eq!(g.time_distance(&sid("U"), &sid("S")).unwrap(), 6.0);
        assert!(matches!(
            g.time_distance(&sid("S"), &sid("U")),
            Err(GraphError::NotUpstream { .. })
        ));
    }

    #[test]
    fn usable_on_chain_of_five() {
        let g = graph(
            &[("A", 0.0), ("B", 1.0), ("C", 2.0), ("D", 3.0), ("E", 4.0)],
            &[("E", "D"), ("D", "C"), ("C", "B"), ("B", "A")],
        )
        .unwrap();
        assert_eq!(g.usable_sensors(DEFAULT_UPSTREAM_COUNT), vec![sid("A")]);
        assert_eq!(g.usable_sensors(1).len(), 4);
    }

    fn watershed_graph() -> SensorGraph {
        let p = |i| ParcelRef::new(0, i);
        let mut parcels = vec![];
        for i in 1..=6 {
            parcels.push(ParcelRecord {
                sensor: sid("S"),
                parcel: p(i),
                td_hours: i as f64 * 0.5,
            });
        }
        for i in 1..=2 {
            parcels.push(ParcelRecord {
                sensor: sid("U"),
                parcel: p(i),
                td_hours: 1.0,
            });
        }
        SensorGraph::build(GraphSpec {
            sensors: vec![sensor("S", 0.0), sensor("U", 3.0)],
            edges: vec![(sid("U"), sid("S"))],
            parcels,
        })
        .unwrap()
    }

    #[test]
    fn exclusive_watershed_set_difference() {
        let g = watershed_graph();
        let ex = g.exclusive_watershed(&sid("S"), &[sid("U")]).unwrap();
        let expected: BTreeSet<_> = (3..=6).map(|i| ParcelRef::new(0, i)).collect();
        assert_eq!(ex, expected);
        let all = g.exclusive_watershed(&sid("S"), &[]).unwrap();
        assert_eq!(all.len(), 6);
        assert!(matches!(
            g.exclusive_watershed(&sid("U"), &[sid("S")]),
            Err(GraphError::NotUpstream { .. })
        ));
    }

    #[test]
    fn bucket_ceiling_rule() {
        let p = |i| ParcelRef::new(1, i);
        let parcels: BTreeSet<_> = (0..3).map(p).collect();
        let td: BTreeMap<_, _> = [(p(0), 0.5), (p(1), 1.0), (p(2), 1.2)].into();
        let b = bucket_parcels(&parcels, &td).unwrap();
        assert_eq!(b.buckets.len(), 2);
        assert_eq!(b.get(1).unwrap(), &[p(0), p(1)].into());
        assert_eq!(b.get(2).unwrap(), &[p(2)].into());

        assert!(bucket_parcels(&BTreeSet::new(), &td).unwrap().is_empty());
        let missing: BTreeSet<_> = [p(9)].into();
        assert_eq!(
            bucket_parcels(&missing, &td),
            Err(GraphError::MissingTimeDistance(p(9)))
        );
    }

    #[test]
    fn parcel_buckets_uses_stored_td() {
        let g = watershed_graph();
        let b = g.parcel_buckets(&sid("S"), &[sid("U")]).unwrap();
        // parcels 3..=6 with td 1.5, 2.0, 2.5, 3.0
        assert_eq!(b.get(2).unwrap().len(), 2);
        assert_eq!(b.get(3).unwrap().len(), 2);
        assert_eq!(b.max_hour(), Some(3));
    }

    #[test]
    fn spec_file_round_trip() {
        let g = watershed_graph();
        let mut buf = Vec::new();
        g.to_spec().write(&mut buf).unwrap();
        let spec = GraphSpec::read(buf.as_slice()).unwrap();
        assert_eq!(spec, g.to_spec());
        let mut again = Vec::new();
        spec.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn spec_file_errors_report_line() {
        let text = "# c\n[sensors]\nA,1,0,0\nB,x,0,0\n";
        assert!(matches!(
            GraphSpec::read(text.as_bytes()),
            Err(GraphError::Parse { line: 4, .. })
        ));
        assert!(matches!(
            GraphSpec::read("A,B\n".as_bytes()),
            Err(GraphError::Parse { line: 1, .. })
        ));
    }
}
