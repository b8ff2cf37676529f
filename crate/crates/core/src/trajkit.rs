//! Trajectory ingest and synthesis.
//!
//! Raw GPS fixes arrive as CSV rows (`user_id,timestamp,lat,lon,mode`), are
//! filtered by transportation mode, projected onto a local metric plane and
//! cut into regularly sampled sessions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Meters per degree of latitude in the equirectangular projection.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

pub const CSV_HEADER: [&str; 5] = ["user_id", "timestamp", "lat", "lon", "mode"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Walk,
    Bicycle,
    Vehicle,
    Train,
    Stay,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Walk => "walk",
            Mode::Bicycle => "bicycle",
            Mode::Vehicle => "vehicle",
            Mode::Train => "train",
            Mode::Stay => "stay",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "walk" => Ok(Mode::Walk),
            "bicycle" => Ok(Mode::Bicycle),
            "vehicle" => Ok(Mode::Vehicle),
            "train" => Ok(Mode::Train),
            "stay" => Ok(Mode::Stay),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPoint {
    pub user_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub mode: Mode,
}

impl RawPoint {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::invalid(format!("lat {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("lon {} out of range", self.lon)));
        }
        if self.timestamp < 0 {
            return Err(Error::invalid(format!("negative timestamp {}", self.timestamp)));
        }
        Ok(())
    }
}

/// All points of one user, sorted by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTrack {
    pub user_id: String,
    pub points: Vec<RawPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
    pub t: i64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64, t: i64) -> Self {
        Self { x, y, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarTrack {
    pub user_id: String,
    pub mode: Mode,
    pub points: Vec<PlanarPoint>,
}

/// A regularly sampled run of planar points for one user and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarSession {
    pub user_id: String,
    pub mode: Mode,
    pub points: Vec<PlanarPoint>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user_id: String,
    timestamp: i64,
    lat: f64,
    lon: f64,
    mode: String,
}

/// Reads the trajectory CSV, keeps only `mode_filter` rows, and groups them
/// per user (users in lexical order, points in time order).
pub fn parse_trajectories<R: Read>(source: R, mode_filter: Mode) -> Result<Vec<UserTrack>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", CSV_HEADER.join(","), names.join(",")),
        });
    }

    let mut seen: HashSet<(String, i64)> = HashSet::new();
    let mut by_user: BTreeMap<String, Vec<RawPoint>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CsvRow = record
            .deserialize(Some(&header))
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let mode: Mode = row.mode.parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let point = RawPoint {
            user_id: row.user_id,
            timestamp: row.timestamp,
            lat: row.lat,
            lon: row.lon,
            mode,
        };
        point
            .validate()
            .map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        if !seen.insert((point.user_id.clone(), point.timestamp)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for user '{}' at t={}", point.user_id, point.timestamp),
            });
        }
        if point.mode == mode_filter {
            by_user.entry(point.user_id.clone()).or_default().push(point);
        }
    }

    Ok(by_user
        .into_iter()
        .map(|(user_id, mut points)| {
            points.sort_by_key(|p| p.timestamp);
            UserTrack { user_id, points }
        })
        .collect())
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::Io(io);
        }
        unreachable!()
    }
    Error::Parse { line, message: e.to_string() }
}

/// Writes points in the trajectory CSV schema.
pub fn write_trajectories<W: Write>(sink: W, points: &[RawPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_HEADER).map_err(into_io)?;
    for p in points {
        w.write_record([
            p.user_id.as_str(),
            &p.timestamp.to_string(),
            &p.lat.to_string(),
            &p.lon.to_string(),
            p.mode.as_str(),
        ])
        .map_err(into_io)?;
    }
    w.flush()?;
    Ok(())
}

fn into_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Reference point of the local plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub lat: f64,
    pub lon: f64,
}

impl Anchor {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid("anchor must be finite"));
        }
        Ok(Self { lat, lon })
    }

    /// Mean lat/lon of all points; `None` for an empty set.
    pub fn centroid<'a>(points: impl IntoIterator<Item = &'a RawPoint>) -> Option<Self> {
        let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
        for p in points {
            lat += p.lat;
            lon += p.lon;
            n += 1;
        }
        (n > 0).then(|| Self { lat: lat / n as f64, lon: lon / n as f64 })
    }

    fn lon_scale(&self) -> f64 {
        self.lat.to_radians().cos() * METERS_PER_DEGREE
    }

    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lon - self.lon) * self.lon_scale(), (lat - self.lat) * METERS_PER_DEGREE)
    }

    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        (self.lat + y / METERS_PER_DEGREE, self.lon + x / self.lon_scale())
    }
}

/// Equirectangular projection of a point stream around `anchor`.
pub fn project_to_plane(points: &[RawPoint], anchor: Anchor) -> Result<Vec<PlanarPoint>> {
    if !anchor.lat.is_finite() || !anchor.lon.is_finite() {
        return Err(Error::invalid("anchor must be finite"));
    }
    points
        .iter()
        .map(|p| {
            p.validate()?;
            let (x, y) = anchor.project(p.lat, p.lon);
            Ok(PlanarPoint::new(x, y, p.timestamp))
        })
        .collect()
}

pub fn project_track(track: &UserTrack, mode: Mode, anchor: Anchor) -> Result<PlanarTrack> {
    Ok(PlanarTrack {
        user_id: track.user_id.clone(),
        mode,
        points: project_to_plane(&track.points, anchor)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub interval_s: i64,
    pub gap_threshold_s: i64,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self { interval_s: 60, gap_threshold_s: 180 }
    }
}

/// Splits a time-ordered stream at gaps larger than the threshold and
/// resamples each piece onto an exact `interval_s` grid by linear
/// interpolation.
pub fn sessionize(track: &PlanarTrack, params: SessionParams) -> Result<Vec<PlanarSession>> {
    let SessionParams { interval_s, gap_threshold_s } = params;
    if interval_s <= 0 {
        return Err(Error::invalid("interval must be positive"));
    }
    if gap_threshold_s < interval_s {
        return Err(Error::invalid("gap threshold must be at least the interval"));
    }
    let pts = &track.points;
    if let Some(w) = pts.windows(2).find(|w| w[1].t <= w[0].t) {
        return Err(Error::invalid(format!(
            "timestamps not strictly increasing at t={} -> t={}",
            w[0].t, w[1].t
        )));
    }

    let mut sessions = Vec::new();
    let mut start = 0;
    for i in 1..=pts.len() {
        if i == pts.len() || pts[i].t - pts[i - 1].t > gap_threshold_s {
            if start < i {
                sessions.push(PlanarSession {
                    user_id: track.user_id.clone(),
                    mode: track.mode,
                    points: resample(&pts[start..i], interval_s),
                });
            }
            start = i;
        }
    }
    Ok(sessions)
}

fn resample(piece: &[PlanarPoint], interval: i64) -> Vec<PlanarPoint> {
    let t0 = piece[0].t;
    let t_end = piece[piece.len() - 1].t;
    let mut out = Vec::with_capacity(((t_end - t0) / interval + 1) as usize);
    let mut j = 0;
    let mut t = t0;
    while t <= t_end {
        while piece[j + 1..].first().is_some_and(|n| n.t <= t) {
            j += 1;
        }
        let a = piece[j];
        if a.t == t || j + 1 == piece.len() {
            out.push(PlanarPoint::new(a.x, a.y, t));
        } else {
            let b = piece[j + 1];
            let w = (t - a.t) as f64 / (b.t - a.t) as f64;
            out.push(PlanarPoint::new(a.x + w * (b.x - a.x), a.y + w * (b.y - a.y), t));
        }
        t += interval;
    }
    out
}

/// Settings for the road-grid random-waypoint generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub duration_minutes: usize,
    pub grid_block_m: f64,
    /// Meters per minute.
    pub v_mean: f64,
    pub v_sd: f64,
    pub n_anchors_per_user: usize,
    pub seed: u64,
    /// City extent in blocks per side.
    pub city_blocks: usize,
    /// Anchors lie within this many blocks of the user's home intersection.
    pub anchor_spread_blocks: usize,
    pub max_dwell_minutes: usize,
    pub origin: Anchor,
    pub start_timestamp: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 20,
            duration_minutes: 120,
            grid_block_m: 100.0,
            v_mean: 70.0,
            v_sd: 10.0,
            n_anchors_per_user: 4,
            seed: 0,
            city_blocks: 40,
            anchor_spread_blocks: 5,
            max_dwell_minutes: 3,
            origin: Anchor { lat: 35.681, lon: 139.767 },
            start_timestamp: 1_600_000_000,
        }
    }
}

impl SynthConfig {
    pub fn v_max(&self) -> f64 {
        self.v_mean + 3.0 * self.v_sd
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.duration_minutes == 0 || self.n_anchors_per_user == 0 {
            return Err(Error::invalid("synthetic counts must be at least 1"));
        }
        if !(self.v_mean > 0.0) || !(self.v_sd >= 0.0) {
            return Err(Error::invalid("speed mean must be positive and sd non-negative"));
        }
        if !(self.grid_block_m > 0.0) || self.city_blocks == 0 {
            return Err(Error::invalid("road grid must be non-empty"));
        }
        Ok(())
    }
}

/// Per-user route plan: anchor intersections (block coordinates) and, for
/// each ordered anchor pair, whether the route goes east-west first.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPlan {
    pub anchors: Vec<(i64, i64)>,
    pub x_first: Vec<Vec<bool>>,
}

pub fn synth_user_id(index: usize) -> String {
    format!("u{index:05}")
}

pub fn plan_user(cfg: &SynthConfig, index: usize) -> UserPlan {
    let mut r = rng::stream(cfg.seed, &[tag::SYNTH_USER, index as u64, 0]);
    let n = cfg.city_blocks as i64;
    let spread = cfg.anchor_spread_blocks as i64;
    let home = (r.random_range(0..n), r.random_range(0..n));
    let mut anchors: Vec<(i64, i64)> = Vec::with_capacity(cfg.n_anchors_per_user);
    let mut attempts = 0;
    while anchors.len() < cfg.n_anchors_per_user {
        let a = (
            (home.0 + r.random_range(-spread..=spread)).clamp(0, n - 1),
            (home.1 + r.random_range(-spread..=spread)).clamp(0, n - 1),
        );
        attempts += 1;
        if !anchors.contains(&a) || attempts > 1000 {
            anchors.push(a);
        }
    }
    let k = anchors.len();
    let x_first = (0..k).map(|_| (0..k).map(|_| r.random_bool(0.5)).collect()).collect();
    UserPlan { anchors, x_first }
}

/// Deterministic synthetic walking traces on a Manhattan road grid.
///
/// Each user shuttles between its own anchor intersections along fixed
/// rectilinear routes at a per-trip speed, dwelling briefly on arrival, and
/// is sampled once a minute.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<RawPoint>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_users * cfg.duration_minutes);
    for u in 0..cfg.n_users {
        for (i, (x, y)) in synth_user_path(cfg, u).into_iter().enumerate() {
            let (lat, lon) = cfg.origin.unproject(x, y);
            out.push(RawPoint {
                user_id: synth_user_id(u),
                timestamp: cfg.start_timestamp + 60 * i as i64,
                lat,
                lon,
                mode: Mode::Walk,
            });
        }
    }
    Ok(out)
}

/// Planar positions (meters from `cfg.origin`) of one user, one per minute.
pub fn synth_user_path(cfg: &SynthConfig, index: usize) -> Vec<(f64, f64)> {
    let plan = plan_user(cfg, index);
    let mut r = rng::stream(cfg.seed, &[tag::SYNTH_USER, index as u64, 1]);
    let block = cfg.grid_block_m;
    let half = cfg.city_blocks as f64 * block / 2.0;
    let to_m = |(bx, by): (i64, i64)| (bx as f64 * block - half, by as f64 * block - half);
    let v_max = cfg.v_max();
    let speed_dist = Normal::new(cfg.v_mean, cfg.v_sd).expect("validated speed parameters");

    let mut at = r.random_range(0..plan.anchors.len());
    let mut pos = to_m(plan.anchors[at]);
    let mut route: Vec<(f64, f64)> = Vec::new();
    let mut speed = cfg.v_mean;
    let mut dwell = r.random_range(0..=cfg.max_dwell_minutes);
    let mut path = Vec::with_capacity(cfg.duration_minutes);

    for _ in 0..cfg.duration_minutes {
        path.push(pos);
        if dwell > 0 {
            dwell -= 1;
            continue;
        }
        if route.is_empty() {
            if plan.anchors.len() < 2 {
                continue;
            }
            let choices: Vec<usize> = (0..plan.anchors.len()).filter(|&a| a != at).collect();
            let next = *choices.choose(&mut r).expect("at least one other anchor");
            let (sx, sy) = to_m(plan.anchors[at]);
            let (tx, ty) = to_m(plan.anchors[next]);
            let corner = if plan.x_first[at][next] { (tx, sy) } else { (sx, ty) };
            route = vec![corner, (tx, ty)];
            at = next;
            speed = speed_dist.sample(&mut r).clamp(0.05 * cfg.v_mean, v_max);
        }
        let mut budget = speed;
        while budget > 0.0 && !route.is_empty() {
            let target = route[0];
            let dist = (target.0 - pos.0).abs() + (target.1 - pos.1).abs();
            if dist <= budget {
                pos = target;
                budget -= dist;
                route.remove(0);
            } else {
                let f = budget / dist;
                pos = (pos.0 + f * (target.0 - pos.0), pos.1 + f * (target.1 - pos.1));
                budget = 0.0;
            }
        }
        if route.is_empty() {
            dwell = r.random_range(0..=cfg.max_dwell_minutes);
        }
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "user_id,timestamp,lat,lon,mode\n";

    #[test]
    fn parses_and_groups() {
        let csv = format!("{HEADER}a,60,35.0,139.0,walk\na,0,35.0,139.0,walk\n");
        let tracks = parse_trajectories(csv.as_bytes(), Mode::Walk).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].points.len(), 2);
        assert_eq!(tracks[0].points[0].timestamp, 0);
    }

    #[test]
    fn latitude_out_of_range_names_line() {
        let csv = format!("{HEADER}a,0,35.0,139.0,walk\na,60,95.0,139.0,walk\n");
        let err = parse_trajectories(csv.as_bytes(), Mode::Walk).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn filters_by_mode() {
        let csv = format!(
            "{HEADER}a,0,1,1,walk\na,60,1,1,bicycle\nb,0,1,1,walk\nb,60,1,1,walk\nb,120,1,1,bicycle\n"
        );
        let tracks = parse_trajectories(csv.as_bytes(), Mode::Walk).unwrap();
        let n: usize = tracks.iter().map(|t| t.points.len()).sum();
        assert_eq!(n, 3);
        assert!(tracks.iter().flat_map(|t| &t.points).all(|p| p.mode == Mode::Walk));
    }

    #[test]
    fn malformed_row_and_header_errors() {
        let bad_row = format!("{HEADER}a,zero,1,1,walk\n");
        match parse_trajectories(bad_row.as_bytes(), Mode::Walk) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_header = "user,timestamp,lat,lon,mode\n";
        assert!(matches!(
            parse_trajectories(bad_header.as_bytes(), Mode::Walk),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = format!("{HEADER}a,0,1,1,walk\na,0,1,1,walk\n");
        assert!(matches!(
            parse_trajectories(dup.as_bytes(), Mode::Walk),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    fn raw(lat: f64, lon: f64) -> RawPoint {
        RawPoint { user_id: "a".into(), timestamp: 0, lat, lon, mode: Mode::Walk }
    }

    #[test]
    fn projection_cases() {
        let a = Anchor::new(0.0, 10.0).unwrap();
        let p = project_to_plane(&[raw(0.0, 10.0), raw(1.0, 10.0)], a).unwrap();
        assert_eq!((p[0].x, p[0].y), (0.0, 0.0));
        assert!((p[1].y - 111_320.0).abs() < 1e-9 && p[1].x == 0.0);

        let a = Anchor::new(60.0, 10.0).unwrap();
        let p = project_to_plane(&[raw(60.0, 11.0)], a).unwrap();
        assert!((p[0].x - 55_660.0).abs() < 1e-6, "{}", p[0].x);
    }

    fn track(ts: &[(i64, f64)]) -> PlanarTrack {
        PlanarTrack {
            user_id: "a".into(),
            mode: Mode::Walk,
            points: ts.iter().map(|&(t, x)| PlanarPoint::new(x, 0.0, t)).collect(),
        }
    }

    #[test]
    fn sessionize_cases() {
        let params = SessionParams { interval_s: 60, gap_threshold_s: 120 };
        let ten: Vec<_> = (0..10).map(|i| (i * 60, i as f64)).collect();
        let s = sessionize(&track(&ten), params).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points.len(), 10);

        let mut gapped: Vec<_> = (0..5).map(|i| (i * 60, 0.0)).collect();
        gapped.extend((0..5).map(|i| (240 + 600 + i * 60, 0.0)));
        let s = sessionize(&track(&gapped), params).unwrap();
        assert_eq!(s.iter().map(|s| s.points.len()).collect::<Vec<_>>(), vec![5, 5]);

        let s = sessionize(&track(&[(0, 0.0), (120, 120.0)]), params).unwrap();
        assert_eq!(s[0].points.len(), 3);
        assert_eq!(s[0].points[1].t, 60);
        assert_eq!(s[0].points[1].x, 60.0);

        assert!(sessionize(&track(&[]), params).unwrap().is_empty());
    }

    #[test]
    fn synthetic_is_deterministic_and_counts_users() {
        let cfg = SynthConfig { n_users: 7, duration_minutes: 30, seed: 3, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let users: HashSet<_> = a.iter().map(|p| p.user_id.clone()).collect();
        assert_eq!(users.len(), 7);
        let other = generate_synthetic(&SynthConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SynthConfig { v_mean: 0.0, ..Default::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
