//! Relative representation of trajectories.
//!
//! A sample pairs a scaled sequence of per-minute displacements with an M×M
//! window of the user's historic occupancy grid centered at the current
//! location, and labels it with the grid cell (in the same window geometry)
//! that holds the location `horizon` minutes later.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::trajkit::{self, Anchor, Mode, PlanarPoint, PlanarSession, PlanarTrack, SessionParams, UserTrack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_size_m: f64,
    pub region_side_m: f64,
    pub m: usize,
}

impl GridSpec {
    pub fn new(cell_size_m: f64, region_side_m: f64) -> Result<Self> {
        if !(cell_size_m > 0.0) || !cell_size_m.is_finite() {
            return Err(Error::invalid("cell size must be positive"));
        }
        if !(region_side_m > 0.0) || !region_side_m.is_finite() {
            return Err(Error::invalid("region side must be positive"));
        }
        let ratio = region_side_m / cell_size_m;
        let m = ratio.round();
        if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "region side {region_side_m} is not a multiple of cell size {cell_size_m}"
            )));
        }
        Ok(Self { cell_size_m, region_side_m, m: m as usize })
    }

    pub fn n_classes(&self) -> usize {
        self.m * self.m
    }

    /// Lower-left corner of the region centered at `center`.
    pub fn region_origin(&self, center: &PlanarPoint) -> (f64, f64) {
        let half = self.region_side_m / 2.0;
        (center.x - half, center.y - half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
}

impl Delta {
    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeSequence {
    pub deltas: Vec<Delta>,
    pub scaled: bool,
    pub scale_bound_m: f64,
}

impl RelativeSequence {
    pub fn k(&self) -> usize {
        self.deltas.len()
    }
}

/// Displacements between consecutive points; the first point only anchors.
pub fn compute_deltas(points: &[PlanarPoint]) -> Result<Vec<Delta>> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 points for displacements, got {}",
            points.len()
        )));
    }
    Ok(points
        .windows(2)
        .map(|w| Delta { dx: w[1].x - w[0].x, dy: w[1].y - w[0].y })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub deltas: Vec<Delta>,
    /// Number of components that hit ±1.
    pub clamp_events: usize,
}

pub fn scale_deltas(deltas: &[Delta], bound_m: f64) -> Result<Scaled> {
    if !(bound_m > 0.0) {
        return Err(Error::invalid("scale bound must be positive"));
    }
    let mut clamp_events = 0;
    let mut clamp = |v: f64| {
        let s = v / bound_m;
        if s.abs() > 1.0 {
            clamp_events += 1;
        }
        s.clamp(-1.0, 1.0)
    };
    let deltas = deltas
        .iter()
        .map(|d| Delta { dx: clamp(d.dx), dy: clamp(d.dy) })
        .collect();
    Ok(Scaled { deltas, clamp_events })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn of<'a>(points: impl IntoIterator<Item = &'a PlanarPoint>) -> Option<Self> {
        points.into_iter().fold(None, |acc, p| {
            Some(match acc {
                None => BBox { min_x: p.x, min_y: p.y, max_x: p.x, max_y: p.y },
                Some(b) => BBox {
                    min_x: b.min_x.min(p.x),
                    min_y: b.min_y.min(p.y),
                    max_x: b.max_x.max(p.x),
                    max_y: b.max_y.max(p.y),
                },
            })
        })
    }

    pub fn contains(&self, p: &PlanarPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

/// Visit counts over the whole space covered by one user's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size_m: f64,
    pub cols: usize,
    pub rows: usize,
    /// Row-major, row index grows northward.
    pub counts: Vec<u32>,
    pub total: u64,
}

impl OccupancyGrid {
    pub fn empty(bbox: BBox, cell_size_m: f64) -> Result<Self> {
        if !(cell_size_m > 0.0) {
            return Err(Error::invalid("cell size must be positive"));
        }
        let cols = ((bbox.max_x - bbox.min_x) / cell_size_m).floor() as usize + 1;
        let rows = ((bbox.max_y - bbox.min_y) / cell_size_m).floor() as usize + 1;
        Ok(Self {
            origin_x: bbox.min_x,
            origin_y: bbox.min_y,
            cell_size_m,
            cols,
            rows,
            counts: vec![0; cols * rows],
            total: 0,
        })
    }

    /// Global (col, row) of the cell holding (x, y); may lie outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.origin_x) / self.cell_size_m).floor() as i64,
            ((y - self.origin_y) / self.cell_size_m).floor() as i64,
        )
    }

    pub fn count_at(&self, col: i64, row: i64) -> u32 {
        if col < 0 || row < 0 || col as usize >= self.cols || row as usize >= self.rows {
            0
        } else {
            self.counts[row as usize * self.cols + col as usize]
        }
    }

    pub fn add(&mut self, p: &PlanarPoint) -> Result<()> {
        let (c, r) = self.cell_of(p.x, p.y);
        if c < 0 || r < 0 || c as usize >= self.cols || r as usize >= self.rows {
            return Err(Error::invalid(format!("point ({}, {}) outside occupancy bbox", p.x, p.y)));
        }
        self.counts[r as usize * self.cols + c as usize] += 1;
        self.total += 1;
        Ok(())
    }

    /// Adds another grid with identical geometry.
    pub fn merge(&mut self, other: &OccupancyGrid) -> Result<()> {
        if self.cols != other.cols
            || self.rows != other.rows
            || self.origin_x != other.origin_x
            || self.origin_y != other.origin_y
            || self.cell_size_m != other.cell_size_m
        {
            return Err(Error::invalid("cannot merge occupancy grids with different geometry"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }
}

pub fn build_occupancy<'a>(
    points: impl IntoIterator<Item = &'a PlanarPoint>,
    cell_size_m: f64,
    bbox: BBox,
) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::empty(bbox, cell_size_m)?;
    for p in points {
        if !bbox.contains(p) {
            return Err(Error::invalid(format!("point ({}, {}) outside bbox", p.x, p.y)));
        }
        grid.add(p)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionScaling {
    /// Divide by the window maximum.
    #[default]
    MaxNormalized,
    RawCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOccupancy {
    pub m: usize,
    /// Row-major M×M, row index grows northward.
    pub values: Vec<f64>,
}

impl RegionOccupancy {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.m + col]
    }
}

/// Global cell read by window cell (row, col): the one holding that window
/// cell's center.
pub fn window_cell(occ: &OccupancyGrid, center: &PlanarPoint, spec: &GridSpec, row: usize, col: usize) -> (i64, i64) {
    let (ox, oy) = spec.region_origin(center);
    let s = spec.cell_size_m;
    occ.cell_of(ox + (col as f64 + 0.5) * s, oy + (row as f64 + 0.5) * s)
}

/// M×M window of `occ` around `center`. For odd M the middle cell is the
/// global cell containing `center`; cells past the grid read as 0.
pub fn extract_region(
    occ: &OccupancyGrid,
    center: &PlanarPoint,
    spec: &GridSpec,
    scaling: RegionScaling,
) -> RegionOccupancy {
    let m = spec.m;
    let mut values = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let (gc, gr) = window_cell(occ, center, spec, row, col);
            values.push(occ.count_at(gc, gr) as f64);
        }
    }
    if scaling == RegionScaling::MaxNormalized {
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
    }
    RegionOccupancy { m, values }
}

/// Flat class index `row * M + col` of a cell in the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub class_index: usize,
    pub m: usize,
}

impl LabelGrid {
    pub fn new(row: usize, col: usize, m: usize) -> Self {
        Self { class_index: row * m + col, m }
    }
    pub fn row(&self) -> usize {
        self.class_index / self.m
    }
    pub fn col(&self) -> usize {
        self.class_index % self.m
    }
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.m * self.m];
        v[self.class_index] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Inside(LabelGrid),
    OutOfRegion,
}

pub fn make_label(center: &PlanarPoint, future: &PlanarPoint, spec: &GridSpec) -> Label {
    let (ox, oy) = spec.region_origin(center);
    let col = ((future.x - ox) / spec.cell_size_m).floor();
    let row = ((future.y - oy) / spec.cell_size_m).floor();
    let m = spec.m as f64;
    if col < 0.0 || row < 0.0 || col >= m || row >= m || !col.is_finite() || !row.is_finite() {
        Label::OutOfRegion
    } else {
        Label::Inside(LabelGrid::new(row as usize, col as usize, spec.m))
    }
}

/// Planar anchor points a sample was cut from; kept in memory only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleGeometry {
    pub center: PlanarPoint,
    pub future: PlanarPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sequence: RelativeSequence,
    pub region: RegionOccupancy,
    pub label: LabelGrid,
    pub horizon: u32,
    pub user_id: String,
    #[serde(skip)]
    pub geometry: Option<SampleGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub spec: GridSpec,
    /// Locations per window; the sequence holds one fewer displacement.
    pub seq_len_locations: usize,
    pub horizon: u32,
    pub bound_m: f64,
    pub drop_standing_still: bool,
    pub scaling: RegionScaling,
}

impl DatasetParams {
    pub fn k(&self) -> usize {
        self.seq_len_locations - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len_locations < 2 {
            return Err(Error::invalid("sequence length must be at least 2 locations"));
        }
        if self.horizon < 1 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(self.bound_m > 0.0) {
            return Err(Error::invalid("scale bound must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub windows: usize,
    pub dropped_standing_still: usize,
    pub dropped_out_of_region: usize,
    pub clamp_events: usize,
}

impl DatasetStats {
    fn absorb(&mut self, o: &DatasetStats) {
        self.windows += o.windows;
        self.dropped_standing_still += o.dropped_standing_still;
        self.dropped_out_of_region += o.dropped_out_of_region;
        self.clamp_events += o.clamp_events;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    pub samples: Vec<Sample>,
    pub stats: DatasetStats,
}

/// Samples from one session, every stride-1 window that has a location
/// `horizon` steps past its end.
pub fn session_samples(
    session: &PlanarSession,
    occ: &OccupancyGrid,
    params: &DatasetParams,
) -> Result<BuiltDataset> {
    params.validate()?;
    let pts = &session.points;
    let need = params.seq_len_locations;
    let h = params.horizon as usize;
    let mut stats = DatasetStats::default();
    let mut samples = Vec::new();
    if pts.len() < need + h {
        return Ok(BuiltDataset { samples, stats });
    }
    for last in (need - 1)..(pts.len() - h) {
        stats.windows += 1;
        let window = &pts[last + 1 - need..=last];
        let deltas = compute_deltas(window)?;
        if params.drop_standing_still && deltas.iter().all(Delta::is_zero) {
            stats.dropped_standing_still += 1;
            continue;
        }
        let center = pts[last];
        let future = pts[last + h];
        let label = match make_label(&center, &future, &params.spec) {
            Label::Inside(l) => l,
            Label::OutOfRegion => {
                stats.dropped_out_of_region += 1;
                continue;
            }
        };
        let scaled = scale_deltas(&deltas, params.bound_m)?;
        stats.clamp_events += scaled.clamp_events;
        samples.push(Sample {
            sequence: RelativeSequence {
                deltas: scaled.deltas,
                scaled: true,
                scale_bound_m: params.bound_m,
            },
            region: extract_region(occ, &center, &params.spec, params.scaling),
            label,
            horizon: params.horizon,
            user_id: session.user_id.clone(),
            geometry: Some(SampleGeometry { center, future }),
        });
    }
    Ok(BuiltDataset { samples, stats })
}

/// Builds samples for all sessions; each user's windows read that user's
/// occupancy grid.
pub fn build_dataset(
    sessions: &[PlanarSession],
    occupancy: &BTreeMap<String, OccupancyGrid>,
    params: &DatasetParams,
) -> Result<BuiltDataset> {
    params.validate()?;
    let mut out = BuiltDataset { samples: Vec::new(), stats: DatasetStats::default() };
    for s in sessions {
        let occ = occupancy
            .get(&s.user_id)
            .ok_or_else(|| Error::invalid(format!("no occupancy grid for user '{}'", s.user_id)))?;
        let part = session_samples(s, occ, params)?;
        out.stats.absorb(&part.stats);
        out.samples.extend(part.samples);
    }
    Ok(out)
}

/// Transfers a sample to a mode that moves `factor` times faster: the
/// sequence shrinks by `factor` and the grid geometry grows by it. `occ` must
/// be the user's occupancy grid at the enlarged cell size.
pub fn rescale_mode(
    sample: &Sample,
    factor: f64,
    spec: &GridSpec,
    occ: &OccupancyGrid,
    scaling: RegionScaling,
) -> Result<Sample> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("rescale factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(sample.clone());
    }
    let geom = sample
        .geometry
        .ok_or_else(|| Error::invalid("sample has no planar geometry to rescale"))?;
    let scaled_spec = GridSpec {
        cell_size_m: spec.cell_size_m * factor,
        region_side_m: spec.region_side_m * factor,
        m: spec.m,
    };
    let label = match make_label(&geom.center, &geom.future, &scaled_spec) {
        Label::Inside(l) => l,
        Label::OutOfRegion => {
            return Err(Error::invalid("future location leaves the rescaled region"))
        }
    };
    let deltas = sample
        .sequence
        .deltas
        .iter()
        .map(|d| Delta { dx: d.dx / factor, dy: d.dy / factor })
        .collect();
    Ok(Sample {
        sequence: RelativeSequence { deltas, ..sample.sequence.clone() },
        region: extract_region(occ, &geom.center, &scaled_spec, scaling),
        label,
        horizon: sample.horizon,
        user_id: sample.user_id.clone(),
        geometry: sample.geometry,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareParams {
    pub dataset: DatasetParams,
    pub session: SessionParams,
    /// Leading share of each user's time span that feeds the occupancy grid;
    /// samples come only from the rest. 1.0 uses the whole span for both.
    pub history_fraction: f64,
}

impl PrepareParams {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if !(self.history_fraction > 0.0 && self.history_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "history fraction must be in (0, 1], got {}",
                self.history_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub anchor: Anchor,
    pub built: BuiltDataset,
    pub occupancy: BTreeMap<String, OccupancyGrid>,
    /// Planar tracks per user, for re-extracting at other geometries.
    pub tracks: Vec<PlanarTrack>,
}

/// Timestamp splitting a track into its history and sampling periods.
fn history_cut(track: &PlanarTrack, fraction: f64) -> Option<i64> {
    let (first, last) = (track.points.first()?.t, track.points.last()?.t);
    (fraction < 1.0).then(|| first + (fraction * (last - first) as f64).floor() as i64)
}

/// Occupancy grid of a track's history period over the track's full bbox.
pub fn user_occupancy(track: &PlanarTrack, cell_size_m: f64, history_fraction: f64) -> Result<OccupancyGrid> {
    let bbox = BBox::of(&track.points)
        .ok_or_else(|| Error::InsufficientData(format!("user '{}' has no points", track.user_id)))?;
    let cut = history_cut(track, history_fraction);
    build_occupancy(track.points.iter().filter(|p| cut.is_none_or(|c| p.t < c)), cell_size_m, bbox)
}

/// Sessions cut from a track's sampling period.
pub fn sampling_sessions(track: &PlanarTrack, params: &PrepareParams) -> Result<Vec<PlanarSession>> {
    let cut = history_cut(track, params.history_fraction);
    let rest = PlanarTrack {
        user_id: track.user_id.clone(),
        mode: track.mode,
        points: track.points.iter().filter(|p| cut.is_none_or(|c| p.t >= c)).copied().collect(),
    };
    trajkit::sessionize(&rest, params.session)
}

/// Full preprocessing: projection about the centroid of all points,
/// per-user occupancy from the history period, sessions and samples from
/// the remainder.
pub fn prepare_dataset(tracks: &[UserTrack], mode: Mode, params: &PrepareParams) -> Result<Prepared> {
    params.validate()?;
    let anchor = Anchor::centroid(tracks.iter().flat_map(|t| &t.points))
        .ok_or_else(|| Error::InsufficientData("no trajectory points".into()))?;
    let planar: Vec<PlanarTrack> = tracks
        .iter()
        .filter(|t| !t.points.is_empty())
        .map(|t| trajkit::project_track(t, mode, anchor))
        .collect::<Result<_>>()?;
    let parts: Vec<(OccupancyGrid, BuiltDataset)> = planar
        .par_iter()
        .map(|t| {
            let occ = user_occupancy(t, params.dataset.spec.cell_size_m, params.history_fraction)?;
            let mut built = BuiltDataset { samples: Vec::new(), stats: DatasetStats::default() };
            for s in sampling_sessions(t, params)? {
                let part = session_samples(&s, &occ, &params.dataset)?;
                built.stats.absorb(&part.stats);
                built.samples.extend(part.samples);
            }
            Ok((occ, built))
        })
        .collect::<Result<_>>()?;
    let mut occupancy = BTreeMap::new();
    let mut built = BuiltDataset { samples: Vec::new(), stats: DatasetStats::default() };
    for (t, (occ, part)) in planar.iter().zip(parts) {
        occupancy.insert(t.user_id.clone(), occ);
        built.stats.absorb(&part.stats);
        built.samples.extend(part.samples);
    }
    Ok(Prepared { anchor, built, occupancy, tracks: planar })
}

const DATASET_MAGIC: &[u8; 8] = b"LPDSET\0\0";
pub const DATASET_VERSION: u32 = 1;

/// Header of the binary dataset container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub params: DatasetParams,
    pub n_samples: usize,
    pub stats: DatasetStats,
}

impl DatasetHeader {
    pub fn k(&self) -> usize {
        self.params.k()
    }
    pub fn m(&self) -> usize {
        self.params.spec.m
    }
}

/// Layout: magic, u32 version, u32 header length, JSON header, then per
/// record k·2 f64, M·M f64, u32 class index, u32 horizon, u16 user id
/// length and UTF-8 bytes. Little-endian throughout.
pub fn write_dataset<W: Write>(mut w: W, params: &DatasetParams, stats: &DatasetStats, samples: &[Sample]) -> Result<()> {
    let header = DatasetHeader { params: *params, n_samples: samples.len(), stats: *stats };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let k = params.k();
    let m = params.spec.m;
    let mut buf = Vec::with_capacity(8 * (2 * k + m * m) + 32);
    for s in samples {
        if s.sequence.k() != k || s.region.m != m {
            return Err(Error::invalid("sample shape disagrees with dataset header"));
        }
        buf.clear();
        for d in &s.sequence.deltas {
            buf.extend_from_slice(&d.dx.to_le_bytes());
            buf.extend_from_slice(&d.dy.to_le_bytes());
        }
        for v in &s.region.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(s.label.class_index as u32).to_le_bytes());
        buf.extend_from_slice(&s.horizon.to_le_bytes());
        let id = s.user_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::invalid("user id too long"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated dataset file".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<Sample>)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let hlen = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let k = header.k();
    let m = header.m();
    let f = |b: [u8; 8]| f64::from_le_bytes(b);
    let mut samples = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        let mut deltas = Vec::with_capacity(k);
        for _ in 0..k {
            let dx = f(read_exact(&mut r)?);
            let dy = f(read_exact(&mut r)?);
            deltas.push(Delta { dx, dy });
        }
        let mut values = Vec::with_capacity(m * m);
        for _ in 0..m * m {
            values.push(f(read_exact(&mut r)?));
        }
        let class_index = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        if class_index >= m * m {
            return Err(Error::Format(format!("class index {class_index} out of range")));
        }
        let horizon = u32::from_le_bytes(read_exact(&mut r)?);
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let user_id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
        samples.push(Sample {
            sequence: RelativeSequence { deltas, scaled: true, scale_bound_m: header.params.bound_m },
            region: RegionOccupancy { m, values },
            label: LabelGrid { class_index, m },
            horizon,
            user_id,
            geometry: None,
        });
    }
    Ok((header, samples))
}
