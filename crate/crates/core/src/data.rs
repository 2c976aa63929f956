//! Survey data: observations, segments, prediction cells, covariate binning and validation.
//!
//! Row numbers in error messages are 1-based data rows (the header is not counted).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};

/// A covariate value: continuous or a factor level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovValue {
    Num(f64),
    Level(String),
}

impl CovValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            CovValue::Num(v) => Some(*v),
            CovValue::Level(_) => None,
        }
    }

    pub fn as_level(&self) -> Option<&str> {
        match self {
            CovValue::Level(s) => Some(s),
            CovValue::Num(_) => None,
        }
    }
}

impl fmt::Display for CovValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovValue::Num(v) => write!(f, "{v}"),
            CovValue::Level(s) => f.write_str(s),
        }
    }
}

pub type Covariates = BTreeMap<String, CovValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub transect_id: String,
    pub segment_id: String,
    pub distance: f64,
    pub group_size: u32,
    /// Declared extra columns, kept verbatim.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub transect_id: String,
    pub area: f64,
    pub length: Option<f64>,
    pub effort: Covariates,
    pub density: BTreeMap<String, f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCell {
    pub cell_id: String,
    pub area: f64,
    pub density: BTreeMap<String, f64>,
}

/// Cut points mapping a continuous covariate onto ordered categories.
/// The first interval is closed, later ones are open on the left: `[b0,b1]`, `(b1,b2]`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBinning {
    pub source_name: String,
    pub name: String,
    pub breaks: Vec<f64>,
    pub labels: Vec<String>,
}

impl CovariateBinning {
    pub fn new(source_name: &str, name: &str, breaks: Vec<f64>) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(DsmError::invalid(format!("binning '{name}': need at least two breaks")));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) || breaks.iter().any(|b| !b.is_finite()) {
            return Err(DsmError::invalid(format!(
                "binning '{name}': breaks must be finite and strictly increasing"
            )));
        }
        let labels = breaks
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i == 0 {
                    format!("[{},{}]", w[0], w[1])
                } else {
                    format!("({},{}]", w[0], w[1])
                }
            })
            .collect();
        Ok(Self {
            source_name: source_name.to_string(),
            name: name.to_string(),
            breaks,
            labels,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() + 1 != self.breaks.len() {
            return Err(DsmError::invalid(format!(
                "binning '{}': {} labels for {} intervals",
                self.name,
                labels.len(),
                self.breaks.len() - 1
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn interval_of(&self, value: f64) -> Option<usize> {
        let first = self.breaks[0];
        let last = *self.breaks.last().unwrap();
        if !(value >= first && value <= last) {
            return None;
        }
        if value <= self.breaks[1] {
            return Some(0);
        }
        (1..self.breaks.len() - 1).find(|&i| value > self.breaks[i] && value <= self.breaks[i + 1])
    }

    pub fn label_of(&self, value: f64) -> Result<&str> {
        self.interval_of(value)
            .map(|i| self.labels[i].as_str())
            .ok_or_else(|| {
                DsmError::invalid(format!(
                    "binning '{}': value {value} outside [{}, {}]",
                    self.name,
                    self.breaks[0],
                    self.breaks.last().unwrap()
                ))
            })
    }
}

pub fn bin_covariate(values: &[f64], binning: &CovariateBinning) -> Result<Vec<String>> {
    values
        .iter()
        .map(|&v| binning.label_of(v).map(str::to_string))
        .collect()
}

/// Adds the binned version of `binning.source_name` to every segment's effort covariates.
pub fn bin_segments(segments: &mut [Segment], binning: &CovariateBinning) -> Result<()> {
    for (i, seg) in segments.iter_mut().enumerate() {
        let v = seg
            .effort
            .get(&binning.source_name)
            .and_then(CovValue::as_num)
            .ok_or_else(|| {
                DsmError::invalid(format!(
                    "segment {} (row {}): numeric covariate '{}' missing for binning",
                    seg.segment_id,
                    i + 1,
                    binning.source_name
                ))
            })?;
        let label = binning
            .label_of(v)
            .map_err(|e| DsmError::invalid(format!("segment {}: {e}", seg.segment_id)))?
            .to_string();
        seg.effort.insert(binning.name.clone(), CovValue::Level(label));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationSchema {
    pub transect_id: String,
    pub segment_id: String,
    pub distance: String,
    pub size: String,
    #[serde(default)]
    pub extra: Vec<String>,
}

impl Default for ObservationSchema {
    fn default() -> Self {
        Self {
            transect_id: "transect_id".into(),
            segment_id: "segment_id".into(),
            distance: "distance".into(),
            size: "size".into(),
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Factor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortColumn {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSchema {
    pub segment_id: String,
    pub transect_id: String,
    pub area: String,
    pub length: Option<String>,
    pub count: Option<String>,
    pub effort: Vec<EffortColumn>,
    pub density: Vec<String>,
}

impl Default for SegmentSchema {
    fn default() -> Self {
        Self {
            segment_id: "segment_id".into(),
            transect_id: "transect_id".into(),
            area: "area".into(),
            length: None,
            count: None,
            effort: Vec::new(),
            density: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSchema {
    pub cell_id: String,
    pub area: String,
    pub density: Vec<String>,
}

impl Default for GridSchema {
    fn default() -> Self {
        Self {
            cell_id: "cell_id".into(),
            area: "area".into(),
            density: Vec::new(),
        }
    }
}

struct Table {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| csv_error(&file, e))?;
        let headers = reader.headers().map_err(|e| csv_error(&file, e))?.clone();
        let columns = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            rows.push(rec.map_err(|e| csv_error(&file, e))?);
        }
        Ok(Self { file, columns, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| DsmError::MissingColumn {
            file: self.file.clone(),
            column: name.to_string(),
        })
    }

    fn parse_err(&self, row: usize, column: &str, message: impl Into<String>) -> DsmError {
        DsmError::Parse {
            file: self.file.clone(),
            row: row + 1,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn text<'a>(&self, rec: &'a csv::StringRecord, idx: usize) -> &'a str {
        rec.get(idx).unwrap_or("")
    }

    fn number(&self, rec: &csv::StringRecord, row: usize, idx: usize, column: &str) -> Result<f64> {
        let raw = self.text(rec, idx);
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.parse_err(row, column, format!("cannot parse '{raw}' as a number")))
    }
}

fn csv_error(file: &str, e: csv::Error) -> DsmError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DsmError::Io {
            path: file.to_string(),
            source,
        },
        other => DsmError::invalid(format!("{file}: malformed csv: {other:?}")),
    }
}

fn is_missing(raw: &str) -> bool {
    raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan")
}

pub fn load_observations(path: &Path, schema: &ObservationSchema) -> Result<Vec<Observation>> {
    let t = Table::read(path)?;
    let ct = t.col(&schema.transect_id)?;
    let cs = t.col(&schema.segment_id)?;
    let cd = t.col(&schema.distance)?;
    let cz = t.col(&schema.size)?;
    let extras: Vec<(String, usize)> = schema
        .extra
        .iter()
        .map(|n| t.col(n).map(|i| (n.clone(), i)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, rec) in t.rows.iter().enumerate() {
        let distance = t.number(rec, row, cd, &schema.distance)?;
        if distance < 0.0 {
            return Err(t.parse_err(row, &schema.distance, format!("negative distance {distance}")));
        }
        let size_raw = t.text(rec, cz);
        let size = size_raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= u32::MAX as f64)
            .ok_or_else(|| t.parse_err(row, &schema.size, format!("cannot parse '{size_raw}' as a group size")))?;
        if size < 1.0 {
            return Err(t.parse_err(row, &schema.size, "group size must be at least 1"));
        }
        out.push(Observation {
            transect_id: t.text(rec, ct).to_string(),
            segment_id: t.text(rec, cs).to_string(),
            distance,
            group_size: size as u32,
            extra: extras
                .iter()
                .map(|(n, i)| (n.clone(), t.text(rec, *i).to_string()))
                .collect(),
        });
    }
    Ok(out)
}

pub fn load_segments(path: &Path, schema: &SegmentSchema) -> Result<Vec<Segment>> {
    let t = Table::read(path)?;
    let cs = t.col(&schema.segment_id)?;
    let ct = t.col(&schema.transect_id)?;
    let ca = t.col(&schema.area)?;
    let cl = schema.length.as_deref().map(|n| t.col(n)).transpose()?;
    let cc = schema.count.as_deref().map(|n| t.col(n)).transpose()?;
    let effort: Vec<(&EffortColumn, usize)> = schema
        .effort
        .iter()
        .map(|e| t.col(&e.name).map(|i| (e, i)))
        .collect::<Result<_>>()?;
    let density: Vec<(&String, usize)> = schema
        .density
        .iter()
        .map(|n| t.col(n).map(|i| (n, i)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, rec) in t.rows.iter().enumerate() {
        let area = t.number(rec, row, ca, &schema.area)?;
        if area <= 0.0 {
            return Err(t.parse_err(row, &schema.area, format!("area must be positive, got {area}")));
        }
        let length = match (cl, schema.length.as_deref()) {
            (Some(i), Some(n)) => Some(t.number(rec, row, i, n)?),
            _ => None,
        };
        let count = match (cc, schema.count.as_deref()) {
            (Some(i), Some(n)) if !is_missing(t.text(rec, i)) => {
                let v = t.number(rec, row, i, n)?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(t.parse_err(row, n, "count must be a nonnegative integer"));
                }
                v as u64
            }
            _ => 0,
        };
        let mut eff = Covariates::new();
        for (col, i) in &effort {
            let raw = t.text(rec, *i);
            if is_missing(raw) {
                continue;
            }
            let v = match col.kind {
                CovariateKind::Numeric => CovValue::Num(t.number(rec, row, *i, &col.name)?),
                CovariateKind::Factor => CovValue::Level(raw.to_string()),
            };
            eff.insert(col.name.clone(), v);
        }
        let mut dens = BTreeMap::new();
        for (name, i) in &density {
            if is_missing(t.text(rec, *i)) {
                continue;
            }
            dens.insert((*name).clone(), t.number(rec, row, *i, name)?);
        }
        out.push(Segment {
            segment_id: t.text(rec, cs).to_string(),
            transect_id: t.text(rec, ct).to_string(),
            area,
            length,
            effort: eff,
            density: dens,
            count,
        });
    }
    Ok(out)
}

pub fn load_grid(path: &Path, schema: &GridSchema) -> Result<Vec<PredictionCell>> {
    let t = Table::read(path)?;
    let cid = t.col(&schema.cell_id)?;
    let ca = t.col(&schema.area)?;
    let density: Vec<(&String, usize)> = schema
        .density
        .iter()
        .map(|n| t.col(n).map(|i| (n, i)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, rec) in t.rows.iter().enumerate() {
        let area = t.number(rec, row, ca, &schema.area)?;
        if area <= 0.0 {
            return Err(t.parse_err(row, &schema.area, format!("area must be positive, got {area}")));
        }
        let mut dens = BTreeMap::new();
        for (name, i) in &density {
            dens.insert((*name).clone(), t.number(rec, row, *i, name)?);
        }
        out.push(PredictionCell {
            cell_id: t.text(rec, cid).to_string(),
            area,
            density: dens,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    pub observations: Vec<Observation>,
    pub discarded: usize,
    /// Set when every observation lay beyond the truncation distance.
    pub all_removed: bool,
}

/// Keeps observations with `distance <= w` (boundary inclusive).
pub fn truncate_observations(obs: &[Observation], w: f64) -> Result<Truncation> {
    if w.is_nan() || w <= 0.0 {
        return Err(DsmError::invalid(format!("truncation distance must be positive, got {w}")));
    }
    let kept: Vec<Observation> = obs.iter().filter(|o| o.distance <= w).cloned().collect();
    let discarded = obs.len() - kept.len();
    Ok(Truncation {
        all_removed: kept.is_empty() && !obs.is_empty(),
        observations: kept,
        discarded,
    })
}

/// Overwrites segment counts with the number of linked observations.
pub fn assign_counts(segments: &mut [Segment], obs: &[Observation]) -> Result<()> {
    let index: HashMap<&str, usize> = segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.segment_id.as_str(), i))
        .collect();
    let mut counts = vec![0u64; segments.len()];
    for (row, o) in obs.iter().enumerate() {
        let &i = index.get(o.segment_id.as_str()).ok_or_else(|| {
            DsmError::invalid(format!(
                "observation {}: unknown segment '{}'",
                row + 1,
                o.segment_id
            ))
        })?;
        counts[i] += 1;
    }
    for (s, c) in segments.iter_mut().zip(counts) {
        s.count = c;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    M,
    Km,
}

impl LengthUnit {
    pub fn in_meters(self) -> f64 {
        match self {
            LengthUnit::M => 1.0,
            LengthUnit::Km => 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaUnit {
    M2,
    Km2,
}

impl AreaUnit {
    pub fn in_square_meters(self) -> f64 {
        match self {
            AreaUnit::M2 => 1.0,
            AreaUnit::Km2 => 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Units {
    pub distance: LengthUnit,
    pub length: LengthUnit,
    pub area: AreaUnit,
    /// 1 for one-sided search, 2 for a two-sided strip.
    pub sides: u8,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            distance: LengthUnit::M,
            length: LengthUnit::Km,
            area: AreaUnit::Km2,
            sides: 2,
        }
    }
}

impl Units {
    /// Covered strip area for a segment of the given length, in area units.
    pub fn strip_area(&self, truncation: f64, length: f64) -> f64 {
        let w_m = truncation * self.distance.in_meters();
        let l_m = length * self.length.in_meters();
        self.sides as f64 * w_m * l_m / self.area.in_square_meters()
    }
}

/// What a model needs from the data; used by [`validate_survey`].
#[derive(Debug, Clone, Default)]
pub struct ModelRequirements {
    pub effort_covariates: Vec<String>,
    pub density_covariates: Vec<String>,
    pub truncation: f64,
    pub units: Units,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_clean() {
            Ok(())
        } else {
            Err(DsmError::Validation(self.issues.join("\n")))
        }
    }
}

/// Cross-checks survey tables; collects every failure rather than stopping at the first.
pub fn validate_survey(
    obs: &[Observation],
    segments: &[Segment],
    grid: Option<&[PredictionCell]>,
    model: &ModelRequirements,
) -> ValidationReport {
    let mut issues = Vec::new();
    let mut ids = BTreeSet::new();
    for s in segments {
        if !ids.insert(s.segment_id.as_str()) {
            issues.push(format!("segment '{}' appears more than once", s.segment_id));
        }
    }
    let mut linked: HashMap<&str, u64> = HashMap::new();
    for (row, o) in obs.iter().enumerate() {
        if !ids.contains(o.segment_id.as_str()) {
            issues.push(format!(
                "observation row {} references unknown segment '{}'",
                row + 1,
                o.segment_id
            ));
        }
        if !(o.distance >= 0.0) {
            issues.push(format!("observation row {} has negative distance", row + 1));
        }
        if o.group_size < 1 {
            issues.push(format!("observation row {} has group size < 1", row + 1));
        }
        if o.distance <= model.truncation || model.truncation <= 0.0 {
            *linked.entry(o.segment_id.as_str()).or_default() += 1;
        }
    }
    let seg_transect: HashMap<&str, &str> = segments
        .iter()
        .map(|s| (s.segment_id.as_str(), s.transect_id.as_str()))
        .collect();
    for (row, o) in obs.iter().enumerate() {
        if let Some(t) = seg_transect.get(o.segment_id.as_str()) {
            if *t != o.transect_id {
                issues.push(format!(
                    "observation row {} transect '{}' disagrees with segment '{}' transect '{}'",
                    row + 1,
                    o.transect_id,
                    o.segment_id,
                    t
                ));
            }
        }
    }
    for s in segments {
        if !(s.area > 0.0) {
            issues.push(format!("segment '{}' has non-positive area", s.segment_id));
        }
        for c in &model.effort_covariates {
            if !s.effort.contains_key(c) {
                issues.push(format!("segment '{}' missing effort covariate '{c}'", s.segment_id));
            }
        }
        for c in &model.density_covariates {
            match s.density.get(c) {
                Some(v) if v.is_finite() => {}
                _ => issues.push(format!("segment '{}' missing density covariate '{c}'", s.segment_id)),
            }
        }
        if let Some(len) = s.length {
            if model.truncation > 0.0 && model.truncation.is_finite() {
                let expected = model.units.strip_area(model.truncation, len);
                if expected > 0.0 && ((s.area / expected) - 1.0).abs() > 0.2 {
                    issues.push(format!(
                        "segment '{}' area {} differs from {}-sided strip area {:.6} by more than 20% (check units)",
                        s.segment_id, s.area, model.units.sides, expected
                    ));
                }
            }
        }
        let derived = linked.get(s.segment_id.as_str()).copied().unwrap_or(0);
        if s.count != 0 && s.count != derived {
            issues.push(format!(
                "segment '{}' declares count {} but {} observations link to it",
                s.segment_id, s.count, derived
            ));
        }
    }
    if let Some(grid) = grid {
        for c in &model.density_covariates {
            let missing = grid.iter().filter(|cell| !cell.density.contains_key(c)).count();
            if missing > 0 {
                issues.push(format!(
                    "prediction grid missing density covariate '{c}' in {missing} cells"
                ));
            }
        }
        for cell in grid {
            if !(cell.area > 0.0) {
                issues.push(format!("prediction cell '{}' has non-positive area", cell.cell_id));
            }
        }
    }
    ValidationReport { issues }
}
