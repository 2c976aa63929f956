//! Group-size classes: replicated segment tables, per-class fits and the combined variance.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::abundance::{abundance_gradient, PredictionGrid};
use crate::data::{CovValue, Observation, PredictionCell, Segment};
use crate::detection::{DetectionFit, ScaleTerm};
use crate::error::{DsmError, Result};
use crate::family::Family;
use crate::gam::GamFit;
use crate::linalg;
use crate::smooth::{Frame, SmoothSpec};
use crate::varprop::{fit_both, DsmInput, VarpropFit, VarpropOptions};

/// Factor name carrying the size class through detection and density models.
pub const CLASS_FACTOR: &str = "size_class";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBin {
    pub lo: u32,
    pub hi: u32,
}

impl SizeBin {
    pub fn label(&self) -> String {
        if self.lo == self.hi {
            self.lo.to_string()
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }

    pub fn contains(&self, size: u32) -> bool {
        (self.lo..=self.hi).contains(&size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSizeScheme {
    pub bins: Vec<SizeBin>,
    pub g_bar: Vec<f64>,
    /// Variance of the class mean: within-class sample variance over the class count.
    pub var_g_bar: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupSizeScheme {
    pub fn m(&self) -> usize {
        self.bins.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.bins.iter().map(SizeBin::label).collect()
    }

    pub fn class_of(&self, size: u32) -> Option<usize> {
        self.bins.iter().position(|b| b.contains(size))
    }
}

pub fn make_scheme(obs: &[Observation], bins: &[SizeBin]) -> Result<GroupSizeScheme> {
    if bins.is_empty() {
        return Err(DsmError::invalid("at least one group-size bin is required"));
    }
    for (i, b) in bins.iter().enumerate() {
        if b.lo > b.hi || b.lo == 0 {
            return Err(DsmError::invalid(format!("group-size bin {} is empty or starts at 0", b.label())));
        }
        for c in &bins[..i] {
            if b.lo <= c.hi && c.lo <= b.hi {
                return Err(DsmError::invalid(format!("group-size bins {} and {} overlap", c.label(), b.label())));
            }
        }
    }
    let mut sizes: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for (row, o) in obs.iter().enumerate() {
        let m = bins
            .iter()
            .position(|b| b.contains(o.group_size))
            .ok_or_else(|| DsmError::invalid(format!("observation {}: group size {} is not covered by any bin", row + 1, o.group_size)))?;
        sizes[m].push(o.group_size as f64);
    }
    let mut g_bar = Vec::new();
    let mut var_g_bar = Vec::new();
    for (b, s) in bins.iter().zip(&sizes) {
        if s.is_empty() {
            return Err(DsmError::invalid(format!("group-size bin {} has no observations", b.label())));
        }
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = if s.len() > 1 {
            s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        g_bar.push(mean);
        var_g_bar.push(var / n);
    }
    Ok(GroupSizeScheme {
        bins: bins.to_vec(),
        g_bar,
        var_g_bar,
        counts: sizes.iter().map(Vec::len).collect(),
    })
}

/// Observations with their class label attached as an extra factor.
pub fn tag_observations(obs: &[Observation], scheme: &GroupSizeScheme) -> Result<Vec<Observation>> {
    let labels = scheme.labels();
    obs.iter()
        .enumerate()
        .map(|(row, o)| {
            let m = scheme
                .class_of(o.group_size)
                .ok_or_else(|| DsmError::invalid(format!("observation {}: group size {} is not covered", row + 1, o.group_size)))?;
            let mut t = o.clone();
            t.extra.insert(CLASS_FACTOR.into(), labels[m].clone());
            Ok(t)
        })
        .collect()
}

/// M copies of the segment table, copy m carrying the class-m group counts and the class label
/// as an effort covariate. Copies are stacked class by class.
pub fn replicate_segments(segments: &[Segment], obs: &[Observation], scheme: &GroupSizeScheme) -> Result<Vec<Segment>> {
    let index: HashMap<&str, usize> = segments.iter().enumerate().map(|(i, s)| (s.segment_id.as_str(), i)).collect();
    let m = scheme.m();
    let mut counts = vec![vec![0u64; segments.len()]; m];
    for (row, o) in obs.iter().enumerate() {
        let i = *index
            .get(o.segment_id.as_str())
            .ok_or_else(|| DsmError::invalid(format!("observation {}: unknown segment '{}'", row + 1, o.segment_id)))?;
        let c = scheme
            .class_of(o.group_size)
            .ok_or_else(|| DsmError::invalid(format!("observation {}: group size {} is not covered", row + 1, o.group_size)))?;
        counts[c][i] += 1;
    }
    if m == 1 {
        let mut out = segments.to_vec();
        for (s, &c) in out.iter_mut().zip(&counts[0]) {
            s.count = c;
        }
        return Ok(out);
    }
    let labels = scheme.labels();
    let mut out = Vec::with_capacity(m * segments.len());
    for (c, label) in labels.iter().enumerate() {
        for (i, s) in segments.iter().enumerate() {
            let mut r = s.clone();
            r.count = counts[c][i];
            r.effort.insert(CLASS_FACTOR.into(), CovValue::Level(label.clone()));
            out.push(r);
        }
    }
    Ok(out)
}

/// Model input for a replicated table: class main effect plus class factor in the frame.
pub fn group_input(replicated: &[Segment], scheme: &GroupSizeScheme) -> Result<DsmInput> {
    let mut input = DsmInput::from_segments(replicated);
    if scheme.m() > 1 {
        let labels: Vec<String> = replicated
            .iter()
            .map(|s| {
                s.effort
                    .get(CLASS_FACTOR)
                    .and_then(CovValue::as_level)
                    .map(str::to_string)
                    .ok_or_else(|| DsmError::invalid("replicated segment lacks its size class"))
            })
            .collect::<Result<_>>()?;
        input.frame = input.frame.with_factor(CLASS_FACTOR, labels);
        input.factors.push((CLASS_FACTOR.into(), scheme.labels()));
    }
    Ok(input)
}

#[derive(Debug, Clone)]
pub struct GroupSizeFit {
    pub scheme: GroupSizeScheme,
    pub naive: GamFit,
    pub varprop: VarpropFit,
    pub input: DsmInput,
}

pub fn fit_groupsize_dsm(
    segments: &[Segment],
    obs: &[Observation],
    scheme: &GroupSizeScheme,
    detection: &DetectionFit,
    smooths: &[SmoothSpec],
    family: Family,
    opts: &VarpropOptions,
) -> Result<GroupSizeFit> {
    if scheme.m() > 1 {
        let term = detection.spec.terms.iter().find(|t| t.name() == CLASS_FACTOR);
        match term {
            Some(ScaleTerm::Factor { levels, .. }) => {
                for l in scheme.labels() {
                    if !levels.contains(&l) {
                        return Err(DsmError::invalid(format!("size class '{l}' is absent from the detection model")));
                    }
                }
            }
            _ => {
                return Err(DsmError::invalid(format!(
                    "detection model must include factor '{CLASS_FACTOR}' when group-size classes are used"
                )))
            }
        }
    }
    let replicated = replicate_segments(segments, obs, scheme)?;
    let input = group_input(&replicated, scheme)?;
    let (naive, varprop) = fit_both(&input, detection, smooths, family, opts)?;
    Ok(GroupSizeFit {
        scheme: scheme.clone(),
        naive,
        varprop,
        input,
    })
}

/// Prediction grid for one class.
pub fn class_grid(fit: &GamFit, cells: &[PredictionCell], scheme: &GroupSizeScheme, class: usize) -> Result<PredictionGrid> {
    let mut frame = Frame::from_grid(cells);
    if scheme.m() > 1 {
        frame = frame.with_factor(CLASS_FACTOR, vec![scheme.labels()[class].clone(); cells.len()]);
    }
    PredictionGrid::from_frame(
        fit,
        &frame,
        cells.iter().map(|c| c.cell_id.clone()).collect(),
        cells.iter().map(|c| c.area).collect(),
    )
}

/// Per-class group abundances and their joint delta-method covariance.
pub fn class_abundances(fit: &GamFit, cells: &[PredictionCell], scheme: &GroupSizeScheme) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = scheme.m();
    let mut n = DVector::zeros(m);
    let mut g = DMatrix::zeros(fit.beta.len(), m);
    for c in 0..m {
        let grid = class_grid(fit, cells, scheme, c)?;
        let (nc, gc) = abundance_gradient(fit, &grid)?;
        n[c] = nc;
        g.set_column(c, &gc);
    }
    let mut cov = g.transpose() * &fit.v_beta * &g;
    linalg::symmetrize(&mut cov);
    Ok((n, cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAbundance {
    pub label: String,
    pub g_bar: f64,
    pub var_g_bar: f64,
    pub n_hat: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAbundance {
    /// Individuals: Σ ḡ_m N̂_m.
    pub n_hat: f64,
    pub variance: f64,
    pub cv: f64,
    /// ḡᵀ Cov(N̂) ḡ.
    pub model_term: f64,
    /// Σ Var(Ḡ_m) N̂_m².
    pub size_term: f64,
    pub classes: Vec<ClassAbundance>,
}

pub fn combine_group_abundance(n_m: &DVector<f64>, cov_n: &DMatrix<f64>, scheme: &GroupSizeScheme) -> Result<GroupAbundance> {
    let m = scheme.m();
    if n_m.len() != m || cov_n.nrows() != m || cov_n.ncols() != m {
        return Err(DsmError::invalid(format!(
            "{m} size classes but {} abundances and a {}x{} covariance",
            n_m.len(),
            cov_n.nrows(),
            cov_n.ncols()
        )));
    }
    let g = DVector::from_vec(scheme.g_bar.clone());
    let n_hat = g.dot(n_m);
    let model_term = linalg::quad_form(cov_n, &g);
    let size_term: f64 = (0..m).map(|k| scheme.var_g_bar[k] * n_m[k] * n_m[k]).sum();
    let variance = model_term + size_term;
    let labels = scheme.labels();
    Ok(GroupAbundance {
        n_hat,
        variance,
        cv: if n_hat > 0.0 { variance.max(0.0).sqrt() / n_hat } else { 0.0 },
        model_term,
        size_term,
        classes: (0..m)
            .map(|k| ClassAbundance {
                label: labels[k].clone(),
                g_bar: scheme.g_bar[k],
                var_g_bar: scheme.var_g_bar[k],
                n_hat: n_m[k],
                se: cov_n[(k, k)].max(0.0).sqrt(),
            })
            .collect(),
    })
}

/// Combined individual density map Σ_m ḡ_m density_m, cell by cell.
pub fn combined_density(fit: &GamFit, cells: &[PredictionCell], scheme: &GroupSizeScheme) -> Result<Vec<Vec<f64>>> {
    let mut per_class = Vec::new();
    for c in 0..scheme.m() {
        let grid = class_grid(fit, cells, scheme, c)?;
        per_class.push((&grid.xp * &fit.beta).map(f64::exp).as_slice().to_vec());
    }
    let combined: Vec<f64> = (0..cells.len())
        .map(|j| (0..scheme.m()).map(|c| scheme.g_bar[c] * per_class[c][j]).sum())
        .collect();
    per_class.push(combined);
    Ok(per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ob(seg: &str, size: u32) -> Observation {
        Observation {
            transect_id: "T".into(),
            segment_id: seg.into(),
            distance: 0.1,
            group_size: size,
            extra: BTreeMap::new(),
        }
    }

    fn seg(id: &str) -> Segment {
        Segment {
            segment_id: id.into(),
            transect_id: "T".into(),
            area: 1.0,
            length: None,
            effort: BTreeMap::new(),
            density: BTreeMap::new(),
            count: 0,
        }
    }

    fn bins(spec: &[(u32, u32)]) -> Vec<SizeBin> {
        spec.iter().map(|&(lo, hi)| SizeBin { lo, hi }).collect()
    }

    #[test]
    fn minke_style_three_class_scheme() {
        let mut obs = Vec::new();
        obs.extend((0..131).map(|_| ob("s", 1)));
        obs.extend((0..35).map(|_| ob("s", 2)));
        obs.extend((0..14).map(|i| ob("s", 3 + (i % 3) as u32)));
        let s = make_scheme(&obs, &bins(&[(1, 1), (2, 2), (3, 5)])).unwrap();
        assert_eq!(s.m(), 3);
        assert_eq!(s.counts, vec![131, 35, 14]);
        assert_eq!(s.labels(), vec!["1", "2", "3-5"]);
        assert_eq!(s.g_bar[0], 1.0);
        assert_eq!(s.var_g_bar[0], 0.0);
        assert!(s.g_bar[2] >= 3.0 && s.g_bar[2] <= 5.0);
        assert!(s.var_g_bar[2] > 0.0);
    }

    #[test]
    fn scheme_errors() {
        let obs = vec![ob("s", 1), ob("s", 4)];
        assert!(make_scheme(&obs, &bins(&[(1, 2)])).is_err());
        assert!(make_scheme(&obs, &bins(&[(1, 2), (3, 5), (6, 9)])).is_err());
        assert!(make_scheme(&obs, &bins(&[(1, 3), (3, 5)])).is_err());
        assert_eq!(make_scheme(&obs, &bins(&[(1, 10)])).unwrap().m(), 1);
    }

    #[test]
    fn replication_preserves_counts() {
        let segments = vec![seg("a"), seg("b")];
        let obs = vec![ob("a", 1), ob("a", 1), ob("a", 2), ob("b", 2)];
        let s = make_scheme(&obs, &bins(&[(1, 1), (2, 2)])).unwrap();
        let rep = replicate_segments(&segments, &obs, &s).unwrap();
        assert_eq!(rep.len(), 4);
        assert_eq!(rep.iter().map(|r| r.count).sum::<u64>(), 4);
        assert_eq!((rep[0].count, rep[2].count), (2, 1));
        let one = make_scheme(&obs, &bins(&[(1, 2)])).unwrap();
        let rep1 = replicate_segments(&segments, &obs, &one).unwrap();
        assert_eq!(rep1.len(), 2);
        assert_eq!((rep1[0].count, rep1[1].count), (3, 1));
        assert!(rep1[0].effort.is_empty());
    }

    #[test]
    fn combination_terms() {
        let obs = vec![ob("s", 1), ob("s", 1), ob("s", 3), ob("s", 5)];
        let s = make_scheme(&obs, &bins(&[(1, 1), (3, 5)])).unwrap();
        let n = DVector::from_vec(vec![100.0, 40.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[90.0, 10.0, 10.0, 30.0]);
        let r = combine_group_abundance(&n, &cov, &s).unwrap();
        assert!((r.n_hat - (100.0 + 4.0 * 40.0)).abs() < 1e-12);
        let model = 90.0 + 2.0 * 4.0 * 10.0 + 16.0 * 30.0;
        assert!((r.model_term - model).abs() < 1e-9);
        // class 2 sizes {3, 5}: sample variance 2, mean variance 1
        assert!((r.size_term - 1600.0).abs() < 1e-9);
        assert!(combine_group_abundance(&n, &DMatrix::zeros(3, 3), &s).is_err());
    }

    #[test]
    fn single_class_reduces_to_group_count() {
        let obs = vec![ob("s", 1), ob("s", 1)];
        let s = make_scheme(&obs, &bins(&[(1, 1)])).unwrap();
        let r = combine_group_abundance(&DVector::from_vec(vec![55.0]), &DMatrix::from_element(1, 1, 12.0), &s).unwrap();
        assert_eq!(r.n_hat, 55.0);
        assert_eq!(r.variance, 12.0);
    }
}
