//! Segmentation overlap and surface distances, centroid localization error,
//! identification rate, and per-region report tables.
//!
//! Surface distances use an exact anisotropic squared Euclidean distance
//! transform (lower envelope of parabolas, one axis at a time), so they agree
//! with brute-force pairwise search up to floating-point rounding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{AnatomicalLabel, VertebraClass};
use crate::phantom::CentroidEntry;
use crate::volume::LabelVolume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("masks have different geometry")]
    GeometryMismatch,
    #[error("surface distance undefined for an empty mask")]
    EmptyMask,
    #[error("label {0} appears more than once")]
    DuplicateLabel(AnatomicalLabel),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const ID_RADIUS_MM: f64 = 20.0;

fn same_geometry(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.geometry() == b.geometry() {
        Ok(())
    } else {
        Err(MetricsError::GeometryMismatch)
    }
}

/// `2|A∩B| / (|A|+|B|)` over nonzero voxels; 1 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    same_geometry(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with a 6-neighbor that is background or outside the volume.
pub fn surface_voxels(m: &LabelVolume) -> Vec<usize> {
    let [nx, ny, nz] = m.dims();
    let d = m.data();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if d[i] == 0 {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && d[i - 1] != 0
                    && d[i + 1] != 0
                    && d[i - nx] != 0
                    && d[i + nx] != 0
                    && d[i - nx * ny] != 0
                    && d[i + nx * ny] != 0;
                if !interior {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// 1D squared distance transform along a line with sample pitch `step`.
/// `f` holds squared distances (infinite where no site); written in place.
fn edt_line(f: &mut [f64], step: f64, sites: &mut Vec<usize>, bounds: &mut Vec<f64>, buf: &mut Vec<f64>) {
    // sites[j] owns the interval starting at bounds[j]
    sites.clear();
    bounds.clear();
    let pos = |q: usize| q as f64 * step;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        let mut s = f64::NEG_INFINITY;
        while let Some(&v) = sites.last() {
            s = ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)));
            if s <= bounds[bounds.len() - 1] {
                sites.pop();
                bounds.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        sites.push(q);
        bounds.push(s);
    }
    if sites.is_empty() {
        return;
    }
    buf.clear();
    buf.extend_from_slice(f);
    let mut k = 0;
    for q in 0..f.len() {
        while k + 1 < sites.len() && bounds[k + 1] < pos(q) {
            k += 1;
        }
        let v = sites[k];
        let d = pos(q) - pos(v);
        f[q] = d * d + buf[v];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel in
/// `sites` (linear indices), with per-axis `spacing`.
pub fn squared_distance_map(dims: [usize; 3], spacing: [f64; 3], sites: &[usize]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut f = vec![f64::INFINITY; nx * ny * nz];
    for &i in sites {
        f[i] = 0.0;
    }
    let (mut s, mut b, mut buf) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (a0, a1) = (others[0], others[1]);
        for j1 in 0..dims[a1] {
            for j0 in 0..dims[a0] {
                let base = j0 * strides[a0] + j1 * strides[a1];
                line.clear();
                line.extend((0..n).map(|q| f[base + q * stride]));
                edt_line(&mut line, spacing[axis], &mut s, &mut b, &mut buf);
                for q in 0..n {
                    f[base + q * stride] = line[q];
                }
            }
        }
    }
    f
}

/// Directed nearest-surface distances in both directions: from each surface voxel
/// of `a` to the surface of `b`, and vice versa.
fn directed_distances(a: &LabelVolume, b: &LabelVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    same_geometry(a, b)?;
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let g = a.geometry();
    let to_b = squared_distance_map(g.dims, g.spacing, &sb);
    let to_a = squared_distance_map(g.dims, g.spacing, &sa);
    Ok((sa.iter().map(|&i| to_b[i].sqrt()).collect(), sb.iter().map(|&i| to_a[i].sqrt()).collect()))
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (ab, ba) = directed_distances(a, b)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}

/// Symmetric Hausdorff distance between surfaces in mm.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (ab, ba) = directed_distances(a, b)?;
    Ok(ab.iter().chain(&ba).copied().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub assd_mm: f64,
    pub hd_mm: f64,
}

pub fn seg_metrics(a: &LabelVolume, b: &LabelVolume) -> Result<SegMetrics> {
    let (ab, ba) = directed_distances(a, b)?;
    Ok(SegMetrics {
        dice: dice(a, b)?,
        assd_mm: (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64,
        hd_mm: ab.iter().chain(&ba).copied().fold(0.0, f64::max),
    })
}

/// For every truth instance id `1..=n_truth`, the Dice against the predicted
/// instance overlapping it most (0 when nothing overlaps).
pub fn per_instance_dice(pred: &LabelVolume, truth: &LabelVolume, n_truth: usize) -> Result<Vec<f64>> {
    same_geometry(pred, truth)?;
    let mut overlap: HashMap<(u16, u16), usize> = HashMap::new();
    let mut pred_size: HashMap<u16, usize> = HashMap::new();
    let mut truth_size = vec![0usize; n_truth + 1];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p != 0 {
            *pred_size.entry(p).or_default() += 1;
        }
        if t != 0 && (t as usize) <= n_truth {
            truth_size[t as usize] += 1;
            if p != 0 {
                *overlap.entry((t, p)).or_default() += 1;
            }
        }
    }
    let mut best = vec![(0usize, 0u16); n_truth + 1];
    let mut keys: Vec<_> = overlap.into_iter().collect();
    keys.sort_unstable();
    for ((t, p), n) in keys {
        if n > best[t as usize].0 {
            best[t as usize] = (n, p);
        }
    }
    Ok((1..=n_truth)
        .map(|t| {
            let (n, p) = best[t];
            if n == 0 {
                0.0
            } else {
                2.0 * n as f64 / (truth_size[t] + pred_size[&p]) as f64
            }
        })
        .collect())
}

fn check_unique(list: &[CentroidEntry]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in list {
        if !seen.insert(e.label) {
            return Err(MetricsError::DuplicateLabel(e.label));
        }
    }
    Ok(())
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-vertebra outcome of matching one case's predictions against its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraOutcome {
    pub label: AnatomicalLabel,
    /// Distance to the prediction with the same label, if any.
    pub error_mm: Option<f64>,
    pub identified: bool,
}

/// Match predictions to truth by label and apply the identification rule.
pub fn evaluate_case(pred: &[CentroidEntry], truth: &[CentroidEntry], radius_mm: f64) -> Result<Vec<VertebraOutcome>> {
    check_unique(pred)?;
    check_unique(truth)?;
    let by_label: BTreeMap<AnatomicalLabel, [f64; 3]> = pred.iter().map(|e| (e.label, e.centroid_mm)).collect();
    Ok(truth
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let Some(&p) = by_label.get(&t.label) else {
                return VertebraOutcome { label: t.label, error_mm: None, identified: false };
            };
            let d = distance(p, t.centroid_mm);
            let nearest_is_this = truth.iter().enumerate().all(|(j, o)| j == ti || distance(p, o.centroid_mm) > d);
            VertebraOutcome { label: t.label, error_mm: Some(d), identified: nearest_is_this && d < radius_mm }
        })
        .collect())
}

/// Fraction of truth vertebrae identified; 1 when `truth` is empty.
pub fn id_rate(pred: &[CentroidEntry], truth: &[CentroidEntry], radius_mm: f64) -> Result<f64> {
    let outcomes = evaluate_case(pred, truth, radius_mm)?;
    if outcomes.is_empty() {
        return Ok(1.0);
    }
    Ok(outcomes.iter().filter(|o| o.identified).count() as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    /// Mean and population standard deviation over matched vertebrae; `None` if none matched.
    pub mean_mm: Option<f64>,
    pub std_mm: Option<f64>,
    pub id_rate: Option<f64>,
    /// Truth vertebrae in the region.
    pub n: usize,
    pub n_matched: usize,
}

impl RegionStats {
    fn from_outcomes<'a>(outcomes: impl Iterator<Item = &'a VertebraOutcome>) -> Self {
        let mut errors = Vec::new();
        let (mut n, mut hits) = (0, 0);
        for o in outcomes {
            n += 1;
            hits += o.identified as usize;
            errors.extend(o.error_mm);
        }
        let (mean_mm, std_mm) = if errors.is_empty() {
            (None, None)
        } else {
            let m = errors.iter().sum::<f64>() / errors.len() as f64;
            let var = errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / errors.len() as f64;
            (Some(m), Some(var.sqrt()))
        };
        let id_rate = (n > 0).then(|| hits as f64 / n as f64);
        Self { mean_mm, std_mm, id_rate, n, n_matched: errors.len() }
    }
}

/// Localization and identification statistics pooled over vertebrae.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocIdMetrics {
    pub all: RegionStats,
    pub cervical: RegionStats,
    pub thoracic: RegionStats,
    pub lumbar: RegionStats,
}

impl LocIdMetrics {
    pub fn from_outcomes(outcomes: &[VertebraOutcome]) -> Self {
        let region = |c: VertebraClass| RegionStats::from_outcomes(outcomes.iter().filter(move |o| o.label.class() == c));
        Self {
            all: RegionStats::from_outcomes(outcomes.iter()),
            cervical: region(VertebraClass::Cervical),
            thoracic: region(VertebraClass::Thoracic),
            lumbar: region(VertebraClass::Lumbar),
        }
    }

    pub fn rows(&self) -> [(&'static str, RegionStats); 4] {
        [("all", self.all), ("cervical", self.cervical), ("thoracic", self.thoracic), ("lumbar", self.lumbar)]
    }
}

/// Mean error and population std for one case.
pub fn localization_stats(pred: &[CentroidEntry], truth: &[CentroidEntry]) -> Result<LocIdMetrics> {
    Ok(LocIdMetrics::from_outcomes(&evaluate_case(pred, truth, ID_RADIUS_MM)?))
}

/// Region table pooled over cases (every vertebra weighs equally).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub metrics: Option<LocIdMetrics>,
}

pub fn report_table(cases: &[Vec<VertebraOutcome>]) -> ReportTable {
    if cases.is_empty() {
        return ReportTable { metrics: None };
    }
    let pooled: Vec<VertebraOutcome> = cases.iter().flatten().cloned().collect();
    ReportTable { metrics: Some(LocIdMetrics::from_outcomes(&pooled)) }
}

pub const REPORT_HEADER: &str = "region,mean_mm,std_mm,id_rate,n";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        if let Some(m) = &self.metrics {
            for (name, r) in m.rows() {
                let _ = writeln!(s, "{name},{},{},{},{}", fmt_opt(r.mean_mm), fmt_opt(r.std_mm), fmt_opt(r.id_rate), r.n);
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10} {:>8} {:>5}\n", "region", "mean_mm", "std_mm", "id_rate", "n");
        if let Some(m) = &self.metrics {
            for (name, r) in m.rows() {
                let _ = writeln!(
                    s,
                    "{:<10} {:>10} {:>10} {:>8} {:>5}",
                    name,
                    fmt_opt(r.mean_mm),
                    fmt_opt(r.std_mm),
                    fmt_opt(r.id_rate),
                    r.n
                );
            }
        }
        s
    }
}

/// Spine-mask overlap of one case; distances are `None` when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegRow {
    pub dice: f64,
    pub assd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

/// Everything measured on one predicted case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    /// All vertebrae together as one binary mask.
    pub segmentation: SegRow,
    /// One entry per truth instance.
    pub instance_dice: Vec<f64>,
    pub outcomes: Vec<VertebraOutcome>,
}

/// Compare predicted instance ids and labeled centroids with the truth.
pub fn evaluate_prediction(
    pred_ids: &LabelVolume,
    pred: &[CentroidEntry],
    truth_ids: &LabelVolume,
    truth: &[CentroidEntry],
) -> Result<CaseEvaluation> {
    same_geometry(pred_ids, truth_ids)?;
    let pm = pred_ids.map(|l| u16::from(l != 0));
    let tm = truth_ids.map(|l| u16::from(l != 0));
    let segmentation = match seg_metrics(&pm, &tm) {
        Ok(m) => SegRow { dice: m.dice, assd_mm: Some(m.assd_mm), hd_mm: Some(m.hd_mm) },
        Err(MetricsError::EmptyMask) => SegRow { dice: dice(&pm, &tm)?, assd_mm: None, hd_mm: None },
        Err(e) => return Err(e),
    };
    Ok(CaseEvaluation {
        segmentation,
        instance_dice: per_instance_dice(pred_ids, truth_ids, truth.len())?,
        outcomes: evaluate_case(pred, truth, ID_RADIUS_MM)?,
    })
}

pub const SEGMENTATION_HEADER: &str = "case,dice,assd_mm,hd_mm,mean_instance_dice";

/// One CSV row per case.
pub fn segmentation_csv(rows: &[(String, CaseEvaluation)]) -> String {
    let mut s = format!("{SEGMENTATION_HEADER}\n");
    for (name, e) in rows {
        let mean = (!e.instance_dice.is_empty()).then(|| e.instance_dice.iter().sum::<f64>() / e.instance_dice.len() as f64);
        let _ = writeln!(
            s,
            "{name},{:.4},{},{},{}",
            e.segmentation.dice,
            fmt_opt(e.segmentation.assd_mm),
            fmt_opt(e.segmentation.hd_mm),
            fmt_opt(mean)
        );
    }
    s
}
