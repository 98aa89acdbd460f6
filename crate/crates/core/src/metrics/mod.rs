//! Segmentation metrics: overlap scores, HD95, region composition and
//! per-case evaluation tables.

mod components;
mod distance;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::LabelMap;

pub use components::{connected_components_3d, Components, Connectivity};
pub use distance::{empty_mask_sentinel, hd95, percentile, squared_edt, surface};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask length mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("region {region:?} uses label {label}, but only {class_count} classes exist")]
    InvalidLabel {
        region: String,
        label: u16,
        class_count: u16,
    },
    #[error("unknown region {0:?} in nesting declaration")]
    UnknownRegion(String),
    #[error("region {inner:?} is not contained in {outer:?} ({voxels} voxels outside)")]
    Nesting {
        inner: String,
        outer: String,
        voxels: usize,
    },
    #[error("prediction and reference grids differ: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
}

/// Dice `2TP/(2TP+FP+FN)`, IoU `TP/(TP+FP+FN)` and sensitivity `TP/(TP+FN)`.
/// Two empty masks score 1 on all three; an empty reference with a nonempty
/// prediction scores 0.
pub fn overlap_metrics(pred: &[bool], reference: &[bool]) -> Result<Overlap> {
    if pred.len() != reference.len() {
        return Err(MetricsError::DimMismatch {
            expected: reference.len(),
            found: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        match (p, r) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(Overlap {
            dice: 1.0,
            iou: 1.0,
            sensitivity: 1.0,
        });
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    Ok(Overlap {
        dice: 2.0 * tp / (2.0 * tp + fp + fn_),
        iou: tp / (tp + fp + fn_),
        sensitivity: if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub labels: Vec<u16>,
}

/// Named label unions plus declared `(inner, outer)` containment pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub nesting: Vec<(String, String)>,
}

impl Default for RegionSpec {
    /// Whole tumor, tumor core and enhancing tumor over labels
    /// 1 (necrotic core), 2 (edema) and 3 (enhancing).
    fn default() -> Self {
        let r = |name: &str, labels: &[u16]| Region {
            name: name.into(),
            labels: labels.to_vec(),
        };
        RegionSpec {
            regions: vec![r("WT", &[1, 2, 3]), r("TC", &[1, 3]), r("ET", &[3])],
            nesting: vec![("ET".into(), "TC".into()), ("TC".into(), "WT".into())],
        }
    }
}

impl RegionSpec {
    pub fn validate(&self, class_count: u16) -> Result<()> {
        for r in &self.regions {
            if let Some(&label) = r.labels.iter().find(|&&l| l >= class_count) {
                return Err(MetricsError::InvalidLabel {
                    region: r.name.clone(),
                    label,
                    class_count,
                });
            }
        }
        for (inner, outer) in &self.nesting {
            for name in [inner, outer] {
                if !self.regions.iter().any(|r| &r.name == name) {
                    return Err(MetricsError::UnknownRegion(name.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Binary masks for each region, in declaration order. Declared nesting is
/// checked on the resulting masks.
pub fn compose_regions(labels: &LabelMap, spec: &RegionSpec) -> Result<Vec<(String, Vec<bool>)>> {
    spec.validate(labels.class_count)?;
    let masks: Vec<(String, Vec<bool>)> = spec
        .regions
        .iter()
        .map(|r| {
            let mut member = vec![false; labels.class_count as usize];
            for &l in &r.labels {
                member[l as usize] = true;
            }
            (r.name.clone(), labels.labels.iter().map(|&l| member[l as usize]).collect())
        })
        .collect();
    let find = |name: &str| &masks.iter().find(|(n, _)| n == name).expect("validated").1;
    for (inner, outer) in &spec.nesting {
        let voxels = find(inner)
            .iter()
            .zip(find(outer))
            .filter(|(i, o)| **i && !**o)
            .count();
        if voxels > 0 {
            return Err(MetricsError::Nesting {
                inner: inner.clone(),
                outer: outer.clone(),
                voxels,
            });
        }
    }
    Ok(masks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub region: String,
    pub dice: f64,
    pub hd95: f64,
    pub iou: f64,
    pub sensitivity: f64,
}

/// Rows for every region of one case.
pub fn evaluate_case(case_id: &str, pred: &LabelMap, reference: &LabelMap, spec: &RegionSpec) -> Result<Vec<MetricRow>> {
    if pred.dims != reference.dims {
        return Err(MetricsError::GridMismatch(pred.dims, reference.dims));
    }
    let pm = compose_regions(pred, spec)?;
    let rm = compose_regions(reference, spec)?;
    pm.iter()
        .zip(&rm)
        .map(|((name, p), (_, r))| {
            let o = overlap_metrics(p, r)?;
            Ok(MetricRow {
                case_id: case_id.to_string(),
                region: name.clone(),
                dice: o.dice,
                hd95: hd95(p, r, reference.dims, reference.spacing)?,
                iou: o.iou,
                sensitivity: o.sensitivity,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub dice: f64,
    pub hd95: f64,
    pub iou: f64,
    pub sensitivity: f64,
}

/// Per-case rows sorted by case id, then region declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(mut rows: Vec<MetricRow>) -> Self {
        // stable sort keeps region order within a case
        rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        MetricTable { rows }
    }

    pub fn means(&self) -> BTreeMap<String, RegionMeans> {
        let mut acc: BTreeMap<String, (RegionMeans, usize)> = BTreeMap::new();
        for r in &self.rows {
            let (m, n) = acc.entry(r.region.clone()).or_default();
            m.dice += r.dice;
            m.hd95 += r.hd95;
            m.iou += r.iou;
            m.sensitivity += r.sensitivity;
            *n += 1;
        }
        acc.into_iter()
            .map(|(k, (m, n))| {
                let n = n as f64;
                (
                    k,
                    RegionMeans {
                        dice: m.dice / n,
                        hd95: m.hd95 / n,
                        iou: m.iou / n,
                        sensitivity: m.sensitivity / n,
                    },
                )
            })
            .collect()
    }

    pub fn mean_of(&self, region: &str) -> Option<RegionMeans> {
        self.means().remove(region)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,region,dice,hd95_mm,iou,sensitivity\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.case_id, r.region, r.dice, r.hd95, r.iou, r.sensitivity);
        }
        s
    }

    /// `{region: {metric: mean}}`.
    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::to_value(self.means()).expect("plain numbers serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_hand_counts() {
        let r = vec![true; 8];
        let mut p = vec![false; 8];
        p[..4].fill(true);
        let o = overlap_metrics(&p, &r).unwrap();
        assert!((o.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((o.iou, o.sensitivity), (0.5, 0.5));
        let o = overlap_metrics(&r, &r).unwrap();
        assert_eq!((o.dice, o.iou, o.sensitivity), (1.0, 1.0, 1.0));
        let a = [true, false];
        let b = [false, true];
        let o = overlap_metrics(&a, &b).unwrap();
        assert_eq!((o.dice, o.iou, o.sensitivity), (0.0, 0.0, 0.0));
        let o = overlap_metrics(&[false; 3], &[false; 3]).unwrap();
        assert_eq!((o.dice, o.iou, o.sensitivity), (1.0, 1.0, 1.0));
        assert!(overlap_metrics(&[true], &[true, false]).is_err());
    }

    fn map(labels: Vec<u16>) -> LabelMap {
        let n = labels.len();
        LabelMap::new([1, 1, n], [1.0; 3], labels, 4).unwrap()
    }

    #[test]
    fn default_regions_compose() {
        let m = compose_regions(&map(vec![0, 1, 2, 1]), &RegionSpec::default()).unwrap();
        assert_eq!(m[0], ("WT".to_string(), vec![false, true, true, true]));
        assert_eq!(m[1].1, vec![false, true, false, true]);
        assert_eq!(m[2].1, vec![false; 4]);
    }

    #[test]
    fn nesting_and_label_validation() {
        let mut spec = RegionSpec::default();
        spec.regions[1].labels = vec![1, 3];
        spec.regions[0].labels = vec![2, 3];
        match compose_regions(&map(vec![0, 1, 2, 3]), &spec) {
            Err(MetricsError::Nesting { inner, outer, voxels }) => {
                assert_eq!((inner.as_str(), outer.as_str(), voxels), ("TC", "WT", 1));
            }
            other => panic!("{other:?}"),
        }
        spec.regions[0].labels = vec![1, 2, 4];
        assert!(matches!(
            compose_regions(&map(vec![0]), &spec),
            Err(MetricsError::InvalidLabel { label: 4, .. })
        ));
        spec = RegionSpec::default();
        spec.nesting.push(("XX".into(), "WT".into()));
        assert!(matches!(spec.validate(4), Err(MetricsError::UnknownRegion(_))));
    }

    #[test]
    fn table_sorting_means_and_csv() {
        let row = |c: &str, reg: &str, d: f64| MetricRow {
            case_id: c.into(),
            region: reg.into(),
            dice: d,
            hd95: 2.0 * d,
            iou: d / (2.0 - d),
            sensitivity: d,
        };
        let t = MetricTable::new(vec![row("b", "WT", 0.5), row("a", "WT", 1.0), row("a", "ET", 0.25)]);
        assert_eq!(t.rows[0].case_id, "a");
        assert_eq!(t.rows[1].region, "ET");
        let wt = t.mean_of("WT").unwrap();
        assert_eq!(wt.dice, 0.75);
        assert_eq!(wt.hd95, 1.5);
        let csv = t.to_csv();
        assert!(csv.starts_with("case_id,region,dice,hd95_mm,iou,sensitivity\na,WT,1,2,1,1\n"));
        assert_eq!(t.aggregate_json()["ET"]["dice"], 0.25);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let l = map(vec![0, 1, 2, 3, 3]);
        let rows = evaluate_case("c", &l, &l, &RegionSpec::default()).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!((r.dice, r.hd95, r.iou, r.sensitivity), (1.0, 0.0, 1.0, 1.0));
        }
    }
}
