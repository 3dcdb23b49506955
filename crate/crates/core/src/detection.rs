//! Anomaly map postprocessing and scoring.
//!
//! Raw anomaly maps (absolute reconstruction error on the ROI) are cleaned by
//! zeroing the lowest error quantile, labeled into connected components, and
//! reduced to the top-scoring components. Scores are read off a per-row curve:
//! the segment score is the curve maximum over the segment's rows, the patient
//! score the maximum over the whole curve.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Mask;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A connected region of positive map values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectedComponent<T> {
    /// Member pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Sum of map values over the member pixels.
    pub score: T,
    /// (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
}

/// Zero ROI pixels whose value lies strictly below the q-quantile of the
/// ROI values (nearest-rank: the value at index floor(q*n) of the ascending
/// sort). Non-ROI pixels are zero in the output. q = 0 keeps everything.
pub fn percentile_filter<T: Scalar>(map: &Array2<T>, roi: &Mask, q: f64) -> Result<Array2<T>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::argument(format!("quantile {q} outside [0, 1)")));
    }
    if map.dim() != roi.dim() {
        return Err(Error::argument("map and roi shapes differ"));
    }
    let mut vals: Vec<T> = Vec::new();
    for (&v, &r) in map.iter().zip(roi.iter()) {
        if r == 1 {
            if !v.is_finite() {
                return Err(Error::argument("map contains non-finite values"));
            }
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Err(Error::degenerate("roi is empty"));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * vals.len() as f64).floor() as usize).min(vals.len() - 1);
    let threshold = vals[idx];
    let mut out = Array2::zeros(map.dim());
    for ((o, &v), &r) in out.iter_mut().zip(map.iter()).zip(roi.iter()) {
        if r == 1 && v >= threshold {
            *o = v;
        }
    }
    Ok(out)
}

const NEIGHBORS8: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Label connected components of the strictly positive support of `map`.
/// Components are returned in row-major discovery order.
pub fn cc_label<T: Scalar>(map: &Array2<T>, connectivity: u8) -> Result<Vec<ConnectedComponent<T>>> {
    let neighbors: &[(isize, isize)] = match connectivity {
        8 => &NEIGHBORS8,
        4 => &NEIGHBORS4,
        c => return Err(Error::argument(format!("connectivity {c} is not 4 or 8"))),
    };
    let (h, w) = map.dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut components = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[(y, x)] == 1 || !(map[(y, x)] > T::zero()) {
                continue;
            }
            let mut stack = vec![(y, x)];
            seen[(y, x)] = 1;
            let mut pixels = Vec::new();
            while let Some((py, px)) = stack.pop() {
                pixels.push((py, px));
                for &(dy, dx) in neighbors {
                    let (ny, nx) = (py as isize + dy, px as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if seen[(ny, nx)] == 0 && map[(ny, nx)] > T::zero() {
                        seen[(ny, nx)] = 1;
                        stack.push((ny, nx));
                    }
                }
            }
            pixels.sort_unstable();
            let mut score = T::zero();
            let mut bbox = (h, w, 0, 0);
            for &(py, px) in &pixels {
                score = score + map[(py, px)];
                bbox.0 = bbox.0.min(py);
                bbox.1 = bbox.1.min(px);
                bbox.2 = bbox.2.max(py);
                bbox.3 = bbox.3.max(px);
            }
            components.push(ConnectedComponent { pixels, score, bbox });
        }
    }
    Ok(components)
}

/// Keep the k highest-scoring components; ties broken by bounding-box origin
/// (row, then column, ascending). Fewer than k components are all kept.
pub fn retain_top_ccs<T: Scalar>(
    ccs: &[ConnectedComponent<T>],
    k: usize,
) -> Vec<ConnectedComponent<T>> {
    let mut order: Vec<usize> = (0..ccs.len()).collect();
    order.sort_by(|&a, &b| {
        ccs[b]
            .score
            .partial_cmp(&ccs[a].score)
            .unwrap()
            .then_with(|| (ccs[a].bbox.0, ccs[a].bbox.1).cmp(&(ccs[b].bbox.0, ccs[b].bbox.1)))
    });
    order.truncate(k);
    order.into_iter().map(|i| ccs[i].clone()).collect()
}

/// Map with only the given components' pixels kept.
pub fn component_map<T: Scalar>(
    map: &Array2<T>,
    ccs: &[ConnectedComponent<T>],
) -> Array2<T> {
    let mut out = Array2::zeros(map.dim());
    for cc in ccs {
        for &(y, x) in &cc.pixels {
            out[(y, x)] = map[(y, x)];
        }
    }
    out
}

/// Per-row mean of the map over the ROI pixels of that row; rows without ROI
/// pixels score zero. The curve length equals the image height.
pub fn anomaly_curve<T: Scalar>(map: &Array2<T>, roi: &Mask) -> Result<Vec<T>> {
    if map.dim() != roi.dim() {
        return Err(Error::argument("map and roi shapes differ"));
    }
    let (h, w) = map.dim();
    let mut curve = Vec::with_capacity(h);
    for y in 0..h {
        let mut sum = T::zero();
        let mut n = 0usize;
        for x in 0..w {
            if roi[(y, x)] == 1 {
                sum = sum + map[(y, x)];
                n += 1;
            }
        }
        curve.push(if n == 0 { T::zero() } else { sum / T::from_real(n as f64) });
    }
    Ok(curve)
}

/// Scores and threshold decisions for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseScores<T> {
    pub patient_score: T,
    /// Index s-1 holds segment s.
    pub segment_scores: Vec<T>,
    pub patient_flag: bool,
    pub segment_flags: Vec<bool>,
}

/// Reduce a curve to segment and patient scores and apply thresholds.
///
/// A segment's rows are those containing at least one pixel with its label;
/// its score is the curve maximum over them. Segments with no labeled rows
/// score zero and are never flagged. Flags use strict `score > threshold`.
pub fn score_and_decide<T: Scalar>(
    curve: &[T],
    segments: &Mask,
    n_segments: usize,
    patient_threshold: T,
    segment_threshold: T,
) -> Result<CaseScores<T>> {
    let (h, w) = segments.dim();
    if curve.len() != h {
        return Err(Error::argument(format!(
            "curve length {} does not match image height {h}",
            curve.len()
        )));
    }
    let mut present = vec![false; n_segments];
    let mut seg_scores = vec![T::zero(); n_segments];
    for y in 0..h {
        for x in 0..w {
            let s = segments[(y, x)] as usize;
            if s == 0 {
                continue;
            }
            if s > n_segments {
                return Err(Error::argument(format!("segment label {s} exceeds {n_segments}")));
            }
            if !present[s - 1] {
                present[s - 1] = true;
                seg_scores[s - 1] = curve[y];
            } else {
                seg_scores[s - 1] = seg_scores[s - 1].max(curve[y]);
            }
        }
    }
    let patient_score = curve.iter().fold(T::zero(), |m, &v| m.max(v));
    let segment_flags: Vec<bool> = seg_scores
        .iter()
        .zip(present.iter())
        .map(|(&s, &p)| p && s > segment_threshold)
        .collect();
    Ok(CaseScores {
        patient_score,
        segment_scores: seg_scores,
        patient_flag: patient_score > patient_threshold,
        segment_flags,
    })
}

/// Map postprocessing and decision parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// ROI value quantile zeroed by the percentile filter.
    pub quantile: f64,
    /// Connected components kept per case.
    pub top_k: usize,
    /// Component neighborhood, 4 or 8.
    pub connectivity: u8,
    pub patient_threshold: f64,
    pub segment_threshold: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            quantile: 0.2,
            top_k: 3,
            connectivity: 8,
            patient_threshold: 0.1,
            segment_threshold: 0.1,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(Error::config(format!("quantile {} outside [0, 1)", self.quantile)));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::config("connectivity must be 4 or 8"));
        }
        for (name, t) in [
            ("patient_threshold", self.patient_threshold),
            ("segment_threshold", self.segment_threshold),
        ] {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Everything detection produces for one case.
#[derive(Debug, Clone)]
pub struct CaseDetection<T> {
    /// Anomaly map after the percentile filter.
    pub filtered: Array2<T>,
    /// Retained top components, highest score first.
    pub components: Vec<ConnectedComponent<T>>,
    /// Filtered map reduced to the retained components.
    pub retained: Array2<T>,
    pub curve: Vec<T>,
    pub scores: CaseScores<T>,
}

/// Full postprocessing for one anomaly map: filter, label, keep the top
/// components, reduce to a row curve, then score and threshold.
pub fn detect_case<T: Scalar>(
    anomaly_map: &Array2<T>,
    roi: &Mask,
    segments: &Mask,
    n_segments: usize,
    cfg: &DetectionConfig,
) -> Result<CaseDetection<T>> {
    cfg.validate()?;
    if segments.dim() != anomaly_map.dim() {
        return Err(Error::argument("segments raster shape does not match the map"));
    }
    let filtered = percentile_filter(anomaly_map, roi, cfg.quantile)?;
    let components = retain_top_ccs(&cc_label(&filtered, cfg.connectivity)?, cfg.top_k);
    let retained = component_map(&filtered, &components);
    let curve = anomaly_curve(&retained, roi)?;
    let scores = score_and_decide(
        &curve,
        segments,
        n_segments,
        T::from_real(cfg.patient_threshold),
        T::from_real(cfg.segment_threshold),
    )?;
    Ok(CaseDetection { filtered, components, retained, curve, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn full_roi(h: usize, w: usize) -> Mask {
        Array2::ones((h, w))
    }

    #[test]
    fn percentile_zeroes_bottom_quantile() {
        let map = arr2(&[
            [1.0f64, 2.0, 3.0, 4.0, 5.0],
            [6.0, 7.0, 8.0, 9.0, 10.0],
        ]);
        let out = percentile_filter(&map, &full_roi(2, 5), 0.2).unwrap();
        let zeroed: Vec<f64> = map
            .iter()
            .zip(out.iter())
            .filter(|(_, &o)| o == 0.0)
            .map(|(&m, _)| m)
            .collect();
        assert_eq!(zeroed, vec![1.0, 2.0]);
    }

    #[test]
    fn percentile_keeps_constant_map_and_q_zero() {
        let map = Array2::<f32>::from_elem((4, 4), 0.3);
        let out = percentile_filter(&map, &full_roi(4, 4), 0.2).unwrap();
        assert_eq!(out, map);
        let map2 = arr2(&[[0.1f32, 0.9], [0.5, 0.4]]);
        assert_eq!(percentile_filter(&map2, &full_roi(2, 2), 0.0).unwrap(), map2);
    }

    #[test]
    fn percentile_rejects_bad_quantile_and_zeroes_outside_roi() {
        let map = Array2::<f32>::ones((2, 2));
        assert!(percentile_filter(&map, &full_roi(2, 2), 1.0).is_err());
        assert!(percentile_filter(&map, &full_roi(2, 2), -0.1).is_err());
        let mut roi = full_roi(2, 2);
        roi[(0, 0)] = 0;
        let out = percentile_filter(&map, &roi, 0.0).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(1, 1)], 1.0);
    }

    #[test]
    fn diagonal_blobs_merge_under_8_but_not_4_connectivity() {
        let map = arr2(&[
            [1.0f64, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 4.0],
        ]);
        assert_eq!(cc_label(&map, 8).unwrap().len(), 1);
        assert_eq!(cc_label(&map, 4).unwrap().len(), 3);
        assert!(cc_label(&map, 6).is_err());
    }

    #[test]
    fn component_scores_are_pixel_sums() {
        let map = arr2(&[
            [1.0f64, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 3.0],
            [0.0, 0.0, 0.0, 3.5],
        ]);
        let ccs = cc_label(&map, 8).unwrap();
        assert_eq!(ccs.len(), 2);
        assert_eq!(ccs[0].score, 2.0);
        assert_eq!(ccs[0].bbox, (0, 0, 0, 1));
        assert_eq!(ccs[1].score, 6.5);
        assert_eq!(ccs[1].pixels, vec![(1, 3), (2, 3)]);
    }

    #[test]
    fn empty_support_yields_no_components() {
        let map = Array2::<f32>::zeros((3, 3));
        assert!(cc_label(&map, 8).unwrap().is_empty());
    }

    #[test]
    fn retain_orders_by_score_then_origin() {
        let mk = |score: f64, bbox| ConnectedComponent { pixels: vec![], score, bbox };
        let ccs = vec![
            mk(1.0, (5, 0, 5, 0)),
            mk(3.0, (2, 4, 2, 4)),
            mk(3.0, (1, 9, 1, 9)),
            mk(2.0, (0, 0, 0, 0)),
        ];
        let top = retain_top_ccs(&ccs, 3);
        assert_eq!(top[0].bbox, (1, 9, 1, 9));
        assert_eq!(top[1].bbox, (2, 4, 2, 4));
        assert_eq!(top[2].bbox, (0, 0, 0, 0));
        assert_eq!(retain_top_ccs(&ccs, 10).len(), 4);
    }

    #[test]
    fn curve_averages_over_roi_width() {
        let map = arr2(&[
            [2.0f64, 4.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 5.0, 9.0],
        ]);
        let roi = arr2(&[[1u8, 1, 0], [0, 0, 0], [1, 1, 1]]);
        let curve = anomaly_curve(&map, &roi).unwrap();
        assert_eq!(curve, vec![3.0, 0.0, 5.0]);
    }

    #[test]
    fn scores_reduce_curve_per_segment() {
        let segments = arr2(&[
            [1u8, 1, 0],
            [2, 2, 0],
            [0, 0, 0],
            [3, 0, 0],
        ]);
        let curve = vec![0.4f64, 0.9, 0.7, 0.2];
        let scores = score_and_decide(&curve, &segments, 4, 0.85, 0.3).unwrap();
        assert_eq!(scores.segment_scores, vec![0.4, 0.9, 0.2, 0.0]);
        assert_eq!(scores.patient_score, 0.9);
        assert!(scores.patient_flag);
        assert_eq!(scores.segment_flags, vec![true, true, false, false]);
    }

    #[test]
    fn absent_segment_is_never_flagged() {
        let segments = arr2(&[[1u8, 0], [0, 0]]);
        let curve = vec![0.5f64, 0.0];
        let scores = score_and_decide(&curve, &segments, 2, 0.0, -1.0).unwrap();
        assert_eq!(scores.segment_scores[1], 0.0);
        assert!(!scores.segment_flags[1], "absent segment must never be flagged");
        assert!(scores.segment_flags[0]);
    }

    #[test]
    fn patient_score_is_max_of_segment_scores_when_segments_cover_roi() {
        // property over random maps whose segments cover every roi row
        let mut rng = crate::rng::stream(5, "test/curve", &[]);
        use rand::Rng;
        for _ in 0..50 {
            let h = 12;
            let w = 6;
            let mut map = Array2::<f64>::zeros((h, w));
            let mut roi = Array2::<u8>::zeros((h, w));
            let mut segments = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    if rng.random::<f64>() < 0.7 {
                        roi[(y, x)] = 1;
                        map[(y, x)] = rng.random::<f64>();
                        segments[(y, x)] = crate::phantom::segment_of_row(y, h, 3);
                    }
                }
            }
            let curve = anomaly_curve(&map, &roi).unwrap();
            let s = score_and_decide(&curve, &segments, 3, 0.5, 0.5).unwrap();
            let max_seg = s.segment_scores.iter().cloned().fold(f64::MIN, f64::max);
            assert!((s.patient_score - max_seg.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn detect_case_flags_the_segment_holding_a_bright_blob() {
        let h = 16;
        let roi = full_roi(h, 16);
        let segments =
            Array2::from_shape_fn((h, 16), |(y, _)| crate::phantom::segment_of_row(y, h, 2));
        // zero backdrop so the filter isolates the blob; a constant positive
        // backdrop would survive the quantile whole and merge into one region
        let mut map = Array2::<f64>::zeros((h, 16));
        for y in 4..7 {
            for x in 5..9 {
                map[(y, x)] = 0.8;
            }
        }
        let cfg = DetectionConfig {
            patient_threshold: 0.05,
            segment_threshold: 0.05,
            ..DetectionConfig::default()
        };
        let det = detect_case(&map, &roi, &segments, 2, &cfg).unwrap();
        assert_eq!(det.curve.len(), h);
        assert!(det.scores.patient_flag);
        assert!(det.scores.segment_flags[0], "blob lies in rows 4..7, segment 1");
        assert!(!det.scores.segment_flags[1]);
        assert!(det.scores.segment_scores[0] > det.scores.segment_scores[1]);
        // the blob is the top component
        assert_eq!(det.components[0].bbox, (4, 5, 6, 8));
    }

    #[test]
    fn detect_case_on_a_flat_map_flags_nothing() {
        // a constant map survives the filter whole, but scores stay at the
        // constant level and sit below any reasonable threshold
        let roi = full_roi(8, 8);
        let segments = Array2::from_elem((8, 8), 1u8);
        let map = Array2::<f64>::from_elem((8, 8), 0.02);
        let det = detect_case(&map, &roi, &segments, 1, &DetectionConfig::default()).unwrap();
        assert!(!det.scores.patient_flag);
        assert!(!det.scores.segment_flags[0]);
        assert!((det.scores.patient_score - 0.02).abs() < 1e-12);
    }

    #[test]
    fn detect_case_rejects_bad_config() {
        let roi = full_roi(8, 8);
        let segments = Array2::from_elem((8, 8), 1u8);
        let map = Array2::<f64>::zeros((8, 8));
        let bad = DetectionConfig { connectivity: 6, ..DetectionConfig::default() };
        assert!(detect_case(&map, &roi, &segments, 1, &bad).is_err());
        let bad = DetectionConfig { quantile: 1.0, ..DetectionConfig::default() };
        assert!(detect_case(&map, &roi, &segments, 1, &bad).is_err());
        assert!(DetectionConfig::default().validate().is_ok());
    }
}
