//! Detection metrics: IoU, greedy score-ordered matching, interpolated
//! average precision, and mAP over IoU thresholds 0.50..0.95 with
//! size-stratified variants.

use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Pixel-area bucket bounds (COCO convention): small < 32^2,
/// medium in [32^2, 96^2], large > 96^2.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidParam("non-finite box coordinate".into()));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidParam(format!(
                "degenerate box [{x1},{y1},{x2},{y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: i64,
    pub class_id: i64,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: i64, class_id: i64, bbox: BBox, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidParam(format!("score {score} not in [0,1]")));
        }
        Ok(Detection {
            image_id,
            class_id,
            bbox,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: i64,
    pub class_id: i64,
    pub bbox: BBox,
}

/// 101-point COCO-style interpolation by default; 11-point VOC behind a flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Coco101,
    Voc11,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalConfig {
    pub interpolation: Interpolation,
}

/// Greedy matching for one image-id / class-id slice.
///
/// Detections are taken in descending score order (stable on input order for
/// score ties); each matches the unmatched GT with highest IoU >= thresh,
/// lowest GT index on IoU ties; each GT matches at most once. Returns, in
/// that greedy order, the original detection index and the matched GT index.
pub fn match_detections(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    iou_thresh: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut gt_used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, &gt.bbox);
            if v < iou_thresh {
                continue;
            }
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((gi, v)),
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            out.push((di, Some(gi)));
        } else {
            out.push((di, None));
        }
    }
    out
}

/// Interpolated AP from a score-sorted TP/FP sequence. Returns None for
/// n_gt == 0 (the class/bucket is excluded from means).
pub fn average_precision(labels: &[bool], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recalls = Vec::with_capacity(labels.len());
    let mut precisions = Vec::with_capacity(labels.len());
    for &is_tp in labels {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / n_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    let max_prec_at = |r: f64| -> f64 {
        precisions
            .iter()
            .zip(&recalls)
            .filter(|&(_, &rec)| rec >= r)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max)
    };
    let points: Vec<f64> = match interp {
        Interpolation::Coco101 => (0..=100).map(|i| i as f64 / 100.0).collect(),
        Interpolation::Voc11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
    };
    Some(points.iter().map(|&r| max_prec_at(r)).sum::<f64>() / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    All,
    Small,
    Medium,
    Large,
}

fn bucket_of(b: &BBox) -> Bucket {
    let a = b.area();
    if a < SMALL_AREA {
        Bucket::Small
    } else if a <= LARGE_AREA {
        Bucket::Medium
    } else {
        Bucket::Large
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Mean over IoU thresholds 0.50..0.95 and classes.
    pub map: Option<f64>,
    /// At IoU 0.50 only.
    pub map50: Option<f64>,
    pub map_s: Option<f64>,
    pub map_m: Option<f64>,
    pub map_l: Option<f64>,
    /// Per class: mean AP over thresholds (None when the class has no GT).
    pub per_class: Vec<(i64, Option<f64>)>,
}

/// AP for one class at one threshold restricted to a size bucket.
///
/// Matching runs against all of the class's GTs so that a detection whose
/// greedy match falls outside the bucket is recognized; such detections are
/// ignored (dropped from the TP/FP sequence) rather than counted as FP.
fn class_bucket_ap(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    thresh: f64,
    bucket: Bucket,
    interp: Interpolation,
) -> Option<f64> {
    let in_bucket = |b: &BBox| bucket == Bucket::All || bucket_of(b) == bucket;
    let n_gt = gts.iter().filter(|g| in_bucket(&g.bbox)).count();

    // per-image matching, then pool by score
    let mut images: Vec<i64> = dets
        .iter()
        .map(|d| d.image_id)
        .chain(gts.iter().map(|g| g.image_id))
        .collect();
    images.sort_unstable();
    images.dedup();

    // (score, global input order, tp)
    let mut pooled: Vec<(f64, usize, bool)> = Vec::new();
    for img in images {
        let img_dets: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.image_id == img)
            .map(|(i, d)| (i, *d))
            .collect();
        let img_gts: Vec<&GroundTruthBox> = gts
            .iter()
            .filter(|g| g.image_id == img)
            .copied()
            .collect();
        let slice: Vec<&Detection> = img_dets.iter().map(|&(_, d)| d).collect();
        for (local_di, matched) in match_detections(&slice, &img_gts, thresh) {
            let global = img_dets[local_di].0;
            match matched {
                Some(gi) => {
                    if in_bucket(&img_gts[gi].bbox) {
                        pooled.push((slice[local_di].score, global, true));
                    }
                    // matched out of bucket: ignored
                }
                None => pooled.push((slice[local_di].score, global, false)),
            }
        }
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let labels: Vec<bool> = pooled.iter().map(|&(_, _, tp)| tp).collect();
    average_precision(&labels, n_gt, interp)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox], config: &EvalConfig) -> EvalResult {
    let mut classes: Vec<i64> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let interp = config.interpolation;
    let mut per_class = Vec::with_capacity(classes.len());
    let mut per_class_all: Vec<Vec<Option<f64>>> = Vec::new();
    let mut per_class_50: Vec<Option<f64>> = Vec::new();
    let mut per_class_s: Vec<Option<f64>> = Vec::new();
    let mut per_class_m: Vec<Option<f64>> = Vec::new();
    let mut per_class_l: Vec<Option<f64>> = Vec::new();

    for &cls in &classes {
        let cls_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == cls).collect();
        let cls_gts: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.class_id == cls).collect();
        let aps: Vec<Option<f64>> = IOU_THRESHOLDS
            .iter()
            .map(|&t| class_bucket_ap(&cls_dets, &cls_gts, t, Bucket::All, interp))
            .collect();
        per_class.push((cls, mean_of(aps.iter().copied())));
        per_class_50.push(aps[0]);
        per_class_s.push(mean_of(IOU_THRESHOLDS.iter().map(|&t| {
            class_bucket_ap(&cls_dets, &cls_gts, t, Bucket::Small, interp)
        })));
        per_class_m.push(mean_of(IOU_THRESHOLDS.iter().map(|&t| {
            class_bucket_ap(&cls_dets, &cls_gts, t, Bucket::Medium, interp)
        })));
        per_class_l.push(mean_of(IOU_THRESHOLDS.iter().map(|&t| {
            class_bucket_ap(&cls_dets, &cls_gts, t, Bucket::Large, interp)
        })));
        per_class_all.push(aps);
    }

    EvalResult {
        map: mean_of(per_class.iter().map(|&(_, ap)| ap)),
        map50: mean_of(per_class_50.into_iter()),
        map_s: mean_of(per_class_s.into_iter()),
        map_m: mean_of(per_class_m.into_iter()),
        map_l: mean_of(per_class_l.into_iter()),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: i64, cls: i64, bbox: BBox, score: f64) -> Detection {
        Detection::new(img, cls, bbox, score).unwrap()
    }

    fn gt(img: i64, cls: i64, bbox: BBox) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img,
            class_id: cls,
            bbox,
        }
    }

    #[test]
    fn iou_basic_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // areas 4 + 4, intersection 1 -> 1/7
        let v = iou(&a, &b(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou(&a, &b(1.0, 1.0, 3.0, 3.0)), iou(&b(1.0, 1.0, 3.0, 3.0), &a));
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn matching_single_perfect_pair() {
        let d = det(0, 0, b(0.0, 0.0, 2.0, 2.0), 0.9);
        let g = gt(0, 0, b(0.0, 0.0, 2.0, 2.0));
        let m = match_detections(&[&d], &[&g], 0.5);
        assert_eq!(m, vec![(0, Some(0))]);
    }

    #[test]
    fn matching_two_dets_one_gt_higher_score_wins() {
        let d1 = det(0, 0, b(0.0, 0.0, 2.0, 2.0), 0.4);
        let d2 = det(0, 0, b(0.1, 0.0, 2.0, 2.0), 0.8);
        let g = gt(0, 0, b(0.0, 0.0, 2.0, 2.0));
        let m = match_detections(&[&d1, &d2], &[&g], 0.5);
        assert_eq!(m, vec![(1, Some(0)), (0, None)]);
    }

    #[test]
    fn matching_below_threshold_is_fp() {
        // IoU([0,0,2,2],[1,1,3,3]) = 1/7 < 0.5
        let d = det(0, 0, b(0.0, 0.0, 2.0, 2.0), 0.9);
        let g = gt(0, 0, b(1.0, 1.0, 3.0, 3.0));
        assert_eq!(match_detections(&[&d], &[&g], 0.5), vec![(0, None)]);
    }

    #[test]
    fn matching_iou_tie_takes_lowest_gt_index() {
        let d = det(0, 0, b(0.0, 0.0, 2.0, 2.0), 0.9);
        let g0 = gt(0, 0, b(0.0, 0.0, 2.0, 2.0));
        let g1 = gt(0, 0, b(0.0, 0.0, 2.0, 2.0));
        assert_eq!(match_detections(&[&d], &[&g0, &g1], 0.5), vec![(0, Some(0))]);
    }

    #[test]
    fn ap_trivial_cases() {
        assert_eq!(average_precision(&[true], 1, Interpolation::Coco101), Some(1.0));
        assert_eq!(
            average_precision(&[false, false], 2, Interpolation::Coco101),
            Some(0.0)
        );
        assert_eq!(average_precision(&[true], 0, Interpolation::Coco101), None);
    }

    #[test]
    fn ap_tp_fp_tp_101_point() {
        // PR points: (r=0.5,p=1), (0.5,0.5), (1.0,2/3)
        // 51 recall grid points at precision 1, 50 at 2/3
        let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let got = average_precision(&[true, false, true], 2, Interpolation::Coco101).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 253.0 / 303.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_predictions_all_ones() {
        let gts = vec![
            gt(0, 0, b(0.0, 0.0, 10.0, 10.0)),
            gt(0, 1, b(20.0, 20.0, 200.0, 200.0)),
            gt(1, 0, b(0.0, 0.0, 50.0, 50.0)),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(g.image_id, g.class_id, g.bbox, 0.9))
            .collect();
        let r = evaluate(&dets, &gts, &EvalConfig::default());
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.map50, Some(1.0));
        assert_eq!(r.map_s, Some(1.0));
        assert_eq!(r.map_m, Some(1.0));
        assert_eq!(r.map_l, Some(1.0));
        assert!(r.per_class.iter().all(|&(_, ap)| ap == Some(1.0)));
    }

    #[test]
    fn evaluate_empty_detections_all_zero() {
        let gts = vec![gt(0, 0, b(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&[], &gts, &EvalConfig::default());
        assert_eq!(r.map, Some(0.0));
        assert_eq!(r.map50, Some(0.0));
        assert_eq!(r.map_s, Some(0.0));
        assert_eq!(r.map_m, None);
        assert_eq!(r.map_l, None);
    }

    #[test]
    fn evaluate_class_without_gt_excluded() {
        let gts = vec![gt(0, 0, b(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![
            det(0, 0, b(0.0, 0.0, 10.0, 10.0), 0.9),
            det(0, 7, b(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let r = evaluate(&dets, &gts, &EvalConfig::default());
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.per_class.len(), 1);
    }

    #[test]
    fn ap_nonincreasing_in_threshold() {
        let gts = vec![
            gt(0, 0, b(0.0, 0.0, 10.0, 10.0)),
            gt(0, 0, b(30.0, 30.0, 40.0, 45.0)),
        ];
        let dets = vec![
            det(0, 0, b(1.0, 0.0, 10.0, 10.0), 0.9),
            det(0, 0, b(30.0, 31.0, 40.0, 44.0), 0.7),
            det(0, 0, b(60.0, 60.0, 70.0, 70.0), 0.5),
        ];
        let cls_dets: Vec<&Detection> = dets.iter().collect();
        let cls_gts: Vec<&GroundTruthBox> = gts.iter().collect();
        let mut prev = f64::INFINITY;
        for &t in &IOU_THRESHOLDS {
            let ap = class_bucket_ap(&cls_dets, &cls_gts, t, Bucket::All, Interpolation::Coco101)
                .unwrap();
            assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn score_scaling_invariance() {
        let gts = vec![
            gt(0, 0, b(0.0, 0.0, 10.0, 10.0)),
            gt(1, 0, b(5.0, 5.0, 20.0, 20.0)),
        ];
        let dets = vec![
            det(0, 0, b(0.0, 0.0, 9.0, 10.0), 0.8),
            det(0, 0, b(2.0, 2.0, 12.0, 12.0), 0.6),
            det(1, 0, b(5.0, 5.0, 19.0, 21.0), 0.4),
        ];
        let scaled: Vec<Detection> = dets
            .iter()
            .map(|d| det(d.image_id, d.class_id, d.bbox, d.score * 0.5))
            .collect();
        let a = evaluate(&dets, &gts, &EvalConfig::default());
        let c = evaluate(&scaled, &gts, &EvalConfig::default());
        assert_eq!(a.map, c.map);
        assert_eq!(a.map50, c.map50);
    }

    #[test]
    fn zero_area_gt_never_increases_ap() {
        let gts = vec![gt(0, 0, b(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![det(0, 0, b(0.0, 0.0, 10.0, 10.0), 0.9)];
        let base = evaluate(&dets, &gts, &EvalConfig::default());
        let mut gts2 = gts.clone();
        gts2.push(gt(0, 0, b(3.0, 3.0, 3.0, 3.0)));
        let with_zero = evaluate(&dets, &gts2, &EvalConfig::default());
        assert!(with_zero.map.unwrap() <= base.map.unwrap());
    }

    #[test]
    fn voc11_mode_differs_predictably() {
        // same [TP, FP, TP] n_gt=2 example: 6 grid points at 1.0, 5 at 2/3
        let want = (6.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        let got = average_precision(&[true, false, true], 2, Interpolation::Voc11).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cross_bucket_match_is_ignored_not_fp() {
        // single large GT, one high-score det matching it; in the small
        // bucket pass that det must vanish rather than count as FP
        let gts = vec![
            gt(0, 0, b(0.0, 0.0, 200.0, 200.0)), // large
            gt(0, 0, b(0.0, 0.0, 10.0, 10.0)),   // small
        ];
        let dets = vec![
            det(0, 0, b(0.0, 0.0, 200.0, 200.0), 0.95),
            det(0, 0, b(0.0, 0.0, 10.0, 10.0), 0.5),
        ];
        let cls_dets: Vec<&Detection> = dets.iter().collect();
        let cls_gts: Vec<&GroundTruthBox> = gts.iter().collect();
        let ap_s =
            class_bucket_ap(&cls_dets, &cls_gts, 0.5, Bucket::Small, Interpolation::Coco101);
        // the small GT is matched by the low-score det; the large match is ignored
        assert_eq!(ap_s, Some(1.0));
    }
}
