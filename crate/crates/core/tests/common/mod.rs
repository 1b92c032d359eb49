//! Independent scoring oracle for the detection metrics.
//!
//! Matching is derived by enumerating every injective detection-to-GT
//! assignment and selecting the one the greedy score-ordered protocol must
//! produce (lexicographically maximal per-step (IoU, lowest-GT-index) in
//! processing order), rather than by running a greedy loop.

use crkit::eval::{Detection, GroundTruthBox, Interpolation, BBox, EvalResult, IOU_THRESHOLDS};

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn enumerate(
    pos: usize,
    n_pos: usize,
    ious: &[Vec<f64>],
    thresh: f64,
    used: &mut Vec<bool>,
    current: &mut Vec<Option<usize>>,
    out: &mut Vec<Vec<Option<usize>>>,
) {
    if pos == n_pos {
        out.push(current.clone());
        return;
    }
    current.push(None);
    enumerate(pos + 1, n_pos, ious, thresh, used, current, out);
    current.pop();
    for gi in 0..used.len() {
        if !used[gi] && ious[pos][gi] >= thresh {
            used[gi] = true;
            current.push(Some(gi));
            enumerate(pos + 1, n_pos, ious, thresh, used, current, out);
            current.pop();
            used[gi] = false;
        }
    }
}

/// Per-step sort key of an assignment choice: matched IoU first, then prefer
/// the lowest GT index; "unmatched" loses to any match.
fn step_key(choice: Option<usize>, ious: &[f64]) -> (f64, i64) {
    match choice {
        Some(gi) => (ious[gi], -(gi as i64)),
        None => (f64::NEG_INFINITY, i64::MIN),
    }
}

/// Same contract as `crkit::eval::match_detections`, derived exhaustively.
pub fn oracle_match(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    thresh: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&di| gts.iter().map(|g| oracle_iou(&dets[di].bbox, &g.bbox)).collect())
        .collect();
    let mut all = Vec::new();
    enumerate(
        0,
        order.len(),
        &ious,
        thresh,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut all,
    );
    let best = all
        .into_iter()
        .max_by(|a, b| {
            for pos in 0..a.len() {
                let ka = step_key(a[pos], &ious[pos]);
                let kb = step_key(b[pos], &ious[pos]);
                match ka.partial_cmp(&kb).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        })
        .expect("at least the all-unmatched assignment exists");
    order.iter().zip(best).map(|(&di, gi)| (di, gi)).collect()
}

fn oracle_ap(labels: &[bool], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let points = match interp {
        Interpolation::Coco101 => 100usize,
        Interpolation::Voc11 => 10usize,
    };
    let mut pr = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for &l in labels {
        seen += 1;
        if l {
            tp += 1;
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    let mut total = 0.0;
    for k in 0..=points {
        let r = k as f64 / points as f64;
        let p = pr
            .iter()
            .filter(|&&(rec, _)| rec >= r)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / (points + 1) as f64)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SizeBand {
    Any,
    Small,
    Medium,
    Large,
}

fn band(b: &BBox) -> SizeBand {
    let area = (b.x2 - b.x1) * (b.y2 - b.y1);
    if area < 32.0 * 32.0 {
        SizeBand::Small
    } else if area <= 96.0 * 96.0 {
        SizeBand::Medium
    } else {
        SizeBand::Large
    }
}

fn band_ap(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    thresh: f64,
    which: SizeBand,
    interp: Interpolation,
) -> Option<f64> {
    let wanted = |b: &BBox| which == SizeBand::Any || band(b) == which;
    let n_gt = gts.iter().filter(|g| wanted(&g.bbox)).count();
    let mut images: Vec<i64> = dets
        .iter()
        .map(|d| d.image_id)
        .chain(gts.iter().map(|g| g.image_id))
        .collect();
    images.sort_unstable();
    images.dedup();
    let mut pooled: Vec<(f64, usize, bool)> = Vec::new();
    for img in images {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image_id == img).collect();
        let slice: Vec<&Detection> = idx.iter().map(|&i| dets[i]).collect();
        let img_gts: Vec<&GroundTruthBox> =
            gts.iter().filter(|g| g.image_id == img).copied().collect();
        for (local, matched) in oracle_match(&slice, &img_gts, thresh) {
            match matched {
                Some(gi) if !wanted(&img_gts[gi].bbox) => {} // ignored, not FP
                Some(_) => pooled.push((slice[local].score, idx[local], true)),
                None => pooled.push((slice[local].score, idx[local], false)),
            }
        }
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let labels: Vec<bool> = pooled.iter().map(|&(_, _, l)| l).collect();
    oracle_ap(&labels, n_gt, interp)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn oracle_evaluate(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    interp: Interpolation,
) -> EvalResult {
    let mut classes: Vec<i64> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    let (mut c50, mut cs, mut cm, mut cl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &cls in &classes {
        let d: Vec<&Detection> = dets.iter().filter(|x| x.class_id == cls).collect();
        let g: Vec<&GroundTruthBox> = gts.iter().filter(|x| x.class_id == cls).collect();
        let aps: Vec<Option<f64>> = IOU_THRESHOLDS
            .iter()
            .map(|&t| band_ap(&d, &g, t, SizeBand::Any, interp))
            .collect();
        per_class.push((cls, mean(aps.iter().copied())));
        c50.push(aps[0]);
        cs.push(mean(
            IOU_THRESHOLDS.iter().map(|&t| band_ap(&d, &g, t, SizeBand::Small, interp)),
        ));
        cm.push(mean(
            IOU_THRESHOLDS.iter().map(|&t| band_ap(&d, &g, t, SizeBand::Medium, interp)),
        ));
        cl.push(mean(
            IOU_THRESHOLDS.iter().map(|&t| band_ap(&d, &g, t, SizeBand::Large, interp)),
        ));
    }
    EvalResult {
        map: mean(per_class.iter().map(|&(_, ap)| ap)),
        map50: mean(c50.into_iter()),
        map_s: mean(cs.into_iter()),
        map_m: mean(cm.into_iter()),
        map_l: mean(cl.into_iter()),
        per_class,
    }
}
