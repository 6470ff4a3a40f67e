//! Independent re-implementations used as oracles. Nothing here calls the
//! library's metric or matching code; boxes are plain `[f64; 4]`.

#![allow(dead_code)]

pub mod grad;

use osdet::model::{BBox, Detection, GroundTruthObject, ObjectClass};

pub type Rect = [f64; 4];

pub fn rect(b: &BBox) -> Rect {
    [b.x_min(), b.y_min(), b.x_max(), b.y_max()]
}

pub fn bx(r: Rect) -> BBox {
    BBox::new(r[0], r[1], r[2], r[3]).unwrap()
}

pub fn iou(a: Rect, b: Rect) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Visiting order: confidence descending, index ascending on ties.
pub fn rank(conf: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching written as a loop over a mutable pool of free truths.
pub fn greedy(dets: &[Rect], conf: &[f64], truths: &[Rect], thr: f64) -> Vec<Option<usize>> {
    let mut free: Vec<usize> = (0..truths.len()).collect();
    let mut out = vec![None; dets.len()];
    for d in rank(conf) {
        let mut pick: Option<(usize, f64)> = None;
        for (slot, &t) in free.iter().enumerate() {
            let o = iou(dets[d], truths[t]);
            if o < thr {
                continue;
            }
            // strictly better IoU, or equal IoU and lower truth index
            let better = match pick {
                None => true,
                Some((s, b)) => o > b || (o == b && t < free[s]),
            };
            if better {
                pick = Some((slot, o));
            }
        }
        if let Some((slot, _)) = pick {
            out[d] = Some(free.remove(slot));
        }
    }
    out
}

/// Exhaustive search over every partial one-to-one assignment respecting the
/// threshold. Returns the assignment whose IoU sequence, read in visiting
/// order, is lexicographically largest (unmatched counts as -1). With
/// distinct IoUs this is exactly what greedy matching must produce.
pub fn brute_force_assignment(dets: &[Rect], conf: &[f64], truths: &[Rect], thr: f64) -> Vec<Option<usize>> {
    let order = rank(conf);
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let mut current = vec![None; dets.len()];
    let mut used = vec![false; truths.len()];
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        k: usize,
        order: &[usize],
        dets: &[Rect],
        truths: &[Rect],
        thr: f64,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<f64> = order
                .iter()
                .map(|&d| current[d].map_or(-1.0, |t| iou(dets[d], truths[t])))
                .collect();
            let replace = match best {
                None => true,
                Some((b, _)) => key.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
            };
            if replace {
                *best = Some((key, current.clone()));
            }
            return;
        }
        let d = order[k];
        recurse(k + 1, order, dets, truths, thr, current, used, best);
        for t in 0..truths.len() {
            if !used[t] && iou(dets[d], truths[t]) >= thr {
                used[t] = true;
                current[d] = Some(t);
                recurse(k + 1, order, dets, truths, thr, current, used, best);
                current[d] = None;
                used[t] = false;
            }
        }
    }
    recurse(0, &order, dets, truths, thr, &mut current, &mut used, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp_c: u64,
    pub fp_c: u64,
    pub tp_o: u64,
    pub fp_o: u64,
    pub fn_o: u64,
}

/// Per-image confusion counts: known detections are matched class by class;
/// a leftover known detection whose best-overlapping truth is an unknown
/// object (at the threshold) is an open-set error, otherwise a closed-set
/// one. Unknown detections are matched against unknown truths.
pub fn counts(dets: &[Detection], truths: &[GroundTruthObject], thr: f64) -> Counts {
    let mut c = Counts::default();
    let truth_rects: Vec<Rect> = truths.iter().map(|t| rect(t.bbox())).collect();
    let mut classes: Vec<usize> = dets
        .iter()
        .filter_map(|d| match d.class {
            ObjectClass::Known(k) => Some(k),
            ObjectClass::Unknown => None,
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();
    for k in classes {
        let mine: Vec<&Detection> = dets.iter().filter(|d| d.class == ObjectClass::Known(k)).collect();
        let tr: Vec<Rect> = truths
            .iter()
            .filter(|t| t.class() == ObjectClass::Known(k))
            .map(|t| rect(t.bbox()))
            .collect();
        let m = greedy(
            &mine.iter().map(|d| rect(&d.bbox)).collect::<Vec<_>>(),
            &mine.iter().map(|d| d.confidence).collect::<Vec<_>>(),
            &tr,
            thr,
        );
        for (d, a) in mine.iter().zip(m) {
            if a.is_some() {
                c.tp_c += 1;
                continue;
            }
            let r = rect(&d.bbox);
            let mut best = None::<(usize, f64)>;
            for (i, t) in truth_rects.iter().enumerate() {
                let o = iou(r, *t);
                if best.is_none() || o > best.unwrap().1 {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, o)) if o >= thr && truths[i].class().is_unknown() => c.fp_o += 1,
                _ => c.fp_c += 1,
            }
        }
    }
    let ud: Vec<&Detection> = dets.iter().filter(|d| d.class.is_unknown()).collect();
    let ut: Vec<Rect> = truths
        .iter()
        .filter(|t| t.class().is_unknown())
        .map(|t| rect(t.bbox()))
        .collect();
    let m = greedy(
        &ud.iter().map(|d| rect(&d.bbox)).collect::<Vec<_>>(),
        &ud.iter().map(|d| d.confidence).collect::<Vec<_>>(),
        &ut,
        thr,
    );
    let hit = m.iter().flatten().count() as u64;
    c.tp_o += hit;
    c.fp_o += ud.len() as u64 - hit;
    c.fn_o += ut.len() as u64 - hit;
    c
}

pub fn wi(c: &Counts) -> Option<f64> {
    let p_closed = c.tp_c as f64 / (c.tp_c + c.fp_c) as f64;
    let p_open = (c.tp_c + c.tp_o) as f64 / (c.tp_c + c.tp_o + c.fp_c + c.fp_o) as f64;
    let v = p_closed / p_open - 1.0;
    v.is_finite().then_some(v)
}

pub fn wi_no_rej(c: &Counts) -> Option<f64> {
    let v = c.fp_o as f64 / (c.tp_c + c.fp_c) as f64;
    v.is_finite().then_some(v)
}

pub fn u_prf(c: &Counts) -> (f64, f64, f64) {
    let r = if c.tp_o + c.fn_o == 0 { 0.0 } else { c.tp_o as f64 / (c.tp_o + c.fn_o) as f64 };
    let p = if c.tp_o + c.fp_o == 0 { 0.0 } else { c.tp_o as f64 / (c.tp_o + c.fp_o) as f64 };
    let f = if r + p > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (r, p, f)
}

/// VOC-style all-point AP: sentinel-padded recall/precision arrays, a
/// right-to-left precision envelope, and a sum over recall increments.
pub fn ap_voc(ranked_tp: &[bool], n_truth: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let (mut tp, mut fp) = (0.0, 0.0);
    for &hit in ranked_tp {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rec.push(tp / n_truth as f64);
        prec.push(tp / (tp + fp));
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

/// Ranked TP flags for one class across images (matching per image).
pub fn ranked_tp(dets: &[(usize, Rect, f64)], truths: &[(usize, Rect)], thr: f64) -> Vec<bool> {
    let mut tp = vec![false; dets.len()];
    let mut images: Vec<usize> = dets.iter().map(|d| d.0).collect();
    images.sort_unstable();
    images.dedup();
    for img in images {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].0 == img).collect();
        let tr: Vec<Rect> = truths.iter().filter(|t| t.0 == img).map(|t| t.1).collect();
        let m = greedy(
            &idx.iter().map(|&i| dets[i].1).collect::<Vec<_>>(),
            &idx.iter().map(|&i| dets[i].2).collect::<Vec<_>>(),
            &tr,
            thr,
        );
        for (k, a) in m.iter().enumerate() {
            tp[idx[k]] = a.is_some();
        }
    }
    let conf: Vec<f64> = dets.iter().map(|d| d.2).collect();
    rank(&conf).into_iter().map(|i| tp[i]).collect()
}

/// Relative error with a unit floor, so values near zero are compared
/// absolutely.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn opt_close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => rel_close(x, y, tol),
        (None, None) => true,
        _ => false,
    }
}

use rand::Rng;

/// A small random image: a few truths on a coarse grid (so boxes collide),
/// and detections that are either perturbed copies of truths or strays.
pub fn random_image(rng: &mut impl Rng, classes: usize) -> (Vec<Detection>, Vec<GroundTruthObject>) {
    let cell = |rng: &mut dyn rand::RngCore| -> Rect {
        let x = f64::from(rng.random_range(0..4u8)) * 20.0;
        let y = f64::from(rng.random_range(0..3u8)) * 20.0;
        [x, y, x + 16.0, y + 16.0]
    };
    let n_truth = rng.random_range(0..5);
    let truths: Vec<GroundTruthObject> = (0..n_truth)
        .map(|_| {
            let r = cell(rng);
            if rng.random_bool(0.3) {
                GroundTruthObject::unknown(bx(r))
            } else {
                GroundTruthObject::known(bx(r), rng.random_range(0..classes))
            }
        })
        .collect();
    let n_det = rng.random_range(0..8);
    let dets = (0..n_det)
        .map(|_| {
            let base = if !truths.is_empty() && rng.random_bool(0.7) {
                rect(truths[rng.random_range(0..truths.len())].bbox())
            } else {
                cell(rng)
            };
            let j = |rng: &mut dyn rand::RngCore| rng.random_range(-4.0..4.0);
            let r = [base[0] + j(rng), base[1] + j(rng), base[2] + j(rng), base[3] + j(rng)];
            let class = if rng.random_bool(0.3) {
                ObjectClass::Unknown
            } else {
                ObjectClass::Known(rng.random_range(0..classes))
            };
            Detection::new(bx(r), class, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap()
        })
        .collect();
    (dets, truths)
}

/// Two hand-placed images: three known truths, two unknown truths and six
/// detections. Expected counts: TP_c 2, FP_c 1, TP_o 1, FP_o 2, FN_o 1.
pub fn micro_scenario() -> Vec<(Vec<Detection>, Vec<GroundTruthObject>)> {
    let det = |r: Rect, class, conf| Detection::new(bx(r), class, conf, 0.9).unwrap();
    let image_a = (
        vec![
            det([0.0, 0.0, 10.0, 9.0], ObjectClass::Known(0), 0.9), // TP_c
            det([0.0, 0.0, 10.0, 8.0], ObjectClass::Known(0), 0.8), // duplicate -> FP_c
            det([40.0, 0.0, 50.0, 9.0], ObjectClass::Known(1), 0.7), // on an unknown -> FP_o
            det([40.0, 0.0, 50.0, 8.0], ObjectClass::Unknown, 0.6), // TP_o
        ],
        vec![
            GroundTruthObject::known(bx([0.0, 0.0, 10.0, 10.0]), 0),
            GroundTruthObject::known(bx([20.0, 0.0, 30.0, 10.0]), 1),
            GroundTruthObject::unknown(bx([40.0, 0.0, 50.0, 10.0])),
        ],
    );
    let image_b = (
        vec![
            det([200.0, 200.0, 210.0, 210.0], ObjectClass::Unknown, 0.5), // stray -> FP_o
            det([0.0, 0.0, 10.0, 7.0], ObjectClass::Known(2), 0.4),       // IoU 0.7 -> TP_c
        ],
        vec![
            GroundTruthObject::known(bx([0.0, 0.0, 10.0, 10.0]), 2),
            GroundTruthObject::unknown(bx([100.0, 100.0, 110.0, 110.0])), // missed -> FN_o
        ],
    );
    vec![image_a, image_b]
}

/// Oracle recomputation of every report number from per-image detections
/// and truths: (counts, per-class AP, mAP).
pub fn recompute(
    images: &[(Vec<Detection>, Vec<GroundTruthObject>)],
    classes: usize,
    thr: f64,
) -> (Counts, Vec<Option<f64>>, Option<f64>) {
    let mut total = Counts::default();
    for (d, t) in images {
        let c = counts(d, t, thr);
        total.tp_c += c.tp_c;
        total.fp_c += c.fp_c;
        total.tp_o += c.tp_o;
        total.fp_o += c.fp_o;
        total.fn_o += c.fn_o;
    }
    let aps: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let mut dets = Vec::new();
            let mut truths = Vec::new();
            for (img, (d, t)) in images.iter().enumerate() {
                for x in d.iter().filter(|x| x.class == ObjectClass::Known(k)) {
                    dets.push((img, rect(&x.bbox), x.confidence));
                }
                for x in t.iter().filter(|x| x.class() == ObjectClass::Known(k)) {
                    truths.push((img, rect(x.bbox())));
                }
            }
            (!truths.is_empty()).then(|| ap_voc(&ranked_tp(&dets, &truths, thr), truths.len()))
        })
        .collect();
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (total, aps, map)
}
