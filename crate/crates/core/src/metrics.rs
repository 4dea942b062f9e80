//! Segmentation evaluation: accumulated confusion matrix and mean IoU.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// K x K counts, rows = ground truth, columns = prediction.
    pub confusion: Vec<Vec<u64>>,
    /// None when the class appears in neither prediction nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Invalid-depth fraction per image, when depth is supplied.
    pub invalid_fraction: Vec<f64>,
}

/// Mean IoU over a whole split: one confusion matrix accumulated across all
/// images, per-class IoU = TP/(TP+FP+FN), mean over classes present in
/// prediction or ground truth and not in `ignore_classes`. Pixels labelled
/// `ignore_id` in the ground truth are excluded entirely.
pub fn mean_iou(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    k: usize,
    ignore_id: u8,
    ignore_classes: &[usize],
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("mean_iou", format!("{} preds vs {} gts", preds.len(), gts.len())));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape("mean_iou", format!("image {}: {} vs {} pixels", i, p.len(), g.len())));
        }
        for (&pv, &gv) in p.iter().zip(g) {
            if gv == ignore_id {
                continue;
            }
            if gv as usize >= k || pv as usize >= k {
                return Err(Error::Data(format!("label out of range: pred {} gt {} with K={}", pv, gv, k)));
            }
            confusion[gv as usize][pv as usize] += 1;
        }
    }

    let mut per_class_iou = vec![None; k];
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|g| confusion[g][c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        let iou = tp as f64 / denom as f64;
        per_class_iou[c] = Some(iou);
        if !ignore_classes.contains(&c) {
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Data("mean IoU undefined: no countable class present".into()));
    }
    Ok(EvalReport {
        confusion,
        mean_iou: sum / counted as f64,
        per_class_iou,
        invalid_fraction: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identical_masks_score_one() {
        let m = vec![vec![0u8, 1, 2, 1, 0, 2]];
        let r = mean_iou(&m, &m, 3, 255, &[]).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        for c in 0..3 {
            assert_eq!(r.per_class_iou[c], Some(1.0));
        }
    }

    #[test]
    fn hand_enumerated_case() {
        let gt = vec![vec![0u8, 0, 1, 1]];
        let pred = vec![vec![0u8, 0, 1, 0]];
        let r = mean_iou(&pred, &gt, 2, 255, &[]).unwrap();
        // class 0: tp=2 fp=1 fn=0 -> 2/3; class 1: tp=1 fp=0 fn=1 -> 1/2
        assert!((r.per_class_iou[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class_iou[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.mean_iou - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn ignore_pixels_drop_out_entirely() {
        let gt = vec![vec![0u8, 255, 1, 255]];
        let pred = vec![vec![0u8, 1, 1, 0]];
        let r = mean_iou(&pred, &gt, 2, 255, &[]).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        // all-ignored ground truth is undefined
        let gt2 = vec![vec![255u8; 4]];
        assert!(mean_iou(&pred, &gt2, 2, 255, &[]).is_err());
    }

    #[test]
    fn ignored_classes_leave_the_mean() {
        let gt = vec![vec![0u8, 0, 1, 1]];
        let pred = vec![vec![0u8, 0, 1, 0]];
        let r = mean_iou(&pred, &gt, 2, 255, &[0]).unwrap();
        assert!((r.mean_iou - 0.5).abs() < 1e-12);
        // the per-class entry stays reported
        assert!(r.per_class_iou[0].is_some());
    }

    #[test]
    fn absent_classes_do_not_dilute_the_mean() {
        let gt = vec![vec![0u8, 0]];
        let pred = vec![vec![0u8, 0]];
        let r = mean_iou(&pred, &gt, 5, 255, &[]).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert!(r.per_class_iou[3].is_none());
    }

    /// Brute-force oracle: per-pixel tally of tp/fp/fn per class, then the
    /// same mean rule, computed without a confusion matrix.
    fn oracle(preds: &[Vec<u8>], gts: &[Vec<u8>], k: usize, ignore_id: u8) -> f64 {
        let mut sum = 0.0;
        let mut counted = 0;
        for c in 0..k as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, g) in preds.iter().zip(gts) {
                for (&pv, &gv) in p.iter().zip(g) {
                    if gv == ignore_id {
                        continue;
                    }
                    match (pv == c, gv == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            if tp + fp + fn_ > 0 {
                sum += tp as f64 / (tp + fp + fn_) as f64;
                counted += 1;
            }
        }
        sum / counted as f64
    }

    #[test]
    fn matches_brute_force_oracle_on_random_masks() {
        let k = 4;
        for trial in 0..100u64 {
            let mut r = rng::stream(11, &[trial]);
            let draw = |r: &mut rng::Rng| -> Vec<u8> {
                (0..64)
                    .map(|_| {
                        let u = rng::uniform(r);
                        if u > 0.9 {
                            255
                        } else {
                            (u * 10.0) as u8 % k as u8
                        }
                    })
                    .collect()
            };
            let gt = vec![draw(&mut r), draw(&mut r)];
            let pred = vec![draw(&mut r).iter().map(|&v| if v == 255 { 0 } else { v }).collect(),
                            draw(&mut r).iter().map(|&v| if v == 255 { 1 } else { v }).collect()];
            match mean_iou(&pred, &gt, k, 255, &[]) {
                Ok(rep) => assert_eq!(rep.mean_iou, oracle(&pred, &gt, k, 255), "trial {}", trial),
                Err(_) => assert!(gt.iter().flatten().all(|&g| g == 255)),
            }
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        assert!(mean_iou(&[vec![0u8; 3]], &[vec![0u8; 4]], 2, 255, &[]).is_err());
        assert!(mean_iou(&[vec![0u8; 3]], &[], 2, 255, &[]).is_err());
    }
}
