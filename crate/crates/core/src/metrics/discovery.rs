use super::{PatchBox, ScoreMap};
use crate::error::{invalid, Result};

/// Cells scoring strictly above `mean + std` (population std).
pub fn foreground_mask(score: &ScoreMap) -> Vec<bool> {
    let v = score.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + std;
    v.iter().map(|&s| s > threshold).collect()
}

/// Tight box around the largest 4-connected component of `mask`.
///
/// Ties on size go to the component whose first cell comes earliest in
/// row-major order. Returns `None` for an empty mask.
pub fn mask_to_box(mask: &[bool], grid_h: usize, grid_w: usize) -> Result<Option<PatchBox>> {
    if mask.len() != grid_h * grid_w {
        return Err(invalid(format!("mask of {} cells for a {grid_h}x{grid_w} grid", mask.len())));
    }
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, PatchBox)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        let mut bx = PatchBox::cell(start % grid_w, start / grid_w);
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = (i / grid_w, i % grid_w);
            bx.x0 = bx.x0.min(c);
            bx.x1 = bx.x1.max(c);
            bx.y0 = bx.y0.min(r);
            bx.y1 = bx.y1.max(r);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - grid_w);
            }
            if r + 1 < grid_h {
                visit(i + grid_w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < grid_w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bx));
        }
    }
    Ok(best.map(|(_, b)| b))
}

/// Intersection over union of two cell boxes.
pub fn iou(a: &PatchBox, b: &PatchBox) -> f64 {
    let ix = a.x1.min(b.x1) as isize - a.x0.max(b.x0) as isize + 1;
    let iy = a.y1.min(b.y1) as isize - a.y0.max(b.y0) as isize + 1;
    let inter = if ix > 0 && iy > 0 { (ix * iy) as f64 } else { 0.0 };
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

/// Fraction of pairs with IoU ≥ 0.5; a missing prediction is a miss.
pub fn corloc(predicted: &[Option<PatchBox>], ground_truth: &[PatchBox]) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth boxes",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(invalid("CorLoc needs at least one sample"));
    }
    let hits = predicted
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| p.is_some_and(|p| iou(&p, g) >= 0.5))
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScoreKind;
    use proptest::prelude::*;

    fn sm(h: usize, w: usize, v: &[f64]) -> ScoreMap {
        ScoreMap::new(h, w, v.to_vec(), ScoreKind::PatchScore).unwrap()
    }

    #[test]
    fn mean_plus_std_threshold() {
        // mean 2.5, population std sqrt(18.75) = 4.330, threshold 6.830.
        assert_eq!(foreground_mask(&sm(2, 2, &[0.0, 0.0, 0.0, 10.0])), vec![false, false, false, true]);
        assert_eq!(foreground_mask(&sm(2, 2, &[3.0; 4])), vec![false; 4]);
        let shifted = sm(2, 2, &[7.0, 7.0, 7.0, 17.0]);
        assert_eq!(foreground_mask(&shifted), vec![false, false, false, true]);
    }

    #[test]
    fn box_extraction() {
        let mut m = vec![false; 9];
        m[4] = true;
        assert_eq!(mask_to_box(&m, 3, 3).unwrap(), Some(PatchBox::cell(1, 1)));
        // Component {0,1,3} (size 3) and {8} (size 1).
        let m = [true, true, false, true, false, false, false, false, true];
        assert_eq!(mask_to_box(&m, 3, 3).unwrap(), Some(PatchBox::new(0, 0, 1, 1).unwrap()));
        assert_eq!(mask_to_box(&[false; 4], 2, 2).unwrap(), None);
        // Equal sizes: the earlier component wins.
        let m = [true, false, true, false];
        assert_eq!(mask_to_box(&m, 1, 4).unwrap(), Some(PatchBox::cell(0, 0)));
        // Diagonal cells are not 4-connected.
        let m = [true, false, false, true];
        assert_eq!(mask_to_box(&m, 2, 2).unwrap(), Some(PatchBox::cell(0, 0)));
        assert!(mask_to_box(&m, 3, 3).is_err());
    }

    #[test]
    fn iou_and_corloc_cases() {
        let a = PatchBox::new(0, 0, 1, 0).unwrap();
        let b = PatchBox::new(1, 0, 2, 0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
        assert_eq!(iou(&a, &PatchBox::cell(5, 5)), 0.0);
        assert_eq!(corloc(&[Some(a)], &[a]).unwrap(), 1.0);
        assert_eq!(corloc(&[Some(b)], &[a]).unwrap(), 0.0);
        assert_eq!(corloc(&[None, Some(a)], &[a, a]).unwrap(), 0.5);
        assert!(corloc(&[None], &[a, a]).is_err());
    }

    proptest! {
        #[test]
        fn mask_never_covers_everything(v in prop::collection::vec(-10.0f64..10.0, 1..30), shift in -50.0f64..50.0) {
            let s = sm(1, v.len(), &v);
            let m = foreground_mask(&s);
            prop_assert!(m.iter().filter(|&&b| b).count() < v.len());
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let ms = foreground_mask(&sm(1, v.len(), &shifted));
            // Shifting only moves rounding; compare away from the threshold.
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            for i in 0..v.len() {
                if (v[i] - mean - std).abs() > 1e-9 {
                    prop_assert_eq!(m[i], ms[i]);
                }
            }
        }

        #[test]
        fn corloc_of_self_is_one(boxes in prop::collection::vec((0usize..5, 0usize..5, 0usize..5, 0usize..5), 1..10)) {
            let bs: Vec<PatchBox> = boxes.iter()
                .map(|&(a, b, c, d)| PatchBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap())
                .collect();
            let preds: Vec<Option<PatchBox>> = bs.iter().copied().map(Some).collect();
            prop_assert_eq!(corloc(&preds, &bs).unwrap(), 1.0);
        }
    }
}
