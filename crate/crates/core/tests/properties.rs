use proptest::prelude::*;

use weaklabel_core::activation::{ActivationStack, SourceKind};
use weaklabel_core::dropreg::{
    batch_normalize_query_losses, hungarian_masked_loss, query_drop_mask, roi_drop_mask,
    roi_masked_loss, DropMask, DropScope, QueryLossRecord, RoiLossRecord,
};
use weaklabel_core::geometry::{intersection_area, iou, overlap_over_self, BBox, ScoredBox};
use weaklabel_core::peaks::{extract_peaks, PeakParams};
use weaklabel_core::pgt::{adaptive_pgt, PgtParams};
use weaklabel_core::prompts::{cluster_instance_prompts, dense_grid, GridParams, PromptKind, PromptPoint};
use weaklabel_core::tensor::Tensor;

fn int_box() -> impl Strategy<Value = BBox> {
    (0u32..=32, 0u32..=32, 0u32..=32, 0u32..=32).prop_map(|(a, b, c, d)| {
        BBox::new(a.min(c) as f64, b.min(d) as f64, a.max(c) as f64, b.max(d) as f64).unwrap()
    })
}

fn real_box() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Counts unit cells `[i, i+1] × [j, j+1]` inside both boxes.
fn pixel_count(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, i: f64, j: f64| bx.x1 <= i && i + 1.0 <= bx.x2 && bx.y1 <= j && j + 1.0 <= bx.y2;
    let mut n = 0;
    for i in 0..32 {
        for j in 0..32 {
            let (i, j) = (i as f64, j as f64);
            if inside(a, i, j) && inside(b, i, j) {
                n += 1;
            }
        }
    }
    n as f64
}

proptest! {
    #[test]
    fn intersection_matches_pixel_count(a in int_box(), b in int_box()) {
        prop_assert_eq!(intersection_area(&a, &b), pixel_count(&a, &b));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in real_box(), b in real_box()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ab <= overlap_over_self(&a, &b) + 1e-12 || a.area() == 0.0);
    }

    #[test]
    fn integer_translation_is_exact(a in int_box(), b in int_box(), dx in -100i32..100, dy in -100i32..100) {
        let (ta, tb) = (a.translate(dx as f64, dy as f64), b.translate(dx as f64, dy as f64));
        prop_assert_eq!(iou(&a, &b), iou(&ta, &tb));
        prop_assert_eq!(overlap_over_self(&a, &b), overlap_over_self(&ta, &tb));
    }
}

#[test]
fn overlap_over_self_asymmetric_pair() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BBox::new(5.0, 0.0, 25.0, 10.0).unwrap();
    assert_eq!(overlap_over_self(&a, &b), 0.5);
    assert_eq!(overlap_over_self(&b, &a), 0.25);
}

fn map_stack() -> impl Strategy<Value = (ActivationStack, usize)> {
    (1usize..4, 1usize..24, 1usize..24, prop::sample::select(vec![1usize, 2, 3, 4, 8]))
        .prop_flat_map(|(m, h, w, k)| {
            prop::collection::vec(0u8..=20, m * h * w).prop_map(move |v| {
                // coarse values force ties
                let data = v.into_iter().map(|x| x as f64 / 20.0).collect();
                let arr = ndarray::Array3::from_shape_vec((m, h, w), data).unwrap();
                (ActivationStack::from_array(arr, SourceKind::CoarseCam).unwrap(), k)
            })
        })
}

proptest! {
    #[test]
    fn peak_outputs_obey_invariants((stack, k) in map_stack(), tau in prop::sample::select(vec![0.0, 0.5, 0.9])) {
        let params = PeakParams::new(k, tau).unwrap();
        let peaks = extract_peaks(&stack, &params);
        for w in peaks.windows(2) {
            prop_assert!(w[0].value >= w[1].value);
        }
        let r = k as f64 / 2.0;
        for (i, p) in peaks.iter().enumerate() {
            prop_assert!(p.value >= tau);
            prop_assert!(p.row < stack.height() && p.col < stack.width());
            for q in &peaks[i + 1..] {
                if p.map_index == q.map_index {
                    let d = ((p.row as f64 - q.row as f64).powi(2) + (p.col as f64 - q.col as f64).powi(2)).sqrt();
                    prop_assert!(d > r);
                }
            }
        }
    }

    #[test]
    fn raising_tau_yields_subset((stack, k) in map_stack(), lo in 0.0..1.0f64, hi in 0.0..1.0f64) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let low = extract_peaks(&stack, &PeakParams::new(k, lo).unwrap());
        let high = extract_peaks(&stack, &PeakParams::new(k, hi).unwrap());
        for p in &high {
            prop_assert!(low.contains(p));
        }
    }
}

fn instance_points() -> impl Strategy<Value = Vec<PromptPoint>> {
    prop::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.0..1.0f64), 0..40).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, value)| PromptPoint { x, y, kind: PromptKind::Instance, value })
            .collect()
    })
}

proptest! {
    #[test]
    fn clustering_invariants(points in instance_points(), radius in 0.5..30.0f64) {
        let kept = cluster_instance_prompts(&points, radius).unwrap();
        for (i, p) in kept.iter().enumerate() {
            prop_assert!(points.contains(p));
            for q in &kept[i + 1..] {
                prop_assert!(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() > radius);
            }
        }
        if let Some(best) = points.iter().map(|p| p.value).reduce(f64::max) {
            prop_assert_eq!(kept[0].value, best);
        }
    }

    #[test]
    fn grid_points_inside_image(w in 1usize..2000, h in 1usize..2000, s in 1usize..40) {
        let g = dense_grid(w, h, GridParams { side: s }).unwrap();
        prop_assert_eq!(g.len(), s * s);
        for p in g {
            prop_assert!(p.x > 0.0 && p.x < w as f64 && p.y > 0.0 && p.y < h as f64);
        }
    }
}

fn scored_boxes() -> impl Strategy<Value = Vec<ScoredBox>> {
    prop::collection::vec((0i64..4, int_box(), 0.0..1.0f64), 0..20).prop_map(|v| {
        v.into_iter()
            .map(|(label, bbox, score)| ScoredBox { label, bbox, score })
            .collect()
    })
}

proptest! {
    #[test]
    fn pgt_class_completeness(boxes in scored_boxes(), labels in prop::collection::vec(0i64..5, 0..5)) {
        let out = adaptive_pgt(&boxes, &labels, &PgtParams::default()).unwrap();
        for l in &labels {
            let has_input = boxes.iter().any(|b| b.label == *l);
            let has_output = out.iter().any(|b| b.label == *l);
            prop_assert_eq!(has_input, has_output);
        }
        for b in &out {
            prop_assert!(labels.contains(&b.label));
        }
        for w in out.windows(2) {
            prop_assert!(w[0].label < w[1].label || (w[0].label == w[1].label && w[0].normalized_score >= w[1].normalized_score));
        }
    }

    #[test]
    fn pgt_pairwise_overlap(boxes in scored_boxes()) {
        let params = PgtParams::default();
        let out = adaptive_pgt(&boxes, &[0, 1, 2, 3], &params).unwrap();
        for l in 0..4 {
            let class: Vec<_> = out.iter().filter(|b| b.label == l).collect();
            if class.len() == 1 && class[0].fallback {
                continue;
            }
            for (j, a) in class.iter().enumerate() {
                for (k, b) in class.iter().enumerate() {
                    if j != k {
                        prop_assert!(overlap_over_self(&a.bbox, &b.bbox) < params.overlap_threshold);
                    }
                }
            }
        }
    }
}

fn roi_records() -> impl Strategy<Value = Vec<RoiLossRecord>> {
    prop::collection::vec((0.0..8.0f64, 0.0..3.0f64, any::<bool>()), 0..30).prop_map(|v| {
        v.into_iter()
            .map(|(c, r, p)| RoiLossRecord { cls_loss: c, reg_loss: r, is_positive: p })
            .collect()
    })
}

fn query_records() -> impl Strategy<Value = Vec<QueryLossRecord>> {
    prop::collection::vec((0.0..5.0f64, 0.0..2.0f64, 0.0..1.0f64, any::<bool>()), 1..40).prop_map(|v| {
        v.into_iter()
            .map(|(c, b, i, fg)| QueryLossRecord { cls_loss: c, box_loss: b, iou_loss: i, is_foreground: fg })
            .collect()
    })
}

proptest! {
    #[test]
    fn dropping_never_increases_roi_loss(recs in roi_records(), tc in 0.0..8.0f64, tr in 0.0..3.0f64, lambda in 0.0..3.0f64) {
        let mask = roi_drop_mask(&recs, tc, tr);
        let full = roi_masked_loss(&recs, &DropMask::all_kept(recs.len()), lambda).unwrap();
        prop_assert!(roi_masked_loss(&recs, &mask, lambda).unwrap() <= full);
    }

    #[test]
    fn query_mask_keeps_percentile_share(recs in query_records(), p in 1.0..=100.0f64) {
        let norm = batch_normalize_query_losses(&recs);
        let mask = query_drop_mask(&recs, &norm, p, DropScope::Things).unwrap();
        let n_fg = recs.iter().filter(|r| r.is_foreground).count();
        let kept_fg = recs.iter().zip(&mask.0).filter(|(r, &d)| r.is_foreground && d).count();
        prop_assert!(kept_fg >= ((p * n_fg as f64) / 100.0).ceil() as usize);
        for (r, &d) in recs.iter().zip(&mask.0) {
            if !r.is_foreground {
                prop_assert!(d);
            }
        }
        let all_ones = hungarian_masked_loss(&recs, &DropMask::all_kept(recs.len())).unwrap();
        let direct: f64 = recs.iter().map(|r| r.cls_loss + if r.is_foreground { r.box_loss + r.iou_loss } else { 0.0 }).sum();
        prop_assert!((all_ones - direct).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6).collect();
        let t = Tensor::new(dims, data).unwrap();
        let bytes = t.to_bytes();
        let back = Tensor::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn reshape_then_flatten_is_identity(m in 1usize..5, n in 1usize..8) {
        let flat: Vec<f64> = (0..m * n * n).map(|i| i as f64 * 0.5).collect();
        let s = ActivationStack::from_flat(flat.clone(), n, SourceKind::CrossAttention).unwrap();
        prop_assert_eq!(s.flatten(), flat);
    }

    #[test]
    fn resize_respects_value_range(h in 1usize..6, w in 1usize..6, th in 1usize..20, tw in 1usize..20, seed in any::<u64>()) {
        let vals: Vec<f64> = (0..h * w).map(|i| ((seed.wrapping_add(i as u64 * 7919)) % 1000) as f64 / 37.0 - 10.0).collect();
        let arr = ndarray::Array3::from_shape_vec((1, h, w), vals.clone()).unwrap();
        let s = ActivationStack::from_array(arr, SourceKind::FineCam).unwrap();
        let r = s.resize_to_image(tw, th).unwrap();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.maps().iter().all(|&v| v >= lo && v <= hi));
        // align-corners keeps the corner values
        prop_assert_eq!(r.map(0)[[0, 0]], vals[0]);
        if th > 1 && tw > 1 {
            prop_assert_eq!(r.map(0)[[th - 1, tw - 1]], vals[h * w - 1]);
        }
    }
}
