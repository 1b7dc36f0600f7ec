use detalign::geometry::{BBox, LevelGeometry};
use detalign::pseudo::{filter_detections, oracle, rasterize_masks, Detection, PseudoBoxSet};
use proptest::prelude::*;

fn geometry() -> Vec<LevelGeometry> {
    [(16, 4), (8, 8), (4, 16)]
        .into_iter()
        .map(|(n, stride)| LevelGeometry {
            width: n,
            height: n,
            stride,
            channels: 1,
        })
        .collect()
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..64.0, 0.0f64..64.0, 0.5f64..40.0, 0.5f64..40.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(64.0), (y + h).min(64.0)))
        .prop_filter("well formed", |b| b.is_well_formed())
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0.0f64..=1.0, 0usize..3).prop_map(|(bbox, score, class)| Detection { bbox, score, class })
}

proptest! {
    #[test]
    fn adding_a_box_never_clears_a_cell(boxes in prop::collection::vec(bbox(), 0..6), extra in bbox()) {
        let geo = geometry();
        let before = rasterize_masks(&PseudoBoxSet::ground_truth(boxes.clone()), &geo);
        let mut more = boxes;
        more.push(extra);
        let after = rasterize_masks(&PseudoBoxSet::ground_truth(more), &geo);
        for (b, a) in before.levels.iter().zip(&after.levels) {
            prop_assert!(b.iter().zip(a).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn rasterizer_agrees_with_oracle(boxes in prop::collection::vec(bbox(), 0..6)) {
        let geo = geometry();
        prop_assert_eq!(
            rasterize_masks(&PseudoBoxSet::ground_truth(boxes.clone()), &geo),
            oracle::point_in_box_masks(&boxes, &geo)
        );
    }

    #[test]
    fn filtering_is_idempotent_and_order_free(
        dets in prop::collection::vec(detection(), 0..12).prop_shuffle(),
        tau in 0.0f64..1.0,
    ) {
        let once = filter_detections(&dets, tau).set;
        let again: Vec<Detection> = once
            .boxes
            .iter()
            .zip(&once.scores)
            .map(|(&bbox, &score)| Detection { bbox, score, class: 0 })
            .collect();
        prop_assert_eq!(&filter_detections(&again, tau).set, &once);

        let mut reversed = dets.clone();
        reversed.reverse();
        let key = |s: &PseudoBoxSet| {
            let mut v: Vec<[u64; 5]> = s
                .boxes
                .iter()
                .zip(&s.scores)
                .map(|(b, sc)| [b.x_min.to_bits(), b.y_min.to_bits(), b.x_max.to_bits(), b.y_max.to_bits(), sc.to_bits()])
                .collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&filter_detections(&reversed, tau).set), key(&once));
        prop_assert!(once.scores.iter().all(|&s| s > tau));
    }

    #[test]
    fn class_labels_do_not_reach_masks(dets in prop::collection::vec(detection(), 0..8), shift in 1usize..3) {
        let geo = geometry();
        let relabeled: Vec<Detection> = dets.iter().map(|d| Detection { class: (d.class + shift) % 3, ..*d }).collect();
        prop_assert_eq!(
            rasterize_masks(&filter_detections(&dets, 0.5).set, &geo),
            rasterize_masks(&filter_detections(&relabeled, 0.5).set, &geo)
        );
    }
}
