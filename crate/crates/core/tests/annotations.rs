use proptest::prelude::*;
use sparseseg::annotations::{
    annotation_mask, annotations_from_json, annotations_to_json, bresenham, count_labeled, dilate_disk,
    fill_polygon, rasterize, AnnotationKind, BinaryMask, SparseAnnotation, UNLABELED,
};

/// Even-odd ray casting to the right of each pixel, plus pixels on an edge.
fn ray_cast(coords: &[[i64; 2]], x: i64, y: i64) -> bool {
    let n = coords.len();
    let mut odd = false;
    for i in 0..n {
        let [ax, ay] = coords[i];
        let [bx, by] = coords[(i + 1) % n];
        let on_line = (bx - ax) * (y - ay) == (by - ay) * (x - ax);
        if on_line && (ax.min(bx)..=ax.max(bx)).contains(&x) && (ay.min(by)..=ay.max(by)).contains(&y) {
            return true;
        }
        if (ay <= y) != (by <= y) {
            let lhs = (x - ax) * (by - ay);
            let rhs = (y - ay) * (bx - ax);
            if (by > ay && lhs < rhs) || (by < ay && lhs > rhs) {
                odd = !odd;
            }
        }
    }
    odd
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polygon_fill_matches_ray_casting(
        h in 1usize..40,
        w in 1usize..40,
        pts in prop::collection::vec((-5i64..45, -5i64..45), 3..9),
    ) {
        let coords: Vec<[i64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let mask = fill_polygon(&coords, h, w);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(mask.get(x, y), ray_cast(&coords, x as i64, y as i64), "pixel ({}, {})", x, y);
            }
        }
    }

    #[test]
    fn bresenham_is_an_8_connected_path(a in (-20i64..20, -20i64..20), b in (-20i64..20, -20i64..20)) {
        let path = bresenham([a.0, a.1], [b.0, b.1]);
        prop_assert_eq!(path[0], [a.0, a.1]);
        prop_assert_eq!(*path.last().unwrap(), [b.0, b.1]);
        prop_assert_eq!(path.len() as i64, (b.0 - a.0).abs().max((b.1 - a.1).abs()) + 1);
        for s in path.windows(2) {
            prop_assert!((s[1][0] - s[0][0]).abs() <= 1 && (s[1][1] - s[0][1]).abs() <= 1);
        }
    }

    #[test]
    fn dilation_grows_monotonically(x in 0i64..20, y in 0i64..20, r in 0u32..5) {
        let mut m = BinaryMask::new(20, 20);
        m.set_checked(x, y);
        let small = dilate_disk(&m, r);
        let big = dilate_disk(&m, r + 1);
        prop_assert!(small.get(x as usize, y as usize));
        for yy in 0..20 {
            for xx in 0..20 {
                prop_assert!(!small.get(xx, yy) || big.get(xx, yy));
            }
        }
    }
}

#[test]
fn point_disk_sizes() {
    for (r, n) in [(0, 1), (1, 5), (2, 13), (3, 29)] {
        assert_eq!(annotation_mask(&SparseAnnotation::point(0, 10, 10), 21, 21, r).count(), n);
    }
    // Clipped at the border.
    assert_eq!(annotation_mask(&SparseAnnotation::point(0, 0, 0), 21, 21, 3).count(), 11);
}

#[test]
fn later_annotations_win_and_count_conflicts() {
    let anns = vec![
        SparseAnnotation::point(0, 5, 5),
        SparseAnnotation { kind: AnnotationKind::Line, class_id: 1, coords: vec![[5, 0], [5, 9]] },
    ];
    let r = rasterize(&anns, 10, 10, 2, 1).unwrap();
    assert_eq!(r.labels.get(5, 5), 1);
    assert_eq!(r.labels.get(4, 5), 1);
    assert_eq!(r.labels.get(3, 5), UNLABELED);
    // The whole point disk lies under the dilated line.
    assert_eq!(r.conflicts, 5);
    let counts = count_labeled(&r.labels);
    assert_eq!(counts.per_class, vec![0, 30]);
    assert_eq!(counts.total, 30);
}

#[test]
fn polygons_are_not_dilated() {
    let square = SparseAnnotation { kind: AnnotationKind::Polygon, class_id: 0, coords: vec![[2, 2], [5, 2], [5, 5], [2, 5]] };
    assert_eq!(rasterize(&[square], 10, 10, 1, 3).unwrap().labels.labeled_count(), 16);
}

#[test]
fn invalid_annotations_are_rejected() {
    let out_of_bounds = SparseAnnotation::point(0, 10, 0);
    assert!(rasterize(&[out_of_bounds], 10, 10, 2, 0).is_err());
    let bad_class = SparseAnnotation::point(2, 0, 0);
    assert!(rasterize(&[bad_class], 10, 10, 2, 0).is_err());
    let short = SparseAnnotation { kind: AnnotationKind::Polygon, class_id: 0, coords: vec![[0, 0], [1, 1]] };
    assert!(rasterize(&[short], 10, 10, 2, 0).is_err());
    assert!(rasterize(&[], 10, 10, 0, 0).is_err());
}

#[test]
fn json_round_trip() {
    let text = r#"[{"kind": "line", "class_id": 2, "coords": [[1, 2], [3, 4]]}]"#;
    let anns = annotations_from_json(text).unwrap();
    assert_eq!(anns[0].kind, AnnotationKind::Line);
    assert_eq!(annotations_from_json(&annotations_to_json(&anns).unwrap()).unwrap(), anns);
    assert!(annotations_from_json(r#"[{"kind": "blob", "class_id": 0, "coords": []}]"#).is_err());
}
