use nalgebra::{Matrix3, Vector3};
use needleguide::blobdetect::{detect_blobs, BlobFilterParams, GrayImage};
use needleguide::correspond::{build_edm, match_permutation, match_profile};
use needleguide::geom::{Pixel, Point3, RigidTransform};
use needleguide::guidance::{feedback, FeedbackConfig};
use needleguide::phantomsim::render_disc;
use needleguide::register::{fit_tps, procrustes};
use needleguide::stats::{spearman, wilcoxon_signed_rank};
use proptest::prelude::*;

fn arb_point(half: f64) -> impl Strategy<Value = Point3> {
    (-half..half, -half..half, -half..half).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn arb_transform() -> impl Strategy<Value = RigidTransform> {
    (arb_point(1.0), -3.1f64..3.1, arb_point(300.0)).prop_filter_map("degenerate axis", |(a, angle, t)| {
        (a.coords.norm() > 0.1).then(|| {
            let r = RigidTransform::from_axis_angle(&a.coords.normalize(), angle).rotation;
            RigidTransform::new(r, t.coords)
        })
    })
}

/// Point sets whose pairwise distances are not nearly degenerate.
fn arb_cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(arb_point(60.0), min..=max).prop_filter("points too close", |pts| {
        build_edm(pts).is_ok_and(|e| e.min_distance_gap() > 0.5)
    })
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    (r.transpose() * r - Matrix3::identity()).norm() < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edm_is_a_distance_matrix(pts in prop::collection::vec(arb_point(100.0), 2..12)) {
        let e = build_edm(&pts).unwrap();
        for i in 0..e.n() {
            prop_assert_eq!(e.get(i, i), 0.0);
            for j in 0..e.n() {
                prop_assert!(e.get(i, j) >= 0.0);
                prop_assert!((e.get(i, j) - e.get(j, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matchers_ignore_rigid_motion(model in arb_cloud(4, 7), t in arb_transform()) {
        let moved: Vec<Point3> = model.iter().rev().map(|p| t.apply(p)).collect();
        let still: Vec<Point3> = model.iter().rev().copied().collect();
        let mm = build_edm(&model).unwrap();
        let (a, b) = (build_edm(&moved).unwrap(), build_edm(&still).unwrap());
        prop_assert_eq!(match_permutation(&a, &mm).unwrap().assignment, match_permutation(&b, &mm).unwrap().assignment);
        prop_assert_eq!(match_profile(&a, &mm).assignment, match_profile(&b, &mm).assignment);
    }

    #[test]
    fn procrustes_returns_a_rotation(src in arb_cloud(4, 10), mirror in any::<bool>(), noise in arb_point(2.0)) {
        let flip = if mirror { Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)) } else { Matrix3::identity() };
        let dst: Vec<Point3> = src.iter().map(|p| Point3::from(flip * p.coords + noise.coords)).collect();
        let t = procrustes(&src, &dst).unwrap();
        prop_assert!(is_rotation(&t.rotation));
    }

    #[test]
    fn tps_reproduces_affine_maps(
        src in arb_cloud(5, 12),
        a in prop::array::uniform9(-1.5f64..1.5),
        b in arb_point(50.0),
    ) {
        let m = Matrix3::from_row_slice(&a) + Matrix3::identity() * 2.0;
        let dst: Vec<Point3> = src.iter().map(|p| Point3::from(m * p.coords + b.coords)).collect();
        let model = fit_tps(&src, &dst, 0.0).unwrap();
        prop_assert!(model.warp_norm() < 1e-8, "warp norm {}", model.warp_norm());
    }

    #[test]
    fn tps_side_conditions_hold(src in arb_cloud(4, 12), shift in prop::collection::vec(arb_point(5.0), 12), lambda in 0.0f64..10.0) {
        let dst: Vec<Point3> = src.iter().zip(&shift).map(|(p, s)| p + s.coords).collect();
        let model = fit_tps(&src, &dst, lambda).unwrap();
        let (sum, moment) = model.side_conditions();
        prop_assert!(sum.norm() < 1e-8 && moment.norm() < 1e-8 * 60.0);
    }

    #[test]
    fn tps_smoothing_is_monotone(src in arb_cloud(6, 10), shift in prop::collection::vec(arb_point(5.0), 10)) {
        let dst: Vec<Point3> = src.iter().zip(&shift).map(|(p, s)| p + s.coords).collect();
        let mut prev: Option<(f64, f64)> = None;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let model = fit_tps(&src, &dst, lambda).unwrap();
            let resid: f64 = src.iter().zip(&dst).map(|(s, d)| (model.apply(s) - d).norm_squared()).sum();
            let warp = model.warp_norm();
            if let Some((r0, w0)) = prev {
                prop_assert!(resid >= r0 - 1e-9 && warp <= w0 + 1e-9);
            }
            prev = Some((resid, warp));
        }
    }

    #[test]
    fn tighter_filters_never_add_blobs(
        discs in prop::collection::vec((20.0f64..180.0, 20.0f64..180.0, 2.0f64..12.0), 1..6),
        shrink in prop::array::uniform4(0.0f64..0.4),
    ) {
        let mut img = GrayImage::new(200, 200);
        for (x, y, r) in &discs {
            render_disc(&mut img, &Pixel::new(*x, *y), *r, 200, 4);
        }
        let wide = BlobFilterParams { circularity: [0.3, 1.5], bw_ratio: [0.2, 1.0], area: [1, 40_000], ..Default::default() };
        let narrow = BlobFilterParams {
            circularity: [0.3 + shrink[0], 1.5 - shrink[1]],
            bw_ratio: [0.2 + shrink[2], 1.0 - shrink[3] / 2.0],
            area: [1 + (shrink[0] * 100.0) as usize, 40_000],
            ..wide
        };
        prop_assert!(detect_blobs(&img, &narrow).len() <= detect_blobs(&img, &wide).len());
    }

    #[test]
    fn tone_rises_as_the_tip_closes_in(a in 0.0f64..80.0, b in 0.0f64..80.0) {
        let cfg = FeedbackConfig::default();
        let (near, far) = (a.min(b), a.max(b));
        let (fn_, ff) = (feedback(near, &cfg).unwrap(), feedback(far, &cfg).unwrap());
        prop_assert!(fn_.freq_hz >= ff.freq_hz);
        if fn_.reached {
            prop_assert!(near <= cfg.reach_threshold_mm);
        }
    }

    #[test]
    fn wilcoxon_is_symmetric(d in prop::collection::vec(-5.0f64..5.0, 6..30)) {
        let zeros = vec![0.0; d.len()];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let (p, q) = (wilcoxon_signed_rank(&d, &zeros).unwrap(), wilcoxon_signed_rank(&neg, &zeros).unwrap());
        prop_assert_eq!(p.w, q.w);
        prop_assert!((p.p_two_sided - q.p_two_sided).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p.p_two_sided));
    }

    #[test]
    fn spearman_is_rank_invariant(x in prop::collection::vec(-10.0f64..10.0, 5..30), y in prop::collection::vec(-10.0f64..10.0, 30)) {
        let y = &y[..x.len()];
        if let Ok(r) = spearman(&x, y) {
            let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
            prop_assert!((spearman(&cubed, y).unwrap() - r).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }
}
