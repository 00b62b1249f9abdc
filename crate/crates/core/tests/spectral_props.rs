mod common;

use proptest::prelude::*;

use ctfgan::spectral::{bilinear_upscale, dct2d, difference_map_inner, idct2d, Resolution, SpatialMap};

fn map(side: (usize, usize)) -> impl Strategy<Value = SpatialMap> {
    proptest::collection::vec(-10.0f64..10.0, side.0 * side.1)
        .prop_map(move |v| SpatialMap::new(Resolution::new(side.0, side.1), v).unwrap())
}

fn any_map() -> impl Strategy<Value = SpatialMap> {
    (1usize..10, 1usize..10).prop_flat_map(map)
}

proptest! {
    #[test]
    fn dct_round_trips(x in any_map()) {
        let back = idct2d(&dct2d(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn dct_matches_the_direct_sum(x in any_map()) {
        let r = x.resolution();
        let want = common::brute_dct(x.values(), r.height, r.width);
        prop_assert!(common::max_abs_diff(dct2d(&x).unwrap().coefficients(), &want) < 1e-9);
    }

    #[test]
    fn dct_is_linear(pair in (1usize..8, 1usize..8).prop_flat_map(|s| (map(s), map(s))), a in -3.0f64..3.0) {
        let (x, y) = pair;
        let combo = SpatialMap::new(
            x.resolution(),
            x.values().iter().zip(y.values()).map(|(p, q)| a * p + q).collect(),
        ).unwrap();
        let (dx, dy, dc) = (dct2d(&x).unwrap(), dct2d(&y).unwrap(), dct2d(&combo).unwrap());
        for i in 0..dc.coefficients().len() {
            let want = a * dx.coefficients()[i] + dy.coefficients()[i];
            prop_assert!((dc.coefficients()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn upscaling_keeps_constants_and_corners(
        src in (1usize..6, 1usize..6),
        grow in (0usize..6, 0usize..6),
        c in -5.0f64..5.0,
    ) {
        let r = Resolution::new(src.0, src.1);
        let target = Resolution::new(src.0 + grow.0, src.1 + grow.1);
        let flat = bilinear_upscale(&SpatialMap::filled(r, c).unwrap(), target).unwrap();
        prop_assert!(flat.values().iter().all(|v| (v - c).abs() < 1e-12));

        let ramp = SpatialMap::from_fn(r, |y, x| (y * 7 + x) as f64).unwrap();
        let up = bilinear_upscale(&ramp, target).unwrap();
        prop_assert_eq!(up.get(0, 0), ramp.get(0, 0));
        prop_assert!((up.get(target.height - 1, target.width - 1) - ramp.get(r.height - 1, r.width - 1)).abs() < 1e-12);
    }

    #[test]
    fn a_map_differs_from_itself_by_nothing(x in any_map()) {
        let d = difference_map_inner(&x, std::slice::from_ref(&x)).unwrap();
        prop_assert!(d.values().iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn shrinking_is_rejected() {
    let m = SpatialMap::filled(Resolution::new(4, 4), 1.0).unwrap();
    assert!(matches!(
        bilinear_upscale(&m, Resolution::new(2, 4)),
        Err(ctfgan::Error::Contract(_))
    ));
}
