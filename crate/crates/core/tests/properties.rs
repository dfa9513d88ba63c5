use proptest::prelude::*;

use s3po::degrade::{degrade, DegradationConfig};
use s3po::erp::{build_distortion_map, cyclic_swap_tensor, pixel_shuffle, pixel_unshuffle};
use s3po::losses::{smooth_l1, smooth_l1_term, wss_l1, LossConfig};
use s3po::metrics::{ssim, ws_psnr, MetricConfig};
use s3po::{ErpFrame, LumaPlane, Tensor};

fn tensor(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, h * w * c)
        .prop_map(move |data| Tensor::from_vec(h, w, c, data).unwrap())
}

fn sized_tensor(max_hw: usize, c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_hw, 1..=max_hw).prop_flat_map(move |(h, w)| tensor(h, 2 * w, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unshuffle_inverts_shuffle(
        (r, feat) in (1usize..4).prop_flat_map(|r| (Just(r), sized_tensor(4, 3 * r * r)))
    ) {
        let hr = pixel_shuffle(&feat, r).unwrap();
        prop_assert_eq!((hr.height(), hr.width(), hr.channels()), (feat.height() * r, feat.width() * r, 3));
        prop_assert_eq!(pixel_unshuffle(&hr, r).unwrap(), feat);
    }

    #[test]
    fn swap_is_an_involution(t in sized_tensor(6, 2)) {
        let twice = cyclic_swap_tensor(&cyclic_swap_tensor(&t).unwrap()).unwrap();
        prop_assert_eq!(twice, t);
    }

    #[test]
    fn map_is_symmetric_and_positive(h in 1usize..200, w in 1usize..8) {
        let map = build_distortion_map(h, w).unwrap();
        for y in 0..h {
            let (a, b) = (map.row_weight(y), map.row_weight(h - 1 - y));
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_l1_is_continuous_at_beta(beta in 1e-3f64..10.0) {
        let quad = 0.5 * beta;
        prop_assert!((smooth_l1_term(beta, beta) - quad).abs() <= 1e-15 * beta.max(1.0));
        prop_assert!((smooth_l1_term(-beta, beta) - quad).abs() <= 1e-15 * beta.max(1.0));
    }

    #[test]
    fn losses_vanish_only_on_equal_inputs(t in sized_tensor(4, 3), bump in 1e-3f64..1.0) {
        let cfg = LossConfig::default();
        let map = build_distortion_map(t.height(), t.width()).unwrap();
        prop_assert_eq!(smooth_l1(&t, &t, &LossConfig::unweighted()).unwrap(), 0.0);
        prop_assert_eq!(wss_l1(&t, &t, &map, &cfg).unwrap(), 0.0);
        let moved = t.map(|v| v + bump);
        prop_assert!(wss_l1(&moved, &t, &map, &cfg).unwrap() > 0.0);
    }

    #[test]
    fn ws_psnr_is_swap_invariant(a in tensor(6, 8, 1), b in tensor(6, 8, 1)) {
        let (ga, gb) = (LumaPlane::new(6, 8, a.into_vec()).unwrap(), LumaPlane::new(6, 8, b.into_vec()).unwrap());
        let map = build_distortion_map(6, 8).unwrap();
        let cfg = MetricConfig::default();
        let plain = ws_psnr(&ga, &gb, &map, &cfg).unwrap();
        let swapped = ws_psnr(&ga.cyclic_swap().unwrap(), &gb.cyclic_swap().unwrap(), &map, &cfg).unwrap();
        prop_assert!((plain - swapped).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in tensor(12, 12, 1), b in tensor(12, 12, 1)) {
        let (ga, gb) = (LumaPlane::new(12, 12, a.into_vec()).unwrap(), LumaPlane::new(12, 12, b.into_vec()).unwrap());
        let cfg = MetricConfig::default();
        let ab = ssim(&ga, &gb, &cfg).unwrap();
        prop_assert!((ab - ssim(&gb, &ga, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn degradation_keeps_constant_frames(v in 0.0f64..1.0, scale in 2usize..5, mode in 0..2) {
        let frame = ErpFrame::constant(4 * scale, 8 * scale, v).unwrap();
        let cfg = if mode == 0 { DegradationConfig::bi(scale) } else { DegradationConfig::bd(scale) };
        let lr = degrade(&frame, &cfg).unwrap();
        prop_assert_eq!((lr.height(), lr.width()), (4, 8));
        prop_assert!(lr.pixels().data().iter().all(|x| (x - v).abs() < 1e-12));
    }
}
