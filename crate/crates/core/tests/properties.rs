use lmf_core::cost::{macs_lmf, macs_vanilla, LmfDims, VanillaDims};
use lmf_core::pnm::{decode_pnm, encode_pnm};
use lmf_core::train::{draw_scale, psnr, TrainConfig};
use lmf_core::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scale_draws_are_uniform_by_ks_statistic() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut draws: Vec<f64> = (0..10_000).map(|_| draw_scale(&cfg, &mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let (a, b) = (cfg.scale_min, cfg.scale_max);
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - a) / (b - a);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(draws[0] >= a && *draws.last().unwrap() <= b);
    assert!(d < 0.02, "KS statistic {d}");
}

#[test]
fn psnr_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::Rng;
    let a = Image::from_fn(9, 7, 3, |_, _, _| rng.gen());
    let b = Image::from_fn(9, 7, 3, |_, _, _| rng.gen());
    let mut sq = 0.0;
    for i in 0..a.data().len() {
        sq += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
    }
    let reference = 10.0 * (1.0 / (sq / 189.0)).log10();
    assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-9);
}

proptest! {
    #[test]
    fn pnm_round_trip_within_quantization(h in 1usize..12, w in 1usize..12, grey in any::<bool>(), seed in any::<u64>(), wide in any::<bool>()) {
        use rand::Rng;
        let c = if grey { 1 } else { 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(h, w, c, |_, _, _| rng.gen());
        let maxval = if wide { 65535 } else { 255 };
        let back = decode_pnm(&encode_pnm(&img, maxval).unwrap()).unwrap();
        prop_assert_eq!(back.dims(), img.dims());
        let bound = 0.5 / maxval as f64 + 1e-15;
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= bound);
        }
        // quantized images survive a second trip exactly
        prop_assert_eq!(decode_pnm(&encode_pnm(&back, maxval).unwrap()).unwrap(), back);
    }

    #[test]
    fn cost_is_strictly_monotone(h in 1usize..64, w in 1usize..64, s in 1u32..12) {
        let s = s as f64;
        let van = |h, w, s| macs_vanilla(&VanillaDims::LIIF, h, w, s).unwrap();
        let lmf = |h, w, s| macs_lmf(&LmfDims::LM_LIIF, h, w, s).unwrap();
        prop_assert!(van(h + 1, w, s) > van(h, w, s));
        prop_assert!(van(h, w + 1, s) > van(h, w, s));
        prop_assert!(van(h, w, s + 1.0) > van(h, w, s));
        prop_assert!(lmf(h + 1, w, s) > lmf(h, w, s));
        prop_assert!(lmf(h, w + 1, s) > lmf(h, w, s));
        prop_assert!(lmf(h, w, s + 1.0) > lmf(h, w, s));
        prop_assert!(lmf(h, w, s) < van(h, w, s));
    }
}
