use proptest::prelude::*;
use rand::Rng;
use tap_core::alignment::TemporalConfig;
use tap_core::autograd::Tape;
use tap_core::backbone::{padded_dims, Backbone, DenoiserConfig};
use tap_core::data::{pack_raw_to_rgbg, unpack_rgbg_to_raw, CfaPattern, RawLevels};
use tap_core::eval::{psnr, ssim, temporal_coherence};
use tap_core::finetune::sample_batch;
use tap_core::noise::{make_pseudo_pairs, stream_rng, NoiseModel};
use tap_core::optim::cosine_lr;
use tap_core::params::Ctx;
use tap_core::video::{window_indices, VideoDenoiser};
use tap_core::Tensor;

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = stream_rng(seed, &[]);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn cfa() -> impl Strategy<Value = CfaPattern> {
    prop_oneof![
        Just(CfaPattern::Rggb),
        Just(CfaPattern::Bggr),
        Just(CfaPattern::Grbg),
        Just(CfaPattern::Gbrg)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pyramid_dims_halve_per_level(h in 1usize..40, w in 1usize..40) {
        let backbone = Backbone::new(DenoiserConfig::desk(3)).unwrap();
        let params = backbone.init_params::<f32, _>(&mut stream_rng(0, &[]));
        let (ph, pw) = padded_dims(h, w);
        prop_assert!(ph % 8 == 0 && pw % 8 == 0 && ph >= h && pw >= w && ph - h < 8 && pw - w < 8);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &params);
        let x = random_tensor([1, 3, h, w], 1).reflect_pad_to(ph, pw);
        let pyr = backbone.encode(&ctx, &tape.constant(x)).unwrap();
        for (l, skip) in pyr.skips.iter().enumerate() {
            prop_assert_eq!(skip.shape(), [1, backbone.config().channels[l], ph >> l, pw >> l]);
        }
        prop_assert_eq!(&pyr.bottleneck.shape()[2..], &[ph >> 3, pw >> 3]);
    }

    #[test]
    fn zero_gates_make_the_video_denoiser_an_image_denoiser(
        n in 1usize..6, half in 1usize..3, h in 8usize..24, w in 8usize..24, seed in any::<u64>()
    ) {
        let cfg = DenoiserConfig::desk(3);
        let net = VideoDenoiser::new(cfg.clone(), TemporalConfig::for_backbone(&cfg, 2 * half + 1, 16)).unwrap();
        let state = net.init_params::<f32, _>(&mut stream_rng(seed, &[]));
        let video = random_tensor([n, 3, h, w], seed);
        let a = net.denoise_video(&state.params, &video, None).unwrap();
        let b = net.backbone().denoise_image(&state.params, &video).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

proptest! {
    #[test]
    fn window_indices_stay_in_range_and_centre(n in 1usize..12, t_frac in 0.0f64..1.0, half in 0usize..4) {
        let t = ((n as f64 * t_frac) as usize).min(n - 1);
        let frames = 2 * half + 1;
        let idx = window_indices(t, n, frames);
        prop_assert_eq!(idx.len(), frames);
        prop_assert_eq!(idx[half], t);
        prop_assert!(idx.iter().all(|&i| i < n));
        for (slot, &i) in idx.iter().enumerate() {
            // Mirror about frame 0, then about the last frame, then clamp.
            let last = n as isize - 1;
            let low = (t as isize + slot as isize - half as isize).abs();
            let high = if low > last { 2 * last - low } else { low };
            prop_assert_eq!(i as isize, high.clamp(0, last));
        }
    }

    #[test]
    fn raw_packing_round_trips(pattern in cfa(), n in 1usize..3, hh in 1usize..6, ww in 1usize..6, seed in any::<u64>()) {
        let levels = RawLevels { black: 240.0, white: 4095.0 };
        let mut rng = stream_rng(seed, &[]);
        let raw = Tensor::from_fn([n, 1, 2 * hh, 2 * ww], |_| rng.random_range(240..=4095) as f64);
        let packed = pack_raw_to_rgbg(&raw, pattern, levels).unwrap();
        prop_assert_eq!(packed.shape(), [n, 4, hh, ww]);
        prop_assert_eq!(packed.len(), raw.len());
        prop_assert!(packed.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(unpack_rgbg_to_raw(&packed, pattern, levels).unwrap(), raw);
    }

    #[test]
    fn metric_ranges_and_symmetry(seed in any::<u64>(), scale in 0.0f32..1.0) {
        let a = random_tensor([1, 3, 16, 16], seed);
        let b = random_tensor([1, 3, 16, 16], seed ^ 1).map(|v| v * scale);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((0.0..=100.0).contains(&p));
        let a255 = a.cast::<f64>().map(|v| v * 255.0);
        let b255 = b.cast::<f64>().map(|v| v * 255.0);
        prop_assert!((psnr(&a255, &b255, 255.0).unwrap() - p).abs() < 1e-9);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        let video = Tensor::stack(&[a, b]).unwrap();
        prop_assert!(temporal_coherence(&video).unwrap() >= 0.0);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(total in 2usize..500, start in 1e-4f64..1e-2, ratio in 0.0f64..1.0) {
        let end = start * ratio.max(1e-3);
        let mut prev = f64::INFINITY;
        for it in 0..total {
            let lr = cosine_lr(it, total, start, end);
            prop_assert!(lr <= prev && lr >= end * (1.0 - 1e-12) && lr <= start * (1.0 + 1e-12));
            prev = lr;
        }
        prop_assert!((cosine_lr(0, total, start, end) - start).abs() <= 1e-12 * start);
        prop_assert!((cosine_lr(total - 1, total, start, end) - end).abs() <= 1e-12 * end);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pair_sets_and_batches_are_seed_determined(seed in any::<u64>(), step in 1usize..4, batch in 1usize..5, extra in 1usize..4) {
        let videos: Vec<(String, Tensor<f32>)> =
            (0..2).map(|i| (format!("v{i}"), random_tensor([3, 3, 12, 12], i))).collect();
        let model = NoiseModel::PoissonGaussian { alpha: 0.01, delta: 0.02 };
        let identity = |v: &Tensor<f32>| Ok(v.clone());
        let a = make_pseudo_pairs(&videos, identity, &model, step, seed).unwrap();
        let b = make_pseudo_pairs(&videos, identity, &model, step, seed).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            prop_assert_eq!(&x.noisy, &y.noisy);
            prop_assert_eq!(&x.clean, &y.clean);
        }
        // Growing the batch appends samples without disturbing earlier ones.
        let small = sample_batch(&a, seed, &[step as u64, 0], 8, 3, batch).unwrap();
        let large = sample_batch(&a, seed, &[step as u64, 0], 8, 3, batch + extra).unwrap();
        for i in 0..batch {
            prop_assert_eq!(small.targets.item(i), large.targets.item(i));
            for (s, l) in small.inputs.iter().zip(&large.inputs) {
                prop_assert_eq!(s.item(i), l.item(i));
            }
        }
    }
}
