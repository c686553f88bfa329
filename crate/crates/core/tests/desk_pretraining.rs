//! Properties of a desk-scale image denoiser pretrained on toy textures.

use std::sync::OnceLock;

use tap_core::alignment::TemporalConfig;
use tap_core::backbone::{Backbone, DenoiserConfig};
use tap_core::data::{make_toy_dataset, roll_x, ToyKind};
use tap_core::eval::psnr;
use tap_core::finetune::{build_pairs, finetune_step, FinetuneSchedule, RunDir, StepOutcome, StepParams};
use tap_core::noise::{stream_rng, NoiseModel};
use tap_core::params::ParamStore;
use tap_core::pretrain::{pretrain_image, PretrainConfig};
use tap_core::video::VideoDenoiser;
use tap_core::Tensor;

const SIGMA: f64 = 30.0 / 255.0;

fn pretrained() -> &'static (Backbone, ParamStore<f32>) {
    static CELL: OnceLock<(Backbone, ParamStore<f32>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let backbone = Backbone::new(DenoiserConfig::desk(3)).unwrap();
        let mut params = backbone.init_params(&mut stream_rng(0, &[]));
        let corpus: Vec<Tensor<f32>> = (0..48)
            .map(|s| make_toy_dataset(ToyKind::Static12, 64, 0.0, 1000 + s).unwrap().0.frames.select(0))
            .collect();
        pretrain_image(&backbone, &mut params, &corpus, &PretrainConfig::desk(), &RunDir::default()).unwrap();
        (backbone, params)
    })
}

fn validation(sigma: f64) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    (0..4)
        .map(|s| {
            let (clean, noisy) = make_toy_dataset(ToyKind::Static12, 64, sigma, 5000 + s).unwrap();
            (clean.frames.select(0), noisy.frames.select(0))
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

// Pretraining never shows the network a noise-free frame, so clean inputs
// come back slightly smoothed; 33.75 dB measured.
#[test]
fn noise_free_input_is_nearly_preserved() {
    let (backbone, params) = pretrained();
    let p = mean(validation(0.0).iter().map(|(clean, _)| {
        let out = backbone.denoise_image(params, clean).unwrap();
        psnr(&out, clean, 1.0).unwrap()
    }));
    assert!(p >= 33.0, "clean-input PSNR {p:.2} dB");
}

#[test]
fn awgn_30_gains_at_least_5_db() {
    let (backbone, params) = pretrained();
    let val = validation(SIGMA);
    let noisy = mean(val.iter().map(|(c, n)| psnr(n, c, 1.0).unwrap()));
    let denoised = mean(val.iter().map(|(c, n)| psnr(&backbone.denoise_image(params, n).unwrap(), c, 1.0).unwrap()));
    assert!(denoised >= noisy + 5.0, "noisy {noisy:.2} dB, denoised {denoised:.2} dB");
}

#[test]
fn translation_changes_psnr_by_less_than_a_third_db() {
    let (backbone, params) = pretrained();
    // Toy textures are periodic in the frame size, so rolling is an exact
    // translation of the clean content.
    let mut rng = stream_rng(9, &[]);
    let model = NoiseModel::Awgn { sigma: SIGMA };
    for (clean, _) in validation(0.0) {
        let noisy = model.corrupt(&clean, &mut rng);
        let direct = psnr(&backbone.denoise_image(params, &noisy).unwrap(), &clean, 1.0).unwrap();
        let shifted = backbone.denoise_image(params, &roll_x(&noisy, 8)).unwrap();
        let back = psnr(&roll_x(&shifted, 64 - 8), &clean, 1.0).unwrap();
        assert!((direct - back).abs() < 0.3, "direct {direct:.3} dB, shifted {back:.3} dB");
    }
}

#[test]
fn one_fine_tuned_step_beats_the_image_denoiser() {
    let (backbone, params) = pretrained();
    let cfg = backbone.config().clone();
    let net = VideoDenoiser::new(cfg.clone(), TemporalConfig::for_backbone(&cfg, 5, 32)).unwrap();
    let mut state = net.init_temporal(params, &mut stream_rng(1, &[])).unwrap();
    let kind = ToyKind::Translating { frames: 8, shift: 1.0 };
    let train: Vec<(String, Tensor<f32>)> = (0..6)
        .map(|s| (format!("t{s}"), make_toy_dataset(kind, 64, SIGMA, 2000 + s).unwrap().1.frames))
        .collect();
    let model = NoiseModel::Awgn { sigma: SIGMA };
    let schedule = FinetuneSchedule {
        step: StepParams {
            iterations: 300,
            lr_start: 1e-3,
            ..StepParams::desk()
        },
        ..FinetuneSchedule::default()
    };
    let plan = &schedule.plan().unwrap()[0];
    let pairs = build_pairs(&net, &state, &train, &model, 1, 3).unwrap();
    let outcome = finetune_step(&net, &mut state, &pairs, plan, 3, &RunDir::default(), None, &model).unwrap();
    assert!(matches!(outcome, StepOutcome::Done(_)));

    let (clean, noisy) = make_toy_dataset(kind, 64, SIGMA, 3000).unwrap();
    let t = 4;
    let window: Vec<Tensor<f32>> = (t - 2..=t + 2).map(|i| noisy.frames.select(i)).collect();
    let video = psnr(&net.denoise_window(&state.params, &window).unwrap(), &clean.frames.select(t), 1.0).unwrap();
    let image = psnr(&backbone.denoise_image(params, &noisy.frames.select(t)).unwrap(), &clean.frames.select(t), 1.0).unwrap();
    assert!(video > image, "video {video:.3} dB, image {image:.3} dB");
}
