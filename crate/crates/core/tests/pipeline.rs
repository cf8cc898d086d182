use std::collections::BTreeMap;
use std::sync::Arc;

use deturb_core::checkpoint::Checkpoint;
use deturb_core::dataset::{generate_dataset, Manifest};
use deturb_core::evaluation::{estimate_image_prior, evaluate_restoration, RestorationModel, Restorer};
use deturb_core::features::ConvDescriptor;
use deturb_core::image::{save_image, Image};
use deturb_core::loss::{LossConfig, DEFAULT_LAMBDA_P};
use deturb_core::network::{build_prior_spec, build_restoration_spec, Network};
use deturb_core::rng::SeededRng;
use deturb_core::synth::{degrade, synthetic_scene, DegradationConfig};
use deturb_core::tensor::UpsampleMode;
use deturb_core::training::{
    prepare_pairs, train_prior_network, train_restoration_network, LossRecord, PriorConfig, Stage, TrainPair, TrainRun,
};

fn toy_pairs(n: usize, side: usize, seed: u64) -> Vec<TrainPair> {
    let mut rng = SeededRng::new(seed);
    let raw: Vec<(Image, Image)> = (0..n)
        .map(|i| {
            let x = synthetic_scene(side, side, &mut rng).unwrap();
            let y = degrade(&x, &DegradationConfig::default(), &mut rng.fork(&[i as u64])).unwrap().y;
            (y, x)
        })
        .collect();
    prepare_pairs(&raw, 4).unwrap()
}

fn quick_run(stage: Stage, iters: u64) -> TrainRun {
    TrainRun {
        batch_size: 2,
        max_iters: iters,
        seed: 11,
        lr: 1e-3,
        progress_every: 0,
        out_dir: None,
        ..TrainRun::new(stage)
    }
}

fn median(v: &[LossRecord]) -> f64 {
    let mut t: Vec<f64> = v.iter().map(|r| r.total).collect();
    t.sort_by(f64::total_cmp);
    (t[t.len() / 2 - 1] + t[t.len() / 2]) / 2.0
}

#[test]
fn both_stages_reduce_their_loss_and_stage_two_leaves_the_prior_untouched() {
    let pairs = toy_pairs(2, 32, 1);
    let loss = LossConfig::new(DEFAULT_LAMBDA_P, Arc::new(ConvDescriptor::default_perceptual(0).unwrap())).unwrap();
    let s1 = train_prior_network(&quick_run(Stage::Prior, 80), &pairs, &loss, build_prior_spec(0.1, UpsampleMode::Bilinear), None)
        .unwrap();
    let (head, tail) = (&s1.log[..20], &s1.log[60..]);
    assert!(median(tail) < median(head), "stage 1: {} -> {}", median(head), median(tail));

    let prior = s1.checkpoint.network.clone();
    let before = Checkpoint::new(prior.clone()).to_bytes();
    let cfg = PriorConfig { samples: 4, ..PriorConfig::default() };
    let s2 = train_restoration_network(
        &quick_run(Stage::Restoration, 80),
        &pairs,
        &prior,
        &cfg,
        &loss,
        build_restoration_spec(3, UpsampleMode::Bilinear).unwrap(),
        None,
    )
    .unwrap();
    let (head, tail) = (&s2.log[..20], &s2.log[60..]);
    assert!(median(tail) < median(head), "stage 2: {} -> {}", median(head), median(tail));
    assert_eq!(Checkpoint::new(prior).to_bytes(), before);
}

#[test]
fn odd_sized_inputs_come_back_at_their_own_size() {
    let prior = Network::init(build_prior_spec(0.1, UpsampleMode::Bilinear), 3).unwrap();
    let restoration = Network::init(build_restoration_spec(3, UpsampleMode::Nearest).unwrap(), 4).unwrap();
    let mut rng = SeededRng::new(9);
    let restorer = Restorer::new(prior.clone(), restoration, PriorConfig { samples: 3, ..PriorConfig::default() }).unwrap();
    for (h, w, c) in [(13, 21, 3), (17, 9, 1), (8, 8, 3)] {
        let y = Image::from_fn(h, w, c, |_, _, _| rng.uniform()).unwrap();
        let (d, mean) = estimate_image_prior(&prior, &PriorConfig::default(), &y, 5, 1).unwrap();
        assert_eq!(d.values.shape(), (3, h, w));
        assert_eq!(mean.shape(), (h, w, 3));
        let out = restorer.run(&y, 5).unwrap();
        assert_eq!(out.x_hat.shape(), (h, w, 3));
        assert_eq!(out.x_hat, restorer.run(&y, 5).unwrap().x_hat);
        assert!(out.x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

struct Passthrough;

impl RestorationModel for Passthrough {
    fn restore(&self, y: &Image, _seed: u64) -> deturb_core::Result<Image> {
        Ok(y.clone())
    }
}

/// Returns the clean image found next to the degraded one.
struct Oracle(Vec<(Image, Image)>);

impl RestorationModel for Oracle {
    fn restore(&self, y: &Image, _seed: u64) -> deturb_core::Result<Image> {
        Ok(self.0.iter().find(|(d, _)| d == y).map(|(_, x)| x.clone()).expect("unknown input"))
    }
}

fn toy_manifest(dir: &std::path::Path) -> Manifest {
    let clean = dir.join("clean");
    std::fs::create_dir_all(&clean).unwrap();
    let mut rng = SeededRng::new(21);
    for i in 0..4 {
        save_image(&synthetic_scene(40, 36, &mut rng).unwrap(), clean.join(format!("s{i}.png"))).unwrap();
    }
    let out = dir.join("data");
    generate_dataset(&clean, &out, &DegradationConfig::default(), 1).unwrap();
    Manifest::load(out.join("manifest.jsonl")).unwrap()
}

#[test]
fn evaluation_reports_are_consistent_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let m = toy_manifest(tmp.path());
    let deep = ConvDescriptor::default_deep(0).unwrap();

    let report = evaluate_restoration(&m, &Passthrough, 1, Some(&deep), BTreeMap::new()).unwrap();
    assert_eq!(report.rows.len(), m.len());
    for row in &report.rows {
        assert_eq!(row.restored, row.baseline);
    }
    let mean = |f: &dyn Fn(&deturb_core::evaluation::PairRow) -> f64| {
        report.rows.iter().map(f).sum::<f64>() / report.rows.len() as f64
    };
    assert!((report.restored.mean_psnr.unwrap() - mean(&|r| r.restored.psnr)).abs() <= 1e-9);
    assert!((report.restored.mean_ssim - mean(&|r| r.restored.ssim)).abs() <= 1e-9);
    assert!((report.restored.mean_d_vgg.unwrap() - mean(&|r| r.restored.d_vgg.unwrap())).abs() <= 1e-9);
    let again = evaluate_restoration(&m, &Passthrough, 1, Some(&deep), BTreeMap::new()).unwrap();
    assert_eq!(report.to_json(), again.to_json());
    assert_eq!(report.to_table(), again.to_table());

    let oracle = Oracle(m.load_pairs().unwrap().into_iter().map(|(y, x)| (y.to_rgb(), x.to_rgb())).collect());
    let perfect = evaluate_restoration(&m, &oracle, 1, Some(&deep), BTreeMap::new()).unwrap();
    assert!(perfect.rows.iter().all(|r| r.restored.psnr.is_infinite() && r.restored.ssim == 1.0));
    assert_eq!(perfect.restored.mean_psnr, None);
    assert_eq!(perfect.restored.infinite_psnr, m.len());
    assert_eq!(perfect.restored.mean_d_vgg, Some(0.0));
    assert_eq!(perfect.baseline, report.baseline);
    assert!(perfect.to_json().contains("\"inf\""));
}
