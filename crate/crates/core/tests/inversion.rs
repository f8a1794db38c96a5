mod common;

use common::{grad_check, randn, rng};
use metalora::inversion::{
    apply_mask, build_task, fit_stat_regularizer, invert, read_task, stat_penalty, write_task, GeneratedTask,
    InversionConfig, StatExtractor, StatRegularizer, TokenMask, STD_FLOOR,
};
use metalora::lora::{fingerprint, ClassificationHead, LoRAAdapter};
use metalora::tensor::{Graph, Tensor};
use metalora::vit::{plan_flops, PrunePlan, ViT, ViTConfig};
use metalora::Error;
use proptest::prelude::*;
use rand::Rng;

fn cfg() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 2, channels: 3, depth: 2, embed_dim: 16, num_heads: 2, mlp_ratio: 2 }
}

fn teacher(c: &ViTConfig, seed: u64) -> (ViT, LoRAAdapter, ClassificationHead) {
    let vit = ViT::new(c.clone(), seed).unwrap();
    let lora = LoRAAdapter::random(c, 2, seed + 1).unwrap();
    let mut head = ClassificationHead::new(c.embed_dim, vec!["a".into(), "b".into(), "c".into()], seed + 2).unwrap();
    head.weight = head.weight.map(|v| v * 50.0);
    (vit, lora, head)
}

fn probe(c: usize, size: usize, seed: u64) -> Tensor<f64> {
    randn(&[64, c, size, size], seed)
}

#[test]
fn identical_probe_images_hit_the_std_floor() {
    // statistics pool over batch and space, so the images are also spatially flat
    let same = Tensor::<f64>::full(&[64, 2, 6, 6], 0.7);
    for channel in 0..2 {
        let reg = fit_stat_regularizer(&same, StatExtractor::identity(2, 6, channel)).unwrap();
        assert_eq!(reg.target_std[0].data(), &[STD_FLOOR]);
    }
}

#[test]
fn fitting_is_deterministic_and_needs_enough_probes() {
    let p = probe(3, 8, 3);
    let a = fit_stat_regularizer(&p, StatExtractor::seeded(3, 8, 9)).unwrap();
    let b = fit_stat_regularizer(&p, StatExtractor::seeded(3, 8, 9)).unwrap();
    assert_eq!(a, b);
    let few = randn(&[63, 3, 8, 8], 0);
    assert!(matches!(fit_stat_regularizer(&few, StatExtractor::seeded(3, 8, 9)), Err(Error::Count(_))));
    assert_eq!(a.target_mean.len(), 3);
    assert_eq!(a.target_mean[2].shape(), &[16]);
}

#[test]
fn identity_extractor_mean_is_the_pixel_mean() {
    let p = probe(2, 6, 4);
    let reg = fit_stat_regularizer(&p, StatExtractor::identity(2, 6, 1)).unwrap();
    let mut sum = 0.0;
    for b in 0..64 {
        for i in 0..36 {
            sum += p.data()[(b * 2 + 1) * 36 + i];
        }
    }
    assert!((reg.target_mean[0].data()[0] - sum / (64.0 * 36.0)).abs() < 1e-12);
}

#[test]
fn penalty_self_match_and_shift() {
    let p = probe(3, 8, 5);
    let reg = fit_stat_regularizer(&p, StatExtractor::seeded(3, 8, 2)).unwrap();
    assert!(reg.evaluate(&p).unwrap().abs() < 1e-6);

    let p = probe(1, 6, 6);
    let reg = fit_stat_regularizer(&p, StatExtractor::identity(1, 6, 0)).unwrap();
    for c in [-2.5, 0.3, 4.0] {
        let shifted = p.map(|v| v + c);
        assert!((reg.evaluate(&shifted).unwrap() - c.abs()).abs() < 1e-9);
    }
    for seed in 0..20 {
        assert!(reg.evaluate(&randn(&[5, 1, 6, 6], seed)).unwrap() >= 0.0);
    }
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let reg: StatRegularizer<f64> = fit_stat_regularizer(&probe(2, 8, 7), StatExtractor::seeded(2, 8, 3)).unwrap();
    for seed in 0..20 {
        let x = randn(&[2, 2, 8, 8], 100 + seed);
        let err = grad_check(&[x], 1e-5, |g: &mut Graph<f64>, v| stat_penalty(g, v[0], &reg).unwrap());
        assert!(err < 1e-4, "seed {} rel err {:e}", seed, err);
    }
}

#[test]
fn apply_mask_cases() {
    let img = Tensor::<f32>::full(&[3, 8, 8], 2.0);
    assert_eq!(apply_mask(&img, &TokenMask::ones(4), 2).unwrap(), img);
    let zeros = TokenMask { grid: 4, bits: vec![0; 16] };
    assert!(apply_mask(&img, &zeros, 2).unwrap().data().iter().all(|v| *v == 0.0));
    let checker = TokenMask { grid: 4, bits: (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect() };
    let out = apply_mask(&img, &checker, 2).unwrap();
    assert_eq!(out.data().iter().filter(|v| **v == 0.0).count(), img.numel() / 2);
    assert!(apply_mask(&img, &TokenMask::ones(3), 2).is_err());
}

#[test]
fn zero_head_without_prior_leaves_images_untouched() {
    let c = cfg();
    let (vit, lora, mut head) = teacher(&c, 0);
    head.weight = Tensor::zeros(head.weight.shape());
    let icfg = InversionConfig { iterations: 5, batch_size: 3, alpha_r: 0.0, seed: 4, ..Default::default() };
    let out = invert(&vit, &lora, &head, &icfg, None).unwrap();
    let mut r = rng(4);
    let x0: Tensor<f32> = Tensor::randn(&[3, 3, 8, 8], 0.0, 1.0, &mut r);
    assert_eq!(out.images, x0);
}

#[test]
fn inversion_lowers_the_loss_and_is_deterministic() {
    let c = cfg();
    let p: Tensor<f32> = probe(3, 8, 1).cast();
    let reg = fit_stat_regularizer(&p, StatExtractor::seeded(3, 8, 1)).unwrap();
    for seed in 0..3 {
        let (vit, lora, head) = teacher(&c, seed);
        let before = (fingerprint(&vit), lora.clone(), head.clone());
        let plan = PrunePlan::new().with(1, 0.25).unwrap();
        let icfg = InversionConfig { iterations: 40, batch_size: 6, plan: Some(plan.clone()), seed, ..Default::default() };
        let a = invert(&vit, &lora, &head, &icfg, Some(&reg)).unwrap();
        let b = invert(&vit, &lora, &head, &icfg, Some(&reg)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.masks, b.masks);
        assert!(a.trace.iter().all(|r| r.total.is_finite()));
        assert!(a.trace.last().unwrap().total < a.trace[0].total);
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2]);
        let kept = plan.final_image_tokens(c.depth, c.num_patches());
        assert!(a.masks.iter().all(|m| m.count_ones() == kept));
        assert_eq!((fingerprint(&vit), lora, head), before);
        assert_eq!(a.flops_per_image, plan_flops(&c, &plan));
        assert!(a.flops_per_image < plan_flops(&c, &PrunePlan::new()));
    }
}

#[test]
fn region_losses_are_tracked_when_requested() {
    let c = cfg();
    let (vit, lora, head) = teacher(&c, 3);
    let icfg = InversionConfig {
        iterations: 10,
        batch_size: 3,
        plan: Some(PrunePlan::new().with(1, 0.5).unwrap()),
        track_every: Some(4),
        ..Default::default()
    };
    let out = invert(&vit, &lora, &head, &icfg, None).unwrap();
    let its: Vec<usize> = out.regions.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 4, 8, 9]);
    assert!(out.regions.iter().all(|r| r.foreground_ce.is_finite() && r.background_ce.is_finite()));
}

#[test]
fn divergence_reports_the_iteration() {
    let c = cfg();
    let (vit, lora, head) = teacher(&c, 1);
    let icfg = InversionConfig { iterations: 10, batch_size: 3, lr: 1e38, ..Default::default() };
    match invert(&vit, &lora, &head, &icfg, None) {
        Err(Error::Divergence { iteration, .. }) => assert!(iteration < 10),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.trace.len())),
    }
}

fn batch(labels: &[usize]) -> (Tensor<f32>, Vec<TokenMask>) {
    let imgs = Tensor::from_fn(&[labels.len(), 1, 4, 4], |i| (i / 16) as f32);
    (imgs, vec![TokenMask::ones(2); labels.len()])
}

#[test]
fn build_task_splits_by_generation_index() {
    let labels = [0, 1, 0, 1];
    let (imgs, masks) = batch(&labels);
    let (s, q) = build_task(&imgs, &masks, &labels, 2, 1, 1).unwrap();
    // image i is filled with the value i
    assert_eq!(s.images.data().iter().step_by(16).copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    assert_eq!(q.images.data().iter().step_by(16).copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
    assert_eq!(s.labels, vec![0, 1]);

    let labels: Vec<usize> = (0..80).map(|i| i % 5).collect();
    let (imgs, masks) = batch(&labels);
    let (s, q) = build_task(&imgs, &masks, &labels, 5, 1, 15).unwrap();
    assert_eq!((s.len(), q.len()), (5, 75));
    assert!(matches!(build_task(&imgs, &masks, &labels, 5, 1, 16), Err(Error::Count(_))));
}

#[test]
fn task_directory_roundtrip() {
    let labels = [0, 1, 0, 1, 0, 1];
    let (imgs, _) = batch(&labels);
    let masks: Vec<TokenMask> = (0..6).map(|i| TokenMask::from_positions(2, &[i % 4]).unwrap()).collect();
    let (support, query) = build_task(&imgs, &masks, &labels, 2, 1, 2).unwrap();
    let task = GeneratedTask {
        support_source: vec![0; support.len()],
        query_source: vec![0; query.len()],
        support,
        query,
        class_names: vec!["x".into(), "y".into()],
        source_ids: vec!["teacher-0".into()],
    };
    let dir = tempfile::tempdir().unwrap();
    write_task(dir.path(), &task).unwrap();
    assert_eq!(read_task(dir.path()).unwrap(), task);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["support"][0]["sparse_ratio"], 0.75);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn support_and_query_are_disjoint(n in 2usize..6, k in 1usize..4, q in 1usize..5, extra in 0usize..3, seed in 0u64..1000) {
        let per = k + q + extra;
        let mut labels: Vec<usize> = (0..n * per).map(|i| i % n).collect();
        let mut r = rng(seed);
        for i in (1..labels.len()).rev() {
            labels.swap(i, r.random_range(0..=i));
        }
        let imgs = Tensor::from_fn(&[labels.len(), 1, 2, 2], |i| (i / 4) as f32);
        let masks = vec![TokenMask::ones(1); labels.len()];
        let (s, qs) = build_task(&imgs, &masks, &labels, n, k, q).unwrap();
        let ids = |t: &Tensor<f32>| t.data().iter().step_by(4).map(|v| *v as usize).collect::<Vec<_>>();
        let (si, qi) = (ids(&s.images), ids(&qs.images));
        prop_assert!(si.iter().all(|i| !qi.contains(i)));
        prop_assert_eq!(si.len(), n * k);
        prop_assert_eq!(qi.len(), n * q);
        for c in 0..n {
            prop_assert_eq!(s.labels.iter().filter(|l| **l == c).count(), k);
        }
    }
}
