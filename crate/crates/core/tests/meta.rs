mod common;

use common::rng;
use metalora::inversion::{GeneratedTask, TaskSplit, TokenMask};
use metalora::lora::{fingerprint, ClassificationHead, LoRAAdapter};
use metalora::meta::{
    distill_step, embed, embed_support, episode_loss, interpolate_task, interpolation_step, meta_train, proto_predict,
    proto_probs, LogRecord, MetaLoRA, MetaTrainConfig, StepOptions, Teacher,
};
use metalora::tensor::{argmax, LrSchedule, Optimizer, Tensor};
use metalora::vit::{ViT, ViTConfig};
use metalora::Error;
use rand::Rng;

fn cfg() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 2, channels: 3, depth: 2, embed_dim: 16, num_heads: 2, mlp_ratio: 2 }
}

/// Images whose mean brightness encodes the class, plus noise.
fn split(c: &ViTConfig, labels: &[usize], seed: u64, grid_keep: Option<usize>) -> TaskSplit {
    let mut r = rng(seed);
    let numel = c.image_numel();
    let data: Vec<f32> = labels
        .iter()
        .flat_map(|&l| (0..numel).map(|_| l as f32 * 0.8 - 0.4 + r.random_range(-1.0..1.0)).collect::<Vec<_>>())
        .collect();
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&c.image_shape());
    let masks = labels
        .iter()
        .map(|_| match grid_keep {
            Some(k) => TokenMask::from_positions(c.grid(), &(0..k).map(|i| i * 2).collect::<Vec<_>>()).unwrap(),
            None => TokenMask::ones(c.grid()),
        })
        .collect();
    TaskSplit { images: Tensor::new(shape, data).unwrap(), masks, labels: labels.to_vec() }
}

fn task(c: &ViTConfig, names: [&str; 2], source: &str, seed: u64) -> GeneratedTask {
    let support = split(c, &[0, 1], seed, None);
    let query = split(c, &[0, 1, 0, 1, 0, 1], seed + 1, None);
    GeneratedTask {
        support_source: vec![0; 2],
        query_source: vec![0; 6],
        support,
        query,
        class_names: names.iter().map(|s| s.to_string()).collect(),
        source_ids: vec![source.to_string()],
    }
}

fn teacher_parts(c: &ViTConfig, names: &[String], seed: u64) -> (LoRAAdapter, ClassificationHead) {
    let a = LoRAAdapter::random(c, 2, seed).unwrap();
    let mut h = ClassificationHead::new(c.embed_dim, names.to_vec(), seed).unwrap();
    h.weight = h.weight.map(|v| v * 40.0);
    (a, h)
}

#[test]
fn one_shot_centers_are_the_embeddings() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 0).unwrap();
    let meta = MetaLoRA::new(&c, 4, 1).unwrap();
    let s = split(&c, &[0, 1, 2], 3, None);
    let protos = embed_support(&vit, &meta, &s, 3, false).unwrap();
    let e = embed(&vit, &meta, &s.images, None).unwrap();
    assert_eq!(protos.centers, e);

    let dup = TaskSplit {
        images: Tensor::stack(&[s.images.index_axis0(0), s.images.index_axis0(0), s.images.index_axis0(1)]).unwrap(),
        masks: s.masks[..3].to_vec(),
        labels: vec![0, 0, 1],
    };
    let p2 = embed_support(&vit, &meta, &dup, 2, false).unwrap();
    assert!(p2.centers.row(0).iter().zip(e.row(0)).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(matches!(embed_support(&vit, &meta, &dup, 3, false), Err(Error::Count(_))));
}

#[test]
fn three_shot_center_is_the_elementwise_mean() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 2).unwrap();
    let meta = MetaLoRA::new(&c, 4, 2).unwrap();
    let s = split(&c, &[0, 1, 0, 1, 0, 1], 9, None);
    let protos = embed_support(&vit, &meta, &s, 2, false).unwrap();
    let e = embed(&vit, &meta, &s.images, None).unwrap();
    for class in 0..2 {
        for d in 0..c.embed_dim {
            let mean = (0..3).map(|i| e.row(2 * i + class)[d] as f64).sum::<f64>() / 3.0;
            assert!((protos.centers.row(class)[d] as f64 - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn prototype_probability_oracles() {
    let centers = Tensor::from_rows(&[vec![0.0f64, 0.0], vec![3.0, 4.0], vec![-1.0, 2.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![0.5f64, -1.0]]).unwrap();
    let p = proto_probs(&q, &centers, false).unwrap();
    let d: Vec<f64> = (0..3).map(|i| ((0.5 - centers.row(i)[0]).powi(2) + (-1.0 - centers.row(i)[1]).powi(2)).sqrt()).collect();
    let z: f64 = d.iter().map(|x| (-x).exp()).sum();
    for i in 0..3 {
        assert!((p.data()[i] - (-d[i]).exp() / z).abs() < 1e-9);
    }

    let at_center = Tensor::from_rows(&[vec![3.0f64, 4.0]]).unwrap();
    let p = proto_probs(&at_center, &centers, false).unwrap();
    assert_eq!(argmax(p.data()), 1);
    assert!(p.data()[1] > p.data()[0] && p.data()[1] > p.data()[2]);

    let two = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![-1.0, 0.0]]).unwrap();
    let mid = Tensor::from_rows(&[vec![0.0f64, 5.0]]).unwrap();
    let p = proto_probs(&mid, &two, false).unwrap();
    assert_eq!(p.data()[0], p.data()[1]);
}

#[test]
fn probabilities_are_positive_normalized_and_translation_invariant() {
    let mut r = rng(4);
    for _ in 0..50 {
        let n = r.random_range(2..6);
        let centers = Tensor::from_fn(&[n, 8], |_| r.random_range(-3.0..3.0f64));
        let q = Tensor::from_fn(&[4, 8], |_| r.random_range(-3.0..3.0f64));
        let shift: Vec<f64> = (0..8).map(|_| r.random_range(-10.0..10.0)).collect();
        let p = proto_probs(&q, &centers, false).unwrap();
        let moved = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i] + shift[i % 8]);
        let p2 = proto_probs(&moved(&q), &moved(&centers), false).unwrap();
        for row in 0..4 {
            let s: f64 = p.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.row(row).iter().all(|v| *v > 0.0));
            assert_eq!(argmax(p.row(row)), argmax(p2.row(row)));
        }
        assert!(p.max_abs_diff(&p2) < 1e-9);
    }
}

#[test]
fn all_ones_masks_match_dense() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 5).unwrap();
    let mut meta = MetaLoRA::new(&c, 4, 5).unwrap();
    meta.adapter = LoRAAdapter::random(&c, 4, 6).unwrap();
    let s = split(&c, &[0, 1, 0], 1, None);
    let dense = proto_predict(&vit, &meta, &embed_support(&vit, &meta, &s, 2, false).unwrap(), &s.images, None, false).unwrap();
    let sparse = proto_predict(&vit, &meta, &embed_support(&vit, &meta, &s, 2, true).unwrap(), &s.images, Some(&s.masks), false)
        .unwrap();
    assert!(dense.max_abs_diff(&sparse) < 1e-6);
}

#[test]
fn zero_teacher_gives_nonnegative_loss_and_fixed_point_is_still() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 0).unwrap();
    let mut t = task(&c, ["a", "b"], "t0", 1);
    let (adapter, mut head) = teacher_parts(&c, &t.class_names, 3);
    head.weight = Tensor::zeros(head.weight.shape());
    let mut meta = MetaLoRA::new(&c, 4, 0).unwrap();
    let mut opt = Optimizer::sgd(0.1).unwrap();
    let s = distill_step(&vit, &mut meta, (&adapter, &head), &vit, &t, &mut opt, StepOptions::default(), None).unwrap();
    assert!(s.loss >= 0.0);

    // identical support images make the student uniform, matching the zero head
    let img = t.support.images.index_axis0(0);
    t.support.images = Tensor::stack(&[img.clone(), img]).unwrap();
    let mut meta = MetaLoRA::new(&c, 4, 0).unwrap();
    meta.adapter = LoRAAdapter::random(&c, 4, 8).unwrap();
    let before = meta.clone();
    let mut opt = Optimizer::adam(1e-2).unwrap();
    let s = distill_step(&vit, &mut meta, (&adapter, &head), &vit, &t, &mut opt, StepOptions::default(), None).unwrap();
    assert!(s.loss < 1e-6);
    let moved: f32 = meta
        .adapter
        .tensors()
        .iter()
        .zip(before.adapter.tensors())
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f32>())
        .sum::<f32>()
        .sqrt();
    assert!((moved as f64) < 1e-6 * 1e-2);
}

#[test]
fn distillation_checks_classes_and_leaves_the_teacher_alone() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 0).unwrap();
    let t = task(&c, ["a", "b"], "t0", 1);
    let (adapter, head) = teacher_parts(&c, &t.class_names, 3);
    let snapshot = (fingerprint(&vit), adapter.clone(), head.clone());
    let mut meta = MetaLoRA::new(&c, 4, 0).unwrap();
    let mut opt = Optimizer::adam(1e-2).unwrap();
    for _ in 0..3 {
        distill_step(&vit, &mut meta, (&adapter, &head), &vit, &t, &mut opt, StepOptions::default(), None).unwrap();
    }
    assert_eq!((fingerprint(&vit), adapter.clone(), head.clone()), snapshot);
    let (_, other) = teacher_parts(&c, &["x".to_string(), "y".to_string()], 3);
    assert!(matches!(
        distill_step(&vit, &mut meta, (&adapter, &other), &vit, &t, &mut opt, StepOptions::default(), None),
        Err(Error::Label(_))
    ));
}

#[test]
fn distillation_loss_decreases() {
    let c = cfg();
    let mut wins = 0;
    for seed in 0..10 {
        let vit = ViT::new(c.clone(), seed).unwrap();
        let t = task(&c, ["a", "b"], "t", seed + 10);
        let (adapter, head) = teacher_parts(&c, &t.class_names, seed + 20);
        let mut meta = MetaLoRA::new(&c, 4, seed).unwrap();
        let mut opt = Optimizer::adam(1e-2).unwrap();
        let mut losses = Vec::new();
        for _ in 0..51 {
            let s = distill_step(&vit, &mut meta, (&adapter, &head), &vit, &t, &mut opt, StepOptions::default(), None).unwrap();
            losses.push(s.loss);
        }
        wins += (losses[50] < losses[0]) as usize;
    }
    assert!(wins >= 9, "{} of 10 seeds decreased", wins);
}

#[test]
fn interpolation_step_behaviour() {
    let c = cfg();
    let mut wins = 0;
    for seed in 0..10 {
        let vit = ViT::new(c.clone(), seed).unwrap();
        let a = task(&c, ["husky", "sparrow"], "t0", seed);
        let b = task(&c, ["golden retriever", "wild horse"], "t1", seed + 50);
        let t = interpolate_task(&[&a, &b], 2, 1, 3, seed, false).unwrap();
        let mut meta = MetaLoRA::new(&c, 4, seed).unwrap();
        let mut opt = Optimizer::adam(1e-2).unwrap();
        let first = interpolation_step(&vit, &mut meta, &t, &mut opt, StepOptions::default(), None).unwrap().loss;
        for _ in 0..49 {
            interpolation_step(&vit, &mut meta, &t, &mut opt, StepOptions::default(), None).unwrap();
        }
        let last = interpolation_step(&vit, &mut meta, &t, &mut opt, StepOptions::default(), None).unwrap().loss;
        wins += (last < first) as usize;
    }
    assert!(wins >= 9, "{} of 10 seeds decreased", wins);
}

#[test]
fn queries_equal_to_supports_beat_chance_and_relabeling_is_symmetric() {
    let c = cfg();
    let vit = ViT::new(c.clone(), 1).unwrap();
    let meta = MetaLoRA::new(&c, 4, 1).unwrap();
    let mut t = task(&c, ["a", "b"], "t0", 2);
    t.query = t.support.clone();
    let loss = episode_loss(&vit, &meta, &t, StepOptions::default()).unwrap();
    assert!(loss < 2f64.ln());

    let t = task(&c, ["a", "b"], "t0", 3);
    let mut swapped = t.clone();
    for split in [&mut swapped.support, &mut swapped.query] {
        split.labels = split.labels.iter().map(|l| 1 - l).collect();
    }
    let a = episode_loss(&vit, &meta, &t, StepOptions::default()).unwrap();
    let b = episode_loss(&vit, &meta, &swapped, StepOptions::default()).unwrap();
    assert!((a - b).abs() < 1e-6);
}

#[test]
fn interpolation_mixes_sources() {
    let c = ViTConfig { image_size: 4, patch_size: 2, channels: 1, depth: 1, embed_dim: 4, num_heads: 1, mlp_ratio: 1 };
    let a = task(&c, ["husky", "sparrow"], "t0", 0);
    let b = task(&c, ["golden retriever", "wild horse"], "t1", 1);
    let d = task(&c, ["husky", "tabby"], "t2", 2);
    let mut saw_example = false;
    for seed in 0..1000 {
        let t = interpolate_task(&[&a, &b, &d], 3, 1, 2, seed, false).unwrap();
        let sources: std::collections::BTreeSet<usize> = t.support_source.iter().copied().collect();
        assert!(sources.len() >= 2);
        let names: std::collections::BTreeSet<&String> = t.class_names.iter().collect();
        assert_eq!(names.len(), 3);
        assert_eq!(t.support.labels.iter().copied().collect::<std::collections::BTreeSet<_>>().len(), 3);
        let two = interpolate_task(&[&a, &b], 2, 1, 1, seed, false).unwrap();
        let mut pair = two.class_names.clone();
        pair.sort();
        saw_example |= pair == ["golden retriever", "husky"];
    }
    assert!(saw_example);
    assert!(matches!(interpolate_task(&[&a], 2, 1, 1, 0, false), Err(Error::Count(_))));
    assert!(matches!(interpolate_task(&[&a, &d], 4, 1, 1, 0, false), Err(Error::Count(_))));
    assert!(interpolate_task(&[&a], 2, 1, 1, 0, true).is_ok());
}

fn teachers_fixture(c: &ViTConfig) -> (Vec<GeneratedTask>, Vec<(LoRAAdapter, ClassificationHead)>) {
    let names = [["a", "b"], ["c", "d"], ["e", "f"]];
    let tasks: Vec<GeneratedTask> = names.iter().enumerate().map(|(i, n)| task(c, *n, &format!("t{}", i), i as u64)).collect();
    let parts = tasks.iter().enumerate().map(|(i, t)| teacher_parts(c, &t.class_names, i as u64)).collect();
    (tasks, parts)
}

fn run(c: &ViTConfig, tasks: &[GeneratedTask], parts: &[(LoRAAdapter, ClassificationHead)], mcfg: &MetaTrainConfig) -> (MetaLoRA, Vec<LogRecord>, Vec<u8>) {
    let vit = ViT::new(c.clone(), 0).unwrap();
    let teachers: Vec<Teacher> = tasks
        .iter()
        .zip(parts)
        .enumerate()
        .map(|(i, (t, (a, h)))| Teacher { id: format!("t{}", i), adapter: a, head: h, task: t })
        .collect();
    let mut sink = Vec::new();
    let out = meta_train(&vit, &teachers, mcfg, Some(&mut sink)).unwrap();
    (out.meta, out.log, sink)
}

#[test]
fn branch_coverage_log_and_determinism() {
    let c = cfg();
    let (tasks, parts) = teachers_fixture(&c);
    let base = MetaTrainConfig { iterations: 12, schedule: LrSchedule::Constant { lr: 1e-2 }, seed: 3, ..Default::default() };

    let (_, log, _) = run(&c, &tasks, &parts, &MetaTrainConfig { p_interp: 0.0, ..base.clone() });
    assert!(log.iter().all(|r| r.branch == "distill"));
    let (_, log, _) = run(&c, &tasks, &parts, &MetaTrainConfig { p_interp: 1.0, ..base.clone() });
    assert!(log.iter().all(|r| r.branch == "interpolation"));

    let (m1, log1, sink) = run(&c, &tasks, &parts, &base);
    let (m2, log2, _) = run(&c, &tasks, &parts, &base);
    assert_eq!(m1, m2);
    assert_eq!(log1.iter().map(|r| r.loss).collect::<Vec<_>>(), log2.iter().map(|r| r.loss).collect::<Vec<_>>());
    let lines: Vec<LogRecord> =
        String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[5].iteration, 5);
    assert!(lines.iter().all(|r| r.step_flops > 0 && r.lr == 1e-2));
}

#[test]
fn sparse_masks_cut_logged_flops() {
    let c = ViTConfig { image_size: 24, patch_size: 4, channels: 3, depth: 2, embed_dim: 64, num_heads: 4, mlp_ratio: 4 };
    let (mut tasks, parts) = teachers_fixture(&c);
    for t in &mut tasks {
        for s in [&mut t.support, &mut t.query] {
            let fresh = split(&c, &s.labels, 0, Some(9));
            s.masks = fresh.masks;
        }
    }
    let base = MetaTrainConfig { iterations: 4, flip: true, seed: 1, ..Default::default() };
    let (_, dense, _) = run(&c, &tasks, &parts, &base);
    let (_, sparse, _) = run(&c, &tasks, &parts, &MetaTrainConfig { sparse: true, ..base });
    for (d, s) in dense.iter().zip(&sparse) {
        let change = s.step_flops as f64 / d.step_flops as f64 - 1.0;
        assert!((change + 0.74).abs() <= 0.02, "change {}", change);
    }
}

#[test]
fn empty_teacher_list_is_a_state_error() {
    let vit = ViT::new(cfg(), 0).unwrap();
    assert!(matches!(meta_train(&vit, &[], &MetaTrainConfig::default(), None), Err(Error::State(_))));
    let bad = MetaTrainConfig { p_interp: 1.5, ..Default::default() };
    assert!(matches!(meta_train(&vit, &[], &bad, None), Err(Error::Config(_))));
}

#[test]
fn layer_subset_and_backbone_flag() {
    let c = cfg();
    let (tasks, parts) = teachers_fixture(&c);
    let mcfg = MetaTrainConfig {
        iterations: 3,
        layers: Some(vec![1]),
        schedule: LrSchedule::Constant { lr: 1e-2 },
        ..Default::default()
    };
    let (m, _, _) = run(&c, &tasks, &parts, &mcfg);
    assert_eq!(m.layers, vec![false, true]);
    assert!(m.adapter.query[0].1.data().iter().all(|v| *v == 0.0));
    assert!(m.adapter.query[1].1.data().iter().any(|v| *v != 0.0));

    let vit = ViT::new(c.clone(), 0).unwrap();
    let teachers: Vec<Teacher> = tasks
        .iter()
        .zip(&parts)
        .map(|(t, (a, h))| Teacher { id: "t".into(), adapter: a, head: h, task: t })
        .collect();
    let out = meta_train(&vit, &teachers, &MetaTrainConfig { train_backbone: true, ..mcfg }, None).unwrap();
    assert_ne!(out.backbone.unwrap(), vit);
}
