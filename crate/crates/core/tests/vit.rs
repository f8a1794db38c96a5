mod common;

use common::{grad_check, randn, rng, weighted_sum};
use metalora::lora::LoRAAdapter;
use metalora::tensor::{Graph, Tensor, Var};
use metalora::vit::{
    cls_attention, flops_estimate, keep_count, layer_flops, plan_flops, top_tokens, PrunePlan, TokenSelection, ViT,
    ViTConfig, ViTVars,
};
use proptest::prelude::*;
use rand::Rng;

fn small_cfg() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 2, channels: 3, depth: 3, embed_dim: 16, num_heads: 2, mlp_ratio: 2 }
}

fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut shape = vec![batch];
    shape.extend_from_slice(&cfg.image_shape());
    Tensor::randn(&shape, 0.0, 1.0, &mut rng(seed))
}

#[test]
fn empty_plan_matches_all_keep_plan_exactly() {
    let cfg = small_cfg();
    for seed in 0..5 {
        let vit = ViT::<f32>::new(cfg.clone(), seed).unwrap();
        let x = images(&cfg, 3, seed + 100);
        let (a, _) = vit.infer(&x, None, None, TokenSelection::All).unwrap();
        let (b, _) = vit.infer(&x, None, Some(&PrunePlan::new()), TokenSelection::All).unwrap();
        let ones = PrunePlan::uniform(0..cfg.depth, 1.0).unwrap();
        let (c, out) = vit.infer(&x, None, Some(&ones), TokenSelection::All).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        assert_eq!(a.max_abs_diff(&c), 0.0);
        assert_eq!(out.kept_positions[0], (0..cfg.num_patches()).collect::<Vec<_>>());
    }
}

#[test]
fn zero_b_adapter_is_exact_identity() {
    let cfg = small_cfg();
    for seed in 0..5 {
        let vit = ViT::<f32>::new(cfg.clone(), seed).unwrap();
        let lora = LoRAAdapter::new(&cfg, 4, seed + 7).unwrap();
        let x = images(&cfg, 2, seed);
        let (a, _) = vit.infer(&x, None, None, TokenSelection::All).unwrap();
        let (b, _) = vit.infer(&x, Some(&lora), None, TokenSelection::All).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        let random = LoRAAdapter::random(&cfg, 4, seed).unwrap();
        let (c, _) = vit.infer(&x, Some(&random), None, TokenSelection::All).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }
}

#[test]
fn full_subset_matches_dense() {
    let cfg = small_cfg();
    let vit = ViT::<f32>::new(cfg.clone(), 3).unwrap();
    let x = images(&cfg, 2, 4);
    let all: Vec<Vec<usize>> = vec![(0..cfg.num_patches()).collect(); 2];
    let (a, _) = vit.infer(&x, None, None, TokenSelection::All).unwrap();
    let (b, _) = vit.infer(&x, None, None, TokenSelection::Subset(&all)).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-6);
}

#[test]
fn attention_records_are_distributions_and_pruning_keeps_top_tokens() {
    let cfg = small_cfg();
    let m0 = cfg.num_patches();
    for seed in 0..10 {
        let vit = ViT::<f32>::new(cfg.clone(), seed).unwrap();
        let x = images(&cfg, 2, seed + 50);
        let plan = PrunePlan::new().with(0, 0.5).unwrap().with(2, 0.3).unwrap();
        let (_, out) = vit.infer(&x, None, Some(&plan), TokenSelection::All).unwrap();
        for rec in &out.records {
            for row in &rec.a_cls {
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        // brute-force oracle for the first pruning step
        for b in 0..2 {
            let scores = &out.records[0].a_cls[b][1..];
            let k = keep_count(m0, 0.5);
            let mut expect: Vec<usize> = (0..m0).collect();
            expect.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
            expect.truncate(k);
            expect.sort();
            assert_eq!(out.records[1].a_cls[b].len(), k + 1);
            let surviving = &out.kept_positions[b];
            assert!(surviving.windows(2).all(|w| w[0] < w[1]));
            assert!(surviving.iter().all(|p| expect.contains(p)));
            assert_eq!(surviving.len(), keep_count(k, 0.3));
        }
        assert_eq!(out.token_counts, plan.token_counts(cfg.depth, m0));
    }
}

#[test]
fn hand_built_cls_attention_prunes_the_two_strongest_tokens() {
    // solve the softmax preimage: logits ln(a) along the first axis, scaled by √d
    let target = [0.1f64, 0.2, 0.3, 0.4];
    let d = 2usize;
    let keys = Tensor::from_rows(&target.iter().map(|a| vec![a.ln(), 0.0]).collect::<Vec<_>>()).unwrap();
    let q = [(d as f64).sqrt(), 0.0];
    let a = cls_attention(&q, &keys, d).unwrap();
    for (x, y) in a.iter().zip(target) {
        assert!((x - y).abs() < 1e-12);
    }
    let kept = top_tokens(&a[1..], keep_count(3, 2.0 / 3.0));
    // image tokens 2 and 3 in 1-based order
    assert_eq!(kept, vec![1, 2]);
}

#[test]
fn cls_attention_matches_direct_formula() {
    let mut r = rng(11);
    for _ in 0..20 {
        let n = r.random_range(1..9);
        let q: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let k = Tensor::from_fn(&[n, 4], |_| r.random_range(-2.0..2.0));
        let a = cls_attention(&q, &k, 4).unwrap();
        let logits: Vec<f64> = (0..n).map(|j| (0..4).map(|t| q[t] * k.row(j)[t]).sum::<f64>() / 2.0).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..n {
            assert!((a[j] - logits[j].exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn bright_patch_lands_on_its_token() {
    let cfg = ViTConfig { image_size: 16, patch_size: 4, channels: 1, depth: 1, embed_dim: 8, num_heads: 2, mlp_ratio: 2 };
    let mut vit = ViT::<f64>::new(cfg.clone(), 1).unwrap();
    vit.pos = Tensor::zeros(vit.pos.shape());
    vit.cls = Tensor::zeros(vit.cls.shape());
    let grid = cfg.grid();
    for target in [0usize, 5, 11, 15] {
        let (pr, pc) = (target / grid, target % grid);
        let img = Tensor::from_fn(&[1, 16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            if y / 4 == pr && x / 4 == pc { 5.0 } else { 0.0 }
        });
        let t = vit.patchify(&img).unwrap();
        let norms: Vec<f64> = (0..t.shape()[0]).map(|i| t.row(i).iter().map(|v| v * v).sum()).collect();
        let best = metalora::tensor::argmax(&norms);
        assert_eq!(((best - 1) / grid, (best - 1) % grid), (pr, pc));
    }
}

#[test]
fn zero_image_and_weights_give_position_encodings() {
    let cfg = ViTConfig { image_size: 16, patch_size: 8, channels: 3, depth: 1, embed_dim: 4, num_heads: 1, mlp_ratio: 1 };
    let mut vit = ViT::<f64>::new(cfg.clone(), 2).unwrap();
    vit.patch_w = Tensor::zeros(vit.patch_w.shape());
    let t = vit.patchify(&Tensor::zeros(&cfg.image_shape())).unwrap();
    assert_eq!(t.shape(), &[5, 4]);
    for i in 1..5 {
        assert_eq!(t.row(i), vit.pos.row(i));
    }
    assert!(vit.patchify(&Tensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn plan_beyond_depth_is_rejected() {
    let cfg = small_cfg();
    let vit = ViT::<f32>::new(cfg.clone(), 0).unwrap();
    let plan = PrunePlan::new().with(cfg.depth, 0.5).unwrap();
    assert!(vit.infer(&images(&cfg, 1, 0), None, Some(&plan), TokenSelection::All).is_err());
}

#[test]
fn quarter_keep_on_vit_b_shape() {
    let cfg = ViTConfig::vit_b16();
    let dense = flops_estimate(&cfg, &[197; 12]).unwrap();
    let pruned = flops_estimate(&cfg, &[50; 12]).unwrap();
    let d = 768u64;
    assert_eq!(pruned, 12 * (3 * 50 * d * d + 2 * 50 * 50 * d + 8 * 50 * d * d));
    assert!(pruned < dense);
    assert_eq!(keep_count(196, 0.25) + 1, 50);
}

/// One-layer D=8 model: analytic gradients w.r.t. image and every weight,
/// including a non-trivial adapter, agree with finite differences.
#[test]
fn one_layer_model_gradient_check() {
    let cfg = ViTConfig { image_size: 4, patch_size: 2, channels: 1, depth: 1, embed_dim: 8, num_heads: 2, mlp_ratio: 2 };
    for seed in 0..20 {
        let vit = ViT::<f64>::new(cfg.clone(), seed).unwrap();
        let lora = LoRAAdapter::<f64>::random(&cfg, 2, seed).unwrap();
        let mut inputs = vec![randn(&[2, 1, 4, 4], seed + 1000)];
        inputs.extend(vit.named_params().into_iter().map(|(_, t)| t.clone()));
        inputs.extend(lora.tensors().into_iter().cloned());
        let n_model = 6 + 16 * cfg.depth;
        let err = grad_check(&inputs, 1e-5, |g: &mut Graph<f64>, v: &[Var]| {
            let vars = ViTVars::from_vars(&v[1..1 + n_model], cfg.depth).unwrap();
            let l = &v[1 + n_model..];
            let lv = metalora::lora::LoraVars { query: vec![Some((l[0], l[1]))], value: vec![Some((l[2], l[3]))] };
            let out = vit.forward(g, &vars, v[0], Some(&lv), None, TokenSelection::All).unwrap();
            weighted_sum(g, out.cls, seed)
        });
        assert!(err < 1e-3, "seed {} rel err {:e}", seed, err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn formula_is_exact(depth in 1usize..6, d in 1usize..64, lens in proptest::collection::vec(1usize..300, 6)) {
        let cfg = ViTConfig { image_size: 4, patch_size: 2, channels: 1, depth, embed_dim: d, num_heads: 1, mlp_ratio: 4 };
        let lens = &lens[..depth];
        let expect: u64 = lens.iter().map(|&n| {
            let (n, d) = (n as u64, d as u64);
            3 * n * d * d + 2 * n * n * d + 8 * n * d * d
        }).sum();
        prop_assert_eq!(flops_estimate(&cfg, lens).unwrap(), expect);
    }

    #[test]
    fn more_pruning_never_costs_more(
        layer in 0usize..12,
        keep in 0.01f64..1.0,
        extra_layer in 0usize..12,
        extra_keep in 0.01f64..1.0,
    ) {
        let cfg = ViTConfig::vit_b16();
        let base = PrunePlan::new().with(layer, keep).unwrap();
        let more = base.clone().with(extra_layer, extra_keep.min(base.keep_at(extra_layer).unwrap_or(1.0))).unwrap();
        prop_assert!(plan_flops(&cfg, &base) <= plan_flops(&cfg, &PrunePlan::new()));
        prop_assert!(plan_flops(&cfg, &more) <= plan_flops(&cfg, &base));
        prop_assert!(layer_flops(197, 197, 768) >= layer_flops(197, 50, 768));
    }
}
