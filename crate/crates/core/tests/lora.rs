mod common;

use common::rng;
use metalora::lora::{
    average_adapters, decode_artifact, encode_artifact, fingerprint, load_artifact, load_model, save_artifact,
    save_model, ClassificationHead, LoRAAdapter,
};
use metalora::tensor::Tensor;
use metalora::vit::{TokenSelection, ViT, ViTConfig};
use metalora::{ArtifactError, Error};
use proptest::prelude::*;

fn cfg() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 2, embed_dim: 16, num_heads: 2, mlp_ratio: 2 }
}

fn head(d: usize, c: usize, seed: u64) -> ClassificationHead {
    ClassificationHead::new(d, (0..c).map(|i| format!("class{}", i)).collect(), seed).unwrap()
}

#[test]
fn fresh_adapter_changes_no_output() {
    let c = cfg();
    for seed in 0..10 {
        let vit = ViT::<f32>::new(c.clone(), seed).unwrap();
        let x = Tensor::randn(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(seed));
        let (a, _) = vit.infer(&x, None, None, TokenSelection::All).unwrap();
        let fresh = LoRAAdapter::new(&c, 1 + seed as usize % 4, seed).unwrap();
        let (b, _) = vit.infer(&x, Some(&fresh), None, TokenSelection::All).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }
}

#[test]
fn average_identities() {
    let c = cfg();
    let a = LoRAAdapter::<f32>::random(&c, 4, 1).unwrap();
    let avg = average_adapters(&[&a, &a, &a]).unwrap();
    assert_eq!(avg.tensors(), a.tensors());

    let mut neg = a.clone();
    for t in neg.params_mut() {
        *t = t.map(|v| -v);
    }
    let zero = average_adapters(&[&a, &neg]).unwrap();
    assert!(zero.tensors().iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn average_matches_manual_elementwise_mean() {
    let c = cfg();
    let ads: Vec<LoRAAdapter> = (0..3).map(|s| LoRAAdapter::random(&c, 4, 10 + s).unwrap()).collect();
    let avg = average_adapters(&ads.iter().collect::<Vec<_>>()).unwrap();
    for (i, t) in avg.tensors().into_iter().enumerate() {
        for (k, v) in t.data().iter().enumerate() {
            let manual: f64 = ads.iter().map(|a| a.tensors()[i].data()[k] as f64).sum::<f64>() / 3.0;
            assert_eq!(*v, manual as f32);
        }
    }
}

#[test]
fn average_rejects_mismatches() {
    let c = cfg();
    let a = LoRAAdapter::<f32>::new(&c, 4, 0).unwrap();
    let b = LoRAAdapter::<f32>::new(&c, 8, 0).unwrap();
    assert!(matches!(average_adapters(&[&a, &b]), Err(Error::Incompatible(_))));
    let mut deep = c.clone();
    deep.depth = 3;
    let d = LoRAAdapter::<f32>::new(&deep, 4, 0).unwrap();
    assert!(matches!(average_adapters(&[&a, &d]), Err(Error::Incompatible(_))));
    assert!(matches!(average_adapters::<f32>(&[]), Err(Error::Count(_))));
}

#[test]
fn artifact_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.lrcy");
    let mut a = LoRAAdapter::random(&cfg(), 4, 3).unwrap();
    a.meta.task_id = "teacher-3".into();
    a.meta.class_names = vec!["x".into(), "y".into()];
    let h = head(16, 2, 5);
    let extra = serde_json::json!({"accuracy": 0.97});
    save_artifact(&path, &a, Some(&h), extra.clone()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (a2, h2, e2) = load_artifact(&path).unwrap();
    assert_eq!(a2, a);
    assert_eq!(h2.as_ref(), Some(&h));
    assert_eq!(e2, extra);
    let again = encode_artifact(&a2, h2.as_ref(), e2).unwrap();
    assert_eq!(again, bytes);
    assert!(!dir.path().join("t.lrcy.tmp").exists());
}

#[test]
fn corrupt_payload_byte_fails_checksum() {
    let a = LoRAAdapter::random(&cfg(), 2, 3).unwrap();
    let mut bytes = encode_artifact(&a, Some(&head(16, 3, 1)), serde_json::Value::Null).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0x01;
    match decode_artifact(&bytes) {
        Err(Error::Artifact(e @ ArtifactError::Checksum { .. })) => assert_eq!(e.code(), 12),
        other => panic!("expected checksum error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn rank_eight_teacher_attaches_next_to_rank_four_student() {
    let c = cfg();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r8.lrcy");
    save_artifact(&path, &LoRAAdapter::random(&c, 8, 1).unwrap(), Some(&head(16, 2, 0)), serde_json::Value::Null)
        .unwrap();
    let (teacher, _, _) = load_artifact(&path).unwrap();
    assert_eq!(teacher.rank, 8);
    let student = LoRAAdapter::<f32>::new(&c, 4, 0).unwrap();
    let vit = ViT::<f32>::new(c.clone(), 0).unwrap();
    let x = Tensor::randn(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(0));
    let (t_out, _) = vit.infer(&x, Some(&teacher), None, TokenSelection::All).unwrap();
    let (s_out, _) = vit.infer(&x, Some(&student), None, TokenSelection::All).unwrap();
    assert_eq!(t_out.shape(), s_out.shape());
}

#[test]
fn model_weights_share_the_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vit.lrcy");
    let vit = ViT::<f32>::new(cfg(), 4).unwrap();
    save_model(&path, &vit).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, vit);
    assert_eq!(fingerprint(&back), fingerprint(&vit));
    assert_ne!(fingerprint(&ViT::<f32>::new(cfg(), 5).unwrap()), fingerprint(&vit));
    // an adapter artifact is not a model
    let apath = dir.path().join("a.lrcy");
    save_artifact(&apath, &LoRAAdapter::new(&cfg(), 2, 0).unwrap(), None, serde_json::Value::Null).unwrap();
    assert!(load_model(&apath).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn serialization_is_an_isomorphism(rank in 1usize..9, depth in 1usize..4, classes in 2usize..6, seed in 0u64..1000) {
        let mut c = cfg();
        c.depth = depth;
        let a = LoRAAdapter::random(&c, rank, seed).unwrap();
        let h = head(16, classes, seed);
        let bytes = encode_artifact(&a, Some(&h), serde_json::Value::Null).unwrap();
        let (a2, h2, _) = decode_artifact(&bytes).unwrap();
        prop_assert_eq!(&a2, &a);
        prop_assert_eq!(h2.as_ref(), Some(&h));
        prop_assert_eq!(encode_artifact(&a2, h2.as_ref(), serde_json::Value::Null).unwrap(), bytes);
    }

    #[test]
    fn average_is_permutation_invariant(n in 1usize..6, seed in 0u64..1000, rot in 0usize..6) {
        let c = cfg();
        let ads: Vec<LoRAAdapter> = (0..n).map(|i| LoRAAdapter::random(&c, 3, seed * 7 + i as u64).unwrap()).collect();
        let mut refs: Vec<&LoRAAdapter> = ads.iter().collect();
        let base = average_adapters(&refs).unwrap();
        refs.rotate_left(rot % n);
        refs.reverse();
        let shuffled = average_adapters(&refs).unwrap();
        prop_assert_eq!(base.tensors(), shuffled.tensors());
    }

    #[test]
    fn truncation_anywhere_is_detected(cut in 1usize..400) {
        let a = LoRAAdapter::random(&cfg(), 2, 1).unwrap();
        let bytes = encode_artifact(&a, None, serde_json::Value::Null).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_artifact(&bytes[..bytes.len() - cut]).is_err());
    }
}
