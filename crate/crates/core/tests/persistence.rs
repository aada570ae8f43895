use std::path::PathBuf;

use proptest::prelude::*;
use snad_core::inference::{build_result, infer_batch, infer_one, score_features, AnomalyResult, PostProcess};
use snad_core::io::{
    decode_checkpoint, decode_feature_file, decode_raw_map, encode_checkpoint, encode_feature_file,
    encode_raw_map, read_checkpoint, read_manifest, read_raw_map, write_anomaly_map, write_checkpoint,
    write_manifest, Checkpoint, GraySidecar, Manifest, ManifestSample, MapFormat, Split,
};
use snad_core::model::{AdaptorVariant, Model};
use snad_core::pipeline::{extract_local_features, HierarchyStack, PipelineConfig};
use snad_core::synth::{generate, write_dataset, SynthConfig};
use snad_core::tensors::{FeatureTensor, ScoreMap};
use snad_core::training::TrainConfig;
use snad_core::{Error, ParseError};

fn level(h: usize, w: usize, c: usize, salt: u32) -> FeatureTensor {
    FeatureTensor::from_fn(h, w, c, |y, x, ch| {
        let k = (y * 31 + x * 17 + ch * 7) as u32 ^ salt;
        (k % 1000) as f32 / 250.0 - 2.0
    })
    .unwrap()
}

fn stack_strategy() -> impl Strategy<Value = HierarchyStack> {
    prop::collection::btree_map(0u16..8, (1usize..6, 1usize..6, 1usize..5, any::<u32>()), 1..4).prop_map(|levels| {
        HierarchyStack::new(
            levels
                .into_iter()
                .map(|(i, (h, w, c, salt))| (i, level(h, w, c, salt)))
                .collect(),
        )
        .unwrap()
    })
}

fn variant() -> impl Strategy<Value = AdaptorVariant> {
    prop_oneof![
        Just(AdaptorVariant::Identity),
        Just(AdaptorVariant::Linear),
        Just(AdaptorVariant::Mlp)
    ]
}

/// A model whose every parameter and running statistic differs from its
/// initialisation.
fn perturbed_model(v: AdaptorVariant, c: usize, hd: usize, seed: u64) -> Model<f32> {
    let mut m = Model::new(PipelineConfig::default(), v, c, hd, seed).unwrap();
    let mut k = seed as f32;
    for p in m.adaptor.params_mut() {
        for x in p.iter_mut() {
            k += 0.37;
            *x += (k.sin()) * 0.1;
        }
    }
    for p in m.discriminator.params_mut() {
        for x in p.iter_mut() {
            k += 0.53;
            *x += k.cos() * 0.1;
        }
    }
    for (i, (rm, rv)) in m
        .discriminator
        .bn_running_mean
        .iter_mut()
        .zip(m.discriminator.bn_running_var.iter_mut())
        .enumerate()
    {
        *rm = i as f32 * 0.01 - 0.02;
        *rv = 1.0 + i as f32 * 0.05;
    }
    m.finalize();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_file_round_trip(stack in stack_strategy()) {
        let bytes = encode_feature_file(&stack).unwrap();
        let back = decode_feature_file(&bytes).unwrap();
        prop_assert_eq!(&back, &stack);
        prop_assert_eq!(encode_feature_file(&back).unwrap(), bytes);
    }

    #[test]
    fn feature_file_corruption_detected(stack in stack_strategy(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_feature_file(&stack).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_feature_file(&bytes).is_err());
    }

    #[test]
    fn feature_file_truncation_detected(stack in stack_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_feature_file(&stack).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(decode_feature_file(&bytes[..n]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(v in variant(), c in 1usize..10, hd in 1usize..10, seed in 0u64..1000, with_cfg in any::<bool>()) {
        let ck = Checkpoint {
            model: perturbed_model(v, c, hd, seed),
            train_config: with_cfg.then(|| TrainConfig { seed, epochs: 7, ..TrainConfig::default() }),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn raw_map_round_trip(
        (h, w) in (1usize..8, 1usize..8),
        data in prop::collection::vec(-50.0f32..50.0, 64),
        out in (1usize..20, 1usize..20),
        smoothed_score in any::<bool>(),
    ) {
        let raw = ScoreMap::new(h, w, data[..h * w].to_vec()).unwrap();
        let post = PostProcess { score_after_smoothing: smoothed_score, ..PostProcess::new(out.0, out.1) };
        let result = build_result(raw, &post).unwrap();
        let back = decode_raw_map(&encode_raw_map(&result).unwrap()).unwrap();
        prop_assert_eq!(back, result);
    }
}

#[test]
fn feature_file_rejects_bad_magic() {
    let mut bytes = encode_feature_file(&HierarchyStack::single(2, level(2, 2, 2, 0))).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode_feature_file(&bytes), Err(ParseError::BadMagic { .. })));
}

#[test]
fn feature_file_rejects_trailing_bytes() {
    let bytes = encode_feature_file(&HierarchyStack::single(2, level(2, 2, 2, 0))).unwrap();
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0, 0, 0, 0]);
    assert!(decode_feature_file(&longer).is_err());
}

fn stacks(n: usize, c2: usize) -> Vec<HierarchyStack> {
    (0..n)
        .map(|i| {
            HierarchyStack::new(vec![
                (2, level(6, 5, c2, i as u32 * 3)),
                (3, level(3, 3, c2, i as u32 * 3 + 1)),
            ])
            .unwrap()
        })
        .collect()
}

#[test]
fn checkpoint_file_round_trip_gives_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.snck");
    let model = perturbed_model(AdaptorVariant::Mlp, 8, 6, 3);
    write_checkpoint(
        &Checkpoint {
            model: model.clone(),
            train_config: None,
        },
        &path,
    )
    .unwrap();
    let loaded = read_checkpoint(&path).unwrap().model;
    let post = PostProcess::new(24, 20);
    let data = stacks(5, 4);
    let a = infer_batch(&model, &data, &model.pipeline, &post).unwrap();
    let b = infer_batch(&loaded, &data, &loaded.pipeline, &post).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(&x.raw_map), bits(&y.raw_map));
        assert_eq!(bits(&x.map), bits(&y.map));
        assert_eq!(x.image_score.to_bits(), y.image_score.to_bits());
    }
}

fn bits(m: &ScoreMap) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn scores_do_not_depend_on_batch_composition() {
    let model = perturbed_model(AdaptorVariant::Linear, 8, 5, 8);
    let post = PostProcess::new(12, 10);
    let data = stacks(6, 4);
    let together = infer_batch(&model, &data, &model.pipeline, &post).unwrap();
    for (i, s) in data.iter().enumerate() {
        let alone = infer_one(&model, s, &model.pipeline, &post).unwrap();
        assert_eq!(bits(&alone.raw_map), bits(&together[i].raw_map));
    }
    let reversed: Vec<_> = data.iter().rev().cloned().collect();
    let back = infer_batch(&model, &reversed, &model.pipeline, &post).unwrap();
    for (i, r) in back.iter().rev().enumerate() {
        assert_eq!(bits(&r.map), bits(&together[i].map));
    }

    // all locations of all images scored as one block
    let locals: Vec<FeatureTensor> = data.iter().map(|s| extract_local_features(s, &model.pipeline).unwrap()).collect();
    let mut joined = Vec::new();
    for l in &locals {
        joined.extend_from_slice(l.data());
    }
    let rows = locals.len() * locals[0].locations();
    let block = FeatureTensor::new(rows, 1, 8, joined).unwrap();
    let all = score_features(&model, &block, false).unwrap();
    let per_image: Vec<u32> = together.iter().flat_map(|r| bits(&r.raw_map)).collect();
    assert_eq!(bits(&all), per_image);
}

#[test]
fn unfinalized_model_refuses_inference() {
    let model = Model::new(PipelineConfig::default(), AdaptorVariant::Linear, 8, 4, 0).unwrap();
    let err = infer_one(&model, &stacks(1, 4)[0], &model.pipeline, &PostProcess::new(4, 4)).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn anomaly_map_files() {
    let dir = tempfile::tempdir().unwrap();
    let raw = ScoreMap::new(2, 3, vec![0.0, 1.0, 2.0, -1.0, 0.5, 3.0]).unwrap();
    let result = build_result(raw, &PostProcess::new(8, 12)).unwrap();
    let stem = dir.path().join("sample");
    let written = write_anomaly_map(&result, &stem, MapFormat::Both).unwrap();
    let names: Vec<_> = written.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["sample.snam", "sample.png", "sample.json"]);

    let back: AnomalyResult = read_raw_map(&dir.path().join("sample.snam")).unwrap();
    assert_eq!(back, result);
    assert_eq!(back.image_score, 3.0);

    let img = image::open(dir.path().join("sample.png")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (12, 8));
    let side: GraySidecar = serde_json::from_slice(&std::fs::read(dir.path().join("sample.json")).unwrap()).unwrap();
    let step = (side.max - side.min) / 255.0;
    for (px, &v) in img.pixels().zip(result.map.data()) {
        assert!((side.reconstruct(px.0[0]) - v).abs() <= step / 2.0 + 1e-6);
    }
}

fn sample(id: &str, split: Split, label: u8, feature: &str) -> ManifestSample {
    ManifestSample {
        id: id.into(),
        split,
        label,
        feature_path: PathBuf::from(feature),
        mask_path: None,
    }
}

/// Bypasses the validation done by `write_manifest`.
fn write_raw(m: &Manifest, path: &std::path::Path) {
    std::fs::write(path, serde_json::to_vec(m).unwrap()).unwrap();
}

#[test]
fn manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.snft"), encode_feature_file(&stacks(1, 2)[0]).unwrap()).unwrap();
    let path = dir.path().join("manifest.json");

    let good = Manifest::new("cat", [16, 16], vec![sample("a", Split::Train, 0, "a.snft")]);
    write_manifest(&good, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back.samples, good.samples);
    assert_eq!(back.resolve(&back.samples[0].feature_path), dir.path().join("a.snft"));

    let leaky = Manifest::new("cat", [16, 16], vec![sample("a", Split::Train, 1, "a.snft")]);
    write_raw(&leaky, &path);
    assert!(matches!(read_manifest(&path), Err(Error::Protocol(_))));

    let dup = Manifest::new(
        "cat",
        [16, 16],
        vec![sample("a", Split::Train, 0, "a.snft"), sample("a", Split::Test, 0, "a.snft")],
    );
    write_raw(&dup, &path);
    assert!(matches!(read_manifest(&path), Err(Error::Validation(_))));

    let missing = Manifest::new("cat", [16, 16], vec![sample("b", Split::Test, 0, "b.snft")]);
    write_raw(&missing, &path);
    assert!(matches!(read_manifest(&path), Err(Error::Validation(_))));
}

#[test]
fn synthetic_dataset_bytes_are_reproducible() {
    let cfg = SynthConfig {
        n_train: 6,
        n_test: 6,
        grid_h: 6,
        grid_w: 6,
        channels: 8,
        seed: 42,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&cfg, &generate(&cfg).unwrap(), a.path()).unwrap();
    write_dataset(&cfg, &generate(&cfg).unwrap(), b.path()).unwrap();
    let mut files = Vec::new();
    for sub in ["", "features", "masks"] {
        for e in std::fs::read_dir(a.path().join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                files.push(p.strip_prefix(a.path()).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() > 12);
    for f in files {
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap(), "{f:?}");
    }
}
