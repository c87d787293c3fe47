use proptest::prelude::*;
use tokentrack::model::tokenizer::{make_temporal_token, tokenize_frame};
use tokentrack::model::{Ctx, Role};
use tokentrack::{FrameTensor, Modality, Model, ModelConfig, Rng, Tape};

fn random_frame(modality: Modality, size: usize, seed: u64) -> FrameTensor {
    let mut rng = Rng::new(seed);
    let data = (0..3 * size * size).map(|_| rng.uniform()).collect();
    FrameTensor::new(modality, size, size, data).unwrap()
}

fn tokens(model: &Model, frame: &FrameTensor, role: Role, index: usize) -> (Vec<usize>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let mut ctx = Ctx::new(&mut tape, &bound);
    let v = tokenize_frame(&mut ctx, &model.ids.tokenizer, &model.config, frame, role, index).unwrap();
    (tape.shape(v).to_vec(), tape.value(v).data().to_vec())
}

#[test]
fn desk_token_counts() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let (s, _) = tokens(&model, &random_frame(Modality::Rgb, 64, 1), Role::Search, 0);
    assert_eq!(s, vec![64, 64]);
    let (r, _) = tokens(&model, &random_frame(Modality::Rgb, 32, 2), Role::Reference, 2);
    assert_eq!(r, vec![16, 64]);
}

#[test]
fn full_scale_geometry() {
    let full = ModelConfig::full_scale();
    assert_eq!(full.search_tokens(), 576);
    assert_eq!(full.ref_tokens(), 144);
    // same geometry with a narrow width so the tables stay small
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        gmp_layers: 1,
        gate_layers: vec![0],
        ..full
    };
    let model = Model::new(cfg).unwrap();
    let (s, _) = tokens(&model, &random_frame(Modality::Rgb, 384, 3), Role::Search, 0);
    assert_eq!(s, vec![576, 8]);
    let (r, _) = tokens(&model, &random_frame(Modality::Depth, 192, 4), Role::Reference, 0);
    assert_eq!(r, vec![144, 8]);
}

#[test]
fn tokenizing_twice_is_identical() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let f = random_frame(Modality::Thermal, 64, 5);
    assert_eq!(tokens(&model, &f, Role::Search, 0), tokens(&model, &f, Role::Search, 0));
}

#[test]
fn auxiliary_modalities_share_one_embedder() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
    let embedders = names.iter().filter(|n| n.starts_with("tokenizer.") && n.ends_with(".w")).count();
    assert_eq!(embedders, 2, "one rgb and one shared auxiliary embedder: {names:?}");

    let base = random_frame(Modality::Depth, 64, 6);
    let mut outs = Vec::new();
    for m in Modality::AUX {
        let f = FrameTensor::new(m, 64, 64, base.data.clone()).unwrap();
        outs.push(tokens(&model, &f, Role::Search, 0).1);
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
    let rgb = FrameTensor::new(Modality::Rgb, 64, 64, base.data.clone()).unwrap();
    assert_ne!(tokens(&model, &rgb, Role::Search, 0).1, outs[0]);
}

#[test]
fn single_channel_data_is_replicated() {
    let planar: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
    let f = FrameTensor::from_planar(Modality::Thermal, 1, 4, 4, &planar).unwrap();
    assert_eq!(f.data.len(), 48);
    for c in 0..3 {
        assert_eq!(&f.data[c * 16..(c + 1) * 16], &planar[..]);
    }
}

#[test]
fn indivisible_or_wrong_extent_is_rejected() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let mut ctx = Ctx::new(&mut tape, &bound);
    let odd = FrameTensor::new(Modality::Rgb, 60, 60, vec![0.0; 3 * 60 * 60]).unwrap();
    let err = tokenize_frame(&mut ctx, &model.ids.tokenizer, &model.config, &odd, Role::Search, 0).unwrap_err();
    assert_eq!(err.kind(), "model");
    let small = random_frame(Modality::Rgb, 32, 7);
    assert!(tokenize_frame(&mut ctx, &model.ids.tokenizer, &model.config, &small, Role::Search, 0).is_err());
    assert!(tokenize_frame(&mut ctx, &model.ids.tokenizer, &model.config, &small, Role::Reference, 3).is_err());
    assert!("infrared".parse::<Modality>().is_err());
}

#[test]
fn empty_token_is_zero_plus_role() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let mut ctx = Ctx::new(&mut tape, &bound);
    let a = make_temporal_token(&mut ctx, &model.ids.tokenizer, &model.config).unwrap();
    let b = make_temporal_token(&mut ctx, &model.ids.tokenizer, &model.config).unwrap();
    assert_eq!(tape.shape(a), &[1, 64]);
    let role = model.store.get(model.ids.tokenizer.role_token).data().to_vec();
    let content: Vec<f64> = tape.value(a).data().iter().zip(&role).map(|(t, r)| t - r).collect();
    assert!(content.iter().all(|&c| c == 0.0));
    assert_eq!(tape.value(a).data(), tape.value(b).data());
}

#[test]
fn reference_frames_get_distinct_rows() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let f = random_frame(Modality::Rgb, 32, 8);
    let a = tokens(&model, &f, Role::Reference, 0).1;
    let b = tokens(&model, &f, Role::Reference, 1).1;
    assert_ne!(a, b);
    let off = Model::new(ModelConfig {
        frame_embedding: false,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(tokens(&off, &f, Role::Reference, 0).1, tokens(&off, &f, Role::Reference, 2).1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_count_is_area_over_patch_squared(p in prop::sample::select(vec![2usize, 4, 8]), rg in 1usize..5, sg in 1usize..7) {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            gmp_layers: 1,
            gate_layers: vec![0],
            patch: p,
            ref_size: rg * p,
            search_size: sg * p,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let (s, _) = tokens(&model, &random_frame(Modality::Event, sg * p, 9), Role::Search, 0);
        prop_assert_eq!(s, vec![sg * sg, 8]);
        let (r, _) = tokens(&model, &random_frame(Modality::Rgb, rg * p, 10), Role::Reference, 0);
        prop_assert_eq!(r, vec![rg * rg, 8]);
    }
}
