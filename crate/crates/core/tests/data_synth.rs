use proptest::prelude::*;
use tokentrack::data::clip::{build_training_clip, crop_region, sample_video_clip, Jitter, SearchAnchor};
use tokentrack::data::io::{read_manifest, read_sequence, read_suite, write_sequence, write_suite};
use tokentrack::data::synth::{generate_sequence, Motion, SequenceSpec, SuiteSpec};
use tokentrack::{BoundingBox, Image, Modality, ModelConfig, Rng};

#[test]
fn same_seed_same_sequence() {
    let spec = SequenceSpec {
        distractors: 2,
        occlusions: 1,
        corruptions: 1,
        aux: Some(Modality::Depth),
        length: 40,
        ..SequenceSpec::default()
    };
    let a = generate_sequence(&spec, 42).unwrap();
    let b = generate_sequence(&spec, 42).unwrap();
    assert_eq!(a.boxes, b.boxes);
    assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x == y));
    let c = generate_sequence(&spec, 43).unwrap();
    assert_ne!(a.boxes, c.boxes);
}

#[test]
fn linear_motion_steps_by_the_velocity() {
    let spec = SequenceSpec {
        velocity: Some((1.0, 0.0)),
        noise: 0.0,
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 3).unwrap();
    let w = seq.boxes[0].width();
    let hi = 64.0 - w / 2.0;
    let mut bounced = false;
    for pair in seq.boxes.windows(2) {
        let (x0, y0) = pair[0].center();
        let (x1, y1) = pair[1].center();
        assert!((y1 - y0).abs() < 1e-9);
        if !bounced && x0 + 1.0 <= hi {
            assert!((x1 - x0 - 1.0).abs() < 1e-9);
        } else {
            bounced = true;
        }
    }
    assert!(bounced, "100 frames at 1 px/frame must reach the wall");
}

#[test]
fn static_events_vanish_after_the_first_frame() {
    let spec = SequenceSpec {
        velocity: Some((0.0, 0.0)),
        noise: 0.0,
        aux: Some(Modality::Event),
        length: 10,
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 4).unwrap();
    for f in &seq.frames[1..] {
        assert!(f.aux.as_ref().unwrap().data.iter().all(|&v| v == 0));
    }
    let moving = generate_sequence(
        &SequenceSpec {
            velocity: Some((2.0, 1.0)),
            ..spec
        },
        4,
    )
    .unwrap();
    assert!(moving.frames[3].aux.as_ref().unwrap().data.iter().any(|&v| v > 0));
}

#[test]
fn dark_windows_blank_rgb_but_not_auxiliary() {
    let spec = SequenceSpec {
        corruptions: 1,
        noise: 0.0,
        aux: Some(Modality::Thermal),
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 5).unwrap();
    let (a, b) = seq.scenario.corruptions[0];
    assert!(a >= 1 && b > a);
    for t in a..b {
        assert!(seq.is_corrupted(t));
        assert!(seq.frames[t].rgb.data.iter().all(|&v| v == 0));
        assert!(seq.frames[t].aux.as_ref().unwrap().data.iter().any(|&v| v > 100));
    }
    assert!(seq.frames[0].rgb.data.iter().any(|&v| v > 0));
}

#[test]
fn occluders_hide_the_target_during_their_window() {
    let spec = SequenceSpec {
        occlusions: 1,
        noise: 0.0,
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 6).unwrap();
    let (a, b) = seq.scenario.occlusions[0];
    let inside = |t: usize| {
        let (cx, cy) = seq.boxes[t].center();
        let img = &seq.frames[t].rgb;
        (0..3).map(|c| img.get(c, cy as usize, cx as usize)).collect::<Vec<_>>()
    };
    // the occluder is flat, so the target's center pixel matches across the window
    let first = inside(a);
    for t in a..b {
        assert!(seq.is_occluded(t));
        assert_eq!(inside(t), first);
    }
    assert!(!seq.is_occluded(b));
}

#[test]
fn indivisible_extent_is_rejected() {
    let spec = SequenceSpec {
        width: 60,
        ..SequenceSpec::default()
    };
    assert_eq!(generate_sequence(&spec, 1).unwrap_err().kind(), "data");
    assert!("teleport".parse::<Motion>().is_err());
}

#[test]
fn whole_sequence_clip_is_in_order() {
    let mut rng = Rng::new(7);
    let c = sample_video_clip(5, 3, 2, 400, &mut rng).unwrap();
    assert_eq!(c.refs, vec![0, 1, 2]);
    assert_eq!(c.search, vec![3, 4]);
    assert!(sample_video_clip(4, 3, 2, 400, &mut rng).is_err());
    assert!(sample_video_clip(10, 3, 2, 4, &mut rng).is_err());
    assert!(sample_video_clip(10, 0, 2, 10, &mut rng).is_err());
}

fn gradient_image(w: usize, h: usize) -> Image {
    let mut img = Image::new(3, h, w);
    for y in 0..h {
        for x in 0..w {
            img.set(0, y, x, (x * 4) as u8);
            img.set(1, y, x, (y * 4) as u8);
            img.set(2, y, x, 128);
        }
    }
    img
}

#[test]
fn centered_crop_round_trips_the_box() {
    let img = gradient_image(64, 64);
    let gt = BoundingBox::from_center(32.0, 32.0, 10.0, 10.0);
    let (crop, map) = crop_region(&img, Modality::Rgb, &gt, 2.0, 32).unwrap();
    assert_eq!((crop.width, crop.height), (32, 32));
    // side 20 px maps onto 32 px
    assert!((map.scale - 1.6).abs() < 1e-12);
    let in_crop = map.to_crop(&gt);
    assert!((in_crop.width() - 16.0).abs() < 1e-9);
    let back = map.to_frame(&in_crop);
    for (u, v) in [(back.x_min, gt.x_min), (back.y_min, gt.y_min), (back.x_max, gt.x_max), (back.y_max, gt.y_max)] {
        assert!((u - v).abs() < 0.51);
    }
    // the target occupies half the reference crop side and a fifth of the search crop side
    let (_, search) = crop_region(&img, Modality::Rgb, &gt, 5.0, 64).unwrap();
    assert!((search.to_crop(&gt).width() / 64.0 - 0.2).abs() < 1e-12);
    assert!((in_crop.width() / 32.0 - 0.5).abs() < 1e-12);
    assert!(crop_region(&img, Modality::Rgb, &BoundingBox::new(3.0, 3.0, 3.0, 9.0), 2.0, 32).is_err());
}

#[test]
fn corner_crops_replicate_edges() {
    let img = gradient_image(64, 64);
    let gt = BoundingBox::from_center(0.0, 0.0, 8.0, 8.0);
    let (crop, _) = crop_region(&img, Modality::Rgb, &gt, 4.0, 32).unwrap();
    // the top-left quarter of the crop lies outside the frame: it copies pixel (0, 0)
    let plane = 32 * 32;
    for v in 0..14 {
        for u in 0..14 {
            assert_eq!(crop.data[v * 32 + u], 0.0);
            assert_eq!(crop.data[plane + v * 32 + u], 0.0);
            assert!((crop.data[2 * plane + v * 32 + u] - 128.0 / 255.0).abs() < 1e-12);
        }
    }
}

#[test]
fn training_clip_targets_sit_inside_the_search_crop() {
    let cfg = ModelConfig::default();
    let spec = SequenceSpec {
        aux: Some(Modality::Depth),
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 8).unwrap();
    let mut rng = Rng::new(8);
    for anchor in [SearchAnchor::Own, SearchAnchor::Previous] {
        let clip = build_training_clip(&seq, &cfg, 400, Jitter::default(), anchor, true, &mut rng).unwrap();
        assert_eq!(clip.refs.len(), 3);
        assert_eq!(clip.searches.len(), 2);
        assert!(clip.indices.refs.last() < clip.indices.search.first());
        for (s, t) in clip.searches.iter().zip(&clip.targets) {
            assert_eq!(s.rgb.width, 64);
            assert_eq!(s.aux.as_ref().unwrap().modality, Modality::Depth);
            assert!(t.norm_box.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(t.heatmap[t.cell_index()], 1.0);
        }
    }
    assert!(build_training_clip(&generate_sequence(&SequenceSpec::default(), 8).unwrap(), &cfg, 400, Jitter::default(), SearchAnchor::Own, true, &mut rng).is_err());
}

#[test]
fn sequences_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SequenceSpec {
        length: 12,
        occlusions: 1,
        occlusion_len: (3, 4),
        corruptions: 1,
        corruption_len: (2, 3),
        aux: Some(Modality::Thermal),
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, 9).unwrap();
    write_sequence(&seq, &dir.path().join("one")).unwrap();
    let back = read_sequence(&dir.path().join("one")).unwrap();
    assert_eq!(back.frames, seq.frames);
    assert_eq!(back.aux, seq.aux);
    assert_eq!(back.scenario.occlusions, seq.scenario.occlusions);
    assert_eq!(back.scenario.corruptions, seq.scenario.corruptions);
    for (a, b) in back.boxes.iter().zip(&seq.boxes) {
        assert!((a.x_min - b.x_min).abs() < 1e-9 && (a.y_max - b.y_max).abs() < 1e-9);
    }
    let manifest = read_manifest(&dir.path().join("one")).unwrap();
    assert_eq!(manifest.len(), 12);
    assert_eq!(manifest[0].modality.as_deref(), Some("thermal"));
}

#[test]
fn suites_parse_generate_and_reload() {
    let suite = SuiteSpec::parse("count = 3\nlength = 8\nmotions = linear,random_walk\naux = depth,none\ndistractors = 0,1\n").unwrap();
    assert_eq!(suite.count, 3);
    let seqs = suite.generate(10).unwrap();
    assert_eq!(seqs[0].aux, Some(Modality::Depth));
    assert_eq!(seqs[1].aux, None);
    assert_eq!(seqs[1].scenario.motion, Motion::RandomWalk);
    assert_eq!(seqs, suite.generate(10).unwrap());
    let dir = tempfile::tempdir().unwrap();
    write_suite(&seqs, dir.path()).unwrap();
    let back = read_suite(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[2].frames, seqs[2].frames);
    assert!(SuiteSpec::parse("count = 3\nbogus = 1\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clip_indices_ascend_within_a_window(len in 5usize..200, range in 5usize..300, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let c = sample_video_clip(len, 3, 2, range, &mut rng).unwrap();
        let all: Vec<usize> = c.refs.iter().chain(&c.search).copied().collect();
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*all.last().unwrap() < len);
        prop_assert!(all.last().unwrap() - all[0] < range.min(len));
    }

    #[test]
    fn boxes_stay_inside_frames(seed in any::<u64>(), motion in prop::sample::select(vec![Motion::Linear, Motion::Sinusoidal, Motion::RandomWalk])) {
        let spec = SequenceSpec { motion, length: 30, speed: (0.5, 4.0), ..SequenceSpec::default() };
        let seq = generate_sequence(&spec, seed).unwrap();
        for b in &seq.boxes {
            prop_assert_eq!(b.clip(64.0, 64.0), *b);
        }
    }
}
