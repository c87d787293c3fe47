use tokentrack::data::synth::{generate_sequence, SequenceSpec, SyntheticSequence};
use tokentrack::tracker::{select_references, track_sequence, Tracker, TrackerOptions};
use tokentrack::verify::randomize_for_check;
use tokentrack::{BoundingBox, Modality, Model, ModelConfig, Task};

fn live_model(seed: u64) -> Model {
    let mut m = Model::new(ModelConfig::default()).unwrap();
    randomize_for_check(&mut m, seed);
    m
}

fn sequence(length: usize, aux: Option<Modality>, seed: u64) -> SyntheticSequence {
    let spec = SequenceSpec {
        length,
        aux,
        distractors: 1,
        ..SequenceSpec::default()
    };
    generate_sequence(&spec, seed).unwrap()
}

#[test]
fn init_holds_one_reference_and_no_token() {
    let model = live_model(1);
    let seq = sequence(4, None, 1);
    let mut t = Tracker::<f64>::new(&model, Task::Rgb, TrackerOptions::default()).unwrap();
    t.init(&seq.frames[0], None, seq.boxes[0]).unwrap();
    let s = t.state().unwrap();
    assert_eq!(s.memory.len(), 1);
    assert!(s.tokens.is_none());
    // first step feeds the empty token: zero content plus the role vector
    let r = t.step(&seq.frames[1], None).unwrap();
    let role = model.store.get(model.ids.tokenizer.role_token).data();
    assert_eq!(r.token_in.rgb.data(), role);
}

#[test]
fn zero_empty_token_passes_tokens_through_unchanged() {
    let mut model = live_model(2);
    model.store.get_mut(model.ids.tokenizer.role_token).data_mut().fill(0.0);
    let seq = sequence(101, None, 2);
    let mut t = Tracker::<f64>::new(&model, Task::Rgb, TrackerOptions::default()).unwrap();
    t.init(&seq.frames[0], None, seq.boxes[0]).unwrap();
    let mut prev = None;
    for f in &seq.frames[1..] {
        let r = t.step(f, None).unwrap();
        match &prev {
            None => assert!(r.token_in.rgb.data().iter().all(|&v| v == 0.0)),
            Some(p) => assert_eq!(&r.token_in, p),
        }
        prev = Some(r.token_out);
    }
}

#[test]
fn memory_is_capped_and_keeps_the_first_entry() {
    let model = live_model(3);
    let seq = sequence(12, None, 3);
    let opts = TrackerOptions {
        memory_capacity: 4,
        ..TrackerOptions::default()
    };
    let mut t = Tracker::<f32>::new(&model, Task::Rgb, opts.clone()).unwrap();
    t.init(&seq.frames[0], None, seq.boxes[0]).unwrap();
    for f in &seq.frames[1..] {
        t.step(f, None).unwrap();
        let s = t.state().unwrap();
        assert!(s.memory.len() <= 4);
        assert_eq!(s.memory[0].frame, 0);
        assert!(s.memory.windows(2).all(|w| w[0].frame < w[1].frame));
    }
    let frames: Vec<usize> = t.state().unwrap().memory.iter().map(|m| m.frame).collect();
    assert_eq!(frames, vec![0, 9, 10, 11]);
    assert!(Tracker::<f32>::new(&model, Task::Rgb, TrackerOptions { memory_capacity: 0, ..opts }).is_err());
}

#[test]
fn future_frames_do_not_change_the_past() {
    let model = live_model(4);
    let seq = sequence(30, Some(Modality::Depth), 4);
    let opts = TrackerOptions::default();
    let full = track_sequence::<f64>(&model, Task::Rgbd, &opts, &seq.frames, seq.aux, seq.boxes[0]).unwrap();
    let cut = track_sequence::<f64>(&model, Task::Rgbd, &opts, &seq.frames[..15], seq.aux, seq.boxes[0]).unwrap();
    assert_eq!(&full.boxes[..15], &cut.boxes[..]);
    assert_eq!(&full.scores[..15], &cut.scores[..]);
}

#[test]
fn tracking_is_deterministic() {
    let model = live_model(5);
    let seq = sequence(20, Some(Modality::Event), 5);
    let opts = TrackerOptions::default();
    let a = track_sequence::<f32>(&model, Task::Rgbe, &opts, &seq.frames, seq.aux, seq.boxes[0]).unwrap();
    let b = track_sequence::<f32>(&model, Task::Rgbe, &opts, &seq.frames, seq.aux, seq.boxes[0]).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.boxes.len(), 20);
    assert_eq!((a.boxes[0], a.scores[0]), (seq.boxes[0], 1.0));
}

#[test]
fn the_token_is_live() {
    let model = live_model(6);
    let seq = sequence(20, None, 6);
    let on = TrackerOptions::default();
    let off = TrackerOptions {
        token_propagation: false,
        ..on.clone()
    };
    let a = track_sequence::<f64>(&model, Task::Rgb, &on, &seq.frames, None, seq.boxes[0]).unwrap();
    let b = track_sequence::<f64>(&model, Task::Rgb, &off, &seq.frames, None, seq.boxes[0]).unwrap();
    assert_eq!(a.scores[1], b.scores[1], "the first step uses the empty token either way");
    assert_ne!(a.scores, b.scores);
}

#[test]
fn boxes_stay_inside_the_frame() {
    let model = live_model(7);
    let seq = sequence(25, None, 7);
    let opts = TrackerOptions {
        cosine_window: true,
        ..TrackerOptions::default()
    };
    let r = track_sequence::<f32>(&model, Task::Rgb, &opts, &seq.frames, None, seq.boxes[0]).unwrap();
    for (b, s) in r.boxes.iter().zip(&r.scores) {
        assert_eq!(b.clip(64.0, 64.0), *b);
        assert!(b.width() >= 2.0 && b.height() >= 2.0);
        assert!((0.0..=1.0).contains(s));
    }
}

#[test]
fn misuse_is_reported() {
    let model = live_model(8);
    let seq = sequence(3, Some(Modality::Thermal), 8);
    let mut t = Tracker::<f32>::new(&model, Task::Rgbt, TrackerOptions::default()).unwrap();
    assert_eq!(t.step(&seq.frames[1], seq.aux).unwrap_err().kind(), "track");
    assert!(t.init(&seq.frames[0], Some(Modality::Depth), seq.boxes[0]).is_err());
    assert!(t.init(&seq.frames[0], seq.aux, BoundingBox::new(60.0, 60.0, 70.0, 70.0)).is_err());
    t.init(&seq.frames[0], seq.aux, seq.boxes[0]).unwrap();
    let plain = sequence(3, None, 8);
    assert!(t.step(&plain.frames[1], None).is_err());
    // an rgb tracker ignores auxiliary frames it is handed
    let rgb = track_sequence::<f32>(&model, Task::Rgb, &TrackerOptions::default(), &seq.frames, seq.aux, seq.boxes[0]);
    assert!(rgb.is_ok());
}

#[test]
fn equal_interval_references() {
    assert_eq!(select_references(1, 3).unwrap(), vec![0, 0, 0]);
    assert_eq!(select_references(9, 3).unwrap(), vec![0, 4, 8]);
    assert_eq!(select_references(3, 3).unwrap(), vec![0, 1, 2]);
    for m in 4..40 {
        let s = select_references(m, 3).unwrap();
        assert_eq!((s[0], s[2]), (0, m - 1));
    }
    assert!(select_references(5, 0).is_err());
}
