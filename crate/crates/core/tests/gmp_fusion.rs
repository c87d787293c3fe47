use proptest::prelude::*;
use tokentrack::model::gmp::{gmp_forward, token_attention, GmpOutput};
use tokentrack::model::{head_input, Ctx};
use tokentrack::tensor::gradcheck::{grad_check, GradCheckOptions};
use tokentrack::verify::randomize_for_check;
use tokentrack::{Model, ModelConfig, Rng, Tape, Tensor};

fn random(rows: usize, dim: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(&[rows, dim], |_| rng.normal(0.0, 1.0))
}

struct Inputs {
    f_rgb: Tensor<f64>,
    f_aux: Tensor<f64>,
    t_rgb: Tensor<f64>,
    t_aux: Tensor<f64>,
}

impl Inputs {
    fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = cfg.search_tokens();
        Self {
            f_rgb: random(n, cfg.dim, &mut rng),
            f_aux: random(n, cfg.dim, &mut rng),
            t_rgb: random(cfg.token_len, cfg.dim, &mut rng),
            t_aux: random(cfg.token_len, cfg.dim, &mut rng),
        }
    }

    fn swapped(&self) -> Self {
        Self {
            f_rgb: self.f_aux.clone(),
            f_aux: self.f_rgb.clone(),
            t_rgb: self.t_aux.clone(),
            t_aux: self.t_rgb.clone(),
        }
    }
}

/// Values of every recorded perceiver tensor, by field.
struct Run {
    out: Tensor<f64>,
    attention: Vec<Tensor<f64>>,
    attended: Vec<Tensor<f64>>,
    gated: Vec<Tensor<f64>>,
}

fn run(model: &Model, x: &Inputs) -> Run {
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let vars: Vec<_> = [&x.f_rgb, &x.f_aux, &x.t_rgb, &x.t_aux]
        .iter()
        .map(|t| tape.constant((*t).clone()).unwrap())
        .collect();
    let mut ctx = Ctx::new(&mut tape, &bound);
    let g: GmpOutput = gmp_forward(&mut ctx, &model.ids.gmp, &model.config, vars[0], vars[1], vars[2], vars[3]).unwrap();
    let read = |vs: &[_]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
    Run {
        out: tape.value(g.out).clone(),
        attention: read(&g.attention),
        attended: read(&g.attended),
        gated: read(&g.gated),
    }
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

#[test]
fn output_shape_and_layer_count() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let r = run(&model, &Inputs::new(&model.config, 1));
    assert_eq!(r.out.shape(), &[64, 64]);
    assert_eq!(r.attention.len(), 3);
    assert_eq!(r.attention[0].shape(), &[4, 64, 2]);
}

#[test]
fn gate_is_identity_at_init() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let r = run(&model, &Inputs::new(&model.config, 2));
    for (a, g) in r.attended.iter().zip(&r.gated) {
        assert_eq!(a.data(), g.data());
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut model = Model::new(ModelConfig::default()).unwrap();
    randomize_for_check(&mut model, 3);
    let r = run(&model, &Inputs::new(&model.config, 3));
    for w in &r.attention {
        for row in w.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn duplicated_tokens_match_single_key_attention() {
    let mut model = Model::new(ModelConfig::default()).unwrap();
    randomize_for_check(&mut model, 4);
    let cfg = &model.config;
    let mut rng = Rng::new(4);
    let x = random(cfg.search_tokens(), cfg.dim, &mut rng);
    let t = random(1, cfg.dim, &mut rng);
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let xv = tape.constant(x).unwrap();
    let tv = tape.constant(t).unwrap();
    let both = tape.concat(&[tv, tv], 0).unwrap();
    let mut ctx = Ctx::new(&mut tape, &bound);
    let layer = &model.ids.gmp.layers[0];
    let (doubled, _) = token_attention(&mut ctx, layer, cfg, xv, both).unwrap();
    let (single, w) = token_attention(&mut ctx, layer, cfg, xv, tv).unwrap();
    // one key: every weight is exactly 1
    assert!(tape.value(w).data().iter().all(|&p| p == 1.0));
    assert!(max_diff(tape.value(doubled), tape.value(single)) < 1e-10);
}

fn swap_embed_halves(model: &mut Model) {
    let d = model.config.dim;
    let w = model.store.get_mut(model.ids.gmp.embed.w).data_mut();
    // rows 0..d read the rgb half of the joint input, rows d..2d the auxiliary half
    let (top, bottom) = w.split_at_mut(d * d);
    top.swap_with_slice(&mut bottom[..d * d]);
}

#[test]
fn swapping_streams_permutes_the_embedding() {
    let mut model = Model::new(ModelConfig::default()).unwrap();
    randomize_for_check(&mut model, 5);
    let x = Inputs::new(&model.config, 5);
    let a = run(&model, &x);
    swap_embed_halves(&mut model);
    let b = run(&model, &x.swapped());
    assert!(max_diff(&a.out, &b.out) < 1e-10);
}

#[test]
fn symmetric_embedding_ignores_stream_order() {
    let mut model = Model::new(ModelConfig::default()).unwrap();
    randomize_for_check(&mut model, 6);
    let d = model.config.dim;
    {
        let w = model.store.get_mut(model.ids.gmp.embed.w).data_mut();
        let (top, bottom) = w.split_at_mut(d * d);
        bottom[..d * d].copy_from_slice(top);
    }
    let x = Inputs::new(&model.config, 6);
    let a = run(&model, &x);
    let b = run(&model, &x.swapped());
    assert!(max_diff(&a.out, &b.out) < 1e-10);
    assert!(max_diff(&a.out, &run(&model, &Inputs::new(&model.config, 7)).out) > 1e-3);
}

#[test]
fn perceiver_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    randomize_for_check(&mut model, 8);
    let x = Inputs::new(&model.config, 8);
    let family: Vec<_> = model.store.ids_with_prefix("gmp.").collect();
    let values: Vec<Tensor<f64>> = family.iter().map(|&id| model.store.get(id).clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = model
                .store
                .bind_with(tape, |id| family.iter().position(|&f| f == id).map(|k| vars[k]))
                .unwrap();
            let ins: Vec<_> = [&x.f_rgb, &x.f_aux, &x.t_rgb, &x.t_aux]
                .iter()
                .map(|t| tape.constant((*t).clone()).unwrap())
                .collect();
            let mut ctx = Ctx::new(tape, &bound);
            let g = gmp_forward(&mut ctx, &model.ids.gmp, &model.config, ins[0], ins[1], ins[2], ins[3]).unwrap();
            let sq = tape.mul(g.out, g.out)?;
            tape.sum(sq)
        },
        &values,
        GradCheckOptions {
            samples: 60,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{:?}", report.worst());
}

#[test]
fn mismatched_streams_are_rejected() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let x = Inputs::new(&model.config, 9);
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let f = tape.constant(x.f_rgb.clone()).unwrap();
    let short = tape.constant(Tensor::zeros(&[8, 64])).unwrap();
    let t = tape.constant(x.t_rgb.clone()).unwrap();
    let mut ctx = Ctx::new(&mut tape, &bound);
    assert!(gmp_forward(&mut ctx, &model.ids.gmp, &model.config, f, short, t, t).is_err());
}

#[test]
fn head_input_routing() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let x = Inputs::new(&model.config, 10);
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false).unwrap();
    let f = tape.constant(x.f_rgb.clone()).unwrap();
    let a = tape.constant(x.f_aux.clone()).unwrap();
    let t = tape.constant(x.t_rgb.clone()).unwrap();
    let u = tape.constant(x.t_aux.clone()).unwrap();
    assert_eq!(head_input(&[f], None).unwrap(), f);
    assert!(head_input(&[f, a], None).is_err());
    assert!(head_input(&[], None).is_err());
    let mut ctx = Ctx::new(&mut tape, &bound);
    let g = gmp_forward(&mut ctx, &model.ids.gmp, &model.config, f, a, t, u).unwrap();
    assert_eq!(head_input(&[f, a], Some(&g)).unwrap(), g.out);
    assert_eq!(tape.shape(g.out), &[64, 64]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_inputs_keep_shape_and_normalization(seed in any::<u64>(), tokens in 1usize..4) {
        let cfg = ModelConfig {
            dim: 16,
            heads: 2,
            token_len: tokens,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg).unwrap();
        randomize_for_check(&mut model, seed);
        let r = run(&model, &Inputs::new(&model.config, seed));
        prop_assert_eq!(r.out.shape(), &[64, 16]);
        for w in &r.attention {
            for row in w.data().chunks(2 * tokens) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
