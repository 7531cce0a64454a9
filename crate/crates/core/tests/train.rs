use bowunida::autodiff::{ParamStore, Sgd, SgdConfig, Tape};
use bowunida::bownet::{images_to_tensor, Model, ModelConfig, ParamGroup, Want};
use bowunida::synthgen::{
    generate_dataset, procure_pretext, DomainStyle, Image, ImageSample, PretextSample, ShiftSpec,
};
use bowunida::train::{
    loss_em, train_run, train_step, EntropyThreshold, GradientRoutingPolicy, LossWeights, Schedule,
    StepBatch, Term, TermSet, TrainConfig, TrainData, TrainError,
};

const SIZE: usize = 16;

struct Fixture {
    source: Vec<ImageSample>,
    labels: Vec<usize>,
    target: Vec<ImageSample>,
    pre_s: Vec<PretextSample>,
    pre_t: Vec<PretextSample>,
    spec: ShiftSpec,
}

fn fixture(n: usize) -> Fixture {
    let spec = ShiftSpec::new(0..3, [0, 1, 5]).unwrap();
    let source = generate_dataset(&spec, &DomainStyle::clean_source(), n, 1, SIZE).unwrap().samples;
    let target = generate_dataset(&spec, &DomainStyle::shifted_target(), n, 2, SIZE).unwrap().samples;
    let labels = source
        .iter()
        .map(|s| spec.source_index(s.class_label.unwrap()).unwrap())
        .collect();
    let pre_s = procure_pretext(&source, 4, n, 3).unwrap();
    let pre_t = procure_pretext(&target, 4, n, 4).unwrap();
    Fixture { source, labels, target, pre_s, pre_t, spec }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: SIZE,
        widths: vec![4, 8, 8],
        adapt_layer: 2,
        vocab_size: 6,
        ..ModelConfig::default()
    }
}

fn plain_sgd(lr: f64) -> SgdConfig {
    SgdConfig { base_lr: lr, momentum: 0.0, weight_decay: 0.0, ..SgdConfig::default() }
}

fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}

fn pixels(v: &[ImageSample]) -> Vec<&Image> {
    v.iter().map(|s| &s.pixels).collect()
}

/// Runs one step of `terms` from a fresh copy of `model` and returns the
/// per-parameter deltas.
fn deltas(model: &Model, f: &Fixture, weights: &LossWeights, terms: TermSet) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let algo = EntropyThreshold { lambda: weights.lambda_target_entropy, rho: 0.9 };
    let policy = GradientRoutingPolicy::new(false);
    let mut opt = Sgd::new(plain_sgd(0.05));
    let (src, tgt) = (pixels(&f.source), pixels(&f.target));
    let (ps, pt) = (refs(&f.pre_s), refs(&f.pre_t));
    let batch = StepBatch {
        source: &src,
        source_labels: &f.labels,
        target: &tgt,
        pretext_source: &ps,
        pretext_target: &pt,
    };
    train_step(&mut m, &algo, &policy, weights, &mut opt, &batch, terms, 0).unwrap();
    diff(&model.params, &m.params)
}

fn diff(before: &ParamStore, after: &ParamStore) -> Vec<Vec<f64>> {
    before
        .iter()
        .zip(after.iter())
        .map(|(a, b)| a.tensor.values().iter().zip(b.tensor.values()).map(|(x, y)| y - x).collect())
        .collect()
}

fn model_with_vocab(f: &Fixture, seed: u64) -> Model {
    let mut m = Model::new(small_config(), f.spec.source_labels().len(), 4, seed).unwrap();
    m.calibrate_vocabulary(&pixels(&f.source)).unwrap();
    m
}

#[test]
fn each_term_leaves_parameters_outside_its_update_set_bit_unchanged() {
    let f = fixture(8);
    let model = model_with_vocab(&f, 5);
    let policy = GradientRoutingPolicy::new(false);
    let w = LossWeights::default();
    for (term, terms) in [
        (Term::Goal, TermSet::GOAL),
        (Term::Pretext, TermSet { goal: false, pretext: true, em: false }),
        (Term::Em, TermSet { goal: false, pretext: false, em: true }),
    ] {
        let d = deltas(&model, &f, &w, terms);
        let mut moved = 0;
        for (id, delta) in model.params.ids().zip(&d) {
            let group = model.group(id);
            if policy.updates(term, group) {
                moved += usize::from(delta.iter().any(|&x| x != 0.0));
            } else {
                assert!(
                    delta.iter().all(|&x| x == 0.0),
                    "{} moved {} ({group:?})",
                    term.name(),
                    model.params.get(id).name
                );
            }
        }
        assert!(moved > 0, "{} updated nothing", term.name());
    }
}

#[test]
fn goal_term_changes_backbone_and_goal_head_only() {
    let f = fixture(8);
    let model = model_with_vocab(&f, 6);
    let d = deltas(&model, &f, &LossWeights::default(), TermSet::GOAL);
    for (id, delta) in model.params.ids().zip(&d) {
        let changed = delta.iter().any(|&x| x != 0.0);
        match model.group(id) {
            ParamGroup::GoalHead => assert!(changed),
            ParamGroup::Vocabulary | ParamGroup::PostBlock | ParamGroup::PretextHead => assert!(!changed),
            ParamGroup::Backbone => {}
        }
    }
    let backbone_moved = model
        .params
        .ids()
        .zip(&d)
        .any(|(id, delta)| model.group(id) == ParamGroup::Backbone && delta.iter().any(|&x| x != 0.0));
    assert!(backbone_moved);
}

#[test]
fn zero_subsidiary_weights_leave_psi_and_pretext_head_unchanged() {
    let f = fixture(8);
    let model = model_with_vocab(&f, 7);
    let w = LossWeights { weight_em: 0.0, weight_pretext: 0.0, ..LossWeights::default() };
    let d = deltas(&model, &f, &w, TermSet::ALL);
    for (id, delta) in model.params.ids().zip(&d) {
        if matches!(
            model.group(id),
            ParamGroup::Vocabulary | ParamGroup::PostBlock | ParamGroup::PretextHead
        ) {
            assert!(delta.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn joint_step_is_the_sum_of_isolated_term_steps() {
    let f = fixture(8);
    let model = model_with_vocab(&f, 8);
    let w = LossWeights::default();
    let joint = deltas(&model, &f, &w, TermSet::ALL);
    let parts = [
        deltas(&model, &f, &w, TermSet::GOAL),
        deltas(&model, &f, &w, TermSet { goal: false, pretext: true, em: false }),
        deltas(&model, &f, &w, TermSet { goal: false, pretext: false, em: true }),
    ];
    // Each measured delta carries one rounding of θ + Δ, so the comparison
    // allows a few ulps of |θ| on top of the 1e-12 relative tolerance.
    for (i, (j, p)) in joint.iter().zip(model.params.iter()).enumerate() {
        for (k, (&x, &theta)) in j.iter().zip(p.tensor.values()).enumerate() {
            let s: f64 = parts.iter().map(|p| p[i][k]).sum();
            let tol = 1e-12 * x.abs().max(s.abs()) + 4.0 * f64::EPSILON * theta.abs();
            assert!((x - s).abs() <= tol, "param {i}[{k}]: {x} vs {s}");
        }
    }
}

#[test]
fn self_entropy_descends_on_a_frozen_backbone() {
    let f = fixture(6);
    let mut model = model_with_vocab(&f, 9);
    let imgs = pixels(&f.source);
    let mut opt = Sgd::new(plain_sgd(0.05));
    let vocab_ids = model.ids_in(|g| g == ParamGroup::Vocabulary);
    let mut first = None;
    let mut last = f64::INFINITY;
    for it in 0..100 {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |g| g == ParamGroup::Vocabulary);
        let x = tape.constant(images_to_tensor(&imgs));
        let want = Want { histogram_only: true, ..Want::default() };
        let h = model.forward(&mut tape, &p, x, want).unwrap().histogram.unwrap();
        let l = loss_em(&mut tape, h).unwrap();
        let v = tape.value(l).item();
        assert!(v < last + 1e-12, "entropy rose at step {it}: {last} -> {v}");
        first.get_or_insert(v);
        last = v;
        model.params.zero_grads();
        tape.backward(l).unwrap();
        tape.accumulate_into(&mut model.params);
        opt.step(&mut model.params, &vocab_ids, it);
    }
    assert!(last < first.unwrap());
}

fn train_config(iters: usize) -> TrainConfig {
    TrainConfig {
        model: small_config(),
        sgd: SgdConfig { total_iters: iters, ..SgdConfig::default() },
        weights: LossWeights::default(),
        schedule: Schedule::Alternating,
        batch_size: 4,
        log_every: 1,
        eval_every: 0,
    }
}

fn train_data(f: &Fixture) -> TrainData<'_> {
    TrainData {
        source: pixels(&f.source),
        source_labels: f.labels.clone(),
        num_classes: f.spec.source_labels().len(),
        target: pixels(&f.target),
        pretext_source: refs(&f.pre_s),
        pretext_target: refs(&f.pre_t),
        grid_size: 4,
    }
}

fn strip_wall_time(log: &[u8]) -> Vec<serde_json::Value> {
    std::str::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}

#[test]
fn training_is_deterministic() {
    let f = fixture(12);
    let cfg = train_config(6);
    let (mut l1, mut l2) = (Vec::new(), Vec::new());
    let (m1, o1, _) = train_run(&cfg, &train_data(&f), 3, &mut l1, None).unwrap();
    let (m2, o2, _) = train_run(&cfg, &train_data(&f), 3, &mut l2, None).unwrap();
    assert_eq!(m1.params, m2.params);
    assert_eq!(o1, o2);
    assert_eq!(strip_wall_time(&l1), strip_wall_time(&l2));
    let (m3, _, _) = train_run(&cfg, &train_data(&f), 4, &mut std::io::sink(), None).unwrap();
    assert_ne!(m1.params, m3.params);
}

#[test]
fn zero_iterations_return_the_initialization() {
    let f = fixture(12);
    let cfg = train_config(0);
    let (m, _, summary) = train_run(&cfg, &train_data(&f), 11, &mut std::io::sink(), None).unwrap();
    let mut init = Model::new(cfg.model.clone(), 3, 4, 11).unwrap();
    let warm: Vec<&Image> = pixels(&f.source).into_iter().take(32).chain(pixels(&f.target).into_iter().take(32)).collect();
    init.calibrate_vocabulary(&warm).unwrap();
    assert_eq!(summary.iterations, 0);
    assert!(summary.records.is_empty());
    assert_eq!(m.params, init.params);
}

#[test]
fn non_finite_loss_aborts_with_the_term_named() {
    let f = fixture(12);
    let cfg = train_config(3);
    let mut model = Model::new(cfg.model.clone(), 3, 4, 1).unwrap();
    let id = model.params.find("head.goal.weight").unwrap();
    model.params.get_mut(id).tensor.values_mut()[0] = f64::NAN;
    let algo = EntropyThreshold { lambda: 0.1, rho: 0.5 };
    let mut opt = Sgd::new(cfg.sgd.clone());
    let (src, tgt) = (pixels(&f.source), pixels(&f.target));
    let batch = StepBatch {
        source: &src,
        source_labels: &f.labels,
        target: &tgt,
        pretext_source: &[],
        pretext_target: &[],
    };
    let err = train_step(
        &mut model,
        &algo,
        &GradientRoutingPolicy::new(false),
        &cfg.weights,
        &mut opt,
        &batch,
        TermSet::GOAL,
        0,
    )
    .unwrap_err();
    match err {
        TrainError::NonFinite { term, iter, .. } => {
            assert!(term.contains("goal"));
            assert_eq!(iter, 0);
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn baseline_logs_omit_subsidiary_losses() {
    let f = fixture(12);
    let mut cfg = train_config(4);
    cfg.model.use_psi = false;
    cfg.weights.weight_em = 0.0;
    cfg.weights.weight_pretext = 0.0;
    let mut log = Vec::new();
    train_run(&cfg, &train_data(&f), 1, &mut log, None).unwrap();
    let steps: Vec<_> = strip_wall_time(&log).into_iter().filter(|v| v["event"] == "step").collect();
    assert_eq!(steps.len(), 4);
    for s in steps {
        let losses = s["losses"].as_object().unwrap();
        assert!(losses.contains_key("j"));
        assert!(!losses.contains_key("l_sn") && !losses.contains_key("l_tn") && !losses.contains_key("l_em"));
    }
}
