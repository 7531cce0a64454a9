use bowunida::autodiff::{Sgd, SgdConfig, Tape, Tensor};
use bowunida::bownet::{images_to_tensor, pas, soft_quantize, Model, ModelConfig, ParamGroup, Vocabulary, Want};
use bowunida::synthgen::{generate_dataset, DomainStyle, Image, ShiftSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        widths: vec![4, 8, 8],
        adapt_layer: 2,
        vocab_size: 5,
        ..ModelConfig::default()
    }
}

fn images(n: usize, seed: u64) -> Vec<Image> {
    let spec = ShiftSpec::new(0..3, 0..3).unwrap();
    generate_dataset(&spec, &DomainStyle::clean_source(), n, seed, 16)
        .unwrap()
        .samples
        .into_iter()
        .map(|s| s.pixels)
        .collect()
}

#[test]
fn taps_halve_spatially_and_follow_widths() {
    let mut cfg = config();
    cfg.use_psi = false;
    let m = Model::new(cfg, 3, 4, 1).unwrap();
    let imgs = images(2, 1);
    let refs: Vec<&Image> = imgs.iter().collect();
    for (layer, (&w, side)) in [4, 8, 8].iter().zip([8, 4, 2]).enumerate() {
        let t = m.tap_values(&refs, layer + 1).unwrap();
        assert_eq!(t.shape(), &[2, w, side, side]);
    }
}

#[test]
fn heads_have_the_configured_widths_and_are_deterministic() {
    let m = Model::new(config(), 3, 4, 2).unwrap();
    let imgs = images(3, 2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let g = m.goal_logits(&refs).unwrap();
    let p = m.pretext_logits(&refs).unwrap();
    assert!(g.iter().all(|r| r.len() == 3));
    assert!(p.iter().all(|r| r.len() == 4));
    assert_eq!(g, m.goal_logits(&refs).unwrap());
    let zero = Image::filled(16, 16, 0.0);
    assert_eq!(m.goal_logits(&[&zero]).unwrap(), m.goal_logits(&[&zero]).unwrap());
}

#[test]
fn histogram_rows_are_distributions() {
    let m = Model::new(config(), 3, 4, 3).unwrap();
    let imgs = images(4, 3);
    let refs: Vec<&Image> = imgs.iter().collect();
    let h = m.histograms(&refs).unwrap();
    let sh = h.shape().to_vec();
    let s = sh[2] * sh[3];
    for n in 0..sh[0] {
        for u in 0..s {
            let sum: f64 = (0..sh[1]).map(|k| h.values()[(n * sh[1] + k) * s + u]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

/// Without the post-block and with identity pooling on a 1×1 map, ψ(x)
/// reduces to the single histogram row φ¹(x) = softmax(Vᵀh).
#[test]
fn psi_reduces_to_the_histogram_row_on_a_single_location() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (k, d) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let rows: Vec<f64> = (0..k * d).map(|_| rng.gen_range(0.1..1.0)).collect();
        let v = Vocabulary::from_rows(k, d, rows.clone()).unwrap();
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, d, 1, 1], h.clone()).unwrap());
        let w = tape.constant(v.as_conv_weight());
        let z = tape.conv2d(f, w, None, 1, 0).unwrap();
        let phi = tape.softmax(z).unwrap();
        let psi = tape.global_avg_pool(phi).unwrap();
        let logits: Vec<f64> = rows.chunks(d).map(|r| r.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let reference = soft_quantize(&Tensor::new(&[1, d, 1, 1], h).unwrap(), &v).unwrap();
        for i in 0..k {
            assert!((tape.value(psi).values()[i] - e[i] / total).abs() < 1e-12);
            assert_eq!(tape.value(psi).values()[i], reference.values()[i]);
        }
    }
}

#[test]
fn one_goal_head_step_reduces_cross_entropy() {
    let mut m = Model::new(config(), 3, 4, 5).unwrap();
    let imgs = images(1, 5);
    let x = images_to_tensor(&[&imgs[0]]);
    let ids = m.ids_in(|g| g == ParamGroup::GoalHead);
    let loss = |m: &Model, backward: bool| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |g| g == ParamGroup::GoalHead);
        let xv = tape.constant(x.clone());
        let z = m.forward(&mut tape, &p, xv, Want { goal: true, ..Want::default() }).unwrap().goal_logits.unwrap();
        let l = tape.cross_entropy(z, &[1]).unwrap();
        if backward {
            tape.backward(l).unwrap();
        }
        (tape.value(l).item(), tape)
    };
    let (before, tape) = loss(&m, true);
    tape.accumulate_into(&mut m.params);
    let mut opt = Sgd::new(SgdConfig { base_lr: 1e-3, momentum: 0.0, weight_decay: 0.0, ..SgdConfig::default() });
    opt.step(&mut m.params, &ids, 0);
    let (after, _) = loss(&m, false);
    assert!(after < before, "{after} !< {before}");
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Rotating the nearest prototype towards the feature (keeping norms equal)
/// never lowers the largest histogram coordinate.
#[test]
fn closer_nearest_prototype_gives_sparser_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let (k, d) = (rng.gen_range(2..7), rng.gen_range(2..6));
        let r = rng.gen_range(0.5..4.0);
        let mut rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&raw).iter().map(|x| x * r).collect()
            })
            .collect();
        let h = normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let flat = |rows: &[Vec<f64>]| Vocabulary::from_rows(k, d, rows.concat()).unwrap();
        let v = flat(&rows);
        let nearest = (0..k)
            .max_by(|&a, &b| {
                let ca: f64 = rows[a].iter().zip(&h).map(|(x, y)| x * y).sum();
                let cb: f64 = rows[b].iter().zip(&h).map(|(x, y)| x * y).sum();
                ca.total_cmp(&cb)
            })
            .unwrap();
        let t = rng.gen_range(0.1..2.0);
        let moved: Vec<f64> = rows[nearest].iter().zip(&h).map(|(a, b)| a / r + t * b).collect();
        rows[nearest] = normalize(&moved).iter().map(|x| x * r).collect();
        let v2 = flat(&rows);
        let before = pas(&h, &v).unwrap().value;
        let after = pas(&h, &v2).unwrap().value;
        if after <= before {
            continue; // h was already aligned; nothing to compare
        }
        let f = Tensor::new(&[1, d, 1, 1], h.clone()).unwrap();
        let max1 = soft_quantize(&f, &v).unwrap().values().iter().cloned().fold(0.0, f64::max);
        let max2 = soft_quantize(&f, &v2).unwrap().values().iter().cloned().fold(0.0, f64::max);
        assert!(max2 >= max1 - 1e-12, "{max2} < {max1}");
    }
}

#[test]
fn vocabulary_calibration_keeps_prototypes_nonzero_and_rows_simplex() {
    let mut m = Model::new(config(), 3, 4, 7).unwrap();
    let imgs = images(8, 7);
    let refs: Vec<&Image> = imgs.iter().collect();
    m.calibrate_vocabulary(&refs).unwrap();
    let v = m.vocabulary().unwrap();
    assert!(v.prototypes().all(|p| p.iter().any(|&x| x != 0.0)));
    let norms: Vec<f64> = v.prototypes().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    assert!(norms.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
}
