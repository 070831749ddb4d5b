mod common;

use unlearn_lab::corpus::Split;
use unlearn_lab::model::{LabeledSequence, ModuleKind};
use unlearn_lab::tensor::{GradientMap, Tape};
use unlearn_lab::unlearn::{batch_objective, compute_alpha, run_unlearning, Method, UnlearnConfig};

fn batches() -> (Vec<LabeledSequence>, Vec<LabeledSequence>) {
    let (corpus, _) = common::fixture();
    let f = corpus.labeled_split(Split::Forget).unwrap().into_iter().take(4).collect();
    let r = corpus.labeled_split(Split::Retain).unwrap().into_iter().take(4).collect();
    (f, r)
}

fn gradient(method: Method, alpha: f64, forget: &[&LabeledSequence], retain: &[&LabeledSequence]) -> GradientMap {
    let (_, model) = common::fixture();
    let trainable = model.select_parameters((0, 1), &[ModuleKind::Mlp, ModuleKind::Mhsa]).unwrap();
    let tape = Tape::new();
    let reference = model.clone();
    let loss = batch_objective(&tape, model, Some(&reference), &trainable, method, alpha, forget, retain).unwrap();
    tape.backward(loss).unwrap()
}

fn nll_gradient(seqs: &[&LabeledSequence]) -> GradientMap {
    let (_, model) = common::fixture();
    let trainable = model.select_parameters((0, 1), &[ModuleKind::Mlp, ModuleKind::Mhsa]).unwrap();
    let tape = Tape::new();
    let loss = model.mean_sequence_nll(&tape, &trainable, seqs).unwrap();
    tape.backward(loss).unwrap()
}

#[test]
fn joint_gradient_is_the_weighted_sum() {
    let (f, r) = batches();
    let (f, r): (Vec<_>, Vec<_>) = (f.iter().collect(), r.iter().collect());
    let alpha = 1.7;
    let joint = gradient(Method::ConstrainedJoint, alpha, &f, &r);
    let gf = nll_gradient(&f);
    let gr = nll_gradient(&r);
    let mut worst: f64 = 0.0;
    for (k, g) in joint.iter() {
        let (a, b) = (gf.get(k).unwrap(), gr.get(k).unwrap());
        for i in 0..g.len() {
            let expected = -a.data()[i] + alpha * b.data()[i];
            worst = worst.max((g.data()[i] - expected).abs());
        }
    }
    assert!(worst <= 1e-10, "max deviation {worst}");
}

#[test]
fn kl_term_has_no_gradient_at_the_reference() {
    let (f, r) = batches();
    let (f, r): (Vec<_>, Vec<_>) = (f.iter().collect(), r.iter().collect());
    let kl = gradient(Method::KlMin, 1.0, &f, &r);
    let ga = gradient(Method::GradAscent, 1.0, &f, &r);
    for (k, g) in kl.iter() {
        let h = ga.get(k).unwrap();
        for (x, y) in g.data().iter().zip(h.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}

fn config(method: Method) -> UnlearnConfig {
    UnlearnConfig { method, layer_range: (0, 1), epochs: 2, batch_size: 4, ..UnlearnConfig::default() }
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (corpus, model) = common::fixture();
    let mut m = model.clone();
    let run = run_unlearning(&mut m, corpus, &UnlearnConfig { epochs: 0, ..config(Method::ConstrainedJoint) }).unwrap();
    assert_eq!(run.stats.len(), 1);
    assert_eq!(run.stats[0].delta_l, 0.0);
    for k in m.keys() {
        assert_eq!(m.param(k), model.param(k));
    }
}

#[test]
fn only_selected_parameters_change() {
    let (corpus, model) = common::fixture();
    for method in Method::ALL {
        let mut m = model.clone();
        let cfg = UnlearnConfig { kinds: vec![ModuleKind::Mlp], ..config(method) };
        let run = run_unlearning(&mut m, corpus, &cfg).unwrap();
        let selected = m.select_parameters(cfg.layer_range, &cfg.kinds).unwrap();
        assert_eq!(run.trainable_scalars, m.count_scalars(&selected));
        for k in m.keys() {
            if selected.contains(k) {
                assert_ne!(m.param(k), model.param(k));
            } else {
                assert_eq!(m.param(k), model.param(k), "{method}: {:?}", m.param_info(k));
            }
        }
    }
}

#[test]
fn stats_follow_the_alpha_rule() {
    let (corpus, model) = common::fixture();
    let mut m = model.clone();
    let cfg = UnlearnConfig { epochs: 4, ..config(Method::ConstrainedJoint) };
    let run = run_unlearning(&mut m, corpus, &cfg).unwrap();
    assert_eq!(run.stats.len(), 5);
    let base = run.baseline_retain_loss();
    for (i, s) in run.stats.iter().enumerate() {
        assert_eq!(s.epoch, i);
        assert_eq!(s.delta_l, s.retain_loss - base);
        let expected = if i == 0 { cfg.schedule.alpha_min } else { compute_alpha(run.stats[i - 1].delta_l, &cfg.schedule, i) };
        assert_eq!(s.alpha, expected);
    }
    assert!(run.stats[4].forget_loss > run.stats[0].forget_loss);
    assert_eq!(run.stats_jsonl().unwrap().lines().count(), 5);
}

#[test]
fn forget_floor_stops_early() {
    let (corpus, model) = common::fixture();
    let mut m = model.clone();
    let cfg = UnlearnConfig { epochs: 50, forget_floor: Some(1.0), ..config(Method::GradAscent) };
    let run = run_unlearning(&mut m, corpus, &cfg).unwrap();
    assert!(run.stopped_early);
    assert_eq!(run.stats.len(), 2);
}

#[test]
fn unlearning_is_deterministic() {
    let (corpus, model) = common::fixture();
    let cfg = config(Method::ConstrainedJoint);
    let (mut a, mut b) = (model.clone(), model.clone());
    let ra = run_unlearning(&mut a, corpus, &cfg).unwrap();
    let rb = run_unlearning(&mut b, corpus, &cfg).unwrap();
    assert_eq!(ra, rb);
    for k in a.keys() {
        assert_eq!(a.param(k), b.param(k));
    }
}

#[test]
fn invalid_ranges_are_rejected() {
    let (corpus, model) = common::fixture();
    let mut m = model.clone();
    assert!(run_unlearning(&mut m, corpus, &UnlearnConfig { layer_range: (0, 9), ..config(Method::GradDiff) }).is_err());
    assert!(run_unlearning(&mut m, corpus, &UnlearnConfig { batch_size: 0, ..config(Method::GradDiff) }).is_err());
}
