//! Analytic gradients against central finite differences.

use iat_core::corpus::History;
use iat_core::objectives::{iat_gradient, nll};
use iat_core::seqmodel::WeightedExample;
use iat_core::{Model, ModelConfig, ModelRole, Parameters, Utterance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize) -> (History, Utterance) {
    let turns = rng.random_range(1..=3);
    let mut utt = |max: usize| -> Utterance { (0..rng.random_range(1..=max)).map(|_| rng.random_range(5..vocab)).collect() };
    let history = (0..turns).map(|_| utt(4)).collect();
    (history, utt(4))
}

/// Central differences of `f` with respect to every coordinate.
fn numeric_gradient(model: &Model, f: impl Fn(&Model) -> f64) -> Parameters {
    let mut probe = model.clone();
    let mut out = Parameters::zeros(model.config());
    let names: Vec<&str> = model.params().tensors().iter().map(|(n, _)| *n).collect();
    for (k, _) in names.iter().enumerate() {
        let len = model.params().tensors()[k].1.len();
        for i in 0..len {
            let orig = model.params().tensors()[k].1.data()[i];
            probe.params_mut().tensors_mut()[k].1.data_mut()[i] = orig + STEP;
            let up = f(&probe);
            probe.params_mut().tensors_mut()[k].1.data_mut()[i] = orig - STEP;
            let down = f(&probe);
            probe.params_mut().tensors_mut()[k].1.data_mut()[i] = orig;
            out.tensors_mut()[k].1.data_mut()[i] = (up - down) / (2.0 * STEP);
        }
    }
    out
}

/// Per tensor: max |analytic - numeric| over max(|analytic|, |numeric|)
/// across the tensor's coordinates.
fn tensor_errors(analytic: &Parameters, numeric: &Parameters) -> Vec<(&'static str, f64)> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| {
            let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = a.data().iter().chain(n.data()).map(|x| x.abs()).fold(0.0, f64::max);
            (name, if scale == 0.0 { diff } else { diff / scale })
        })
        .collect()
}

fn check_role(role: ModelRole) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        let model = Model::random(ModelConfig::new(7, 3, 4).with_role(role), 100 + pair).unwrap();
        let (history, response) = random_pair(&mut rng, 7);
        let (_, target) = model.scoring_pair(&history, &response).unwrap();
        let weights: Vec<f64> = (0..target.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let analytic = model
            .backward(&[WeightedExample { history: &history, response: &response, weights: &weights }])
            .unwrap();
        let numeric = numeric_gradient(&model, |m| {
            let lp = m.sequence_log_probs(&history, &response).unwrap();
            lp.iter().zip(&weights).map(|(l, w)| l * w).sum()
        });
        for (name, err) in tensor_errors(&analytic, &numeric) {
            assert!(err < 1e-5, "{role:?} pair {pair} tensor {name}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    eprintln!("{role:?}: worst relative error {worst:e}");
}

#[test]
fn forward_role_gradients_match_finite_differences() {
    check_role(ModelRole::Forward);
}

#[test]
fn backward_role_gradients_match_finite_differences() {
    check_role(ModelRole::Backward);
}

#[test]
fn response_lm_gradients_match_finite_differences() {
    check_role(ModelRole::ResponseLm);
}

#[test]
fn iat_gradient_matches_frozen_scalar_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let model = Model::random(ModelConfig::new(7, 3, 4), 40 + trial).unwrap();
        let (history, response) = random_pair(&mut rng, 7);
        let (perturbed, _) = random_pair(&mut rng, 7);
        let (grads, rec) = iat_gradient(&model, &history, &perturbed, &response, 1.0).unwrap();
        assert_eq!(rec.reward, nll(&model, &perturbed, &response).unwrap() - nll(&model, &history, &response).unwrap());
        let (r, p) = (rec.reward, rec.penalty);
        let numeric = numeric_gradient(&model, |m| {
            -r * nll(m, &history, &response).unwrap() - p * nll(m, &perturbed, &response).unwrap()
        });
        // directional derivative along a random direction
        let mut dir = Parameters::zeros(model.config());
        for (_, t) in dir.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let dot = |a: &Parameters| -> f64 {
            a.tensors()
                .iter()
                .zip(dir.tensors())
                .map(|((_, x), (_, d))| x.data().iter().zip(d.data()).map(|(u, v)| u * v).sum::<f64>())
                .sum()
        };
        let (da, dn) = (dot(&grads), dot(&numeric));
        assert!((da - dn).abs() <= 1e-5 * da.abs().max(dn.abs()), "trial {trial}: {da} vs {dn}");
    }
}
