use captune::losses::{
    anti_focal_loss, bp_loss, ce_loss, focal_loss, grad_check, FrozenReference, LossOutput,
};
use captune::model::{ModelDims, ModelParams, TrainScope};
use captune::rl::sequence_nll;
use captune::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 100;
const EPS: f64 = 1e-5;
const BOUND: f64 = 1e-4;

const DIMS: ModelDims = ModelDims {
    vocab: 5,
    hidden: 3,
    feature: 4,
};

struct Instance {
    params: ModelParams,
    frozen: ModelParams,
    features: Vec<f64>,
    caption: Vec<usize>,
    beta: f64,
}

fn jitter(p: &mut ModelParams, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, _, g) in p.groups_mut() {
        for x in g.iter_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(DIMS, seed).unwrap();
    jitter(&mut params, &mut rng, 0.5);
    let mut frozen = ModelParams::init(DIMS, seed + 1000).unwrap();
    jitter(&mut frozen, &mut rng, 0.5);
    let features = (0..DIMS.feature).map(|_| rng.random_range(-1.0..1.0)).collect();
    let len = rng.random_range(1..=4);
    // any non-special id is a word; unk is allowed as a target
    let caption = (0..len).map(|_| rng.random_range(0..=DIMS.unk())).collect();
    Instance {
        params,
        frozen,
        features,
        caption,
        beta: rng.random_range(0.5..2.0),
    }
}

fn check_all<F>(name: &str, scope: TrainScope, loss: F)
where
    F: Fn(&Instance, &ModelParams) -> Result<LossOutput>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let inst = instance(seed);
        let err = grad_check(|p| loss(&inst, p), &inst.params, scope, EPS).unwrap();
        assert!(err <= BOUND, "{name}: seed {seed} relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("{name}: worst relative error {worst:e}");
}

#[test]
fn ce_gradient_matches_finite_differences() {
    check_all("ce", TrainScope::AllParams, |i, p| {
        ce_loss(p, &i.features, &i.caption, i.beta, TrainScope::AllParams)
    });
}

#[test]
fn bp_gradient_matches_finite_differences() {
    check_all("bp", TrainScope::AllParams, |i, p| {
        let frozen = FrozenReference::new(i.frozen.clone(), 0.7).unwrap();
        bp_loss(p, &frozen, &i.features, &i.caption, i.beta, TrainScope::AllParams)
    });
}

#[test]
fn focal_gradient_matches_finite_differences() {
    check_all("focal", TrainScope::AllParams, |i, p| {
        focal_loss(p, &i.features, &i.caption, i.beta, 2.0, TrainScope::AllParams)
    });
}

#[test]
fn anti_focal_gradient_matches_finite_differences() {
    check_all("anti-focal", TrainScope::AllParams, |i, p| {
        anti_focal_loss(p, &i.features, &i.caption, i.beta, 1.5, 0.8, TrainScope::AllParams)
    });
}

#[test]
fn sequence_log_likelihood_gradient_matches_finite_differences() {
    check_all("scst log-likelihood", TrainScope::AllParams, |i, p| {
        let mut tokens = i.caption.clone();
        tokens.push(DIMS.eos());
        sequence_nll(p, &i.features, &tokens, i.beta, TrainScope::AllParams)
    });
}

#[test]
fn classifier_scope_checks_only_classifier() {
    check_all("ce classifier-only", TrainScope::ClassifierOnly, |i, p| {
        ce_loss(p, &i.features, &i.caption, i.beta, TrainScope::ClassifierOnly)
    });
}

#[test]
fn corrupted_gradient_is_detected() {
    let inst = instance(3);
    let corrupt = |p: &ModelParams| {
        let mut out = ce_loss(p, &inst.features, &inst.caption, inst.beta, TrainScope::AllParams)?;
        // double the largest entry so the corruption cannot hide below the floor
        let (gi, k) = out
            .grads
            .groups()
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.2.iter().enumerate().map(move |(k, v)| (gi, k, v.abs())))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(gi, k, _)| (gi, k))
            .unwrap();
        out.grads.groups_mut()[gi].2[k] *= 2.0;
        Ok(out)
    };
    let err = grad_check(corrupt, &inst.params, TrainScope::AllParams, EPS).unwrap();
    assert!(err >= 0.3, "{err}");
}
