//! Central finite-difference checks of the hand-written backward pass.

#[path = "common/gradcheck.rs"]
mod gradcheck;

use gradcheck::{analytic, check_all_parameters, loss, problem, rel_err, STEP, TOL};
use liftkit::denoiser::{ChannelTokens, ConditioningMask};
use liftkit::rng::{normal, rng_from};

fn assert_parameters_pass(tokens: ChannelTokens) {
    let p = problem(tokens, ConditioningMask::default(), 21);
    let worst = check_all_parameters(&p);
    assert!(worst.len() > 20);
    for (name, err) in &worst {
        assert!(*err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_parameter_matches_finite_differences_flattened_tokens() {
    assert_parameters_pass(ChannelTokens::Flattened);
}

#[test]
fn every_parameter_matches_finite_differences_per_joint_tokens() {
    assert_parameters_pass(ChannelTokens::PerJoint);
}

#[test]
fn input_gradients_match_finite_differences() {
    let p = problem(ChannelTokens::Flattened, ConditioningMask::default(), 5);
    let (_, d_noisy, d_features) = analytic(&p);
    for i in 0..p.noisy.len() {
        let mut up = p.noisy.clone();
        let mut down = p.noisy.clone();
        up.as_slice_mut().unwrap()[i] += STEP;
        down.as_slice_mut().unwrap()[i] -= STEP;
        let numeric = (loss(&p, &p.model, &up, &p.features) - loss(&p, &p.model, &down, &p.features)) / (2.0 * STEP);
        let a = d_noisy.as_slice().unwrap()[i];
        assert!(rel_err(a, numeric) <= TOL, "noisy[{i}]: {a} vs {numeric}");
    }
    for b in 0..p.features.len() {
        for i in 0..p.features[b].len() {
            let mut up = p.features.clone();
            let mut down = p.features.clone();
            up[b].as_slice_mut().unwrap()[i] += STEP;
            down[b].as_slice_mut().unwrap()[i] -= STEP;
            let numeric = (loss(&p, &p.model, &p.noisy, &up) - loss(&p, &p.model, &p.noisy, &down)) / (2.0 * STEP);
            let a = d_features[b].as_slice().unwrap()[i];
            assert!(rel_err(a, numeric) <= TOL, "features[{b}][{i}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn random_directions_match_finite_differences() {
    let p = problem(ChannelTokens::Flattened, ConditioningMask::default(), 8);
    let (grads, _, _) = analytic(&p);
    let g: Vec<f64> = grads.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect();
    let mut rng = rng_from(99);
    for _ in 0..100 {
        let dir: Vec<f64> = (0..g.len()).map(|_| normal(&mut rng)).collect();
        let shifted = |sign: f64| {
            let mut m = p.model.clone();
            let mut k = 0;
            for t in m.tensors_mut() {
                for v in t.iter_mut() {
                    *v += sign * STEP * dir[k];
                    k += 1;
                }
            }
            loss(&p, &m, &p.noisy, &p.features)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP);
        let a: f64 = g.iter().zip(&dir).map(|(x, y)| x * y).sum();
        assert!(rel_err(a, numeric) <= TOL, "directional: {a} vs {numeric}");
    }
}

#[test]
fn masked_pose_channel_gets_no_feature_gradient() {
    let mask = ConditioningMask {
        context: true,
        pose: false,
    };
    let p = problem(ChannelTokens::Flattened, mask, 3);
    let (_, _, d_features) = analytic(&p);
    for f in &d_features {
        assert!(f.row(1).iter().all(|&v| v == 0.0));
        assert!(f.row(0).iter().any(|&v| v != 0.0));
    }
}
