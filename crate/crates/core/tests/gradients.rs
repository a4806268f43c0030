mod common;

use provico::heads::Architecture;
use provico::losses::{forward_batch, total_loss, total_loss_and_grad};
use provico::distributions::draw_noise;
use provico::numerics::{normal_vector, Rng};

use common::{random_labels, random_params, GradCase};

/// Coordinate-wise check over 20 parameter draws, skipping coordinates whose
/// analytic gradient is below 1e-8.
#[test]
fn twenty_draws_match_central_differences() {
    let case = GradCase {
        videos: 4,
        clips: 2,
        samples: 3,
        embed_dim: 5,
        feature_dim: 6,
        hidden: vec![7, 6],
        beta: 0.02,
    };
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let arch = Architecture {
            input_dim: case.feature_dim,
            hidden_dims: case.hidden.clone(),
            embed_dim: case.embed_dim,
        };
        let params = random_params(&mut rng, &arch);
        let videos: Vec<Vec<Vec<f64>>> = (0..case.videos)
            .map(|_| (0..case.clips).map(|_| normal_vector(&mut rng, case.feature_dim).unwrap()).collect())
            .collect();
        let refs: Vec<&[Vec<f64>]> = videos.iter().map(|v| v.as_slice()).collect();
        let noise: Vec<_> = (0..case.videos)
            .map(|_| draw_noise(&mut rng, case.samples, case.embed_dim).unwrap())
            .collect();
        let labels = random_labels(&mut rng, case.videos);
        let batch = forward_batch(&params, &refs, noise.clone()).unwrap();
        let (_, grad) = total_loss_and_grad(&batch, &labels, &params, case.beta).unwrap();
        let flat = params.flatten();
        let analytic = grad.flatten();
        // some LayerNorm directions are sharply curved; at 1e-5 the O(h^2)
        // truncation term alone can reach 1e-4 relative
        let h = 1e-6;
        let eval = |x: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(x).unwrap();
            let b = forward_batch(&p, &refs, noise.clone()).unwrap();
            total_loss(&b, &labels, &p, case.beta).unwrap().total
        };
        let mut probe = flat.clone();
        for i in 0..flat.len() {
            if analytic[i].abs() <= 1e-8 {
                continue;
            }
            probe[i] = flat[i] + h;
            let plus = eval(&probe);
            probe[i] = flat[i] - h;
            let minus = eval(&probe);
            probe[i] = flat[i];
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs());
            // absolute slack covers coordinates whose gradient is near the
            // finite-difference round-off floor
            assert!(
                rel < 1e-4 || (analytic[i] - fd).abs() < 1e-9,
                "seed {seed} coord {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }
}

#[test]
fn slope_and_offset_gradients() {
    let case = GradCase {
        videos: 4,
        clips: 2,
        samples: 5,
        embed_dim: 8,
        feature_dim: 6,
        hidden: vec![8],
        beta: 0.0,
    };
    for seed in 0..5 {
        let errs = common::gradient_errors(&case, 500 + seed, 1e-5);
        for (name, e) in errs.iter().filter(|(n, _)| n == "a_raw" || n == "b") {
            assert!(*e < 1e-4, "{name}: {e}");
        }
    }
}
