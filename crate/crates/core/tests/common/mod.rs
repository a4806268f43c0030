#![allow(dead_code)]

use provico::distances::DistanceMatrix;
use provico::distributions::draw_noise;
use provico::heads::{Architecture, ModelParams};
use provico::losses::{forward_batch, total_loss, total_loss_and_grad};
use provico::mining::{mine_pairs, MiningMode, PairLabels};
use provico::numerics::{finite_diff_grad, normal_vector, Rng};

pub struct GradCase {
    pub videos: usize,
    pub clips: usize,
    pub samples: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
}

/// Random symmetric mining pattern with a few off-diagonal positives.
pub fn random_labels(rng: &mut Rng, b: usize) -> PairLabels {
    let mut m = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let v = rng.uniform();
            m[i * b + j] = v;
            m[j * b + i] = v;
        }
    }
    let dm = DistanceMatrix::new(b, m).unwrap();
    mine_pairs(&dm, MiningMode::Fixed, 0.4).unwrap()
}

/// Parameters away from their structured init so that LayerNorm affine,
/// `a_raw` and `b` all carry generic gradients.
pub fn random_params(rng: &mut Rng, arch: &Architecture) -> ModelParams {
    let mut p = ModelParams::init(arch, rng).unwrap();
    for x in p.ln_scale.iter_mut() {
        *x = 1.0 + 0.3 * rng.normal();
    }
    for x in p.ln_shift.iter_mut() {
        *x = 0.1 * rng.normal();
    }
    for x in p.sigma_head.bias.iter_mut() {
        *x = 0.3 * rng.normal();
    }
    p.a_raw = 0.5 + rng.uniform();
    p.b = rng.normal() * 0.5;
    p
}

/// Per-tensor relative error `||g - g_fd|| / max(||g_fd||, 1e-12)` of the
/// analytic gradient of the batch objective against central differences.
pub fn gradient_errors(case: &GradCase, seed: u64, h: f64) -> Vec<(String, f64)> {
    let mut rng = Rng::new(seed);
    let arch = Architecture {
        input_dim: case.feature_dim,
        hidden_dims: case.hidden.clone(),
        embed_dim: case.embed_dim,
    };
    let params = random_params(&mut rng, &arch);
    let videos: Vec<Vec<Vec<f64>>> = (0..case.videos)
        .map(|_| {
            (0..case.clips)
                .map(|_| normal_vector(&mut rng, case.feature_dim).unwrap())
                .collect()
        })
        .collect();
    let refs: Vec<&[Vec<f64>]> = videos.iter().map(|v| v.as_slice()).collect();
    let noise: Vec<Vec<Vec<f64>>> = (0..case.videos)
        .map(|_| draw_noise(&mut rng, case.samples, case.embed_dim).unwrap())
        .collect();
    let labels = random_labels(&mut rng, case.videos);

    let batch = forward_batch(&params, &refs, noise.clone()).unwrap();
    let (_, grad) = total_loss_and_grad(&batch, &labels, &params, case.beta).unwrap();
    let numeric = finite_diff_grad(
        |x| {
            let mut p = params.clone();
            p.assign_flat(x)?;
            let b = forward_batch(&p, &refs, noise.clone())?;
            Ok(total_loss(&b, &labels, &p, case.beta)?.total)
        },
        &params.flatten(),
        h,
    )
    .unwrap();

    let analytic = grad.flatten();
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, t) in params.tensor_names().into_iter().zip(params.tensors()) {
        let range = offset..offset + t.len();
        offset += t.len();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (a, n) in analytic[range.clone()].iter().zip(&numeric[range]) {
            diff += (a - n).powi(2);
            norm += n * n;
        }
        out.push((name, diff.sqrt() / norm.sqrt().max(1e-12)));
    }
    out
}
