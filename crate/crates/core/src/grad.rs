//! Loss gradients and per-sample parameter Jacobians.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{FrozenStats, GradTargets, ModelState, Network, Phase, Recorded, StatsSource};
use crate::params::ParamVector;
use crate::tensor::Tensor;

/// Losses the training and attack code differentiate. Both are averaged
/// over the batch.
#[derive(Clone, Copy, Debug)]
pub enum Loss<'a> {
    /// Softmax cross-entropy against integer labels.
    CrossEntropy(&'a [usize]),
    /// `Σ_k (f_k(x) − t_k)²` per sample, `t` laid out like the logits.
    Mse(&'a [f64]),
}

fn attach_loss(rec: &mut Recorded, loss: Loss<'_>) -> Result<crate::autodiff::NodeId> {
    match loss {
        Loss::CrossEntropy(labels) => rec.tape.softmax_cross_entropy(rec.logits, labels),
        Loss::Mse(target) => rec.tape.mse(rec.logits, target),
    }
}

/// Loss value and its gradient with respect to the parameters.
pub fn grad_params(net: &Network, state: &ModelState, x: &Tensor, loss: Loss<'_>, phase: Phase) -> Result<(f64, ParamVector)> {
    let mut rec = net.record(
        state,
        x.clone(),
        StatsSource::Phase(phase),
        GradTargets {
            params: true,
            input: false,
        },
    )?;
    let root = attach_loss(&mut rec, loss)?;
    let grads = rec.tape.backward(root, &[1.0])?;
    let mut out = ParamVector::zeros(net.layout().clone());
    rec.gather_param_grads(&grads, net.layout(), out.data_mut());
    Ok((rec.tape.value(root).item(), out))
}

/// Loss value and its gradient with respect to the input batch.
pub fn grad_input(net: &Network, state: &ModelState, x: &Tensor, loss: Loss<'_>, phase: Phase) -> Result<(f64, Tensor)> {
    let mut rec = net.record(
        state,
        x.clone(),
        StatsSource::Phase(phase),
        GradTargets {
            params: false,
            input: true,
        },
    )?;
    let root = attach_loss(&mut rec, loss)?;
    let mut grads = rec.tape.backward(root, &[1.0])?;
    let g = grads.take(rec.input).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((rec.tape.value(root).item(), Tensor::new(x.shape().to_vec(), g)?))
}

/// Rejects `rows × P` float buffers larger than `limit` bytes.
pub fn check_budget(what: &'static str, rows: usize, p: usize, limit: usize) -> Result<()> {
    let needed = rows.saturating_mul(p).saturating_mul(8);
    if needed > limit {
        return Err(Error::MemoryBudget {
            what,
            needed,
            limit,
            hint: "reduce the probe size or raise the memory budget".into(),
        });
    }
    Ok(())
}

/// Per-sample Jacobians `J_i[j, :] = ∇_θ f^i(x_j)` for every class in
/// `classes`, normalizing with `stats` so that rows do not depend on each
/// other. One forward pass per sample is shared by all requested classes.
pub fn per_sample_jacobians(
    net: &Network,
    state: &ModelState,
    x: &Tensor,
    stats: &FrozenStats,
    classes: &[usize],
    limit: usize,
) -> Result<Vec<Matrix>> {
    let (n, p) = (x.batch(), net.param_count());
    if let Some(&c) = classes.iter().find(|&&c| c >= net.n_out()) {
        return Err(Error::InvalidArgument(format!("class index {c} out of range for {} outputs", net.n_out())));
    }
    check_budget("per-sample Jacobian", n * classes.len(), p, limit)?;
    let rows: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| -> Result<Vec<Vec<f64>>> {
            let xj = x.gather(&[j]);
            let rec = net.record(
                state,
                xj,
                StatsSource::Frozen(stats),
                GradTargets {
                    params: true,
                    input: false,
                },
            )?;
            let mut seed = vec![0.0; net.n_out()];
            classes
                .iter()
                .map(|&c| {
                    seed.iter_mut().for_each(|v| *v = 0.0);
                    seed[c] = 1.0;
                    let grads = rec.tape.backward(rec.logits, &seed)?;
                    let mut row = vec![0.0; p];
                    rec.gather_param_grads(&grads, net.layout(), &mut row);
                    Ok(row)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Matrix> = classes.iter().map(|_| Matrix::zeros(n, p)).collect();
    for (j, per_class) in rows.into_iter().enumerate() {
        for (m, row) in out.iter_mut().zip(per_class) {
            m.row_mut(j).copy_from_slice(&row);
        }
    }
    Ok(out)
}

/// `N × P` Jacobian of logit `class_index` over the samples of `x`.
pub fn per_sample_param_jacobian(
    net: &Network,
    state: &ModelState,
    x: &Tensor,
    class_index: usize,
    stats: &FrozenStats,
    limit: usize,
) -> Result<Matrix> {
    Ok(per_sample_jacobians(net, state, x, stats, &[class_index], limit)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{architecture, build_model, InitScheme, LayerSpec, ModelSpec};
    use rand::{Rng, SeedableRng};

    const BIG: usize = 1 << 30;

    fn affine(input: [usize; 3], w: &[f64]) -> (Network, ModelState) {
        let net = Network::new(architecture("linear", input, w.len() / input.iter().product::<usize>(), 1).unwrap()).unwrap();
        let mut state = build_model(&net, InitScheme::Uniform, 0).unwrap();
        state.params.slot_data_mut(0).copy_from_slice(w);
        (net, state)
    }

    fn no_stats() -> FrozenStats {
        FrozenStats { layers: vec![] }
    }

    #[test]
    fn hand_computed_affine_logit() {
        let (net, state) = affine([2, 1, 1], &[1.0, 2.0]);
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(net.forward(&state, &x, Phase::Eval).unwrap().data(), &[11.0]);
        let zero = build_model(&net, InitScheme::Uniform, 0)
            .map(|mut s| {
                s.params.data_mut().iter_mut().for_each(|v| *v = 0.0);
                s
            })
            .unwrap();
        assert_eq!(net.forward(&zero, &x, Phase::Eval).unwrap().data(), &[0.0]);
    }

    #[test]
    fn scalar_mse_gradients() {
        let (net, state) = affine([1, 1, 1], &[1.0]);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let (_, g) = grad_params(&net, &state, &x, Loss::Mse(&[0.0]), Phase::Eval).unwrap();
        assert_eq!(g.data(), &[8.0, 4.0]);

        let (net, state) = affine([1, 1, 1], &[3.0]);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let (_, gx) = grad_input(&net, &state, &x, Loss::Mse(&[0.0]), Phase::Eval).unwrap();
        assert_eq!(gx.data(), &[18.0]);
    }

    #[test]
    fn mse_at_own_output_has_zero_gradient() {
        let net = Network::new(architecture("mlp", [1, 3, 3], 4, 6).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Normal, 5).unwrap();
        let x = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64 / 18.0).collect()).unwrap();
        let y = net.forward(&state, &x, Phase::Eval).unwrap();
        let (l, g) = grad_params(&net, &state, &x, Loss::Mse(y.data()), Phase::Eval).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_model_has_zero_input_gradient() {
        let (net, mut state) = affine([3, 1, 1], &[0.0; 6]);
        state.params.slot_data_mut(1).copy_from_slice(&[0.5, -0.5]);
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.2, 0.4, 0.9]).unwrap();
        let (_, gx) = grad_input(&net, &state, &x, Loss::CrossEntropy(&[1]), Phase::Eval).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
    }

    /// Independent per-neuron evaluation of the two-hidden-layer relu MLP.
    fn naive_mlp(params: &[f64], sizes: [usize; 4], x: &[f64]) -> Vec<f64> {
        let mut offset = 0;
        let mut h = x.to_vec();
        for layer in 0..3 {
            let (fan_in, out) = (sizes[layer], sizes[layer + 1]);
            let w = &params[offset..offset + out * fan_in];
            let b = &params[offset + out * fan_in..offset + out * fan_in + out];
            offset += out * fan_in + out;
            let mut next = Vec::with_capacity(out);
            for o in 0..out {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += w[o * fan_in + i] * h[i];
                }
                next.push(if layer < 2 { acc.max(0.0) } else { acc });
            }
            h = next;
        }
        h
    }

    #[test]
    fn mlp_forward_matches_scalar_loops() {
        let net = Network::new(architecture("mlp", [1, 2, 3], 3, 5).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Normal, 21).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(vec![3, 1, 2, 3], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = net.forward(&state, &x, Phase::Eval).unwrap();
        for s in 0..3 {
            let expect = naive_mlp(state.params.data(), [6, 5, 5, 3], x.sample(s));
            for (a, b) in y.sample(s).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_replays_bitwise() {
        let net = Network::new(architecture("tiny-cnn", [3, 8, 8], 4, 4).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Uniform, 2).unwrap();
        let x = Tensor::filled(vec![3, 3, 8, 8], 0.25);
        let a = net.forward(&state, &x, Phase::Train).unwrap();
        let b = net.forward(&state, &x, Phase::Train).unwrap();
        assert_eq!(a, b);
    }

    fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = Network::new(architecture("mlp-bn", [1, 2, 2], 3, 5).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Normal, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels = [0, 2, 1, 2];
        let (_, g) = grad_params(&net, &state, &x, Loss::CrossEntropy(&labels), Phase::Train).unwrap();
        for k in (0..g.len()).step_by(3) {
            let fd = central_difference(
                |h| {
                    let mut s = state.clone();
                    s.params.data_mut()[k] += h;
                    grad_params(&net, &s, &x, Loss::CrossEntropy(&labels), Phase::Train).unwrap().0
                },
                1e-5,
            );
            let a = g.data()[k];
            assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-4), "{k}: {a} vs {fd}");
        }
    }

    #[test]
    fn jacobian_of_linear_model_embeds_the_input() {
        let (net, state) = affine([3, 1, 1], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let x = Tensor::new(vec![1, 3, 1, 1], vec![7.0, 8.0, 9.0]).unwrap();
        let j = per_sample_param_jacobian(&net, &state, &x, 1, &no_stats(), BIG).unwrap();
        assert_eq!(j.row(0), &[0.0, 0.0, 0.0, 7.0, 8.0, 9.0, 0.0, 1.0]);
    }

    #[test]
    fn jacobian_rows_match_single_sample_gradients() {
        let net = Network::new(architecture("mlp-tanh", [1, 2, 2], 3, 4).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Normal, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let j = per_sample_param_jacobian(&net, &state, &x, 2, &no_stats(), BIG).unwrap();
        for s in 0..4 {
            // mse against (f − 1/2 e_2) has gradient ∇f^2 exactly
            let xs = x.gather(&[s]);
            let mut target = net.forward(&state, &xs, Phase::Eval).unwrap().into_data();
            target[2] -= 0.5;
            let (_, g) = grad_params(&net, &state, &xs, Loss::Mse(&target), Phase::Eval).unwrap();
            for (a, b) in j.row(s).iter().zip(g.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_samples_give_identical_rows_and_permutation_commutes() {
        let net = Network::new(architecture("mlp", [1, 2, 2], 2, 3).unwrap()).unwrap();
        let state = build_model(&net, InitScheme::Normal, 6).unwrap();
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let j = per_sample_param_jacobian(&net, &state, &x, 0, &no_stats(), BIG).unwrap();
        let perm = [2, 0, 1];
        let jp = per_sample_param_jacobian(&net, &state, &x.gather(&perm), 0, &no_stats(), BIG).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(jp.row(r), j.row(src));
        }
        let twins = x.gather(&[1, 1]);
        let jt = per_sample_param_jacobian(&net, &state, &twins, 0, &no_stats(), BIG).unwrap();
        assert_eq!(jt.row(0), jt.row(1));
    }

    #[test]
    fn jacobian_budget_and_class_range() {
        let net = Network::new(ModelSpec {
            input: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out: 2, bias: true }],
            n_out: 2,
        })
        .unwrap();
        let state = build_model(&net, InitScheme::Uniform, 0).unwrap();
        let x = Tensor::zeros(vec![4, 1, 2, 2]);
        assert!(matches!(
            per_sample_param_jacobian(&net, &state, &x, 0, &no_stats(), 64),
            Err(Error::MemoryBudget { .. })
        ));
        assert!(per_sample_param_jacobian(&net, &state, &x, 2, &no_stats(), BIG).is_err());
    }
}
