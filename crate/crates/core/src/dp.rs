//! The three training-step variants over the reference math: plain SGD,
//! DP-SGD (clip per-example gradients, aggregate, add noise), and the
//! reweighted DP-SGD(R) (derive per-example norms in a first backprop pass,
//! then fold the clip factors into a reweighted loss whose single per-batch
//! gradient is the clipped sum).
//!
//! Noise is drawn from the counter-based generator keyed by
//! `(seed, step, layer, offset)`, so both variants add byte-identical noise
//! tensors when they share a seed.

use crate::error::{Error, Result};
use crate::net::{
    batch_dz, per_batch_backprop, per_example_backprop, ExampleGradients, LayerParams, Loss,
};
use crate::rng::gaussian;
use crate::tensor::DenseTensor;

/// Parameters of the private training step.
#[derive(Debug, Clone, Copy)]
pub struct PrivacyParams {
    /// Max per-example gradient L2 norm `C`.
    pub clip_norm: f64,
    /// Noise multiplier `sigma`; the added noise is `N(0, sigma^2 C^2 I)`.
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm C must be > 0".into()));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::Config("noise multiplier must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-example and per-layer gradient norms from the first backprop pass.
#[derive(Debug, Clone)]
pub struct NormVector {
    /// `per_example[i]` is the full-gradient L2 norm of example `i`.
    pub per_example: Vec<f64>,
    /// `per_layer[i][m]` is the layer-`m` gradient L2 norm of example `i`.
    pub per_layer: Vec<Vec<f64>>,
}

/// Gradient-tensor lifecycle event reported to the allocation hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocKind {
    Materialize,
    Release,
}

/// `(tag, bytes)` record for every gradient-tensor materialization and
/// release. Consumed by the footprint model's cross-checks.
#[derive(Debug, Clone, Copy)]
pub struct AllocEvent {
    pub tag: &'static str,
    pub bytes: usize,
    pub kind: AllocKind,
}

pub const TAG_PER_EXAMPLE_GRAD: &str = "per_example_weight_grad";
pub const TAG_PER_BATCH_GRAD: &str = "per_batch_weight_grad";

fn emit(hook: &mut Option<&mut dyn FnMut(AllocEvent)>, tag: &'static str, bytes: usize, kind: AllocKind) {
    if let Some(h) = hook.as_mut() {
        h(AllocEvent { tag, bytes, kind });
    }
}

/// L2 norm over every element of the tensor.
pub fn l2_norm(t: &DenseTensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// L2 norm over a whole gradient set (all layers of one example).
pub fn l2_norm_all(tensors: &[DenseTensor]) -> f64 {
    tensors
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Clips each example's gradient set to norm at most `C`.
///
/// Returns the clipped gradients and the per-example factors
/// `1 / max(1, n_i / C)`.
pub fn clip_gradients(grads: &ExampleGradients, clip_norm: f64) -> Result<(ExampleGradients, Vec<f64>)> {
    if !(clip_norm > 0.0) {
        return Err(Error::Config("clip norm C must be > 0".into()));
    }
    for (i, set) in grads.per_example.iter().enumerate() {
        for (m, g) in set.iter().enumerate() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { example: i, layer: m });
            }
        }
    }
    let mut factors = Vec::with_capacity(grads.per_example.len());
    let mut clipped = grads.clone();
    for (i, set) in clipped.per_example.iter_mut().enumerate() {
        let n = l2_norm_all(&grads.per_example[i]);
        let factor = 1.0 / f64::max(1.0, n / clip_norm);
        for g in set.iter_mut() {
            g.scale(factor);
        }
        factors.push(factor);
    }
    Ok((clipped, factors))
}

fn check_batch(pp: &PrivacyParams, batch: &DenseTensor) -> Result<()> {
    pp.validate()?;
    if batch.rows() != pp.batch_size {
        return Err(Error::BatchMismatch {
            expected: pp.batch_size,
            got: batch.rows(),
        });
    }
    Ok(())
}

/// Adds `sigma * C * N(0, 1)` noise to each layer, keyed per
/// `(seed, step, layer, offset)`, then scales everything by `1/B`.
fn add_noise_and_average(grads: &mut [DenseTensor], pp: &PrivacyParams, step: u64) {
    let scale = pp.noise_multiplier * pp.clip_norm;
    for (m, g) in grads.iter_mut().enumerate() {
        if scale > 0.0 {
            for (offset, v) in g.data_mut().iter_mut().enumerate() {
                *v += scale * gaussian(pp.rng_seed, step, m as u64, offset as u64);
            }
        }
        g.scale(1.0 / pp.batch_size as f64);
    }
}

/// One DP-SGD gradient derivation: per-example backprop, clip, aggregate,
/// add noise, average. Deterministic for a fixed `(pp.rng_seed, step)`.
///
/// All B gradient sets are materialized simultaneously; the allocation hook
/// observes one materialization per layer of `B * |W_m|` values.
pub fn dp_sgd_step(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
    pp: &PrivacyParams,
    step: u64,
    mut hook: Option<&mut dyn FnMut(AllocEvent)>,
) -> Result<Vec<DenseTensor>> {
    check_batch(pp, batch)?;
    let grads = per_example_backprop(model, batch, targets, loss)?;
    for layer in &grads.per_example[0] {
        let bytes = layer.len() * grads.batch_size() * std::mem::size_of::<f64>();
        emit(&mut hook, TAG_PER_EXAMPLE_GRAD, bytes, AllocKind::Materialize);
    }
    let (clipped, _factors) = clip_gradients(&grads, pp.clip_norm)?;

    let mut summed: Vec<DenseTensor> = model
        .iter()
        .map(|l| DenseTensor::zeros(vec![l.fan_in(), l.fan_out()]))
        .collect();
    for (m, s) in summed.iter().enumerate() {
        emit(
            &mut hook,
            TAG_PER_BATCH_GRAD,
            s.len() * std::mem::size_of::<f64>(),
            AllocKind::Materialize,
        );
        let _ = m;
    }
    // Fixed accumulation order (example 0 .. B-1) for reproducibility.
    for set in &clipped.per_example {
        for (m, g) in set.iter().enumerate() {
            summed[m].add_assign(g);
        }
    }
    for layer in &grads.per_example[0] {
        let bytes = layer.len() * grads.batch_size() * std::mem::size_of::<f64>();
        emit(&mut hook, TAG_PER_EXAMPLE_GRAD, bytes, AllocKind::Release);
    }
    add_noise_and_average(&mut summed, pp, step);
    Ok(summed)
}

/// Per-example, per-layer gradient norms via a single backprop pass that
/// materializes one layer's `B` gradient tensors at a time.
///
/// The hook observes, per layer, a materialization and release of
/// `B * |W_m|` values and never more than one layer in flight, which is the
/// memory-shape property that distinguishes this pass from `dp_sgd_step`.
pub fn per_example_layer_norms(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
    mut hook: Option<&mut dyn FnMut(AllocEvent)>,
) -> Result<NormVector> {
    let (cache, dzs) = batch_dz(model, batch, targets, loss)?;
    let b = batch.rows();
    let mut per_layer = vec![vec![0.0; model.len()]; b];
    // Backprop order: last layer to first.
    for m in (0..model.len()).rev() {
        let (fi, fo) = (model[m].fan_in(), model[m].fan_out());
        let bytes = b * fi * fo * std::mem::size_of::<f64>();
        emit(&mut hook, TAG_PER_EXAMPLE_GRAD, bytes, AllocKind::Materialize);
        let mut layer_grads = vec![0.0; b * fi * fo];
        for i in 0..b {
            let x = cache.layer_inputs[m].row(i);
            let dz = dzs[m].row(i);
            let g = &mut layer_grads[i * fi * fo..(i + 1) * fi * fo];
            for (a, &xv) in x.iter().enumerate() {
                for (c, &dzv) in dz.iter().enumerate() {
                    g[a * fo + c] = xv * dzv;
                }
            }
            let sq: f64 = g.iter().map(|v| v * v).sum();
            if !sq.is_finite() {
                return Err(Error::NonFiniteGradient { example: i, layer: m });
            }
            per_layer[i][m] = sq.sqrt();
        }
        drop(layer_grads);
        emit(&mut hook, TAG_PER_EXAMPLE_GRAD, bytes, AllocKind::Release);
    }
    let per_example = per_layer
        .iter()
        .map(|norms| norms.iter().map(|n| n * n).sum::<f64>().sqrt())
        .collect();
    Ok(NormVector {
        per_example,
        per_layer,
    })
}

/// One reweighted DP-SGD gradient derivation.
///
/// The first backprop yields only per-layer norms; the reweighted loss
/// `L' = sum_i L_i / max(1, n_i/C)` is then differentiated in a second
/// batched pass with the clip factors treated as constants, which makes its
/// gradient equal the clipped sum of `dp_sgd_step` exactly (up to summation
/// order) when `sigma = 0`.
pub fn dp_sgd_r_step(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
    pp: &PrivacyParams,
    step: u64,
    mut hook: Option<&mut dyn FnMut(AllocEvent)>,
) -> Result<Vec<DenseTensor>> {
    check_batch(pp, batch)?;
    let norms = per_example_layer_norms(model, batch, targets, loss, hook.as_deref_mut())?;
    let weights: Vec<f64> = norms
        .per_example
        .iter()
        .map(|n| 1.0 / f64::max(1.0, n / pp.clip_norm))
        .collect();
    let mut grads = per_batch_backprop(model, batch, targets, loss, &weights)?;
    for g in &grads {
        emit(
            &mut hook,
            TAG_PER_BATCH_GRAD,
            g.len() * std::mem::size_of::<f64>(),
            AllocKind::Materialize,
        );
    }
    add_noise_and_average(&mut grads, pp, step);
    Ok(grads)
}

/// Plain SGD mini-batch mean gradient (no clipping, no noise).
pub fn sgd_step(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
) -> Result<Vec<DenseTensor>> {
    let b = batch.rows();
    let mut grads = per_batch_backprop(model, batch, targets, loss, &vec![1.0; b])?;
    for g in &mut grads {
        g.scale(1.0 / b as f64);
    }
    Ok(grads)
}

/// `w <- w - eta * g` elementwise.
pub fn model_update(model: &mut [LayerParams], grad: &[DenseTensor], eta: f64) -> Result<()> {
    if model.len() != grad.len() {
        return Err(Error::Config(format!(
            "model has {} layers but gradient has {}",
            model.len(),
            grad.len()
        )));
    }
    for (m, (layer, g)) in model.iter_mut().zip(grad.iter()).enumerate() {
        if layer.weight.shape() != g.shape() {
            return Err(Error::LayerDimMismatch {
                index: m,
                details: format!(
                    "gradient shape {:?} does not match weight shape {:?}",
                    g.shape(),
                    layer.weight.shape()
                ),
            });
        }
        for (w, gv) in layer.weight.data_mut().iter_mut().zip(g.data().iter()) {
            *w -= eta * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use crate::rng::uniform;

    fn pp(c: f64, sigma: f64, b: usize, seed: u64) -> PrivacyParams {
        PrivacyParams {
            clip_norm: c,
            noise_multiplier: sigma,
            batch_size: b,
            learning_rate: 0.1,
            rng_seed: seed,
        }
    }

    fn net(seed: u64, dims: &[usize]) -> Vec<LayerParams> {
        let acts: Vec<Activation> = (0..dims.len() - 1)
            .map(|i| if i + 2 == dims.len() { Activation::Identity } else { Activation::Tanh })
            .collect();
        dims.windows(2)
            .zip(acts.iter())
            .enumerate()
            .map(|(m, (w, &act))| {
                let data: Vec<f64> = (0..w[0] * w[1])
                    .map(|i| uniform(seed, 200 + m as u64, i as u64) * 2.0 - 1.0)
                    .collect();
                LayerParams::new(DenseTensor::new(vec![w[0], w[1]], data).unwrap(), act).unwrap()
            })
            .collect()
    }

    fn batch(seed: u64, b: usize, fi: usize, fo: usize) -> (DenseTensor, DenseTensor) {
        let x: Vec<f64> = (0..b * fi).map(|i| uniform(seed, 301, i as u64) * 2.0 - 1.0).collect();
        let t: Vec<f64> = (0..b * fo).map(|i| uniform(seed, 302, i as u64) * 2.0 - 1.0).collect();
        (
            DenseTensor::new(vec![b, fi], x).unwrap(),
            DenseTensor::new(vec![b, fo], t).unwrap(),
        )
    }

    #[test]
    fn l2_norm_known_values() {
        let t = DenseTensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_norm(&t), 5.0);
        assert_eq!(l2_norm(&DenseTensor::zeros(vec![4, 4])), 0.0);
    }

    #[test]
    fn l2_norm_matches_loop_oracle_on_seeded_tensor() {
        let data: Vec<f64> = (0..1000).map(|i| uniform(0, 77, i as u64) * 2.0 - 1.0).collect();
        let t = DenseTensor::new(vec![1000], data.clone()).unwrap();
        // Straight-loop sum-of-squares oracle.
        let mut acc = 0.0;
        for v in &data {
            acc += v * v;
        }
        let oracle = acc.sqrt();
        assert!((l2_norm(&t) - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn clip_lower_branch_leaves_gradient_unchanged() {
        // Single gradient with norm C/2.
        let c = 2.0;
        let g = DenseTensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(); // norm 1 = C/2
        let grads = ExampleGradients { per_example: vec![vec![g.clone()]] };
        let (clipped, factors) = clip_gradients(&grads, c).unwrap();
        assert_eq!(factors, vec![1.0]);
        assert_eq!(clipped.per_example[0][0].data(), g.data());
    }

    #[test]
    fn clip_upper_branch_scales_to_exactly_c() {
        let c = 1.5;
        let g = DenseTensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap(); // norm 3 = 2C
        let grads = ExampleGradients { per_example: vec![vec![g]] };
        let (clipped, factors) = clip_gradients(&grads, c).unwrap();
        assert!((factors[0] - 0.5).abs() < 1e-15);
        let post = l2_norm_all(&clipped.per_example[0]);
        assert!((post - c).abs() <= 1e-12 * c);
    }

    #[test]
    fn clip_factors_match_per_example_recomputation() {
        let model = net(11, &[6, 5, 4]);
        let (x, t) = batch(11, 4, 6, 4);
        let grads = per_example_backprop(&model, &x, &t, Loss::SquaredError).unwrap();
        let c = 0.05; // small enough that some examples clip
        let (clipped, factors) = clip_gradients(&grads, c).unwrap();
        for i in 0..4 {
            // Per-example scalar recomputation oracle.
            let mut sq = 0.0;
            for g in &grads.per_example[i] {
                for v in g.data() {
                    sq += v * v;
                }
            }
            let n = sq.sqrt();
            let expect = 1.0 / f64::max(1.0, n / c);
            assert!((factors[i] - expect).abs() <= 1e-12);
            let post = l2_norm_all(&clipped.per_example[i]);
            assert!(post <= c * (1.0 + 1e-12) || factors[i] == 1.0);
        }
    }

    #[test]
    fn clip_reports_non_finite_location() {
        let g0 = DenseTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut g1 = DenseTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        g1.data_mut()[1] = f64::NAN;
        let grads = ExampleGradients { per_example: vec![vec![g0.clone(), g0], vec![g1.clone(), g1]] };
        match clip_gradients(&grads, 1.0) {
            Err(Error::NonFiniteGradient { example, layer }) => {
                assert_eq!((example, layer), (1, 0));
            }
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_unclipped_dp_sgd_is_plain_sgd() {
        let model = net(13, &[5, 4, 3]);
        let (x, t) = batch(13, 3, 5, 3);
        // Huge C so nothing clips; sigma = 0.
        let g_dp = dp_sgd_step(&model, &x, &t, Loss::SquaredError, &pp(1e9, 0.0, 3, 0), 0, None)
            .unwrap();
        let g_sgd = sgd_step(&model, &x, &t, Loss::SquaredError).unwrap();
        for m in 0..model.len() {
            for (a, b) in g_dp[m].data().iter().zip(g_sgd[m].data().iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn clipped_example_contributes_at_reduced_weight() {
        let model = net(14, &[4, 3]);
        let (x, t) = batch(14, 2, 4, 3);
        let grads = per_example_backprop(&model, &x, &t, Loss::SquaredError).unwrap();
        let n0 = l2_norm_all(&grads.per_example[0]);
        let n1 = l2_norm_all(&grads.per_example[1]);
        // Choose C so example 0 has n = 2C (factor 0.5) and example 1 is unclipped.
        let c = n0 / 2.0;
        assert!(n1 < c, "test setup: example 1 must be below the clip norm");
        let g = dp_sgd_step(&model, &x, &t, Loss::SquaredError, &pp(c, 0.0, 2, 0), 0, None).unwrap();
        // Linearity oracle: (0.5 * g_0 + 1.0 * g_1) / B.
        for m in 0..model.len() {
            for idx in 0..g[m].len() {
                let expect = (0.5 * grads.per_example[0][m].data()[idx]
                    + grads.per_example[1][m].data()[idx])
                    / 2.0;
                let got = g[m].data()[idx];
                assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn batch_size_mismatch_is_a_config_error() {
        let model = net(15, &[4, 3]);
        let (x, t) = batch(15, 2, 4, 3);
        let err = dp_sgd_step(&model, &x, &t, Loss::SquaredError, &pp(1.0, 0.0, 3, 0), 0, None);
        assert!(matches!(err, Err(Error::BatchMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn norm_vector_is_consistent_across_layers() {
        let model = net(16, &[6, 5, 4]);
        let (x, t) = batch(16, 3, 6, 4);
        let nv = per_example_layer_norms(&model, &x, &t, Loss::SquaredError, None).unwrap();
        let grads = per_example_backprop(&model, &x, &t, Loss::SquaredError).unwrap();
        for i in 0..3 {
            let whole: f64 = nv.per_layer[i].iter().map(|n| n * n).sum::<f64>().sqrt();
            assert!((nv.per_example[i] - whole).abs() <= 1e-12 * whole.max(1e-300));
            let direct = l2_norm_all(&grads.per_example[i]);
            assert!((nv.per_example[i] - direct).abs() <= 1e-12 * direct.max(1e-300));
        }
    }

    #[test]
    fn reweighted_step_equals_dp_step_when_noiseless() {
        for seed in 0..5 {
            let model = net(20 + seed, &[6, 5, 3]);
            let (x, t) = batch(20 + seed, 8, 6, 3);
            let p = pp(0.02, 0.0, 8, seed);
            let a = dp_sgd_step(&model, &x, &t, Loss::SquaredError, &p, 0, None).unwrap();
            let b = dp_sgd_r_step(&model, &x, &t, Loss::SquaredError, &p, 0, None).unwrap();
            for m in 0..model.len() {
                let num: f64 = a[m]
                    .data()
                    .iter()
                    .zip(b[m].data().iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let den = l2_norm(&a[m]).max(1e-30);
                assert!(num / den <= 1e-5, "seed {seed} layer {m}: rel {}", num / den);
            }
        }
    }

    #[test]
    fn shared_seed_draws_identical_noise_tensors() {
        // Zero input -> zero gradients, so the step output is exactly the
        // scaled noise; both variants must produce bit-identical tensors.
        let model = net(30, &[3, 2]);
        let x = DenseTensor::zeros(vec![2, 3]);
        let t = DenseTensor::zeros(vec![2, 2]);
        let p = pp(2.0, 1.0, 2, 99);
        let a = dp_sgd_step(&model, &x, &t, Loss::SquaredError, &p, 7, None).unwrap();
        let b = dp_sgd_r_step(&model, &x, &t, Loss::SquaredError, &p, 7, None).unwrap();
        for m in 0..model.len() {
            let ab: Vec<u64> = a[m].data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b[m].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn model_update_known_arithmetic() {
        let w = DenseTensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut model = vec![LayerParams::new(w, Activation::Identity).unwrap()];
        let g = vec![DenseTensor::new(vec![1, 1], vec![2.0]).unwrap()];
        model_update(&mut model, &g, 0.1).unwrap();
        assert!((model[0].weight.data()[0] - 0.8).abs() < 1e-15);

        // eta = 0 and g = 0 both leave the model unchanged.
        model_update(&mut model, &g, 0.0).unwrap();
        assert!((model[0].weight.data()[0] - 0.8).abs() < 1e-15);
        let z = vec![DenseTensor::zeros(vec![1, 1])];
        model_update(&mut model, &z, 0.5).unwrap();
        assert!((model[0].weight.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn model_update_rejects_shape_mismatch() {
        let w = DenseTensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let mut model = vec![LayerParams::new(w, Activation::Identity).unwrap()];
        let g = vec![DenseTensor::zeros(vec![2, 3])];
        assert!(matches!(
            model_update(&mut model, &g, 0.1),
            Err(Error::LayerDimMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn allocation_hook_sees_transient_layers_for_reweighted_pass() {
        let model = net(40, &[8, 6, 4]);
        let (x, t) = batch(40, 4, 8, 4);
        let mut live: usize = 0;
        let mut peak: usize = 0;
        let mut total_materialized: usize = 0;
        {
            let mut hook = |ev: AllocEvent| {
                if ev.tag == TAG_PER_EXAMPLE_GRAD {
                    match ev.kind {
                        AllocKind::Materialize => {
                            live += ev.bytes;
                            total_materialized += ev.bytes;
                            peak = peak.max(live);
                        }
                        AllocKind::Release => live -= ev.bytes,
                    }
                }
            };
            let p = pp(1.0, 0.0, 4, 0);
            dp_sgd_r_step(&model, &x, &t, Loss::SquaredError, &p, 0, Some(&mut hook)).unwrap();
        }
        let b = 4;
        let largest_layer = model.iter().map(|l| l.weight.len()).max().unwrap();
        let total: usize = model.iter().map(|l| l.weight.len()).sum();
        assert_eq!(peak, b * largest_layer * 8, "one layer in flight at a time");
        assert_eq!(total_materialized, b * total * 8);
        assert_eq!(live, 0, "everything released");
    }

    #[test]
    fn allocation_hook_sees_full_set_for_dp_sgd() {
        let model = net(41, &[8, 6, 4]);
        let (x, t) = batch(41, 4, 8, 4);
        let mut live: usize = 0;
        let mut peak: usize = 0;
        {
            let mut hook = |ev: AllocEvent| {
                if ev.tag == TAG_PER_EXAMPLE_GRAD {
                    match ev.kind {
                        AllocKind::Materialize => {
                            live += ev.bytes;
                            peak = peak.max(live);
                        }
                        AllocKind::Release => live -= ev.bytes,
                    }
                }
            };
            let p = pp(1.0, 0.0, 4, 0);
            dp_sgd_step(&model, &x, &t, Loss::SquaredError, &p, 0, Some(&mut hook)).unwrap();
        }
        let total: usize = model.iter().map(|l| l.weight.len()).sum();
        assert_eq!(peak, 4 * total * 8, "all B gradient sets live simultaneously");
    }
}
