//! DP-SGD: per-example (or per-microbatch) clipping, Gaussian noise on the
//! clipped sum, and Poisson batch selection.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{per_example_gradients, DenseNetwork, Loss, PerExampleGradients};

/// Hyperparameters of one DP-SGD training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub microbatch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub seed: u64,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 0.1,
            microbatch_size: 1,
            learning_rate: 1e-3,
            iterations: 1000,
            seed: 0,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad(format!("noise_multiplier {} must be non-negative", self.noise_multiplier));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad(format!("sampling_rate {} must lie in (0, 1]", self.sampling_rate));
        }
        if self.microbatch_size == 0 {
            return bad("microbatch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }
}

fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, C / ||g||)`.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm)?;
    Ok(out)
}

fn clip_in_place(g: &mut [f64], clip_norm: f64) -> Result<()> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidParameter(format!("clip norm {clip_norm} must be positive")));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let norm = l2_norm(g);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        g.iter_mut().for_each(|x| *x *= scale);
        // rounding can overshoot C by a few ulps; shrink until it cannot
        while l2_norm(g) > clip_norm {
            g.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
        }
    }
    Ok(())
}

fn add_noise<R: Rng + ?Sized>(sum: &mut [f64], std: f64, rng: &mut R) {
    if std > 0.0 {
        for x in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
}

/// `(1/|B|) (sum_i clip(g_i, C) + N(0, C^2 Phi^2 I))`.
pub fn noisy_batch_gradient<R: Rng + ?Sized>(
    grads: &PerExampleGradients,
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    microbatch_gradient(grads, 1, clip_norm, noise_multiplier, rng)
}

/// Clips the mean gradient of each consecutive group of `microbatch_size`
/// examples, sums the clipped group gradients, adds one noise draw and
/// divides by the group count. The last group may be smaller when the
/// batch size is not a multiple of `microbatch_size`.
pub fn microbatch_gradient<R: Rng + ?Sized>(
    grads: &PerExampleGradients,
    microbatch_size: usize,
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if grads.n_examples() == 0 {
        return Err(Error::EmptyBatch);
    }
    if microbatch_size == 0 {
        return Err(Error::InvalidParameter("microbatch size must be at least 1".into()));
    }
    if !(noise_multiplier >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise multiplier {noise_multiplier} must be >= 0")));
    }
    let rows = grads.rows();
    let mut sum = vec![0.0; grads.n_params()];
    let mut groups = 0usize;
    let mut group = vec![0.0; grads.n_params()];
    for chunk in rows.axis_chunks_iter(Axis(0), microbatch_size) {
        let n = chunk.nrows() as f64;
        group.iter_mut().for_each(|g| *g = 0.0);
        for row in chunk.rows() {
            for (g, &x) in group.iter_mut().zip(row.iter()) {
                *g += x;
            }
        }
        if chunk.nrows() > 1 {
            group.iter_mut().for_each(|g| *g /= n);
        }
        clip_in_place(&mut group, clip_norm)?;
        for (s, g) in sum.iter_mut().zip(&group) {
            *s += g;
        }
        groups += 1;
    }
    add_noise(&mut sum, clip_norm * noise_multiplier, rng);
    let k = groups as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

/// Dispatches on the configured microbatch size.
pub fn private_gradient<R: Rng + ?Sized>(
    grads: &PerExampleGradients,
    config: &DpSgdConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    microbatch_gradient(grads, config.microbatch_size, config.clip_norm, config.noise_multiplier, rng)
}

/// Indices selected independently with probability `q` each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoissonBatch {
    pub indices: Vec<usize>,
}

impl PoissonBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn poisson_sample<R: Rng + ?Sized>(m: usize, q: f64, rng: &mut R) -> PoissonBatch {
    let indices = if q >= 1.0 {
        (0..m).collect()
    } else {
        (0..m).filter(|_| rng.random::<f64>() < q).collect()
    };
    PoissonBatch { indices }
}

/// Outcome of one DP-SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated { batch_size: usize },
    /// The Poisson batch was empty; parameters are unchanged but the step
    /// still counts towards the privacy accounting.
    Skipped,
}

/// One DP-SGD step of `net` on a supervised dataset.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    net: &mut DenseNetwork,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    loss: Loss,
    config: &DpSgdConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if inputs.nrows() != targets.nrows() {
        return Err(Error::Dimension("inputs and targets differ in row count".into()));
    }
    let batch = poisson_sample(inputs.nrows(), config.sampling_rate, rng);
    if batch.is_empty() {
        return Ok(StepOutcome::Skipped);
    }
    let x: Array2<f64> = inputs.select(Axis(0), &batch.indices);
    let t: Array2<f64> = targets.select(Axis(0), &batch.indices);
    let grads = per_example_gradients(net, loss, x.view(), t.view())?;
    let g = private_gradient(&grads, config, rng)?;
    net.apply_update(&g, config.learning_rate)?;
    Ok(StepOutcome::Updated { batch_size: batch.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grads(rows: Array2<f64>) -> PerExampleGradients {
        PerExampleGradients::from_rows(rows)
    }

    #[test]
    fn clipping_cases() {
        assert_eq!(clip_gradient(&[3.0, 4.0], 5.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(clip_gradient(&[6.0, 8.0], 5.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(clip_gradient(&[0.0, 0.0], 5.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(clip_gradient(&[f64::NAN], 1.0), Err(Error::NonFiniteGradient)));
        assert!(matches!(clip_gradient(&[f64::INFINITY], 1.0), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn noiseless_batch_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let small = grads(array![[0.1, 0.2], [0.3, -0.4]]);
        let g = noisy_batch_gradient(&small, 5.0, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(g[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -0.1, epsilon = 1e-15);

        let big = grads(array![[6.0, 8.0], [0.0, 0.0]]);
        assert_eq!(noisy_batch_gradient(&big, 5.0, 0.0, &mut rng).unwrap(), vec![1.5, 2.0]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = noisy_batch_gradient(&grads(Array2::zeros((0, 3))), 1.0, 1.0, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "empty Poisson batch: skip step");
    }

    #[test]
    fn microbatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // two groups of two with means (6,8) and (0,0)
        let g = grads(array![[5.0, 8.0], [7.0, 8.0], [1.0, -1.0], [-1.0, 1.0]]);
        assert_eq!(microbatch_gradient(&g, 2, 5.0, 0.0, &mut rng).unwrap(), vec![1.5, 2.0]);

        // single group: clip of the full-batch mean
        let single = microbatch_gradient(&g, 4, 1.0, 0.0, &mut rng).unwrap();
        let mean = [3.0, 4.0];
        assert_abs_diff_eq!(single[0], mean[0] / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(single[1], mean[1] / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn microbatch_one_equals_per_example_path() {
        let g = grads(array![[0.5, 2.0, -1.0], [3.0, 0.1, 0.2], [0.0, 0.0, 9.0]]);
        let a = noisy_batch_gradient(&g, 1.0, 1.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = microbatch_gradient(&g, 1, 1.0, 1.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(poisson_sample(10, 1.0, &mut rng).indices, (0..10).collect::<Vec<_>>());
        assert!(poisson_sample(1000, 1e-12, &mut rng).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(DpSgdConfig::default().validate().is_ok());
        let bad = [
            DpSgdConfig { clip_norm: 0.0, ..Default::default() },
            DpSgdConfig { noise_multiplier: -1.0, ..Default::default() },
            DpSgdConfig { sampling_rate: 0.0, ..Default::default() },
            DpSgdConfig { sampling_rate: 1.5, ..Default::default() },
            DpSgdConfig { microbatch_size: 0, ..Default::default() },
            DpSgdConfig { learning_rate: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_json_keys() {
        let c: DpSgdConfig = serde_json::from_str(
            r#"{"clip_norm":2.0,"noise_multiplier":0.5,"sampling_rate":0.2,
                "microbatch_size":4,"learning_rate":0.01,"iterations":10,"seed":7}"#,
        )
        .unwrap();
        assert_eq!(c.microbatch_size, 4);
        assert_eq!(c.seed, 7);
        assert!(serde_json::from_str::<DpSgdConfig>(r#"{"clip":1}"#).is_err());
    }
}
