//! Denoising diffusion over one-hot variant rows.
//!
//! Steps are 1-based throughout: `t = 1..=T`, with `alpha_bar_0 = 1`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_noise, AccountantState, Calibration, PrivacySpec};
use crate::dpsgd::{poisson_sample, private_gradient, DpSgdConfig};
use crate::encoding::{decode_row, OneHotMatrix, VariantVocabulary};
use crate::error::{Error, Result};
use crate::log::SimpleEventLog;
use crate::nn::{time_embedding, Activation, DenseNetwork, Loss, PerExampleGradients};

pub const DEFAULT_STEPS: usize = 300;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.07;
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

/// Rows generated per independent RNG stream.
const GENERATION_CHUNK: usize = 2048;
/// Reverse-chain states are clamped to this box so that a badly trained
/// (e.g. heavily noised) predictor cannot overflow the chain.
pub const STATE_BOUND: f64 = 1e6;

/// Variance schedule with its derived products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    betas: Vec<f64>,
}

impl Serialize for NoiseSchedule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ScheduleFile { betas: self.betas.clone() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NoiseSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = ScheduleFile::deserialize(deserializer)?;
        NoiseSchedule::from_betas(file.betas).map_err(serde::de::Error::custom)
    }
}

impl NoiseSchedule {
    /// Arbitrary schedule; every beta must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_var = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, posterior_var })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Standard deviation of the reverse-step noise.
    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_variance(t).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParameter(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParameter("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + span * i as f64).collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

/// Closed-form draw of `x_t` given `x0` and a standard normal `eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<LatentState> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Dimension(format!("x0 has {} coordinates, noise {}", x0.len(), eps.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x = x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect();
    Ok(LatentState { x, t })
}

/// One single-step transition `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(x_prev: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<LatentState> {
    schedule.check_step(t)?;
    if x_prev.len() != eps.len() {
        return Err(Error::Dimension("state and noise differ in length".into()));
    }
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    let x = x_prev.iter().zip(eps).map(|(x, e)| a * x + b * e).collect();
    Ok(LatentState { x, t })
}

/// Mean of the reverse transition given the predicted noise.
pub fn posterior_mean(x_t: &[f64], eps_hat: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::Dimension("state and predicted noise differ in length".into()));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let scale = 1.0 / schedule.alpha(t).sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| scale * (x - coef * e)).collect())
}

/// Hyperparameters of diffusion training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub dp: DpSgdConfig,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Hidden layer widths of the noise predictor.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// `(t, eps)` draws averaged into each case's gradient before clipping.
    pub noise_draws: usize,
    /// Delta at which the spent budget is reported.
    pub delta: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            dp: DpSgdConfig::default(),
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            hidden: vec![256, 256],
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            noise_draws: 1,
            delta: 1e-5,
        }
    }
}

impl DiffusionConfig {
    /// Settings for logs of a few hundred cases and a handful of variants
    /// under tight budgets: a one-layer predictor, a short embedding, full
    /// clipping and eight noise draws per case.
    pub fn small_log() -> Self {
        Self {
            dp: DpSgdConfig {
                clip_norm: 0.1,
                sampling_rate: 0.1,
                learning_rate: 0.5,
                iterations: 500,
                ..DpSgdConfig::default()
            },
            hidden: vec![32],
            embedding_dim: 8,
            noise_draws: 8,
            ..Self::default()
        }
    }

    /// Sets the noise multiplier and reporting delta so that training meets
    /// `target`.
    pub fn calibrate(&mut self, target: PrivacySpec) -> Result<Calibration> {
        let c = calibrate_noise(target, self.dp.sampling_rate, self.dp.iterations)?;
        self.dp.noise_multiplier = c.noise_multiplier;
        self.delta = target.delta;
        Ok(c)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Released diffusion engine: everything needed to sample, nothing more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub vocab: VariantVocabulary,
    pub schedule: NoiseSchedule,
    pub predictor: DenseNetwork,
    pub embedding_dim: usize,
    /// `None` when trained without noise.
    pub privacy: Option<PrivacySpec>,
    /// Case count of the training log, the default sample size.
    pub training_cases: u64,
}

impl DiffusionModel {
    /// Wraps an existing predictor, checking its shape against the vocabulary.
    pub fn new(
        vocab: VariantVocabulary,
        schedule: NoiseSchedule,
        predictor: DenseNetwork,
        embedding_dim: usize,
    ) -> Result<Self> {
        let n = vocab.len();
        if predictor.in_dim() != n + embedding_dim || predictor.out_dim() != n {
            return Err(Error::Dimension(format!(
                "predictor maps {} -> {}, expected {} -> {n}",
                predictor.in_dim(),
                predictor.out_dim(),
                n + embedding_dim
            )));
        }
        Ok(Self { vocab, schedule, predictor, embedding_dim, privacy: None, training_cases: 0 })
    }

    fn predict(&self, x: ArrayView2<'_, f64>, embedding: &[f64]) -> Result<Array2<f64>> {
        let n = x.ncols();
        let mut input = Array2::zeros((x.nrows(), n + self.embedding_dim));
        for (mut row, xr) in input.rows_mut().into_iter().zip(x.rows()) {
            for j in 0..n {
                row[j] = xr[j];
            }
            for (j, &e) in embedding.iter().enumerate() {
                row[n + j] = e;
            }
        }
        self.predictor.forward(input.view())
    }
}

/// `count` step numbers drawn uniformly from `1..=steps`.
pub fn sample_steps<R: Rng + ?Sized>(count: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(1..=steps)).collect()
}

fn embedding_table(schedule: &NoiseSchedule, dim: usize) -> Result<Vec<Vec<f64>>> {
    (0..=schedule.steps()).map(|t| time_embedding(t as f64, dim)).collect()
}

/// Trains the noise predictor with DP-SGD. Each selected case contributes
/// the mean gradient of `noise_draws` fresh `(t, eps)` triples, clipped as
/// one unit.
pub fn train(matrix: &OneHotMatrix, vocab: &VariantVocabulary, config: &DiffusionConfig) -> Result<DiffusionModel> {
    config.dp.validate()?;
    if config.noise_draws == 0 {
        return Err(Error::InvalidParameter("noise_draws must be at least 1".into()));
    }
    if matrix.n_rows() == 0 {
        return Err(Error::EmptyLog);
    }
    if matrix.n_cols() != vocab.len() {
        return Err(Error::Dimension("matrix and vocabulary disagree".into()));
    }
    let schedule = config.schedule()?;
    let n = vocab.len();
    let dim = config.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.dp.seed);
    let mut sizes = vec![n + dim];
    sizes.extend(&config.hidden);
    sizes.push(n);
    let predictor = DenseNetwork::new(&sizes, Activation::Relu, Activation::Linear, &mut rng)?;
    let mut model = DiffusionModel::new(vocab.clone(), schedule, predictor, dim)?;
    let table = embedding_table(&model.schedule, dim)?;
    let rows = matrix.rows();
    let mut accountant = AccountantState::new(config.dp.sampling_rate, config.dp.noise_multiplier);

    for _ in 0..config.dp.iterations {
        accountant.record_step();
        let batch = poisson_sample(rows.nrows(), config.dp.sampling_rate, &mut rng);
        if batch.is_empty() {
            continue;
        }
        let draws = config.noise_draws;
        let k = batch.len() * draws;
        let steps = sample_steps(k, model.schedule.steps(), &mut rng);
        let mut input = Array2::zeros((k, n + dim));
        let mut target = Array2::zeros((k, n));
        for (r, &t) in steps.iter().enumerate() {
            let i = batch.indices[r / draws];
            let ab = model.schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                target[[r, j]] = e;
                input[[r, j]] = a * rows[[i, j]] + b * e;
            }
            for (j, &e) in table[t].iter().enumerate() {
                input[[r, n + j]] = e;
            }
        }
        let tape = model.predictor.forward_tape(input.view())?;
        let (losses, grad) = Loss::Mse.evaluate(&model.predictor, &tape, target.view())?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged);
        }
        let back = model.predictor.backward_from_logits(&tape, grad)?;
        let expanded = model.predictor.expand_per_example(&tape, &back);
        let per_example = if draws == 1 {
            expanded
        } else {
            let grouped = expanded.rows().to_shape((batch.len(), draws, model.predictor.n_params())).expect("row-major");
            PerExampleGradients::from_rows(grouped.mean_axis(Axis(1)).expect("draws >= 1"))
        };
        let g = private_gradient(&per_example, &config.dp, &mut rng)?;
        model.predictor.apply_update(&g, config.dp.learning_rate)?;
        if !model.predictor.is_finite() {
            return Err(Error::Diverged);
        }
    }
    model.privacy = accountant.guarantee(config.delta)?;
    model.training_cases = rows.nrows() as u64;
    Ok(model)
}

/// Mean noise-prediction MSE of `model` on fresh `(t, eps)` draws for every row.
pub fn denoising_loss<R: Rng + ?Sized>(model: &DiffusionModel, matrix: &OneHotMatrix, rng: &mut R) -> Result<f64> {
    let rows = matrix.rows();
    let n = rows.ncols();
    let table = embedding_table(&model.schedule, model.embedding_dim)?;
    let mut total = 0.0;
    for row in rows.rows() {
        let t = rng.random_range(1..=model.schedule.steps());
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = forward_sample(row.as_slice().expect("contiguous row"), t, &eps, &model.schedule)?;
        let xin = Array2::from_shape_vec((1, n), x.x).expect("shape");
        let pred = model.predict(xin.view(), &table[t])?;
        total += pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / n as f64;
    }
    Ok(total / rows.nrows() as f64)
}

/// One reverse transition `x_t -> x_{t-1}`. `z` is ignored at `t = 1`.
pub fn reverse_step(x_t: &[f64], t: usize, model: &DiffusionModel, z: &[f64]) -> Result<LatentState> {
    model.schedule.check_step(t)?;
    let n = model.vocab.len();
    if x_t.len() != n || z.len() != n {
        return Err(Error::Dimension(format!("state must have {n} coordinates")));
    }
    let emb = time_embedding(t as f64, model.embedding_dim)?;
    let xin = Array2::from_shape_vec((1, n), x_t.to_vec()).expect("shape");
    let eps_hat = model.predict(xin.view(), &emb)?;
    let mut x = posterior_mean(x_t, eps_hat.as_slice().expect("contiguous"), t, &model.schedule)?;
    if t > 1 {
        let sigma = model.schedule.sigma(t);
        x.iter_mut().zip(z).for_each(|(x, z)| *x += sigma * z);
    }
    Ok(LatentState { x, t: t - 1 })
}

/// Runs the full reverse chain for every row of `x`, starting at `x_T`.
fn reverse_chain<R: Rng + ?Sized>(
    model: &DiffusionModel,
    x: &mut Array2<f64>,
    table: &[Vec<f64>],
    rng: &mut R,
) -> Result<()> {
    let s = &model.schedule;
    for t in (1..=s.steps()).rev() {
        let eps_hat = model.predict(x.view(), &table[t])?;
        let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
        let scale = 1.0 / s.alpha(t).sqrt();
        let sigma = if t > 1 { s.sigma(t) } else { 0.0 };
        for (xv, e) in x.iter_mut().zip(eps_hat.iter()) {
            *xv = scale * (*xv - coef * e);
            if sigma > 0.0 {
                *xv += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            *xv = xv.clamp(-STATE_BOUND, STATE_BOUND);
        }
    }
    Ok(())
}

/// Draws `count` cases. Rows are produced in fixed-size chunks, each from
/// its own RNG stream of `seed`, so output does not depend on scheduling.
pub fn generate(model: &DiffusionModel, count: usize, seed: u64) -> Result<SimpleEventLog> {
    let n = model.vocab.len();
    let table = embedding_table(&model.schedule, model.embedding_dim)?;
    let mut counts = vec![0u64; n];
    let mut start = 0;
    let mut chunk = 0u64;
    while start < count {
        let k = GENERATION_CHUNK.min(count - start);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        let mut x = Array2::from_shape_simple_fn((k, n), || rng.sample(StandardNormal));
        reverse_chain(model, &mut x, &table, &mut rng)?;
        for row in x.axis_iter(Axis(0)) {
            let v = decode_row(row.as_slice().expect("contiguous row"), &model.vocab)?;
            counts[model.vocab.index_of(v).expect("decoded from vocab")] += 1;
        }
        start += k;
        chunk += 1;
    }
    Ok(model.vocab.columns().iter().cloned().zip(counts).collect())
}

/// Network whose output is the constant `value` in every coordinate.
pub fn constant_predictor(inputs: usize, outputs: usize, value: f64) -> Result<DenseNetwork> {
    let layer = crate::nn::DenseLayer::new(
        Array2::zeros((outputs, inputs)),
        Array1::from_elem(outputs, value),
        Activation::Linear,
    )?;
    DenseNetwork::from_layers(vec![layer])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::one_hot_encode;
    use crate::log::TraceVariant;
    use approx::assert_abs_diff_eq;

    fn vocab(n: usize) -> VariantVocabulary {
        VariantVocabulary::from_columns((0..n).map(|i| TraceVariant::new([format!("v{i}")])).collect()).unwrap()
    }

    #[test]
    fn schedule_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(4), 0.9 * 0.8 * 0.7 * 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(4), 0.3024, epsilon = 1e-12);
        let one = build_schedule(1, 0.3, 0.3).unwrap();
        assert_abs_diff_eq!(one.alpha_bar(1), 0.7, epsilon = 1e-15);
        assert_eq!(one.posterior_variance(1), 0.0);
        let d = NoiseSchedule::default();
        assert_eq!(d.steps(), 300);
        assert!(d.alpha_bar(300) < 1e-3);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, f64::NAN]).is_err());
    }

    #[test]
    fn linear_endpoints() {
        let s = build_schedule(5, 0.1, 0.5).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4, 0.5]) {
            assert_abs_diff_eq!(*b, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_sample_formula() {
        // alpha_bar_2 = 0.5 * 0.5
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let x = forward_sample(&[1.0, 0.0], 2, &[1.0, 1.0], &s).unwrap();
        assert_abs_diff_eq!(x.x[0], 0.5 + 0.75f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(x.x[1], 0.75f64.sqrt(), epsilon = 1e-12);
        assert!(forward_sample(&[1.0], 3, &[0.0], &s).is_err());
        assert!(forward_sample(&[1.0], 0, &[0.0], &s).is_err());
        assert!(forward_sample(&[1.0, 2.0], 1, &[0.0], &s).is_err());
    }

    #[test]
    fn reverse_step_hand_case() {
        // step 2 has alpha = 0.96 and alpha_bar = 0.5
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.5 / 0.96, 0.04]).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(2), 0.5, epsilon = 1e-15);
        let dim = 4;
        let model = DiffusionModel::new(vocab(2), s, constant_predictor(2 + dim, 2, 0.5).unwrap(), dim).unwrap();
        let expected = (1.0 / 0.96f64.sqrt()) * (1.0 - 0.04 / 0.5f64.sqrt() * 0.5);
        assert_abs_diff_eq!(expected, 0.9917532127, epsilon = 1e-9);
        let mean = posterior_mean(&[1.0, 1.0], &[0.5, 0.5], 2, &model.schedule).unwrap();
        assert_abs_diff_eq!(mean[0], expected, epsilon = 1e-12);
        let out = reverse_step(&[1.0, 1.0], 2, &model, &[0.0, 0.0]).unwrap();
        assert_eq!(out.t, 1);
        assert_abs_diff_eq!(out.x[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out.x[1], expected, epsilon = 1e-12);
        assert!(reverse_step(&[1.0, 1.0], 0, &model, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_predictor_rescales_and_last_step_ignores_noise() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let model = DiffusionModel::new(vocab(2), s, constant_predictor(4, 2, 0.0).unwrap(), 2).unwrap();
        let out = reverse_step(&[2.0, -1.0], 2, &model, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out.x[0], 2.0 / 0.8f64.sqrt(), epsilon = 1e-12);
        let last = reverse_step(&[2.0, -1.0], 1, &model, &[5.0, 5.0]).unwrap();
        assert_abs_diff_eq!(last.x[0], 2.0 / 0.9f64.sqrt(), epsilon = 1e-12);
        assert_eq!(last.t, 0);
    }

    #[test]
    fn posterior_variance_bounds() {
        let s = NoiseSchedule::default();
        for t in 1..=s.steps() {
            assert!(s.posterior_variance(t) >= 0.0 && s.posterior_variance(t) <= s.beta(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_abs_diff_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t), epsilon = 1e-15);
        }
    }

    fn single_variant_log() -> SimpleEventLog {
        SimpleEventLog::from_iter([(TraceVariant::new(["a", "b"]), 20)])
    }

    fn small_config() -> DiffusionConfig {
        DiffusionConfig {
            dp: DpSgdConfig { noise_multiplier: 0.0, sampling_rate: 0.5, iterations: 50, learning_rate: 0.05, seed: 3, ..Default::default() },
            steps: 20,
            beta_end: 0.3,
            hidden: vec![16],
            embedding_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn generation_sizes_and_support() {
        let (vocab, m) = one_hot_encode(&single_variant_log()).unwrap();
        let model = train(&m, &vocab, &small_config()).unwrap();
        assert_eq!(model.privacy, None);
        assert_eq!(model.training_cases, 20);
        assert!(generate(&model, 0, 1).unwrap().is_empty());
        let out = generate(&model, 1000, 1).unwrap();
        assert_eq!(out.frequency(&TraceVariant::new(["a", "b"])), 1000);
    }

    #[test]
    fn training_is_deterministic_and_reports_budget() {
        let log = SimpleEventLog::from_iter([(TraceVariant::new(["a"]), 12), (TraceVariant::new(["b"]), 8)]);
        let (vocab, m) = one_hot_encode(&log).unwrap();
        let mut config = small_config();
        config.dp.noise_multiplier = 1.5;
        let a = train(&m, &vocab, &config).unwrap();
        let b = train(&m, &vocab, &config).unwrap();
        assert_eq!(a, b);
        let p = a.privacy.unwrap();
        assert_eq!(p.delta, config.delta);
        assert!(p.epsilon > 0.0 && p.epsilon.is_finite());
        assert_eq!(generate(&a, 300, 9).unwrap(), generate(&b, 300, 9).unwrap());
    }

    #[test]
    fn model_json_round_trip() {
        let (vocab, m) = one_hot_encode(&single_variant_log()).unwrap();
        let model = train(&m, &vocab, &small_config()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: DiffusionModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
