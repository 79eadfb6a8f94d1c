//! Autoencoder + GAN engine.
//!
//! The encoder and generator never enter a DP update: the encoder is not
//! released, and the generator only ever sees the discriminator's verdict on
//! decoded fakes. The decoder and discriminator touch real rows and are
//! trained with DP-SGD; their guarantees compose sequentially.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_noise, compose_dp, AccountantState, Calibration, Composition, PrivacySpec};
use crate::dpsgd::{poisson_sample, private_gradient, DpSgdConfig};
use crate::encoding::{decode_row, OneHotMatrix, VariantVocabulary};
use crate::error::{Error, Result};
use crate::log::SimpleEventLog;
use crate::nn::{Activation, DenseNetwork, Loss, PerExampleGradients};

pub const DEFAULT_NOISE_DIM: usize = 64;

/// Generator output variance below this counts as collapsed.
const COLLAPSE_VARIANCE: f64 = 1e-8;
const COLLAPSE_PATIENCE: usize = 100;
const SAMPLING_CHUNK: usize = 4096;

/// `min(32, max(2, n / 8))`, shrunk below `n` when the vocabulary is tiny.
pub fn default_latent_dim(n: usize) -> usize {
    (n / 8).clamp(2, 32).min(n.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TravagConfig {
    /// DP-SGD settings of the decoder; its seed also drives autoencoder init.
    pub decoder: DpSgdConfig,
    /// DP-SGD settings of the discriminator; its seed also drives GAN init.
    pub discriminator: DpSgdConfig,
    pub latent_dim: Option<usize>,
    pub noise_dim: usize,
    /// Hidden widths of the encoder, decoder and generator.
    pub hidden: Vec<usize>,
    /// Hidden widths of the discriminator; empty gives a logistic model.
    pub discriminator_hidden: Vec<usize>,
    pub encoder_learning_rate: f64,
    pub generator_learning_rate: f64,
    pub reconstruction_loss: Loss,
    /// Std of Gaussian noise added to every discriminator input, real or fake.
    pub instance_noise: f64,
    /// Exponent `k` of the map `x^k / sum(x^k)` applied to decoded rows
    /// before the discriminator sees them; argmax is invariant to it and
    /// one-hot rows are fixed points. Zero disables it.
    pub sharpening: f64,
    /// L2 penalty on discriminator parameters, applied after privatization.
    pub discriminator_weight_decay: f64,
    /// Decay of the generator's parameter average; the average is what gets
    /// released. Zero keeps the last iterate.
    pub generator_ema: f64,
    /// Total delta; each private component reports at half of it.
    pub delta: f64,
}

impl Default for TravagConfig {
    fn default() -> Self {
        Self {
            decoder: DpSgdConfig::default(),
            discriminator: DpSgdConfig { seed: 1, ..DpSgdConfig::default() },
            latent_dim: None,
            noise_dim: DEFAULT_NOISE_DIM,
            hidden: vec![128],
            discriminator_hidden: vec![128],
            encoder_learning_rate: 1e-3,
            generator_learning_rate: 1e-3,
            reconstruction_loss: Loss::Mse,
            instance_noise: 0.0,
            sharpening: 0.0,
            discriminator_weight_decay: 0.0,
            generator_ema: 0.0,
            delta: 1e-5,
        }
    }
}

impl TravagConfig {
    /// Settings for logs of a few hundred cases and a handful of variants
    /// under tight budgets: small networks, full clipping (small `C`, large
    /// step), a logistic discriminator that sees sharpened, jittered rows
    /// and is L2-regularized, and a released generator average.
    pub fn small_log() -> Self {
        let dp = DpSgdConfig {
            clip_norm: 0.1,
            sampling_rate: 0.1,
            learning_rate: 0.5,
            iterations: 1000,
            ..DpSgdConfig::default()
        };
        Self {
            decoder: dp.clone(),
            discriminator: DpSgdConfig { seed: 1, ..dp },
            hidden: vec![32],
            discriminator_hidden: vec![],
            encoder_learning_rate: 0.5,
            generator_learning_rate: 0.5,
            reconstruction_loss: Loss::BinaryCrossEntropy,
            instance_noise: 0.25,
            sharpening: 8.0,
            discriminator_weight_decay: 0.3,
            generator_ema: 0.99,
            ..Self::default()
        }
    }

    /// Calibrates both private components to half of `target` each and sets
    /// the reporting delta, so the composed guarantee meets `target`.
    pub fn calibrate(&mut self, target: PrivacySpec) -> Result<(Calibration, Calibration)> {
        target.validate()?;
        let half = target.split(2);
        let dec = calibrate_noise(half, self.decoder.sampling_rate, self.decoder.iterations)?;
        let dis = calibrate_noise(half, self.discriminator.sampling_rate, self.discriminator.iterations)?;
        self.decoder.noise_multiplier = dec.noise_multiplier;
        self.discriminator.noise_multiplier = dis.noise_multiplier;
        self.delta = target.delta;
        Ok((dec, dis))
    }

    fn component_delta(&self) -> f64 {
        self.delta / 2.0
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(hidden);
    s.push(output);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderPair {
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
    pub latent_dim: usize,
}

impl AutoencoderPair {
    pub fn new<R: Rng + ?Sized>(n: usize, latent_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || (latent_dim >= n && n > 1) {
            return Err(Error::InvalidParameter(format!("latent dimension {latent_dim} must lie in 1..{n}")));
        }
        let encoder = DenseNetwork::new(&sizes(n, hidden, latent_dim), Activation::Relu, Activation::Linear, rng)?;
        let decoder = DenseNetwork::new(&sizes(latent_dim, hidden, n), Activation::Relu, Activation::Sigmoid, rng)?;
        Ok(Self { encoder, decoder, latent_dim })
    }

    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = self.encoder.forward(x)?;
        self.decoder.forward(h.view())
    }
}

/// Sizes of the two gradients produced by one autoencoder step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoencoderStep {
    pub loss: f64,
    /// Length of the clipped and noised decoder gradient.
    pub private_update_len: usize,
    /// Length of the plain encoder gradient.
    pub encoder_update_len: usize,
}

/// One joint step on `batch`: DP-SGD for the decoder, plain SGD for the
/// encoder through the decoder's (unclipped) input gradient.
pub fn autoencoder_step<R: Rng + ?Sized>(
    pair: &mut AutoencoderPair,
    batch: ArrayView2<'_, f64>,
    config: &TravagConfig,
    rng: &mut R,
) -> Result<AutoencoderStep> {
    let enc_tape = pair.encoder.forward_tape(batch)?;
    let dec_tape = pair.decoder.forward_tape(enc_tape.output().view())?;
    let (losses, grad) = config.reconstruction_loss.evaluate(&pair.decoder, &dec_tape, batch)?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged);
    }
    let dec_back = pair.decoder.backward_from_logits(&dec_tape, grad)?;
    let enc_back = pair.encoder.backward(&enc_tape, dec_back.grad_input.view())?;
    let encoder_grad = pair.encoder.mean_gradient(&enc_tape, &enc_back);
    let decoder_grads = pair.decoder.expand_per_example(&dec_tape, &dec_back);
    let private = private_gradient(&decoder_grads, &config.decoder, rng)?;
    pair.decoder.apply_update(&private, config.decoder.learning_rate)?;
    pair.encoder.apply_update(&encoder_grad, config.encoder_learning_rate)?;
    if !pair.decoder.is_finite() || !pair.encoder.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(AutoencoderStep { loss, private_update_len: private.len(), encoder_update_len: encoder_grad.len() })
}

/// Trains the autoencoder; the returned guarantee covers the decoder only.
pub fn train_autoencoder(matrix: &OneHotMatrix, config: &TravagConfig) -> Result<(AutoencoderPair, Option<PrivacySpec>)> {
    config.decoder.validate()?;
    let rows = matrix.rows();
    if rows.nrows() == 0 || rows.ncols() == 0 {
        return Err(Error::EmptyLog);
    }
    let n = rows.ncols();
    let d = config.latent_dim.unwrap_or_else(|| default_latent_dim(n));
    let mut rng = ChaCha8Rng::seed_from_u64(config.decoder.seed);
    let mut pair = AutoencoderPair::new(n, d, &config.hidden, &mut rng)?;
    let mut accountant = AccountantState::new(config.decoder.sampling_rate, config.decoder.noise_multiplier);
    for _ in 0..config.decoder.iterations {
        accountant.record_step();
        let sel = poisson_sample(rows.nrows(), config.decoder.sampling_rate, &mut rng);
        if sel.is_empty() {
            continue;
        }
        let x = rows.select(Axis(0), &sel.indices);
        autoencoder_step(&mut pair, x.view(), config, &mut rng)?;
    }
    Ok((pair, accountant.guarantee(config.component_delta())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanPair {
    pub generator: DenseNetwork,
    pub discriminator: DenseNetwork,
    pub noise_dim: usize,
}

impl GanPair {
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        latent_dim: usize,
        noise_dim: usize,
        hidden: &[usize],
        discriminator_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::InvalidParameter("noise dimension must be positive".into()));
        }
        let generator = DenseNetwork::new(&sizes(noise_dim, hidden, latent_dim), Activation::Relu, Activation::Linear, rng)?;
        let discriminator =
            DenseNetwork::new(&sizes(n, discriminator_hidden, 1), Activation::Relu, Activation::Sigmoid, rng)?;
        Ok(Self { generator, discriminator, noise_dim })
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Row-wise `x^k / sum(x^k)` for positive decoder outputs.
fn sharpen(x: &Array2<f64>, k: f64) -> Array2<f64> {
    let mut y = x.mapv(|v| v.max(0.0).powf(k));
    for mut row in y.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    y
}

/// Pulls `grad` (w.r.t. `sharpen(x, k)`) back to `x`.
fn sharpen_backward(x: &Array2<f64>, y: &Array2<f64>, grad: &Array2<f64>, k: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let s: f64 = x.row(i).iter().map(|v| v.max(0.0).powf(k)).sum();
        if s <= 0.0 {
            continue;
        }
        let dot: f64 = grad.row(i).iter().zip(y.row(i)).map(|(g, y)| g * y).sum();
        for j in 0..x.ncols() {
            let v = x[[i, j]].max(0.0);
            out[[i, j]] = k * v.powf(k - 1.0) / s * (grad[[i, j]] - dot);
        }
    }
    out
}

fn jitter<R: Rng + ?Sized>(x: &mut Array2<f64>, std: f64, rng: &mut R) {
    if std > 0.0 {
        x.iter_mut().for_each(|v| *v += std * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Decoded fakes `dec(gen(z))` for `count` fresh seeds.
fn decoded_fakes<R: Rng + ?Sized>(
    gan: &GanPair,
    decoder: &DenseNetwork,
    count: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let z = gaussian(count, gan.noise_dim, rng);
    let latent = gan.generator.forward(z.view())?;
    decoder.forward(latent.view())
}

/// DP-SGD step of the discriminator. The unit of privacy is one real row
/// paired with one fake; the pair's summed gradient is what gets clipped.
pub fn discriminator_step<R: Rng + ?Sized>(
    gan: &mut GanPair,
    decoder: &DenseNetwork,
    real: ArrayView2<'_, f64>,
    config: &TravagConfig,
    rng: &mut R,
) -> Result<f64> {
    let dp = &config.discriminator;
    let k = real.nrows();
    let mut fake = decoded_fakes(gan, decoder, k, rng)?;
    if config.sharpening > 0.0 {
        fake = sharpen(&fake, config.sharpening);
    }
    let mut input = concatenate(Axis(0), &[real, fake.view()]).map_err(|e| Error::Dimension(e.to_string()))?;
    jitter(&mut input, config.instance_noise, rng);
    let mut target = Array2::zeros((2 * k, 1));
    target.slice_mut(ndarray::s![..k, ..]).fill(1.0);
    let tape = gan.discriminator.forward_tape(input.view())?;
    let (losses, grad) = Loss::BinaryCrossEntropy.evaluate(&gan.discriminator, &tape, target.view())?;
    let loss = losses.iter().sum::<f64>() / k as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged);
    }
    let back = gan.discriminator.backward_from_logits(&tape, grad)?;
    let all = gan.discriminator.expand_per_example(&tape, &back);
    let rows = all.rows();
    let paired = &rows.slice(ndarray::s![..k, ..]) + &rows.slice(ndarray::s![k.., ..]);
    let mut g = private_gradient(&PerExampleGradients::from_rows(paired), dp, rng)?;
    if config.discriminator_weight_decay > 0.0 {
        for (g, w) in g.iter_mut().zip(gan.discriminator.parameters()) {
            *g += config.discriminator_weight_decay * w;
        }
    }
    gan.discriminator.apply_update(&g, dp.learning_rate)?;
    if !gan.discriminator.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(loss)
}

/// Plain SGD step of the generator on the non-saturating loss
/// `-log D(dec(gen(z)))`. Takes no data: only the frozen decoder and
/// discriminator lie on its gradient path. Returns the loss and the mean
/// per-coordinate variance of the generator output.
pub fn generator_step<R: Rng + ?Sized>(
    gan: &mut GanPair,
    decoder: &DenseNetwork,
    batch_size: usize,
    learning_rate: f64,
    instance_noise: f64,
    sharpening: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let z = gaussian(batch_size.max(1), gan.noise_dim, rng);
    let gen_tape = gan.generator.forward_tape(z.view())?;
    let dec_tape = decoder.forward_tape(gen_tape.output().view())?;
    let decoded = dec_tape.output();
    let mut seen = if sharpening > 0.0 { sharpen(decoded, sharpening) } else { decoded.clone() };
    let sharpened = (sharpening > 0.0).then(|| seen.clone());
    jitter(&mut seen, instance_noise, rng);
    let dis_tape = gan.discriminator.forward_tape(seen.view())?;
    let target = Array2::ones((z.nrows(), 1));
    let (losses, grad) = Loss::BinaryCrossEntropy.evaluate(&gan.discriminator, &dis_tape, target.view())?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged);
    }
    let dis_back = gan.discriminator.backward_from_logits(&dis_tape, grad)?;
    let grad_decoded = match &sharpened {
        Some(y) => sharpen_backward(decoded, y, &dis_back.grad_input, sharpening),
        None => dis_back.grad_input,
    };
    let dec_back = decoder.backward(&dec_tape, grad_decoded.view())?;
    let gen_back = gan.generator.backward(&gen_tape, dec_back.grad_input.view())?;
    let g = gan.generator.mean_gradient(&gen_tape, &gen_back);
    gan.generator.apply_update(&g, learning_rate)?;
    if !gan.generator.is_finite() {
        return Err(Error::Diverged);
    }
    let variance = gen_tape.output().var_axis(Axis(0), 0.0).mean().unwrap_or(0.0);
    Ok((loss, variance))
}

/// Alternates one discriminator and one generator step per iteration. The
/// returned guarantee covers the discriminator only.
pub fn train_gan(
    matrix: &OneHotMatrix,
    autoencoder: &AutoencoderPair,
    config: &TravagConfig,
) -> Result<(GanPair, Option<PrivacySpec>)> {
    let dp = &config.discriminator;
    dp.validate()?;
    let rows = matrix.rows();
    if rows.nrows() == 0 {
        return Err(Error::EmptyLog);
    }
    if rows.ncols() != autoencoder.decoder.out_dim() {
        return Err(Error::Dimension("matrix width differs from decoder output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dp.seed);
    let mut gan = GanPair::new(
        rows.ncols(),
        autoencoder.latent_dim,
        config.noise_dim,
        &config.hidden,
        &config.discriminator_hidden,
        &mut rng,
    )?;
    let mut accountant = AccountantState::new(dp.sampling_rate, dp.noise_multiplier);
    let fake_batch = ((rows.nrows() as f64 * dp.sampling_rate).round() as usize).max(1);
    let mut flat_steps = 0usize;
    let mut warned = false;
    let beta = config.generator_ema;
    let mut average = gan.generator.parameters();
    for _ in 0..dp.iterations {
        accountant.record_step();
        let sel = poisson_sample(rows.nrows(), dp.sampling_rate, &mut rng);
        if !sel.is_empty() {
            let real = rows.select(Axis(0), &sel.indices);
            discriminator_step(&mut gan, &autoencoder.decoder, real.view(), config, &mut rng)?;
        }
        let (_, variance) = generator_step(
            &mut gan,
            &autoencoder.decoder,
            fake_batch,
            config.generator_learning_rate,
            config.instance_noise,
            config.sharpening,
            &mut rng,
        )?;
        if beta > 0.0 {
            for (a, w) in average.iter_mut().zip(gan.generator.parameters()) {
                *a = beta * *a + (1.0 - beta) * w;
            }
        }
        flat_steps = if variance < COLLAPSE_VARIANCE { flat_steps + 1 } else { 0 };
        if flat_steps >= COLLAPSE_PATIENCE && !warned {
            log::warn!("generator output variance below {COLLAPSE_VARIANCE:e} for {COLLAPSE_PATIENCE} steps: possible mode collapse");
            warned = true;
        }
    }
    if beta > 0.0 {
        gan.generator.set_parameters(&average)?;
    }
    Ok((gan, accountant.guarantee(config.component_delta())?))
}

/// Fully trained pipeline, including the parts that are never released.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravagModel {
    pub vocab: VariantVocabulary,
    pub autoencoder: AutoencoderPair,
    pub gan: Option<GanPair>,
    /// `None` when the decoder was trained without noise.
    pub decoder_privacy: Option<PrivacySpec>,
    pub discriminator_privacy: Option<PrivacySpec>,
    pub training_cases: u64,
}

impl TravagModel {
    /// Keeps only what sampling needs: vocabulary, decoder and generator.
    pub fn release(&self) -> Result<TravagRelease> {
        let gan = self
            .gan
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("generator not trained".into()))?;
        Ok(TravagRelease {
            vocab: self.vocab.clone(),
            decoder: self.autoencoder.decoder.clone(),
            generator: gan.generator.clone(),
            noise_dim: gan.noise_dim,
            privacy: total_privacy(self).ok(),
            training_cases: self.training_cases,
        })
    }
}

/// Publishable part of a trained pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravagRelease {
    pub vocab: VariantVocabulary,
    pub decoder: DenseNetwork,
    pub generator: DenseNetwork,
    pub noise_dim: usize,
    /// `None` when some component was trained without noise.
    pub privacy: Option<PrivacySpec>,
    pub training_cases: u64,
}

impl TravagRelease {
    /// `count` decoded draws of `dec(gen(z))`, `z ~ N(0, I)`. Chunks use
    /// independent streams of `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<SimpleEventLog> {
        if self.generator.in_dim() != self.noise_dim
            || self.generator.out_dim() != self.decoder.in_dim()
            || self.decoder.out_dim() != self.vocab.len()
        {
            return Err(Error::Dimension("generator, decoder and vocabulary do not chain".into()));
        }
        let mut counts = vec![0u64; self.vocab.len()];
        let mut start = 0;
        let mut chunk = 0u64;
        while start < count {
            let k = SAMPLING_CHUNK.min(count - start);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let z = gaussian(k, self.noise_dim, &mut rng);
            let out = self.decoder.forward(self.generator.forward(z.view())?.view())?;
            for row in out.rows() {
                let v = decode_row(row.as_slice().expect("contiguous row"), &self.vocab)?;
                counts[self.vocab.index_of(v).expect("decoded from vocab")] += 1;
            }
            start += k;
            chunk += 1;
        }
        Ok(self.vocab.columns().iter().cloned().zip(counts).collect())
    }
}

/// Sequential composition of the decoder and discriminator guarantees; the
/// decoder alone when no GAN was trained.
pub fn total_privacy(model: &TravagModel) -> Result<PrivacySpec> {
    let decoder = model.decoder_privacy.ok_or(Error::ZeroNoise)?;
    if model.gan.is_none() {
        return Ok(decoder);
    }
    let discriminator = model.discriminator_privacy.ok_or(Error::ZeroNoise)?;
    compose_dp(&[decoder, discriminator], Composition::Sequential)
}

/// Trains both stages on `matrix`.
pub fn train(matrix: &OneHotMatrix, vocab: &VariantVocabulary, config: &TravagConfig) -> Result<TravagModel> {
    if matrix.n_cols() != vocab.len() {
        return Err(Error::Dimension("matrix and vocabulary disagree".into()));
    }
    let (autoencoder, decoder_privacy) = train_autoencoder(matrix, config)?;
    let (gan, discriminator_privacy) = train_gan(matrix, &autoencoder, config)?;
    Ok(TravagModel {
        vocab: vocab.clone(),
        autoencoder,
        gan: Some(gan),
        decoder_privacy,
        discriminator_privacy,
        training_cases: matrix.n_rows() as u64,
    })
}
