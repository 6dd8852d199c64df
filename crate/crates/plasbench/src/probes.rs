//! Measurable proxies for the two-phases-of-learning picture: minibatch
//! gradient-noise magnitude and loss-surface sharpness via the top Hessian
//! eigenvalue. Probes run in 64-bit verification mode and leave the probed
//! network bit-identical.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Mode, Network};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Trace-of-covariance gradient noise statistics over M minibatches.
#[derive(Clone, Debug)]
pub struct NoiseEstimate {
    pub num_batches_m: usize,
    pub mean_grad_norm_sq: f64,
    /// Mean over batches of ||g_b - g_bar||^2.
    pub trace_variance: f64,
    /// trace_variance / max(||g_bar||^2, 1e-12).
    pub relative_noise: f64,
    /// Per-batch squared deviations, for error bars.
    pub per_batch_sq_dev: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SharpnessEstimate {
    /// Dominant-in-magnitude eigenvalue (reported signed).
    pub top_eigenvalue: f64,
    pub rayleigh_history: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl SharpnessEstimate {
    pub fn is_negative(&self) -> bool {
        self.top_eigenvalue < 0.0
    }
}

/// Anything that can produce a minibatch gradient at its current parameters.
pub trait GradientSource {
    fn dim(&self) -> usize;
    fn view_len(&self) -> usize;
    /// Gradient for the given (dataset-level) example indices; must not move
    /// the parameters.
    fn batch_gradient(&mut self, batch: &[u32]) -> Result<Vec<f64>>;
}

/// A loss whose gradient can be evaluated at movable parameters, on one fixed
/// batch.
pub trait LossSurface {
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, theta: &[f64]) -> Result<()>;
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

/// Computes M independent minibatch gradients at the current parameters
/// (each batch drawn without replacement from the view, sorted so equal
/// index sets give bit-equal gradients) and their dispersion statistics.
pub fn gradient_noise(
    source: &mut dyn GradientSource,
    batch_size: usize,
    num_batches_m: usize,
    seed: u64,
) -> Result<NoiseEstimate> {
    if num_batches_m < 2 {
        return Err(Error::Config("gradient_noise needs M >= 2 batches".into()));
    }
    if batch_size == 0 || batch_size > source.view_len() {
        return Err(Error::Config(format!(
            "batch_size {batch_size} out of range for a view of {} examples",
            source.view_len()
        )));
    }
    let mut rng = rng::rng_from(rng::derive(seed, "noise-probe"));
    let mut pool: Vec<u32> = (0..source.view_len() as u32).collect();

    let dim = source.dim();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(num_batches_m);
    for _ in 0..num_batches_m {
        pool.shuffle(&mut rng);
        let mut batch = pool[..batch_size].to_vec();
        batch.sort_unstable();
        grads.push(source.batch_gradient(&batch)?);
    }

    let mut mean = vec![0.0f64; dim];
    for g in &grads {
        for (m, &v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= num_batches_m as f64);

    let mean_grad_norm_sq = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / num_batches_m as f64;
    let per_batch_sq_dev: Vec<f64> = grads
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .collect();
    let trace_variance = per_batch_sq_dev.iter().sum::<f64>() / num_batches_m as f64;
    let mean_norm_sq: f64 = mean.iter().map(|v| v * v).sum();

    Ok(NoiseEstimate {
        num_batches_m,
        mean_grad_norm_sq,
        trace_variance,
        relative_noise: trace_variance / mean_norm_sq.max(1e-12),
        per_batch_sq_dev,
    })
}

pub const DEFAULT_HVP_DELTA: f64 = 1e-3;

/// Hessian-vector product by central differences of the gradient:
/// `Hv ~= (grad(theta + eps v) - grad(theta - eps v)) / (2 eps)` with
/// `eps = delta / ||v||`. Parameters are restored bit-exactly.
pub fn hvp(surface: &mut dyn LossSurface, v: &[f64], delta: f64) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Contract("hvp direction must be nonzero".into()));
    }
    if v.len() != surface.dim() {
        return Err(Error::Contract(format!(
            "hvp direction has {} coordinates, surface has {}",
            v.len(),
            surface.dim()
        )));
    }
    let eps = delta / norm;
    let theta = surface.params();

    let mut shifted = theta.clone();
    for (t, &vi) in shifted.iter_mut().zip(v) {
        *t += eps * vi;
    }
    surface.set_params(&shifted)?;
    let g_plus = surface.gradient();

    for ((t, &orig), &vi) in shifted.iter_mut().zip(&theta).zip(v) {
        *t = orig - eps * vi;
    }
    let g_minus = match &g_plus {
        Ok(_) => {
            surface.set_params(&shifted)?;
            surface.gradient()
        }
        Err(_) => Err(Error::Numeric("skipped".into())),
    };
    surface.set_params(&theta)?;
    let (g_plus, g_minus) = (g_plus?, g_minus?);

    let result: Vec<f64> = g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    if result.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(result)
}

pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_POWER_TOL: f64 = 1e-6;

/// Power iteration on the finite-difference HVP from a seeded random unit
/// start. Converges when the Rayleigh quotient's relative change drops below
/// `tol`; reports the dominant-in-magnitude eigenvalue, sign included.
pub fn top_eigenvalue(
    surface: &mut dyn LossSurface,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<SharpnessEstimate> {
    if max_iters == 0 {
        return Err(Error::Config("power iteration needs max_iters >= 1".into()));
    }
    let dim = surface.dim();
    let mut rng = rng::rng_from(rng::derive(seed, "power-iteration"));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut history: Vec<f64> = Vec::with_capacity(max_iters);
    let mut converged = false;
    for _ in 0..max_iters {
        let hv = hvp(surface, &v, DEFAULT_HVP_DELTA)?;
        // v is unit, so the Rayleigh quotient is just v . Hv.
        let rayleigh: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        if let Some(&prev) = history.last() {
            let denom: f64 = rayleigh.abs().max(1e-12);
            if ((rayleigh - prev).abs() / denom) < tol {
                history.push(rayleigh);
                converged = true;
                break;
            }
        }
        history.push(rayleigh);
        let hv_norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if hv_norm == 0.0 {
            converged = true;
            break;
        }
        v = hv.iter().map(|x| x / hv_norm).collect();
    }
    Ok(SharpnessEstimate {
        top_eigenvalue: history.last().copied().unwrap_or(0.0),
        iterations_used: history.len(),
        rayleigh_history: history,
        converged,
    })
}

/// Explicit quadratic `L = 0.5 theta^T A theta` with a dense symmetric `A`;
/// exact gradient `A theta`.
pub struct QuadraticSurface {
    matrix: Vec<f64>,
    dim: usize,
    theta: Vec<f64>,
}

impl QuadraticSurface {
    pub fn new(matrix: Vec<f64>, dim: usize, theta: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim || theta.len() != dim {
            return Err(Error::Contract("quadratic surface shape mismatch".into()));
        }
        Ok(QuadraticSurface { matrix, dim, theta })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut matrix = vec![0.0; dim * dim];
        for (i, &d) in diag.iter().enumerate() {
            matrix[i * dim + i] = d;
        }
        QuadraticSurface {
            matrix,
            dim,
            theta: vec![0.5; dim],
        }
    }
}

impl LossSurface for QuadraticSurface {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params(&self) -> Vec<f64> {
        self.theta.clone()
    }
    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        self.theta.copy_from_slice(theta);
        Ok(())
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                g[i] += self.matrix[i * self.dim + j] * self.theta[j];
            }
        }
        Ok(g)
    }
}

/// Least squares `mean_i (x_i . w - y_i)^2` over a fixed design, exposing
/// per-batch gradients for the noise probe.
pub struct LinearRegressionSource {
    design: Vec<f64>, // n x d
    targets: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl LinearRegressionSource {
    pub fn new(design: Vec<f64>, targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let dim = weights.len();
        if dim == 0 || targets.is_empty() || design.len() != targets.len() * dim {
            return Err(Error::Contract("regression source shape mismatch".into()));
        }
        Ok(LinearRegressionSource {
            design,
            targets,
            weights,
            dim,
        })
    }
}

impl GradientSource for LinearRegressionSource {
    fn dim(&self) -> usize {
        self.dim
    }
    fn view_len(&self) -> usize {
        self.targets.len()
    }
    fn batch_gradient(&mut self, batch: &[u32]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        for &i in batch {
            let i = i as usize;
            let row = &self.design[i * self.dim..(i + 1) * self.dim];
            let pred: f64 = row.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
            let residual = pred - self.targets[i];
            for (gj, &xj) in g.iter_mut().zip(row) {
                *gj += 2.0 * residual * xj;
            }
        }
        g.iter_mut().for_each(|v| *v /= batch.len() as f64);
        Ok(g)
    }
}

/// A network's softmax cross-entropy loss on a dataset view, as a gradient
/// source for the noise probe. Gradients use train-mode normalization
/// statistics; running stats are snapshotted and restored around every call.
pub struct NetworkGradientSource<'a> {
    net: &'a mut Network<f64>,
    dataset: &'a LabeledDataset,
    view: Vec<u32>,
}

impl<'a> NetworkGradientSource<'a> {
    pub fn new(net: &'a mut Network<f64>, dataset: &'a LabeledDataset, view: Vec<u32>) -> Self {
        NetworkGradientSource { net, dataset, view }
    }
}

impl GradientSource for NetworkGradientSource<'_> {
    fn dim(&self) -> usize {
        self.net.num_params()
    }
    fn view_len(&self) -> usize {
        self.view.len()
    }
    fn batch_gradient(&mut self, batch: &[u32]) -> Result<Vec<f64>> {
        let global: Vec<u32> = batch.iter().map(|&i| self.view[i as usize]).collect();
        let (x, labels) = self.dataset.gather_batch::<f64>(&global);
        let stats = self.net.norm_stats();
        let mut run = || -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let logits = self.net.forward(&mut tape, &x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            self.net.collect_grads(&tape)?;
            self.net.flat_grads()
        };
        let result = run();
        self.net.set_norm_stats(&stats);
        self.net.clear_grads();
        result
    }
}

/// A network's loss on one fixed batch, as a movable-parameter surface for
/// sharpness probing. Same normalization convention as the gradient source.
pub struct NetworkSurface<'a> {
    net: &'a mut Network<f64>,
    x: Tensor<f64>,
    labels: Vec<u32>,
}

impl<'a> NetworkSurface<'a> {
    pub fn new(net: &'a mut Network<f64>, x: Tensor<f64>, labels: Vec<u32>) -> Self {
        NetworkSurface { net, x, labels }
    }
}

impl LossSurface for NetworkSurface<'_> {
    fn dim(&self) -> usize {
        self.net.num_params()
    }
    fn params(&self) -> Vec<f64> {
        self.net.flat_params()
    }
    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        self.net.set_flat_params(theta)
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        let stats = self.net.norm_stats();
        let mut run = || -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let logits = self.net.forward(&mut tape, &self.x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &self.labels)?;
            tape.backward(loss)?;
            self.net.collect_grads(&tape)?;
            self.net.flat_grads()
        };
        let result = run();
        self.net.set_norm_stats(&stats);
        self.net.clear_grads();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hvp_on_diagonal_quadratic() {
        let mut surface = QuadraticSurface::diagonal(&[3.0, 1.0]);
        let hv = hvp(&mut surface, &[1.0, 0.0], DEFAULT_HVP_DELTA).unwrap();
        assert!((hv[0] - 3.0).abs() < 1e-6 && hv[1].abs() < 1e-6, "{hv:?}");
    }

    #[test]
    fn hvp_is_linear_in_v() {
        let mut surface = QuadraticSurface::diagonal(&[4.0, 2.0, 1.0]);
        let v = [0.3, -0.7, 0.2];
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let hv = hvp(&mut surface, &v, DEFAULT_HVP_DELTA).unwrap();
        let hv2 = hvp(&mut surface, &v2, DEFAULT_HVP_DELTA).unwrap();
        for (a, b) in hv.iter().zip(&hv2) {
            assert!((2.0 * a - b).abs() / b.abs().max(1e-12) < 1e-4);
        }
    }

    #[test]
    fn hvp_is_symmetric_on_random_vectors() {
        let mut rng = rng::rng_from(31);
        let dim = 6;
        // Random symmetric matrix.
        let mut matrix = vec![0.0f64; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                matrix[i * dim + j] = v;
                matrix[j * dim + i] = v;
            }
        }
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut surface = QuadraticSurface::new(matrix, dim, theta).unwrap();
        for _ in 0..5 {
            let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hu = hvp(&mut surface, &u, DEFAULT_HVP_DELTA).unwrap();
            let hv = hvp(&mut surface, &v, DEFAULT_HVP_DELTA).unwrap();
            let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
            assert!((uhv - vhu).abs() / vhu.abs().max(1e-12) < 1e-4);
        }
    }

    #[test]
    fn hvp_restores_parameters_bit_exactly() {
        let mut surface = QuadraticSurface::diagonal(&[5.0, 2.0, 1.0]);
        let before: Vec<u64> = surface.params().iter().map(|v| v.to_bits()).collect();
        hvp(&mut surface, &[1.0, 1.0, 1.0], DEFAULT_HVP_DELTA).unwrap();
        let after: Vec<u64> = surface.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn hvp_rejects_zero_direction() {
        let mut surface = QuadraticSurface::diagonal(&[1.0]);
        assert!(hvp(&mut surface, &[0.0], DEFAULT_HVP_DELTA).is_err());
    }

    #[test]
    fn power_iteration_finds_known_top_eigenvalue() {
        let mut surface = QuadraticSurface::diagonal(&[5.0, 2.0, 1.0]);
        let est = top_eigenvalue(&mut surface, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, 3).unwrap();
        assert!(est.converged);
        assert!((est.top_eigenvalue - 5.0).abs() / 5.0 < 0.01, "{}", est.top_eigenvalue);
    }

    #[test]
    fn scaling_the_loss_scales_the_estimate() {
        let diag = [3.0, 1.5, 0.2];
        let scaled: Vec<f64> = diag.iter().map(|d| 2.5 * d).collect();
        let mut a = QuadraticSurface::diagonal(&diag);
        let mut b = QuadraticSurface::diagonal(&scaled);
        let ea = top_eigenvalue(&mut a, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, 5).unwrap();
        let eb = top_eigenvalue(&mut b, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, 5).unwrap();
        let ratio = eb.top_eigenvalue / ea.top_eigenvalue;
        assert!((ratio - 2.5).abs() / 2.5 < 0.01, "ratio {ratio}");
    }

    #[test]
    fn negative_dominant_eigenvalue_reported_signed() {
        let mut surface = QuadraticSurface::diagonal(&[-7.0, 2.0, 1.0]);
        let est = top_eigenvalue(&mut surface, 500, 1e-9, 1).unwrap();
        assert!((est.top_eigenvalue + 7.0).abs() / 7.0 < 0.01, "{}", est.top_eigenvalue);
        assert!(est.is_negative());
    }

    #[test]
    fn power_iteration_deterministic_per_seed() {
        let mut a = QuadraticSurface::diagonal(&[5.0, 4.9, 1.0]);
        let ra = top_eigenvalue(&mut a, 50, 1e-12, 9).unwrap();
        let mut b = QuadraticSurface::diagonal(&[5.0, 4.9, 1.0]);
        let rb = top_eigenvalue(&mut b, 50, 1e-12, 9).unwrap();
        assert_eq!(ra.rayleigh_history, rb.rayleigh_history);
    }

    fn regression_fixture(sigma: f64, n: usize, dim: usize) -> LinearRegressionSource {
        use rand_distr::StandardNormal;
        let mut rng = rng::rng_from(1234);
        let design: Vec<f64> = (0..n * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let weights: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // Same unit noise draw for every sigma, scaled: residuals are
        // exactly -sigma * eps at theta = w*.
        let mut noise_rng = rng::rng_from(5678);
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let row = &design[i * dim..(i + 1) * dim];
                let clean: f64 = row.iter().zip(&weights).map(|(x, w)| x * w).sum();
                let eps: f64 = noise_rng.sample(StandardNormal);
                clean + sigma * eps
            })
            .collect();
        LinearRegressionSource::new(design, targets, weights).unwrap()
    }

    #[test]
    fn full_batch_gradients_have_zero_trace_variance() {
        let mut source = regression_fixture(0.5, 64, 4);
        let est = gradient_noise(&mut source, 64, 3, 0).unwrap();
        assert_eq!(est.trace_variance, 0.0);
        assert_eq!(est.relative_noise, 0.0);
    }

    #[test]
    fn trace_variance_scales_linearly_in_label_noise_variance() {
        let mut ratios = Vec::new();
        for &sigma in &[0.1, 0.2, 0.4] {
            let mut source = regression_fixture(sigma, 512, 8);
            let est = gradient_noise(&mut source, 16, 200, 42).unwrap();
            ratios.push(est.trace_variance / (sigma * sigma));
        }
        let base = ratios[0];
        for r in &ratios {
            assert!(
                (r - base).abs() / base < 0.15,
                "ratios not within 15%: {ratios:?}"
            );
        }
    }

    #[test]
    fn doubling_m_is_consistent_within_three_bootstrap_ses() {
        let mut source = regression_fixture(0.3, 256, 6);
        let small = gradient_noise(&mut source, 16, 100, 7).unwrap();
        let large = gradient_noise(&mut source, 16, 200, 8).unwrap();

        // Bootstrap SE of the mean of per-batch squared deviations.
        let bootstrap_se = |vals: &[f64], seed: u64| -> f64 {
            let mut rng = rng::rng_from(seed);
            let mut means = Vec::with_capacity(200);
            for _ in 0..200 {
                let s: f64 = (0..vals.len())
                    .map(|_| vals[rng.random_range(0..vals.len())])
                    .sum();
                means.push(s / vals.len() as f64);
            }
            let m = means.iter().sum::<f64>() / means.len() as f64;
            (means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / means.len() as f64).sqrt()
        };
        let se = bootstrap_se(&small.per_batch_sq_dev, 1) + bootstrap_se(&large.per_batch_sq_dev, 2);
        assert!(
            (small.trace_variance - large.trace_variance).abs() < 3.0 * se,
            "{} vs {} (3se = {})",
            small.trace_variance,
            large.trace_variance,
            3.0 * se
        );
    }

    #[test]
    fn two_seeds_agree_within_three_combined_ses() {
        let mut source = regression_fixture(0.3, 256, 6);
        let a = gradient_noise(&mut source, 16, 150, 100).unwrap();
        let b = gradient_noise(&mut source, 16, 150, 200).unwrap();
        let se = |est: &NoiseEstimate| {
            let vals = &est.per_batch_sq_dev;
            let m = est.trace_variance;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (var / vals.len() as f64).sqrt()
        };
        let combined = se(&a) + se(&b);
        assert!((a.trace_variance - b.trace_variance).abs() < 3.0 * combined);
    }

    #[test]
    fn bad_probe_configs_error() {
        let mut source = regression_fixture(0.1, 32, 4);
        assert!(gradient_noise(&mut source, 16, 1, 0).is_err());
        assert!(gradient_noise(&mut source, 33, 4, 0).is_err());
    }
}
