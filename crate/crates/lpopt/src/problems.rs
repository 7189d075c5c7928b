//! Desk-scale training problems with analytic gradients and, where possible,
//! known optima and smoothness constants. These supply the ground truth for
//! convergence runs and bound checks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::rng::splitmix64;
use crate::tensor::Tensor;

/// Named parameter tensors, in a fixed order.
pub type Params = Vec<(String, Tensor)>;

/// A differentiable objective with seeded stochastic gradients.
pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;

    /// Total number of scalar parameters.
    fn dim(&self) -> usize;

    /// Starting point of a run; deterministic per problem seed.
    fn initial_params(&self) -> Params;

    /// Full deterministic objective.
    fn loss(&self, params: &Params) -> f64;

    /// Analytic gradient of [`Problem::loss`].
    fn full_grad(&self, params: &Params) -> Vec<Tensor>;

    /// Gradient estimate used by optimizers; noise and minibatch selection
    /// are keyed by `step` so runs replay exactly.
    fn stochastic_grad(&self, params: &Params, step: u64) -> Vec<Tensor> {
        let _ = step;
        self.full_grad(params)
    }

    /// Known minimizer and minimum, when available.
    fn optimum(&self) -> Option<(Params, f64)> {
        None
    }

    /// Smoothness constant of the objective, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step.wrapping_add(0x5bd1_e995))))
}

// ---------------------------------------------------------------------------
// quadratic

/// Diagonal convex quadratic `f(x) = 1/2 (x - x*)' A (x - x*)` with
/// eigenvalues spanning [1, condition_number], so L = condition_number and
/// f* = 0. Optional additive Gaussian gradient noise with known total
/// variance `sigma^2`.
#[derive(Clone)]
pub struct Quadratic {
    eigenvalues: Vec<f64>,
    theta_star: Vec<f64>,
    theta0: Vec<f64>,
    noise_sigma: f64,
    seed: u64,
}

/// Build a quadratic problem; `noise_sigma` is the standard deviation of the
/// total gradient noise norm (split evenly across coordinates).
pub fn quadratic(d: usize, condition_number: f64, seed: u64, noise_sigma: f64) -> Quadratic {
    assert!(d >= 1 && condition_number >= 1.0);
    let eig = |i: usize| {
        if d == 1 {
            condition_number
        } else {
            1.0 + (condition_number - 1.0) * i as f64 / (d - 1) as f64
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let theta_star: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let theta0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Quadratic {
        eigenvalues: (0..d).map(eig).collect(),
        theta_star,
        theta0,
        noise_sigma,
        seed,
    }
}

impl Quadratic {
    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    /// Keep the geometry but draw gradient noise from a different stream;
    /// used for independent replications of the same problem.
    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn distance_from_start(&self) -> f64 {
        self.theta0
            .iter()
            .zip(&self.theta_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn initial_params(&self) -> Params {
        vec![("theta".into(), Tensor::from_vec(self.theta0.clone()))]
    }

    fn loss(&self, params: &Params) -> f64 {
        let theta = params[0].1.data();
        0.5 * theta
            .iter()
            .zip(&self.theta_star)
            .zip(&self.eigenvalues)
            .map(|((t, s), a)| a * (t - s) * (t - s))
            .sum::<f64>()
    }

    fn full_grad(&self, params: &Params) -> Vec<Tensor> {
        let theta = params[0].1.data();
        let g = theta
            .iter()
            .zip(&self.theta_star)
            .zip(&self.eigenvalues)
            .map(|((t, s), a)| a * (t - s))
            .collect();
        vec![Tensor::from_vec(g)]
    }

    fn stochastic_grad(&self, params: &Params, step: u64) -> Vec<Tensor> {
        let mut g = self.full_grad(params);
        if self.noise_sigma > 0.0 {
            let d = self.dim();
            let per_coord = self.noise_sigma / (d as f64).sqrt();
            let mut rng = step_rng(self.seed, step);
            for v in g[0].data_mut() {
                *v += per_coord * rng.sample::<f64, _>(StandardNormal);
            }
        }
        g
    }

    fn optimum(&self) -> Option<(Params, f64)> {
        Some((
            vec![("theta".into(), Tensor::from_vec(self.theta_star.clone()))],
            0.0,
        ))
    }

    fn smoothness(&self) -> Option<f64> {
        self.eigenvalues.iter().copied().fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
    }
}

// ---------------------------------------------------------------------------
// logistic regression

/// Binary logistic regression on a synthetic separable-with-noise dataset.
/// The weight vector starts at zero, where the loss is exactly ln 2.
pub struct LogisticRegression {
    features: Vec<f64>, // n x d, row-major
    labels: Vec<f64>,   // +-1
    n: usize,
    d: usize,
    batch: Option<usize>,
    seed: u64,
}

pub fn logistic_regression(n_samples: usize, d: usize, seed: u64) -> LogisticRegression {
    assert!(n_samples >= 1 && d >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6c6f_6772_6567));
    let w_true: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 / (d as f64).sqrt())
        .collect();
    let mut features = Vec::with_capacity(n_samples * d);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let margin: f64 = row.iter().zip(&w_true).map(|(x, w)| x * w).sum();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal);
        labels.push(if margin + 0.5 * noise >= 0.0 { 1.0 } else { -1.0 });
        features.extend(row);
    }
    LogisticRegression {
        features,
        labels,
        n: n_samples,
        d,
        batch: None,
        seed,
    }
}

impl LogisticRegression {
    /// Use minibatches of the given size; `None` keeps full-batch gradients.
    pub fn with_batch(mut self, batch: Option<usize>) -> Self {
        self.batch = batch.filter(|&b| b > 0 && b < self.n);
        self
    }

    fn grad_over(&self, w: &[f64], rows: &[usize]) -> Tensor {
        let mut g = vec![0.0f64; self.d];
        for &i in rows {
            let row = &self.features[i * self.d..(i + 1) * self.d];
            let y = self.labels[i];
            let z: f64 = row.iter().zip(w).map(|(x, w)| x * w).sum();
            // d/dz ln(1 + exp(-y z)) = -y * sigmoid(-y z)
            let s = 1.0 / (1.0 + (y * z).exp());
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj -= y * s * xj / rows.len() as f64;
            }
        }
        Tensor::from_vec(g)
    }
}

fn log1p_exp(m: f64) -> f64 {
    // ln(1 + e^m), stable for large |m|
    if m > 30.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

impl Problem for LogisticRegression {
    fn name(&self) -> &'static str {
        "logreg"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn initial_params(&self) -> Params {
        vec![("w".into(), Tensor::zeros(vec![self.d]))]
    }

    fn loss(&self, params: &Params) -> f64 {
        let w = params[0].1.data();
        let mut total = 0.0;
        for i in 0..self.n {
            let row = &self.features[i * self.d..(i + 1) * self.d];
            let z: f64 = row.iter().zip(w).map(|(x, w)| x * w).sum();
            total += log1p_exp(-self.labels[i] * z);
        }
        total / self.n as f64
    }

    fn full_grad(&self, params: &Params) -> Vec<Tensor> {
        let rows: Vec<usize> = (0..self.n).collect();
        vec![self.grad_over(params[0].1.data(), &rows)]
    }

    fn stochastic_grad(&self, params: &Params, step: u64) -> Vec<Tensor> {
        match self.batch {
            None => self.full_grad(params),
            Some(b) => {
                let mut rng = step_rng(self.seed, step);
                let rows = rand::seq::index::sample(&mut rng, self.n, b).into_vec();
                vec![self.grad_over(params[0].1.data(), &rows)]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// small MLP

/// Tanh MLP regression on synthetic data, parameters exposed as named
/// tensors. Feature columns carry geometrically spaced scales so gradient
/// (and second-moment) magnitudes spread over several orders of magnitude,
/// the regime where normalization granularity matters. Layer sizes are
/// chosen by the caller; the default harness configuration keeps one weight
/// matrix above the quantization eligibility threshold.
pub struct SmallMlp {
    sizes: Vec<usize>,
    inputs: Vec<f64>,  // n x sizes[0]
    targets: Vec<f64>, // n x sizes[last]
    n: usize,
    batch: Option<usize>,
    seed: u64,
}

pub fn small_mlp(layer_sizes: &[usize], n_samples: usize, seed: u64) -> SmallMlp {
    assert!(layer_sizes.len() >= 3, "need at least one hidden layer");
    assert!(n_samples >= 1);
    let d_in = layer_sizes[0];
    let d_out = *layer_sizes.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6d6c_705f_6461));
    let col_scale: Vec<f64> = (0..d_in)
        .map(|j| {
            if d_in == 1 {
                1.0
            } else {
                10f64.powf(-1.0 + 2.0 * j as f64 / (d_in - 1) as f64)
            }
        })
        .collect();
    let mut inputs = Vec::with_capacity(n_samples * d_in);
    for _ in 0..n_samples {
        for s in &col_scale {
            inputs.push(s * rng.sample::<f64, _>(StandardNormal));
        }
    }
    // teacher: targets = tanh(x_scaled . W) for a random W
    let teacher: Vec<f64> = (0..d_in * d_out)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (d_in as f64).sqrt())
        .collect();
    let mut targets = Vec::with_capacity(n_samples * d_out);
    for i in 0..n_samples {
        let row = &inputs[i * d_in..(i + 1) * d_in];
        for k in 0..d_out {
            let z: f64 = row
                .iter()
                .enumerate()
                .map(|(j, x)| x / col_scale[j] * teacher[j * d_out + k])
                .sum();
            targets.push(z.tanh());
        }
    }
    SmallMlp {
        sizes: layer_sizes.to_vec(),
        inputs,
        targets,
        n: n_samples,
        batch: None,
        seed,
    }
}

impl SmallMlp {
    pub fn with_batch(mut self, batch: Option<usize>) -> Self {
        self.batch = batch.filter(|&b| b > 0 && b < self.n);
        self
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Forward pass over the given rows; returns activations per layer
    /// (a[0] = inputs slice, hidden layers tanh, last layer linear).
    fn forward(&self, params: &Params, rows: &[usize]) -> Vec<Vec<f64>> {
        let b = rows.len();
        let d_in = self.sizes[0];
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers() + 1);
        let mut a0 = Vec::with_capacity(b * d_in);
        for &i in rows {
            a0.extend_from_slice(&self.inputs[i * d_in..(i + 1) * d_in]);
        }
        acts.push(a0);
        for l in 0..self.layers() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let w = params[2 * l].1.data();
            let bias = params[2 * l + 1].1.data();
            let prev = &acts[l];
            let mut z = vec![0.0f64; b * dout];
            for r in 0..b {
                for k in 0..dout {
                    let mut acc = bias[k];
                    for j in 0..din {
                        acc += prev[r * din + j] * w[j * dout + k];
                    }
                    z[r * dout + k] = if l + 1 < self.layers() { acc.tanh() } else { acc };
                }
            }
            acts.push(z);
        }
        acts
    }

    fn grad_over(&self, params: &Params, rows: &[usize]) -> Vec<Tensor> {
        let b = rows.len();
        let acts = self.forward(params, rows);
        let d_out = *self.sizes.last().unwrap();
        // d loss / d output for 0.5/b sum of squares
        let mut delta: Vec<f64> = acts[self.layers()]
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let (r, k) = (idx / d_out, idx % d_out);
                (p - self.targets[rows[r] * d_out + k]) / b as f64
            })
            .collect();
        let mut grads: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for l in (0..self.layers()).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            {
                let gw = grads[2 * l].data_mut();
                for r in 0..b {
                    for j in 0..din {
                        let a = prev[r * din + j];
                        for k in 0..dout {
                            gw[j * dout + k] += a * delta[r * dout + k];
                        }
                    }
                }
            }
            {
                let gb = grads[2 * l + 1].data_mut();
                for r in 0..b {
                    for k in 0..dout {
                        gb[k] += delta[r * dout + k];
                    }
                }
            }
            if l > 0 {
                let w = params[2 * l].1.data();
                let mut next = vec![0.0f64; b * din];
                for r in 0..b {
                    for j in 0..din {
                        let mut acc = 0.0;
                        for k in 0..dout {
                            acc += delta[r * dout + k] * w[j * dout + k];
                        }
                        let a = prev[r * din + j];
                        next[r * din + j] = acc * (1.0 - a * a);
                    }
                }
                delta = next;
            }
        }
        grads
    }
}

impl Problem for SmallMlp {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn dim(&self) -> usize {
        (0..self.layers())
            .map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1])
            .sum()
    }

    fn initial_params(&self) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ 0x1d17));
        let mut params = Vec::new();
        for l in 0..self.layers() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let std = 1.0 / (din as f64).sqrt();
            let w: Vec<f64> = (0..din * dout)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.push((format!("w{l}"), Tensor::new(vec![din, dout], w).unwrap()));
            params.push((format!("b{l}"), Tensor::zeros(vec![dout])));
        }
        params
    }

    fn loss(&self, params: &Params) -> f64 {
        let rows: Vec<usize> = (0..self.n).collect();
        let acts = self.forward(params, &rows);
        let d_out = *self.sizes.last().unwrap();
        let pred = &acts[self.layers()];
        let mut total = 0.0;
        for (idx, &p) in pred.iter().enumerate() {
            let (r, k) = (idx / d_out, idx % d_out);
            let e = p - self.targets[rows[r] * d_out + k];
            total += e * e;
        }
        0.5 * total / self.n as f64
    }

    fn full_grad(&self, params: &Params) -> Vec<Tensor> {
        let rows: Vec<usize> = (0..self.n).collect();
        self.grad_over(params, &rows)
    }

    fn stochastic_grad(&self, params: &Params, step: u64) -> Vec<Tensor> {
        match self.batch {
            None => self.full_grad(params),
            Some(bsz) => {
                let mut rng = step_rng(self.seed, step);
                let rows = rand::seq::index::sample(&mut rng, self.n, bsz).into_vec();
                self.grad_over(params, &rows)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// finite differences

/// Central-difference derivative of `loss` with respect to one coordinate.
/// Depends only on the loss, never on the analytic gradient, so it serves as
/// an independent check of the latter.
pub fn central_difference(
    problem: &dyn Problem,
    params: &Params,
    tensor_idx: usize,
    coord: usize,
) -> f64 {
    let mut p = params.clone();
    let base = p[tensor_idx].1.data()[coord];
    let h = 1e-5 * (1.0 + base.abs());
    p[tensor_idx].1.data_mut()[coord] = base + h;
    let up = problem.loss(&p);
    p[tensor_idx].1.data_mut()[coord] = base - h;
    let down = problem.loss(&p);
    (up - down) / (2.0 * h)
}

/// Largest relative mismatch between the analytic gradient and central
/// differences over `n_coords` seeded random coordinates.
pub fn max_gradient_mismatch(problem: &dyn Problem, params: &Params, n_coords: usize, seed: u64) -> f64 {
    let grads = problem.full_grad(params);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let ti = rng.random_range(0..params.len());
        let ci = rng.random_range(0..params[ti].1.numel());
        let analytic = grads[ti].data()[ci];
        let fd = central_difference(problem, params, ti, ci);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_ground_truth() {
        let p = quadratic(12, 25.0, 3, 0.0);
        let (star, f_star) = p.optimum().unwrap();
        assert_eq!(p.loss(&star), f_star);
        let g = p.full_grad(&star);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(p.smoothness(), Some(25.0));
    }

    #[test]
    fn quadratic_descent_lemma_and_monotone_gd() {
        let p = quadratic(10, 40.0, 5, 0.0);
        let l = p.smoothness().unwrap();
        let mut params = p.initial_params();
        let mut prev = p.loss(&params);
        for _ in 0..50 {
            let g = p.full_grad(&params);
            let gn2: f64 = g[0].data().iter().map(|v| v * v).sum();
            let mut next = params.clone();
            for (t, gv) in next[0].1.data_mut().iter_mut().zip(g[0].data()) {
                *t -= gv / l;
            }
            let f_next = p.loss(&next);
            assert!(f_next <= prev - gn2 / (2.0 * l) + 1e-12);
            assert!(f_next <= prev);
            prev = f_next;
            params = next;
        }
    }

    #[test]
    fn quadratic_noise_is_seeded_and_sized() {
        let p = quadratic(50, 10.0, 9, 2.0);
        let params = p.initial_params();
        let a = p.stochastic_grad(&params, 4);
        let b = p.stochastic_grad(&params, 4);
        assert_eq!(a[0].data(), b[0].data());
        let clean = p.full_grad(&params);
        // empirical noise norm over many steps should match sigma
        let trials = 400;
        let mean_sq: f64 = (0..trials)
            .map(|s| {
                let g = p.stochastic_grad(&params, s as u64);
                g[0].data()
                    .iter()
                    .zip(clean[0].data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean_sq.sqrt() - 2.0).abs() < 0.2, "noise norm {}", mean_sq.sqrt());
    }

    #[test]
    fn logreg_loss_at_zero_is_ln2() {
        let p = logistic_regression(200, 10, 1);
        let params = p.initial_params();
        assert!((p.loss(&params) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn logreg_datasets_are_seed_deterministic() {
        let a = logistic_regression(50, 5, 11);
        let b = logistic_regression(50, 5, 11);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let c = logistic_regression(50, 5, 12);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn logreg_gradient_matches_finite_differences() {
        let p = logistic_regression(80, 8, 7);
        let mut params = p.initial_params();
        // move off the symmetric zero point
        for (i, v) in params[0].1.data_mut().iter_mut().enumerate() {
            *v = 0.1 * (i as f64 - 4.0);
        }
        assert!(max_gradient_mismatch(&p, &params, 50, 2) < 1e-4);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let p = small_mlp(&[6, 12, 10, 2], 40, 3);
        let params = p.initial_params();
        assert!(max_gradient_mismatch(&p, &params, 100, 4) < 1e-4);
    }

    #[test]
    fn mlp_zero_network_zero_targets_zero_output_grads() {
        let mut p = small_mlp(&[4, 8, 6, 2], 20, 5);
        p.targets.iter_mut().for_each(|t| *t = 0.0);
        let params: Params = p
            .initial_params()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let grads = p.full_grad(&params);
        // output-layer bias gradient is exactly zero
        assert!(grads.last().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_default_shape_crosses_eligibility_threshold() {
        let p = small_mlp(&[8, 64, 80, 1], 16, 0);
        let params = p.initial_params();
        let w1 = params.iter().find(|(n, _)| n == "w1").unwrap();
        assert_eq!(w1.1.numel(), 5120);
        assert!(w1.1.numel() > 4096);
        assert!(params.iter().filter(|(n, _)| n.starts_with('b')).all(|(_, t)| t.numel() <= 4096));
    }

    #[test]
    fn minibatch_sampling_is_reproducible() {
        let p = logistic_regression(100, 6, 21).with_batch(Some(16));
        let params = p.initial_params();
        let a = p.stochastic_grad(&params, 3);
        let b = p.stochastic_grad(&params, 3);
        assert_eq!(a[0].data(), b[0].data());
        let c = p.stochastic_grad(&params, 4);
        assert_ne!(a[0].data(), c[0].data());
    }
}
