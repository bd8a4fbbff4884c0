//! Differentiable parameterized policy: a small MLP with tanh hidden layers
//! and an affine output, flat parameter vector, analytic Jacobians in both
//! the state and the parameters, and supervised fitting.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::seeding;
use crate::types::{Control, CoreError, State};

const MAGIC: &[u8; 5] = b"SPRP1";

/// Tanh MLP `state -> control`. Parameters are stored as one flat vector,
/// per layer row-major weights followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: DVector<f64>,
    clamp: Option<(DVector<f64>, DVector<f64>)>,
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            params: DVector::zeros(param_count(layer_sizes)),
            clamp: None,
        }
    }

    /// Seeded random initialization (scaled by fan-in).
    pub fn random(layer_sizes: &[usize], seed: u64) -> Self {
        let mut rng = seeding::rng(seed, seeding::tags::POLICY_INIT, 0);
        let mut params = DVector::zeros(param_count(layer_sizes));
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let scale = (1.0 / n_in as f64).sqrt();
            for i in 0..n_in * n_out {
                params[off + i] = rng.gen_range(-scale..scale);
            }
            off += n_in * n_out + n_out; // biases stay zero
        }
        Self { layer_sizes: layer_sizes.to_vec(), params, clamp: None }
    }

    pub fn with_clamp(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), self.control_dim());
        assert_eq!(hi.len(), self.control_dim());
        self.clamp = Some((lo, hi));
        self
    }

    pub fn with_params(mut self, params: DVector<f64>) -> Result<Self, CoreError> {
        if params.len() != self.params.len() || !params.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidParameters);
        }
        self.params = params;
        Ok(self)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }
    pub fn param_count(&self) -> usize {
        self.params.len()
    }
    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0]
    }
    pub fn control_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
    pub fn clamp_box(&self) -> Option<&(DVector<f64>, DVector<f64>)> {
        self.clamp.as_ref()
    }

    fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        // (weight offset, bias offset, next offset) per layer
        let mut out = Vec::new();
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            let wlen = w[0] * w[1];
            out.push((off, off + wlen, off + wlen + w[1]));
            off += wlen + w[1];
        }
        out
    }

    /// Activations per layer, starting with the input, ending with the
    /// pre-clamp output.
    fn activations(&self, x: &State) -> Vec<DVector<f64>> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.clone());
        let offsets = self.layer_offsets();
        for (l, (woff, boff, _)) in offsets.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let prev = acts.last().unwrap();
            let mut z = DVector::zeros(n_out);
            for i in 0..n_out {
                let mut s = self.params[boff + i];
                let row = woff + i * n_in;
                for j in 0..n_in {
                    s += self.params[row + j] * prev[j];
                }
                z[i] = s;
            }
            if l + 1 < n_layers {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Fold an elementwise input map `x -> s .* x + c` into the first layer,
    /// so the returned network evaluated on raw inputs equals `self` on
    /// transformed inputs. Used to train on standardized features while
    /// deploying on raw states.
    pub fn precompose_input_affine(&self, s: &DVector<f64>, c: &DVector<f64>) -> Mlp {
        assert_eq!(s.len(), self.state_dim());
        assert_eq!(c.len(), self.state_dim());
        let mut out = self.clone();
        let (woff, boff, _) = self.layer_offsets()[0];
        let (n_in, n_out) = (self.layer_sizes[0], self.layer_sizes[1]);
        for i in 0..n_out {
            let row = woff + i * n_in;
            for j in 0..n_in {
                out.params[boff + i] += self.params[row + j] * c[j];
                out.params[row + j] *= s[j];
            }
        }
        out
    }

    /// Pre-clamp MLP output.
    pub fn forward_preclamp(&self, x: &State) -> Control {
        self.activations(x).pop().unwrap()
    }

    /// Policy output, clamped to the output box when one is configured.
    pub fn forward(&self, x: &State) -> Control {
        let out = self.forward_preclamp(x);
        match &self.clamp {
            Some((lo, hi)) => Control::from_iterator(
                out.len(),
                out.iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .map(|(v, (l, h))| v.clamp(*l, *h)),
            ),
            None => out,
        }
    }

    /// Analytic Jacobian of the pre-clamp output w.r.t. the state:
    /// `J[i][j] = d pi_i / d x_j`, shape control_dim x state_dim.
    pub fn jac_state(&self, x: &State) -> DMatrix<f64> {
        let acts = self.activations(x);
        let offsets = self.layer_offsets();
        let n_layers = offsets.len();
        // Start from the input layer and push the Jacobian forward.
        let mut jac = DMatrix::identity(self.state_dim(), self.state_dim());
        for (l, (woff, _, _)) in offsets.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = DMatrix::from_fn(n_out, n_in, |i, j| self.params[woff + i * n_in + j]);
            jac = w * jac;
            if l + 1 < n_layers {
                let a = &acts[l + 1]; // tanh outputs
                for i in 0..n_out {
                    let d = 1.0 - a[i] * a[i];
                    jac.row_mut(i).scale_mut(d);
                }
            }
        }
        jac
    }

    /// Analytic Jacobian of the pre-clamp output w.r.t. the parameters,
    /// shape param_count x control_dim (column `j` is the gradient of output
    /// component `j`).
    pub fn jac_params(&self, x: &State) -> DMatrix<f64> {
        let acts = self.activations(x);
        let m = self.control_dim();
        let mut jac = DMatrix::zeros(self.param_count(), m);
        for j in 0..m {
            let mut seed = DVector::zeros(m);
            seed[j] = 1.0;
            let grad = self.backprop_params(&acts, &seed);
            jac.set_column(j, &grad);
        }
        jac
    }

    /// Gradient w.r.t. the parameters of `delta_out . output`, given cached
    /// activations and the output-side seed vector.
    fn backprop_params(&self, acts: &[DVector<f64>], delta_out: &DVector<f64>) -> DVector<f64> {
        let offsets = self.layer_offsets();
        let n_layers = offsets.len();
        let mut grad = DVector::zeros(self.param_count());
        let mut delta = delta_out.clone();
        for l in (0..n_layers).rev() {
            let (woff, boff, _) = offsets[l];
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input = &acts[l];
            for i in 0..n_out {
                grad[boff + i] = delta[i];
                let row = woff + i * n_in;
                for j in 0..n_in {
                    grad[row + j] = delta[i] * input[j];
                }
            }
            if l > 0 {
                let w = DMatrix::from_fn(n_out, n_in, |i, j| self.params[woff + i * n_in + j]);
                let mut back = w.transpose() * &delta;
                let a = &acts[l];
                for j in 0..n_in {
                    back[j] *= 1.0 - a[j] * a[j];
                }
                delta = back;
            }
        }
        grad
    }

    /// Mean squared-error training loss over the dataset:
    /// `mean of 1/2 ||pi(x) - u||^2` (pre-clamp output).
    pub fn training_loss(&self, data: &[(State, Control)]) -> f64 {
        let n = data.len().max(1) as f64;
        data.iter()
            .map(|(x, u)| {
                let e = self.forward_preclamp(x) - u;
                0.5 * e.norm_squared()
            })
            .sum::<f64>()
            / n
    }

    /// Serialize: magic, LE u32 layer count, LE u32 per layer size, then all
    /// parameters as LE f64.
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for s in &self.layer_sizes {
            buf.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for p in self.params.iter() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 9 || &buf[..5] != MAGIC {
            return Err(CoreError::BadPolicyFile("bad magic".into()));
        }
        let n_layers = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
        let mut off = 9;
        if buf.len() < off + 4 * n_layers {
            return Err(CoreError::BadPolicyFile("truncated layer table".into()));
        }
        let mut layer_sizes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_sizes.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n_params = param_count(&layer_sizes);
        if buf.len() != off + 8 * n_params {
            return Err(CoreError::BadPolicyFile(format!(
                "expected {} parameter bytes, found {}",
                8 * n_params,
                buf.len() - off
            )));
        }
        let mut params = DVector::zeros(n_params);
        for i in 0..n_params {
            params[i] = f64::from_le_bytes(buf[off + 8 * i..off + 8 * i + 8].try_into().unwrap());
        }
        Self::zeros(&layer_sizes).with_params(params)
    }
}

/// Hyperparameters for supervised fitting.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Trust region on the parameter update: `||theta* - theta_init|| <= delta`.
    pub trust_region: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            weight_decay: 0.0,
            trust_region: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs_accepted: usize,
    pub epochs_rejected: usize,
}

#[derive(Debug)]
pub enum FitError {
    /// Loss became non-finite; carries the last stable policy.
    Diverged { last_stable: Mlp },
    EmptyDataset,
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitError::Diverged { .. } => write!(f, "fit diverged (non-finite loss)"),
            FitError::EmptyDataset => write!(f, "fit called with an empty dataset"),
        }
    }
}

impl std::error::Error for FitError {}

fn project_trust_region(theta: &mut DVector<f64>, theta_init: &DVector<f64>, radius: f64) {
    let delta = &*theta - theta_init;
    let n = delta.norm();
    if n > radius {
        *theta = theta_init + delta * (radius / n);
    }
}

/// Mini-batch gradient descent on the squared-error surrogate, with
/// backtracking on the learning rate so accepted epochs never increase the
/// training loss. Deterministic given the seed.
pub fn fit(
    policy: &Mlp,
    data: &[(State, Control)],
    cfg: &FitConfig,
) -> Result<(Mlp, FitReport), FitError> {
    if data.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let theta_init = policy.params.clone();
    let mut current = policy.clone();
    let mut loss = current.training_loss(data);
    let initial_loss = loss;
    let mut lr = cfg.learning_rate;
    let mut accepted = 0;
    let mut rejected = 0;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        // Seeded shuffle; the permutation depends only on (seed, epoch).
        let mut rng = seeding::rng(cfg.seed, seeding::tags::FIT_SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut candidate = current.clone();
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = DVector::zeros(candidate.param_count());
            for &idx in batch {
                let (x, u) = &data[idx];
                let acts = candidate.activations(x);
                let err = acts.last().unwrap() - u;
                grad += candidate.backprop_params(&acts, &err);
            }
            grad /= batch.len() as f64;
            if cfg.weight_decay > 0.0 {
                grad += cfg.weight_decay * &candidate.params;
            }
            candidate.params -= lr * grad;
        }
        if let Some(radius) = cfg.trust_region {
            project_trust_region(&mut candidate.params, &theta_init, radius);
        }
        let new_loss = candidate.training_loss(data);
        if !new_loss.is_finite() {
            return Err(FitError::Diverged { last_stable: current });
        }
        if new_loss <= loss {
            current = candidate;
            loss = new_loss;
            accepted += 1;
            // Recover step size after backtracking, never beyond the base rate.
            lr = (lr * 1.5).min(cfg.learning_rate);
        } else {
            rejected += 1;
            lr *= 0.5;
            if lr < 1e-14 {
                break;
            }
        }
    }
    Ok((
        current,
        FitReport {
            initial_loss,
            final_loss: loss,
            epochs_accepted: accepted,
            epochs_rejected: rejected,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ParamUpdate {
    pub delta_theta: DVector<f64>,
    /// Set when the unregularized normal equations were rank deficient.
    pub rank_deficient: bool,
    pub residual: f64,
}

/// Ridge least-squares solution of the stacked linear system
/// `jac_params(x)^T dtheta = du - jac_state(x) dx` over all triples.
pub fn solve_param_update(
    policy: &Mlp,
    triples: &[(State, DVector<f64>, DVector<f64>)],
    ridge: f64,
    trust_region: Option<f64>,
) -> Result<ParamUpdate, CoreError> {
    if triples.is_empty() {
        return Err(CoreError::EmptyInput("solve_param_update needs >= 1 triple".into()));
    }
    let n = policy.param_count();
    let mut normal = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let mut rows: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(triples.len());
    for (x, dx, du) in triples {
        let jp = policy.jac_params(x); // n x m
        let js = policy.jac_state(x); // m x s
        let r = du - js * dx;
        normal += &jp * jp.transpose();
        rhs += &jp * &r;
        rows.push((jp, r));
    }
    let rank_deficient = Cholesky::new(normal.clone()).is_none();
    for i in 0..n {
        normal[(i, i)] += ridge;
    }
    let chol = Cholesky::new(normal).ok_or(CoreError::BackwardPassFailed)?;
    let mut delta_theta = chol.solve(&rhs);
    if let Some(radius) = trust_region {
        let nrm = delta_theta.norm();
        if nrm > radius {
            delta_theta *= radius / nrm;
        }
    }
    let residual = rows
        .iter()
        .map(|(jp, r)| (jp.transpose() * &delta_theta - r).norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(ParamUpdate { delta_theta, rank_deficient, residual })
}
