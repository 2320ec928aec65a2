//! Small dense networks with hand-written backprop, the hybrid policy and
//! critic heads, divergence primitives, Adam, and the binary checkpoint format.
//!
//! Parameters live in one flat `Vec<f64>` per network so optimizers, Polyak
//! mixing and serialization all work on plain slices.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{ActionMode, HybridAction, Policy, PolicyAction, StateVector, NUM_GEAR_COMMANDS, STATE_DIM};
use crate::error::{DecodeError, Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Probability floor used inside logarithms of categorical distributions.
pub const PROB_FLOOR: f64 = 1e-8;
/// Actor output: torque mean, raw log-std, three gear logits.
pub const POLICY_OUTPUT_DIM: usize = 2 + NUM_GEAR_COMMANDS;
/// Critic input: state features, normalized torque, one-hot gear command.
pub const CRITIC_INPUT_DIM: usize = STATE_DIM + 1 + NUM_GEAR_COMMANDS;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize) -> Result<Self> {
        let s = Self {
            input_dim,
            hidden_layers,
            output_dim,
            activation: Activation::Tanh,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        Ok(())
    }

    /// `(out, in)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Layer activations retained by a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[k]` the output of hidden layer `k`.
    acts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(Self { spec, params: vec![0.0; n] })
    }

    /// Uniform fan-in initialization `U(-1/√fan_in, 1/√fan_in)` with zero
    /// biases; the output layer is further scaled by `output_scale`.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng, output_scale: f64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let shapes = net.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut off = 0;
        for (l, (o, i)) in shapes.iter().enumerate() {
            let bound = 1.0 / (*i as f64).sqrt() * if l == last { output_scale } else { 1.0 };
            for p in &mut net.params[off..off + o * i] {
                *p = rng.random_range(-bound..=bound);
            }
            off += o * i + o;
        }
        Ok(net)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape {
                context: "mlp parameters",
                expected: spec.param_count().to_string(),
                got: params.len().to_string(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, off: usize, o: usize, i: usize) -> (ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("layer shape");
        let b = ndarray::ArrayView1::from(&self.params[off + o * i..off + o * i + o]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape {
                context: "mlp input",
                expected: format!("[_, {}]", self.spec.input_dim),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut off = 0;
        let mut h = x.to_owned();
        for (l, (o, i)) in shapes.iter().enumerate() {
            let (w, b) = self.layer(off, *o, *i);
            let mut z = h.dot(&w.t());
            z += &b;
            if l != last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
            off += o * i + o;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut acts = vec![x.to_owned()];
        let mut off = 0;
        let mut out = None;
        for (l, (o, i)) in shapes.iter().enumerate() {
            let (w, b) = self.layer(off, *o, *i);
            let mut z = acts.last().expect("input").dot(&w.t());
            z += &b;
            if l != last {
                z.mapv_inplace(f64::tanh);
                acts.push(z);
            } else {
                out = Some(z);
            }
            off += o * i + o;
        }
        Ok((out.expect("at least one layer"), MlpCache { acts }))
    }

    /// Gradient of `Σ grad_out ⊙ f(x)` with respect to the flat parameters.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.backward_full(cache, grad_out)?.0)
    }

    /// Parameter gradient plus the gradient with respect to the input.
    pub fn backward_full(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let batch = cache.acts[0].nrows();
        if grad_out.shape() != [batch, self.spec.output_dim] {
            return Err(Error::Shape {
                context: "mlp output gradient",
                expected: format!("[{batch}, {}]", self.spec.output_dim),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let shapes = self.spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (o, i) in &shapes {
            offsets.push(off);
            off += o * i + o;
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..shapes.len()).rev() {
            let (o, i) = shapes[l];
            let a = &cache.acts[l];
            let dw = delta.t().dot(a);
            let db = delta.sum_axis(Axis(0));
            let base = offsets[l];
            grads[base..base + o * i].copy_from_slice(dw.as_slice().expect("contiguous"));
            grads[base + o * i..base + o * i + o].copy_from_slice(db.as_slice().expect("contiguous"));
            let (w, _) = self.layer(base, o, i);
            let mut next = delta.dot(&w);
            if l > 0 {
                next.zip_mut_with(a, |d, h| *d *= 1.0 - h * h);
            }
            delta = next;
        }
        Ok((grads, delta))
    }

    pub fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut off = 0;
        for (l, (o, i)) in self.spec.layer_shapes().into_iter().enumerate() {
            out.push(Tensor {
                name: format!("{prefix}layer{l}.weight"),
                dims: vec![o, i],
                data: self.params[off..off + o * i].to_vec(),
            });
            out.push(Tensor {
                name: format!("{prefix}layer{l}.bias"),
                dims: vec![o],
                data: self.params[off + o * i..off + o * i + o].to_vec(),
            });
            off += o * i + o;
        }
        out
    }

    /// Rebuilds a network from `{prefix}layerK.weight/bias` tensors.
    pub fn from_tensors(tensors: &[Tensor], prefix: &str) -> Result<Self> {
        let find = |name: String| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Architecture(format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        while let Some(w) = tensors.iter().find(|t| t.name == format!("{prefix}layer{}.weight", layers.len())) {
            let b = find(format!("{prefix}layer{}.bias", layers.len()))?;
            if w.dims.len() != 2 || b.dims != [w.dims[0]] {
                return Err(Error::Architecture(format!("layer {} has inconsistent shapes", layers.len())));
            }
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::Architecture(format!("no layers with prefix {prefix:?}")));
        }
        for pair in layers.windows(2) {
            if pair[1].0.dims[1] != pair[0].0.dims[0] {
                return Err(Error::Architecture("layer widths do not chain".into()));
            }
        }
        let spec = MlpSpec::new(
            layers[0].0.dims[1],
            layers[..layers.len() - 1].iter().map(|(w, _)| w.dims[0]).collect(),
            layers[layers.len() - 1].0.dims[0],
        )?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (w, b) in layers {
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        Self::from_params(spec, params)
    }
}

/// Bounded log-std from the raw network output, and its derivative.
pub fn squash_log_std(raw: f64) -> (f64, f64) {
    let mid = 0.5 * (LOG_STD_MAX + LOG_STD_MIN);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    let t = raw.tanh();
    (mid + half * t, half * (1.0 - t * t))
}

/// Inverse of [`squash_log_std`] on the open interval.
pub fn unsquash_log_std(log_std: f64) -> f64 {
    let mid = 0.5 * (LOG_STD_MAX + LOG_STD_MIN);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    ((log_std - mid) / half).clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn validate_probs(p: &[f64], what: &'static str) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::NonFinite(what));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// `Σ p log(p/q)` with `q` floored at [`PROB_FLOOR`].
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            context: "kl_categorical",
            expected: p.len().to_string(),
            got: q.len().to_string(),
        });
    }
    validate_probs(p, "kl_categorical p")?;
    validate_probs(q, "kl_categorical q")?;
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi < PROB_FLOOR {
                log::debug!("kl_categorical: q mass {qi} floored");
            }
            kl += pi * (pi.ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(kl.max(0.0))
}

/// `KL(N(μp,σp²) ‖ N(μq,σq²))`.
pub fn kl_gaussian(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64) -> f64 {
    let r = sigma_p / sigma_q;
    let d = (mu_p - mu_q) / sigma_q;
    (-(r.ln()) + 0.5 * (r * r + d * d) - 0.5).max(0.0)
}

/// Entropy of a categorical distribution.
pub fn entropy_categorical(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Full-support cross-entropy `-Σ p log softmax(logits)` and its gradient
/// with respect to the logits.
pub fn xent_categorical(p_teacher: &[f64], student_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p_teacher.len() != student_logits.len() {
        return Err(Error::Shape {
            context: "xent_categorical",
            expected: p_teacher.len().to_string(),
            got: student_logits.len().to_string(),
        });
    }
    validate_probs(p_teacher, "xent_categorical teacher")?;
    let ls = log_softmax(student_logits);
    let q = softmax(student_logits);
    let total: f64 = p_teacher.iter().sum();
    let loss = -p_teacher.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>();
    let grad = q.iter().zip(p_teacher).map(|(q, p)| total * q - p).collect();
    Ok((loss, grad))
}

/// Closed-form Gaussian cross-entropy
/// `½log 2πσ_g² + (σ_i² + (μ_i-μ_g)²)/(2σ_g²)`.
pub fn xent_gaussian(mu_i: f64, sigma_i: f64, mu_g: f64, sigma_g: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * sigma_g * sigma_g).ln()
        + (sigma_i * sigma_i + (mu_i - mu_g).powi(2)) / (2.0 * sigma_g * sigma_g)
}

/// Gradient of [`xent_gaussian`] with respect to `(μ_g, log σ_g)`.
pub fn xent_gaussian_grad(mu_i: f64, sigma_i: f64, mu_g: f64, sigma_g: f64) -> (f64, f64) {
    let var_g = sigma_g * sigma_g;
    let d_mu = (mu_g - mu_i) / var_g;
    let d_log_sigma = 1.0 - (sigma_i * sigma_i + (mu_i - mu_g).powi(2)) / var_g;
    (d_mu, d_log_sigma)
}

pub fn gaussian_log_prob(x: f64, mu: f64, log_std: f64) -> f64 {
    let z = (x - mu) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Gradient of [`gaussian_log_prob`] with respect to `(μ, log σ)`.
pub fn gaussian_log_prob_grad(x: f64, mu: f64, log_std: f64) -> (f64, f64) {
    let inv_var = (-2.0 * log_std).exp();
    let d = x - mu;
    (d * inv_var, d * d * inv_var - 1.0)
}

/// Per-state distribution parameters produced by the policy heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    /// `d log σ / d raw` for backprop through the squashing.
    pub dlog_std_draw: Vec<f64>,
    pub logits: Vec<[f64; NUM_GEAR_COMMANDS]>,
    pub probs: Vec<[f64; NUM_GEAR_COMMANDS]>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_std[i].exp()
    }

    /// Greedy gear-command index.
    pub fn argmax_gear(&self, i: usize) -> usize {
        argmax(&self.probs[i])
    }
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Upstream gradients on the policy heads for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHeadGrad {
    pub d_mu: Vec<f64>,
    pub d_log_std: Vec<f64>,
    pub d_logits: Vec<[f64; NUM_GEAR_COMMANDS]>,
}

impl PolicyHeadGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![0.0; n],
            d_log_std: vec![0.0; n],
            d_logits: vec![[0.0; NUM_GEAR_COMMANDS]; n],
        }
    }
}

/// Hybrid policy: Gaussian over normalized wheel torque `u = T / T_max` and a
/// categorical over gear commands, both read off one MLP trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    /// Torque scale `T_max` (Nm) mapping `u ∈ [-1, 1]` to wheel torque.
    pub max_torque_nm: f64,
}

impl PolicyNet {
    pub fn new(hidden: &[usize], max_torque_nm: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = MlpSpec::new(STATE_DIM, hidden.to_vec(), POLICY_OUTPUT_DIM)?;
        Ok(Self {
            mlp: Mlp::init(spec, rng, 0.1)?,
            max_torque_nm,
        })
    }

    pub fn hidden_layers(&self) -> &[usize] {
        &self.mlp.spec().hidden_layers
    }

    fn split(out: &Array2<f64>) -> PolicyBatch {
        let n = out.nrows();
        let mut b = PolicyBatch {
            mu: Vec::with_capacity(n),
            log_std: Vec::with_capacity(n),
            dlog_std_draw: Vec::with_capacity(n),
            logits: Vec::with_capacity(n),
            probs: Vec::with_capacity(n),
        };
        for row in out.rows() {
            b.mu.push(row[0]);
            let (ls, d) = squash_log_std(row[1]);
            b.log_std.push(ls);
            b.dlog_std_draw.push(d);
            let logits = [row[2], row[3], row[4]];
            let p = softmax(&logits);
            b.logits.push(logits);
            b.probs.push([p[0], p[1], p[2]]);
        }
        b
    }

    pub fn evaluate(&self, features: ArrayView2<f64>) -> Result<PolicyBatch> {
        Ok(Self::split(&self.mlp.forward(features)?))
    }

    pub fn evaluate_cached(&self, features: ArrayView2<f64>) -> Result<(PolicyBatch, MlpCache)> {
        let (out, cache) = self.mlp.forward_cached(features)?;
        Ok((Self::split(&out), cache))
    }

    /// Backprop head gradients through the squashing and the trunk.
    pub fn backward(&self, cache: &MlpCache, batch: &PolicyBatch, g: &PolicyHeadGrad) -> Result<Vec<f64>> {
        let n = batch.len();
        if g.d_mu.len() != n || g.d_log_std.len() != n || g.d_logits.len() != n {
            return Err(Error::Shape {
                context: "policy head gradient",
                expected: n.to_string(),
                got: g.d_mu.len().to_string(),
            });
        }
        let mut out = Array2::zeros((n, POLICY_OUTPUT_DIM));
        for i in 0..n {
            out[[i, 0]] = g.d_mu[i];
            out[[i, 1]] = g.d_log_std[i] * batch.dlog_std_draw[i];
            for k in 0..NUM_GEAR_COMMANDS {
                out[[i, 2 + k]] = g.d_logits[i][k];
            }
        }
        self.mlp.backward(cache, out.view())
    }

    pub fn evaluate_states(&self, states: &[StateVector]) -> Result<PolicyBatch> {
        self.evaluate(features_matrix(states).view())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut t = self.mlp.tensors("policy.");
        t.push(Tensor {
            name: "policy.max_torque_nm".into(),
            dims: vec![1],
            data: vec![self.max_torque_nm],
        });
        encode_checkpoint(&t)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let tensors = decode_checkpoint(bytes)?;
        Self::from_tensors(&tensors)
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let mlp = Mlp::from_tensors(tensors, "policy.")?;
        if mlp.spec().input_dim != STATE_DIM || mlp.spec().output_dim != POLICY_OUTPUT_DIM {
            return Err(Error::Architecture("policy input/output dims".into()));
        }
        let max_torque_nm = scalar_tensor(tensors, "policy.max_torque_nm")?;
        Ok(Self { mlp, max_torque_nm })
    }

    /// Samples (or takes the greedy) hybrid action for one state.
    pub fn sample_action(&self, state: &StateVector, mode: ActionMode, rng: &mut ChaCha8Rng) -> Result<PolicyAction> {
        let f = state.features();
        let x = ArrayView2::from_shape((1, STATE_DIM), &f).expect("one row");
        let b = self.evaluate(x)?;
        let (mu, log_std, probs) = (b.mu[0], b.log_std[0], b.probs[0]);
        let (u, gear) = match mode {
            ActionMode::Greedy => (mu.clamp(-1.0, 1.0), argmax(&probs)),
            ActionMode::Sample => {
                let z: f64 = rng.sample(StandardNormal);
                let u = (mu + log_std.exp() * z).clamp(-1.0, 1.0);
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut gear = NUM_GEAR_COMMANDS - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        gear = k;
                        break;
                    }
                }
                (u, gear)
            }
        };
        Ok(PolicyAction {
            action: HybridAction {
                torque_nm: u * self.max_torque_nm,
                gear_cmd: HybridAction::gear_cmd_from_index(gear),
            },
            log_prob_cont: gaussian_log_prob(u, mu, log_std),
            log_prob_disc: probs[gear].max(PROB_FLOOR).ln(),
        })
    }
}

impl Policy for PolicyNet {
    fn act(&self, state: &StateVector, mode: ActionMode, rng: &mut ChaCha8Rng) -> Result<PolicyAction> {
        self.sample_action(state, mode, rng)
    }
}

/// Stacks state features into a `[n, 6]` matrix.
pub fn features_matrix(states: &[StateVector]) -> Array2<f64> {
    let mut m = Array2::zeros((states.len(), STATE_DIM));
    for (i, s) in states.iter().enumerate() {
        for (j, f) in s.features().iter().enumerate() {
            m[[i, j]] = *f;
        }
    }
    m
}

/// Critic input row for state features, normalized torque and gear-command index.
pub fn critic_input(features: &[f64; STATE_DIM], u: f64, gear: usize) -> [f64; CRITIC_INPUT_DIM] {
    let mut x = [0.0; CRITIC_INPUT_DIM];
    x[..STATE_DIM].copy_from_slice(features);
    x[STATE_DIM] = u;
    x[STATE_DIM + 1 + gear] = 1.0;
    x
}

/// State-action value `Q(s, u, g) = value_scale · f(s, u, onehot(g))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub mlp: Mlp,
    pub value_scale: f64,
}

impl CriticNet {
    pub fn new(hidden: &[usize], value_scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = MlpSpec::new(CRITIC_INPUT_DIM, hidden.to_vec(), 1)?;
        Ok(Self {
            mlp: Mlp::init(spec, rng, 0.1)?,
            value_scale,
        })
    }

    pub fn q(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>> {
        let out = self.mlp.forward(inputs)?;
        Ok(out.column(0).mapv(|x| x * self.value_scale))
    }

    pub fn q_cached(&self, inputs: ArrayView2<f64>) -> Result<(Array1<f64>, MlpCache)> {
        let (out, cache) = self.mlp.forward_cached(inputs)?;
        Ok((out.column(0).mapv(|x| x * self.value_scale), cache))
    }

    /// Parameter gradient of `Σ dq ⊙ Q`.
    pub fn backward(&self, cache: &MlpCache, dq: &[f64]) -> Result<Vec<f64>> {
        let g = Array2::from_shape_vec((dq.len(), 1), dq.iter().map(|d| d * self.value_scale).collect())
            .map_err(|e| Error::invalid(e.to_string()))?;
        self.mlp.backward(cache, g.view())
    }

    pub fn q_single(&self, features: &[f64; STATE_DIM], u: f64, gear: usize) -> Result<f64> {
        let x = critic_input(features, u, gear);
        let v = ArrayView2::from_shape((1, CRITIC_INPUT_DIM), &x).expect("one row");
        Ok(self.q(v)?[0])
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut t = self.mlp.tensors("critic.");
        t.push(Tensor {
            name: "critic.value_scale".into(),
            dims: vec![1],
            data: vec![self.value_scale],
        });
        encode_checkpoint(&t)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(&decode_checkpoint(bytes)?)
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let mlp = Mlp::from_tensors(tensors, "critic.")?;
        if mlp.spec().input_dim != CRITIC_INPUT_DIM || mlp.spec().output_dim != 1 {
            return Err(Error::Architecture("critic input/output dims".into()));
        }
        let value_scale = scalar_tensor(tensors, "critic.value_scale")?;
        Ok(Self { mlp, value_scale })
    }
}

fn scalar_tensor(tensors: &[Tensor], name: &str) -> Result<f64> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Architecture(format!("missing tensor {name}")))?;
    match t.data.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::Architecture(format!("{name} must hold one value"))),
    }
}

/// Bias-corrected Adam over a flat parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update. Non-finite gradients leave both the parameters and
    /// the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "adam",
                expected: self.m.len().to_string(),
                got: format!("params {} grads {}", params.len(), grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradients"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `target ← (1-τ)·target + τ·source`.
pub fn polyak(target: &mut [f64], source: &[f64], tau: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializes tensors as `FLNN`, u16 version, u32 count, then per tensor:
/// u16 name length, UTF-8 name, u32 rank, u32 dims, f64 data. Little-endian.
pub fn encode_checkpoint(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(DecodeError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<Tensor>, DecodeError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(DecodeError::BadMagic { found: magic });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DecodeError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(DecodeError::Malformed(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining())).ok_or(DecodeError::Truncated {
            needed: dims.iter().product::<usize>().saturating_mul(8),
            available: r.remaining(),
        })?;
        let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        tensors.push(Tensor { name, dims, data });
    }
    if r.remaining() != 0 {
        return Err(DecodeError::TrailingBytes(r.remaining()));
    }
    Ok(tensors)
}
