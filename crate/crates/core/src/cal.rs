//! Counterfactual attention head: a token scorer with softmax attention
//! feeding a two-layer ReLU MLP, the factual-minus-counterfactual "effect"
//! prediction, and a synthetic-token training demo.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::volume::{decode_f32le, encode_f32le, file_pair, read_json, write_json};

/// Counterfactual samples per effect evaluation.
pub const DEFAULT_K: usize = 4;

/// `T × F` token matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    rows: usize,
    features: usize,
    data: Vec<f64>,
}

impl Tokens {
    pub fn new(rows: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::input("token set is empty"));
        }
        if data.len() != rows * features {
            return Err(Error::input(format!(
                "token data length {} does not match {rows}x{features}",
                data.len()
            )));
        }
        Ok(Self { rows, features, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.features..(t + 1) * self.features]
    }

    /// `Σ_t w_t · X_t`.
    pub fn pool(&self, weights: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.features];
        for (t, w) in weights.iter().enumerate() {
            for (zi, x) in z.iter_mut().zip(self.row(t)) {
                *zi += w * x;
            }
        }
        z
    }
}

/// Activations of one MLP pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    z: Vec<f64>,
    pre: Vec<f64>,
    pub(crate) y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalShape {
    pub features: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub k: usize,
}

/// Attention scorer `w` (scores `w·X_t`, softmax over tokens) and prediction
/// head `Y(z) = W2 ReLU(W1 z + b1) + b2`. Parameters are stored flat as
/// `[w, W1, b1, W2, b2]` with row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CalHead {
    shape: CalShape,
    seed: u64,
    params: Vec<f64>,
}

impl CalHead {
    /// Xavier-uniform initialization of every weight matrix, zero biases.
    pub fn new(shape: CalShape, seed: u64) -> Result<Self> {
        if shape.features == 0 || shape.hidden == 0 || shape.outputs == 0 {
            return Err(Error::input("CAL head dimensions must be ≥ 1"));
        }
        if shape.k == 0 {
            return Err(Error::input("counterfactual sample count K must be ≥ 1"));
        }
        let mut head = Self {
            shape,
            seed,
            params: vec![0.0; Self::param_count(&shape)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, h, o) = (shape.features, shape.hidden, shape.outputs);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, p: &mut [f64]| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.random_range(-lim..lim);
            }
        };
        let o_ = head.offsets();
        fill(o_.w..o_.w1, f, 1, &mut head.params);
        fill(o_.w1..o_.b1, f, h, &mut head.params);
        fill(o_.w2..o_.b2, h, o, &mut head.params);
        Ok(head)
    }

    pub fn param_count(s: &CalShape) -> usize {
        s.features + s.hidden * s.features + s.hidden + s.outputs * s.hidden + s.outputs
    }

    pub fn shape(&self) -> CalShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::input(format!(
                "expected {} head parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("head parameters must be finite"));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn offsets(&self) -> Offsets {
        let (f, h, o) = (self.shape.features, self.shape.hidden, self.shape.outputs);
        let w1 = f;
        let b1 = w1 + h * f;
        let w2 = b1 + h;
        let b2 = w2 + o * h;
        Offsets { w: 0, w1, b1, w2, b2 }
    }

    fn check_tokens(&self, x: &Tokens) -> Result<()> {
        if x.features != self.shape.features {
            return Err(Error::input(format!(
                "tokens have {} features, head expects {}",
                x.features, self.shape.features
            )));
        }
        Ok(())
    }

    /// Softmax attention over tokens.
    pub fn attention(&self, x: &Tokens) -> Result<Vec<f64>> {
        self.check_tokens(x)?;
        let w = &self.params[..self.shape.features];
        let scores: Vec<f64> = (0..x.rows).map(|t| dot(w, x.row(t))).collect();
        Ok(softmax(&scores))
    }

    pub(crate) fn mlp(&self, z: &[f64]) -> MlpCache {
        let o = self.offsets();
        let (f, h, out) = (self.shape.features, self.shape.hidden, self.shape.outputs);
        let p = &self.params;
        let pre: Vec<f64> = (0..h)
            .map(|r| p[o.b1 + r] + dot(&p[o.w1 + r * f..o.w1 + (r + 1) * f], z))
            .collect();
        let y = (0..out)
            .map(|r| {
                let row = &p[o.w2 + r * h..o.w2 + (r + 1) * h];
                p[o.b2 + r] + row.iter().zip(&pre).map(|(w, a)| w * a.max(0.0)).sum::<f64>()
            })
            .collect();
        MlpCache { z: z.to_vec(), pre, y }
    }

    /// Accumulates parameter gradients of an MLP pass into `grad` and returns
    /// the gradient with respect to its input.
    pub(crate) fn mlp_backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let o = self.offsets();
        let (f, h, out) = (self.shape.features, self.shape.hidden, self.shape.outputs);
        let p = &self.params;
        let mut dhid = vec![0.0; h];
        for r in 0..out {
            grad[o.b2 + r] += dy[r];
            for c in 0..h {
                grad[o.w2 + r * h + c] += dy[r] * cache.pre[c].max(0.0);
                dhid[c] += dy[r] * p[o.w2 + r * h + c];
            }
        }
        let mut dz = vec![0.0; f];
        for r in 0..h {
            if cache.pre[r] <= 0.0 {
                continue;
            }
            let d = dhid[r];
            grad[o.b1 + r] += d;
            for c in 0..f {
                grad[o.w1 + r * f + c] += d * cache.z[c];
                dz[c] += d * p[o.w1 + r * f + c];
            }
        }
        dz
    }

    /// Gradient of the loss with respect to the attention weights, pushed
    /// through the softmax onto the scorer `w`.
    pub(crate) fn attention_backward(&self, x: &Tokens, attn: &[f64], d_attn: &[f64], grad: &mut [f64]) {
        let inner: f64 = attn.iter().zip(d_attn).map(|(a, d)| a * d).sum();
        for t in 0..x.rows {
            let ds = attn[t] * (d_attn[t] - inner);
            for (g, xv) in grad[..self.shape.features].iter_mut().zip(x.row(t)) {
                *g += ds * xv;
            }
        }
    }

    /// `Y(Σ_t A_t X_t)` with the learned attention.
    pub fn forward_factual(&self, x: &Tokens) -> Result<Vec<f64>> {
        let a = self.attention(x)?;
        Ok(self.mlp(&x.pool(&a)).y)
    }

    /// `K` random attention maps drawn from the symmetric Dirichlet(1)
    /// distribution over `rows` tokens.
    pub fn counterfactual_attention<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> Vec<Vec<f64>> {
        (0..self.shape.k).map(|_| dirichlet_ones(rng, rows)).collect()
    }

    /// Factual prediction minus the mean prediction under `K` random
    /// attention maps drawn with `seed`.
    pub fn forward_effect(&self, x: &Tokens, seed: u64) -> Result<Vec<f64>> {
        let a = self.attention(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bars = self.counterfactual_attention(&mut rng, x.rows);
        Ok(self.effect_with(x, &a, &bars).0)
    }

    /// Effect prediction for given factual and counterfactual attention maps;
    /// also returns the factual prediction.
    pub fn effect_with(&self, x: &Tokens, attn: &[f64], bars: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let fact = self.mlp(&x.pool(attn)).y;
        let mut effect = fact.clone();
        let k = bars.len() as f64;
        for bar in bars {
            let y = self.mlp(&x.pool(bar)).y;
            for (e, v) in effect.iter_mut().zip(&y) {
                *e -= v / k;
            }
        }
        (effect, fact)
    }

    /// Per-sample demo objective `MSE(effect, target)·[use_effect] +
    /// MSE(factual, target)` and its gradient accumulated into `grad`.
    pub fn sample_loss_grad(
        &self,
        x: &Tokens,
        target: &[f64],
        bars: &[Vec<f64>],
        use_effect: bool,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_tokens(x)?;
        if target.len() != self.shape.outputs {
            return Err(Error::input(format!(
                "target has {} values, head outputs {}",
                target.len(),
                self.shape.outputs
            )));
        }
        let attn = self.attention(x)?;
        let fact = self.mlp(&x.pool(&attn));
        let cfs: Vec<MlpCache> = if use_effect {
            bars.iter().map(|b| self.mlp(&x.pool(b))).collect()
        } else {
            Vec::new()
        };
        let out = self.shape.outputs as f64;
        let mut loss = 0.0;
        let mut dy_fact = vec![0.0; self.shape.outputs];
        for r in 0..self.shape.outputs {
            let e = fact.y[r] - target[r];
            loss += e * e / out;
            dy_fact[r] += 2.0 * e / out;
        }
        if use_effect {
            let k = cfs.len() as f64;
            let mut d_eff = vec![0.0; self.shape.outputs];
            for r in 0..self.shape.outputs {
                let effect = fact.y[r] - cfs.iter().map(|c| c.y[r]).sum::<f64>() / k;
                let e = effect - target[r];
                loss += e * e / out;
                d_eff[r] = 2.0 * e / out;
                dy_fact[r] += d_eff[r];
            }
            let d_cf: Vec<f64> = d_eff.iter().map(|d| -d / k).collect();
            for c in &cfs {
                self.mlp_backward(c, &d_cf, grad);
            }
        }
        let dz = self.mlp_backward(&fact, &dy_fact, grad);
        let d_attn: Vec<f64> = (0..x.rows).map(|t| dot(&dz, x.row(t))).collect();
        self.attention_backward(x, &attn, &d_attn, grad);
        Ok(loss)
    }

    /// Writes `<stem>.json` metadata and `<stem>.raw` f32 weights.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let meta = Checkpoint {
            shape: self.shape,
            seed: self.seed,
            count: self.params.len(),
            dtype: "f32le".into(),
        };
        let bytes = encode_f32le(&self.params).map_err(|m| Error::format(&raw_path, m))?;
        write_json(&json_path, &meta)?;
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<CalHead> {
        let (json_path, raw_path) = file_pair(path.as_ref());
        let meta: Checkpoint = read_json(&json_path)?;
        if meta.dtype != "f32le" {
            return Err(Error::format(
                &json_path,
                format!("dtype: unsupported {:?}", meta.dtype),
            ));
        }
        if meta.count != Self::param_count(&meta.shape) {
            return Err(Error::format(&json_path, "count: does not match the head shape"));
        }
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let params = decode_f32le(&bytes).map_err(|m| Error::format(&raw_path, m))?;
        if params.len() != meta.count {
            return Err(Error::format(
                &raw_path,
                format!(
                    "weight count mismatch: {} values, header says {}",
                    params.len(),
                    meta.count
                ),
            ));
        }
        Ok(CalHead {
            shape: meta.shape,
            seed: meta.seed,
            params,
        })
    }
}

struct Offsets {
    w: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    shape: CalShape,
    seed: u64,
    count: usize,
    dtype: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Uniform sample from the probability simplex (normalized unit exponentials).
pub(crate) fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Synthetic token dataset: every sample has `tokens` tokens of which
/// `signal` carry a noise-free marker in the leading `marker_dims` features
/// (zero for background tokens). The target is a fixed random linear map of
/// the mean signal-token content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub tokens: usize,
    pub signal: usize,
    pub features: usize,
    pub outputs: usize,
    pub samples: usize,
    pub held_out: usize,
    /// Leading feature dimensions holding the signal marker.
    pub marker_dims: usize,
    pub marker_amp: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            signal: 2,
            features: 64,
            outputs: 8,
            samples: 2000,
            held_out: 500,
            marker_dims: 8,
            marker_amp: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSample {
    pub x: Tokens,
    pub signal: Vec<usize>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DemoData {
    pub train: Vec<DemoSample>,
    pub test: Vec<DemoSample>,
}

pub fn make_demo_dataset(cfg: &DemoConfig) -> Result<DemoData> {
    if cfg.signal == 0 {
        return Err(Error::input("demo dataset needs at least one signal token"));
    }
    if cfg.signal > cfg.tokens || cfg.marker_dims > cfg.features {
        return Err(Error::input(
            "demo dataset: signal ≤ tokens and marker_dims ≤ features required",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (f, o) = (cfg.features, cfg.outputs);
    let gen_scale = 1.0 / (f as f64).sqrt();
    let generator: Vec<f64> = (0..o * f)
        .map(|_| gen_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let marker = cfg.marker_amp / (cfg.marker_dims.max(1) as f64).sqrt();
    let mut make = |n: usize| -> Result<Vec<DemoSample>> {
        (0..n)
            .map(|_| {
                let mut data: Vec<f64> = (0..cfg.tokens * f)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut order: Vec<usize> = (0..cfg.tokens).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                let mut signal = order[..cfg.signal].to_vec();
                signal.sort_unstable();
                for t in 0..cfg.tokens {
                    let m = if signal.contains(&t) { marker } else { 0.0 };
                    data[t * f..t * f + cfg.marker_dims].fill(m);
                }
                let mut mean = vec![0.0; f];
                for &t in &signal {
                    for d in cfg.marker_dims..f {
                        mean[d] += data[t * f + d] / cfg.signal as f64;
                    }
                }
                let target = (0..o).map(|r| dot(&generator[r * f..(r + 1) * f], &mean)).collect();
                Ok(DemoSample {
                    x: Tokens::new(cfg.tokens, f, data)?,
                    signal,
                    target,
                })
            })
            .collect()
    };
    let train = make(cfg.samples)?;
    let test = make(cfg.held_out)?;
    Ok(DemoData { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub use_effect: bool,
    pub hidden: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            lr: 2e-3,
            use_effect: true,
            hidden: 32,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean attention mass on the signal tokens of the held-out samples.
    pub attention_mass: f64,
    /// Held-out mean squared error of the factual prediction.
    pub held_out_mse: f64,
    pub epoch_loss: Vec<f64>,
}

/// Mean attention on the labeled signal tokens.
pub fn attention_mass(head: &CalHead, samples: &[DemoSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let a = head.attention(&s.x)?;
        total += s.signal.iter().map(|&t| a[t]).sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn held_out_mse(head: &CalHead, samples: &[DemoSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let y = head.forward_factual(&s.x)?;
        total += y.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Minibatch Adam on the demo objective. With `use_effect` off only the
/// factual term is trained.
pub fn train_cal_demo(data: &DemoData, cfg: &TrainConfig) -> Result<(CalHead, TrainReport)> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::input("demo dataset has no training samples"))?;
    if cfg.batch == 0 {
        return Err(Error::input("batch size must be ≥ 1"));
    }
    let shape = CalShape {
        features: first.x.features(),
        hidden: cfg.hidden,
        outputs: first.target.len(),
        k: cfg.k,
    };
    let mut head = CalHead::new(shape, cfg.seed)?;
    let mut adam = AdamState::new(head.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut grad = vec![0.0; head.params.len()];
            for &i in batch {
                let s = &data.train[i];
                let bars = head.counterfactual_attention(&mut rng, s.x.rows());
                sum += head.sample_loss_grad(&s.x, &s.target, &bars, cfg.use_effect, &mut grad)?;
            }
            let k = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= k);
            adam.step(&mut head.params, &grad, cfg.lr)?;
        }
        let mean = sum / data.train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("CAL demo loss became {mean}")));
        }
        epoch_loss.push(mean);
    }
    let report = TrainReport {
        attention_mass: attention_mass(&head, &data.test)?,
        held_out_mse: held_out_mse(&head, &data.test)?,
        epoch_loss,
    };
    Ok((head, report))
}
