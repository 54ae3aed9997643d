//! Fully connected descriptor-to-descriptor network with rectifier hidden
//! layers, trained with mini-batch backpropagation on a mean squared error.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::TrainingPair;
use crate::error::{Error, Result};
use crate::features::{Cursor, Descriptor};

const MAGIC: &[u8; 4] = b"REST";
const VERSION: u32 = 1;

pub const DEFAULT_HIDDEN: [usize; 5] = [512, 256, 128, 256, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct RestNetwork {
    /// Row `i` of `weights[l]` maps layer `l` activations to unit `i`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_network(d: usize, hidden: &[usize], seed: u64) -> RestNetwork {
    assert!(d >= 1, "descriptor dimension must be positive");
    let widths: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).chain(std::iter::once(d)).collect();
    let mut rng = crate::seed::rng(seed, "rest-init", 0);
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a)));
        biases.push(DVector::zeros(fan_out));
    }
    RestNetwork { weights, biases }
}

/// Mean over dimensions of the squared difference.
pub fn loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl RestNetwork {
    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.weights.iter().map(|w| w.nrows())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Forward pass on a batch stored as columns.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.nrows())?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(f.len(), 1, f))?;
        Ok(out.iter().copied().collect())
    }

    pub fn transform(&self, f: &Descriptor) -> Result<Descriptor> {
        Descriptor::from_f64(&self.forward(&f.to_f64())?)
    }

    /// Transforms many descriptors in fixed-size chunks.
    pub fn transform_all(&self, fs: &[Descriptor]) -> Result<Vec<Descriptor>> {
        let d = self.input_dim();
        let chunks: Vec<&[Descriptor]> = fs.chunks(256).collect();
        let out = crate::par::try_map(&chunks, |chunk| {
            let x = columns(chunk.iter().map(|f| f.values()), d, chunk.len())?;
            let y = self.forward_batch(&x)?;
            y.column_iter()
                .map(|c| Descriptor::from_f64(c.as_slice()))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(out.into_iter().flatten().collect())
    }

    /// Batch loss (mean over pairs of per-pair MSE) and its gradients.
    pub fn gradients(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Gradients)> {
        self.check_dim(x.nrows())?;
        if y.nrows() != self.output_dim() || y.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: y.nrows(),
            });
        }
        let n = self.weights.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &acts[l];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < n - 1 {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let diff = &acts[n] - y;
        let scale = 1.0 / (diff.len() as f64);
        let value = diff.norm_squared() * scale;

        let mut delta = diff * (2.0 * scale);
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                // rectifier derivative, read off the stored activation
                back.zip_apply(&acts[l], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((value, Gradients { weights: gw, biases: gb }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    /// Little-endian: magic, version, layer count, then per layer rows,
    /// cols, row-major f32 weights and f32 biases.
    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for (m, b) in self.weights.iter().zip(&self.biases) {
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            w.write_all(&(m.ncols() as u32).to_le_bytes())?;
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    w.write_all(&(m[(r, c)] as f32).to_le_bytes())?;
                }
            }
            for v in b.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<model>", e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::format("model", "bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format("model", format!("unsupported version {version}")));
        }
        let layers = cur.u32()? as usize;
        if layers == 0 {
            return Err(Error::format("model", "no layers"));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            if let Some(prev) = weights.last().map(|m: &DMatrix<f64>| m.nrows()) {
                if prev != cols {
                    return Err(Error::format("model", "layer shapes do not chain"));
                }
            }
            let mut m = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    m[(r, c)] = cur.f32()? as f64;
                }
            }
            let mut b = DVector::zeros(rows);
            for v in b.iter_mut() {
                *v = cur.f32()? as f64;
            }
            weights.push(m);
            biases.push(b);
        }
        if cur.pos != buf.len() {
            return Err(Error::format("model", "trailing bytes"));
        }
        let net = RestNetwork { weights, biases };
        if net.input_dim() != net.output_dim() {
            return Err(Error::format("model", "input and output widths differ"));
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_owned()));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read(&mut f)
    }
}

fn columns<'a>(rows: impl Iterator<Item = &'a [f32]>, d: usize, n: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(d, n);
    for (j, v) in rows.enumerate() {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
        for (i, x) in v.iter().enumerate() {
            m[(i, j)] = *x as f64;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_main: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Epochs without a new best training loss before a stage stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            learning_rate: 1e-3,
            batch_size: 128,
            epochs_pretrain: 50,
            epochs_main: 200,
            seed: 0,
            optimizer: Optimizer::Adam,
            patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::DegenerateConfiguration("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::DegenerateConfiguration("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss of each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub pretrain: Vec<f64>,
    pub main: Vec<f64>,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &RestNetwork) -> Self {
        let zeros = Gradients {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut RestNetwork, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        for l in 0..net.weights.len() {
            update(
                net.weights[l].as_mut_slice(),
                g.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                net.biases[l].as_mut_slice(),
                g.biases[l].as_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
            );
        }
    }
}

fn sgd_step(net: &mut RestNetwork, g: &Gradients, lr: f64) {
    for l in 0..net.weights.len() {
        net.weights[l] -= &g.weights[l] * lr;
        net.biases[l] -= &g.biases[l] * lr;
    }
}

/// One training stage; returns the per-epoch losses and leaves the best
/// weights seen in `net`.
fn run_stage(
    net: &mut RestNetwork,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    epochs: usize,
    cfg: &TrainConfig,
    label: &str,
) -> Result<Vec<f64>> {
    let n = inputs.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(net);
    let mut history = Vec::with_capacity(epochs);
    let mut best = (f64::INFINITY, net.clone());
    let mut since_best = 0;
    for epoch in 0..epochs {
        let mut rng = crate::seed::rng(cfg.seed, label, epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = inputs.select_columns(batch);
            let y = targets.select_columns(batch);
            let (value, g) = net.gradients(&x, &y)?;
            total += value * batch.len() as f64;
            match cfg.optimizer {
                Optimizer::Adam => adam.step(net, &g, cfg.learning_rate),
                Optimizer::Sgd => sgd_step(net, &g, cfg.learning_rate),
            }
        }
        let epoch_loss = total / n as f64;
        history.push(epoch_loss);
        if epoch_loss < best.0 {
            best = (epoch_loss, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::debug!("{label}: stopping after {} epochs", epoch + 1);
                break;
            }
        }
    }
    if best.0.is_finite() {
        *net = best.1;
    }
    Ok(history)
}

/// Pretrains on synthetic descriptors mapped to themselves, then continues
/// from those weights on real-to-synthetic pairs.
pub fn train(
    net: &RestNetwork,
    pretrain: &[Descriptor],
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(RestNetwork, TrainHistory)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let d = net.input_dim();
    let mut net = net.clone();
    let mut history = TrainHistory::default();
    if !pretrain.is_empty() && cfg.epochs_pretrain > 0 {
        let x = columns(pretrain.iter().map(|f| f.values()), d, pretrain.len())?;
        history.pretrain = run_stage(&mut net, &x, &x, cfg.epochs_pretrain, cfg, "rest-shuffle-pretrain")?;
    }
    let x = columns(pairs.iter().map(|p| p.input.values()), d, pairs.len())?;
    let y = columns(pairs.iter().map(|p| p.target.values()), d, pairs.len())?;
    history.main = run_stage(&mut net, &x, &y, cfg.epochs_main, cfg, "rest-shuffle-main")?;
    Ok((net, history))
}

/// Mean per-pair MSE of the network over `(input, target)` descriptors.
pub fn mean_loss(net: &RestNetwork, inputs: &[Descriptor], targets: &[Descriptor]) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "inputs and targets",
            left: inputs.len(),
            right: targets.len(),
        });
    }
    if inputs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let d = net.input_dim();
    let x = columns(inputs.iter().map(|f| f.values()), d, inputs.len())?;
    let y = columns(targets.iter().map(|f| f.values()), d, targets.len())?;
    let diff = net.forward_batch(&x)? - y;
    Ok(diff.norm_squared() / diff.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::ClusterKey;
    use crate::geometry::ScenePoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Straight-line recomputation with explicit loops.
    fn oracle_forward(net: &RestNetwork, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            let mut z = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut s = b[i];
                for j in 0..w.ncols() {
                    s += w[(i, j)] * a[j];
                }
                z[i] = if l + 1 < net.weights.len() { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_shapes_and_bounds() {
        let net = init_network(128, &DEFAULT_HIDDEN, 3);
        assert_eq!(net.weights.len(), 6);
        assert_eq!(net.widths(), vec![128, 512, 256, 128, 256, 512, 128]);
        for w in &net.weights {
            let a = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= a));
        }
        assert!(net.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert_eq!(net, init_network(128, &DEFAULT_HIDDEN, 3));
        assert_ne!(net, init_network(128, &DEFAULT_HIDDEN, 4));
        let linear = init_network(7, &[], 0);
        assert_eq!(linear.weights.len(), 1);
        assert_eq!(linear.weights[0].shape(), (7, 7));
    }

    #[test]
    fn forward_trivial_cases() {
        let mut net = init_network(4, &[3], 1);
        for w in &mut net.weights {
            w.fill(0.0);
        }
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 4]);
        let mut id = init_network(4, &[], 1);
        id.weights[0] = DMatrix::identity(4, 4);
        assert_eq!(id.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
        assert!(matches!(id.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 4, got: 1 })));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..20 {
            let mut net = init_network(6, &[9, 4, 7], s);
            for b in &mut net.biases {
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            let x = random_vec(&mut rng, 6);
            let got = net.forward(&x).unwrap();
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
            assert!(got.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        let d = 9;
        let t = vec![0.25; d];
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((loss(&p, &t).unwrap() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_vec(&mut rng, 17);
        let b = random_vec(&mut rng, 17);
        let mut sum = 0.0;
        for i in 0..17 {
            sum += (a[i] - b[i]).powi(2);
        }
        assert!((loss(&a, &b).unwrap() - sum / 17.0).abs() < 1e-12);
        assert!(loss(&a, &b[..3]).is_err());
    }

    fn batch_loss(net: &RestNetwork, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let p = net.forward_batch(x).unwrap();
        (p - y).norm_squared() / y.len() as f64
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = init_network(6, &[5, 4, 5], 2);
        for b in &mut net.biases {
            b.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = net.gradients(&x, &y).unwrap();
        let h = 1e-5;
        let mut probes = 0;
        while probes < 100 {
            let l = rng.random_range(0..net.weights.len());
            let bias = rng.random_bool(0.25);
            let (analytic, numeric) = if bias {
                let i = rng.random_range(0..net.biases[l].len());
                let mut p = net.clone();
                p.biases[l][i] += h;
                let up = batch_loss(&p, &x, &y);
                p.biases[l][i] -= 2.0 * h;
                let down = batch_loss(&p, &x, &y);
                (g.biases[l][i], (up - down) / (2.0 * h))
            } else {
                let (r, c) = (rng.random_range(0..net.weights[l].nrows()), rng.random_range(0..net.weights[l].ncols()));
                let mut p = net.clone();
                p.weights[l][(r, c)] += h;
                let up = batch_loss(&p, &x, &y);
                p.weights[l][(r, c)] -= 2.0 * h;
                let down = batch_loss(&p, &x, &y);
                (g.weights[l][(r, c)], (up - down) / (2.0 * h))
            };
            // parameters feeding only dead units have zero gradient both ways
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-10 {
                continue;
            }
            assert!((analytic - numeric).abs() / scale < 1e-4, "{analytic} vs {numeric}");
            probes += 1;
        }
    }

    fn pair(input: Vec<f64>, target: Vec<f64>) -> TrainingPair {
        TrainingPair {
            input: Descriptor::from_f64(&input).unwrap(),
            target: Descriptor::from_f64(&target).unwrap(),
            cluster_key: ClusterKey([0, 0, 0]),
            scene_point: ScenePoint::origin(),
        }
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 16;
        // non-negative unit vectors, like gradient-histogram descriptors
        let syn: Vec<Descriptor> = (0..200)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Descriptor::from_f64(&v.iter().map(|x| x / n).collect::<Vec<_>>()).unwrap()
            })
            .collect();
        let net = init_network(d, &[32, 16, 32], 9);
        let before = mean_loss(&net, &syn, &syn).unwrap();
        let cfg = TrainConfig {
            hidden: vec![32, 16, 32],
            epochs_pretrain: 60,
            epochs_main: 1,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let pairs = vec![pair(random_vec(&mut rng, d), random_vec(&mut rng, d))];
        let (_, hist) = train(&net, &syn, &pairs, &cfg).unwrap();
        assert!(hist.pretrain.last().unwrap() < &hist.pretrain[0]);
        let mut pre_only = cfg.clone();
        pre_only.epochs_main = 0;
        let (trained, _) = train(&net, &syn, &pairs, &pre_only).unwrap();
        assert!(mean_loss(&trained, &syn, &syn).unwrap() < before);
        // each 5-epoch block reaches a lower minimum than the one before
        let mins: Vec<f64> = hist.pretrain.chunks(5).map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min)).collect();
        assert!(mins.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn overfits_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 32;
        let p = pair(random_vec(&mut rng, d), random_vec(&mut rng, d));
        let cfg = TrainConfig {
            hidden: vec![64, 32, 16, 32, 64],
            epochs_pretrain: 0,
            epochs_main: 2000,
            patience: 0,
            ..TrainConfig::default()
        };
        let net = init_network(d, &cfg.hidden, 1);
        let (trained, hist) = train(&net, &[], std::slice::from_ref(&p), &cfg).unwrap();
        assert!(hist.main.len() <= 2000);
        let l = mean_loss(&trained, std::slice::from_ref(&p.input), std::slice::from_ref(&p.target)).unwrap();
        assert!(l < 1e-4, "{l}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<TrainingPair> = (0..40).map(|_| pair(random_vec(&mut rng, 8), random_vec(&mut rng, 8))).collect();
        let cfg = TrainConfig {
            hidden: vec![10],
            epochs_pretrain: 0,
            epochs_main: 5,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let net = init_network(8, &cfg.hidden, 0);
        let a = train(&net, &[], &pairs, &cfg).unwrap();
        let b = train(&net, &[], &pairs, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train(&net, &[], &[], &cfg), Err(Error::EmptyTrainingSet)));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(train(&net, &[], &pairs, &bad).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let net = init_network(5, &[4, 3], 1);
        let mut bytes = Vec::new();
        net.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"REST");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let expected = 12 + (8 + 4 * (4 * 5 + 4)) + (8 + 4 * (3 * 4 + 3)) + (8 + 4 * (5 * 3 + 5));
        assert_eq!(bytes.len(), expected);
        let back = RestNetwork::read(&mut bytes.as_slice()).unwrap();
        for (a, b) in back.weights.iter().zip(&net.weights) {
            assert!((a - b).amax() < 1e-6);
        }
        // first stored weight is row 0, col 0; second is row 0, col 1
        let w01 = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        assert_eq!(w01, net.weights[0][(0, 1)] as f32);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(RestNetwork::read(&mut &b"NOPE"[..]).is_err());
    }
}
