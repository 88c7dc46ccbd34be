//! Exact t-SNE over features tapped from a network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_rows;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::train::{predict_dataset, Dataset};

const ENTROPY_TOL: f64 = 1e-5;
const MAX_SEARCH: usize = 50;

/// Feature rows with the dataset each row came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub data: Vec<f64>,
    pub origins: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>, origins: Vec<String>) -> Result<Self> {
        if data.len() != n * d || origins.len() != n {
            return Err(Error::contract(format!(
                "feature matrix {n}x{d} given {} values and {} origins",
                data.len(),
                origins.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature matrix has non-finite entries"));
        }
        Ok(FeatureMatrix {
            n,
            d,
            data,
            origins,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Stacks `other` below `self`.
    pub fn concat(mut self, other: FeatureMatrix) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::dim("concat", &[self.n, self.d], &[other.n, other.d]));
        }
        self.n += other.n;
        self.data.extend(other.data);
        self.origins.extend(other.origins);
        Ok(self)
    }

    /// Row-wise softmax of the features.
    pub fn softmax(&self) -> FeatureMatrix {
        FeatureMatrix {
            data: softmax_rows(&self.data, self.d),
            ..self.clone()
        }
    }

    /// Squared Euclidean distances, row-major `n × n`.
    pub fn squared_distances(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let a = self.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = a
                    .iter()
                    .zip(self.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        });
        out
    }
}

/// Eval-mode output of `layer` (default: the network output, before any
/// softmax) for every sample of `ds`, tagged with the dataset name.
pub fn extract_features(
    model: &Network,
    ds: &Dataset,
    layer: Option<&str>,
) -> Result<FeatureMatrix> {
    let out = predict_dataset(model, ds, layer)?;
    let (n, d) = (out.shape()[0], out.shape()[1]);
    FeatureMatrix::new(n, d, out.into_data(), vec![ds.name.clone(); n])
}

/// Gaussian conditional affinities with per-row bandwidths.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    pub n: usize,
    /// Row-major `n × n`, zero diagonal, rows summing to 1.
    pub p: Vec<f64>,
    /// Precision `β_i = 1 / (2σ_i²)` per row.
    pub beta: Vec<f64>,
    /// Achieved entropy per row, in bits.
    pub entropy: Vec<f64>,
}

fn row_affinities(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (o, &dj)) in out.iter_mut().zip(d).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        *o = (-beta * shifted).exp();
        sum += *o;
        weighted += shifted * *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Binary search on each row's β until its entropy is `log2(perplexity)`.
pub fn perplexity_calibrate(dist2: &[f64], n: usize, perplexity: f64) -> Result<Conditional> {
    if dist2.len() != n * n {
        return Err(Error::dim("perplexity_calibrate", &[dist2.len()], &[n, n]));
    }
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(Error::contract(format!(
            "perplexity {perplexity} must lie in (1, {n})"
        )));
    }
    let target = perplexity.log2();
    let rows: Vec<Result<(Vec<f64>, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = &dist2[i * n..(i + 1) * n];
            let spread = d.iter().sum::<f64>() / (n - 1) as f64;
            let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
            let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
            let mut p = vec![0.0; n];
            for _ in 0..MAX_SEARCH {
                let h = row_affinities(d, i, beta, &mut p);
                let diff = h - target;
                if diff.abs() < ENTROPY_TOL {
                    return Ok((p, beta, h));
                }
                // Entropy falls as β grows.
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() {
                        (beta + hi) / 2.0
                    } else {
                        beta * 2.0
                    };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            Err(Error::Convergence { row: i })
        })
        .collect();
    let mut p = Vec::with_capacity(n * n);
    let mut betas = Vec::with_capacity(n);
    let mut entropy = Vec::with_capacity(n);
    for row in rows {
        let (r, b, h) = row?;
        p.extend(r);
        betas.push(b);
        entropy.push(h);
    }
    Ok(Conditional {
        n,
        p,
        beta: betas,
        entropy,
    })
}

/// `(P + Pᵀ) / 2n`, which sums to 1.
pub fn symmetrize(cond: &Conditional) -> Vec<f64> {
    let n = cond.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (cond.p[i * n + j] + cond.p[j * n + i]) / (2.0 * n as f64);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated P and the initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub kl: f64,
    /// KL(P‖Q) after every iteration, measured against the unexaggerated P.
    pub trace: Vec<f64>,
}

/// Student-t kernel `1 / (1 + ‖yᵢ − yⱼ‖²)` with zero diagonal and its sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let total = num.iter().sum();
    (num, total)
}

/// Normalized low-dimensional affinities Q.
pub fn q_matrix(coords: &[[f64; 2]]) -> Vec<f64> {
    let (num, total) = kernel(coords);
    num.into_iter().map(|v| v / total).collect()
}

fn kl_from(p: &[f64], num: &[f64], total: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &k)| p * (p / (k / total).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

pub fn kl_divergence(p: &[f64], coords: &[[f64; 2]]) -> f64 {
    let (num, total) = kernel(coords);
    kl_from(p, &num, total)
}

fn check_joint(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n * n || n < 2 {
        return Err(Error::dim("tsne_embed", &[p.len()], &[n, n]));
    }
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::contract("P must be finite and nonnegative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::contract(format!("P sums to {total}, expected 1")));
    }
    for i in 0..n {
        for j in 0..i {
            if (p[i * n + j] - p[j * n + i]).abs() > 1e-12 {
                return Err(Error::contract("P must be symmetric"));
            }
        }
    }
    Ok(())
}

/// Gradient descent with momentum on KL(P‖Q), starting from `N(0, 1e-4)`.
pub fn tsne_embed(p: &[f64], n: usize, cfg: &TsneConfig) -> Result<Embedding> {
    check_joint(p, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let alpha = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let (num, total) = kernel(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let k = num[i * n + j];
                    let w = (alpha * p[i * n + j] - k / total) * k;
                    g[0] += w * (y[i][0] - y[j][0]);
                    g[1] += w * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for ((yi, vi), gi) in y.iter_mut().zip(&mut velocity).zip(&grad) {
            for k in 0..2 {
                vi[k] = momentum * vi[k] - cfg.learning_rate * gi[k];
                yi[k] += vi[k];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::NonFiniteEmbedding { iteration: it });
        }
        trace.push(kl_divergence(p, &y));
    }
    let kl = kl_divergence(p, &y);
    Ok(Embedding {
        coords: y,
        kl,
        trace,
    })
}

/// Features → distances → calibrated P → embedding.
pub fn embed_features(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<Embedding> {
    if features.n < 3 {
        return Err(Error::contract("t-SNE needs at least 3 samples"));
    }
    let cond = perplexity_calibrate(&features.squared_distances(), features.n, cfg.perplexity)?;
    tsne_embed(&symmetrize(&cond), features.n, cfg)
}

/// Fraction of points whose nearest other point carries the same label.
pub fn nn_purity<L: PartialEq>(coords: &[[f64; 2]], labels: &[L]) -> f64 {
    let n = coords.len();
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (coords[a][0] - coords[i][0]).powi(2)
                        + (coords[a][1] - coords[i][1]).powi(2);
                    let db = (coords[b][0] - coords[i][0]).powi(2)
                        + (coords[b][1] - coords[i][1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two points");
            labels[nearest] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

/// `sample_id,origin_dataset,x,y`
pub fn embedding_csv(features: &FeatureMatrix, emb: &Embedding) -> String {
    let mut out = String::from("sample_id,origin_dataset,x,y\n");
    for (i, (origin, c)) in features.origins.iter().zip(&emb.coords).enumerate() {
        out.push_str(&format!("{i},{origin},{},{}\n", c[0], c[1]));
    }
    out
}

/// One JSON object per iteration: `{"iteration":i,"kl":v}`.
pub fn kl_trace_lines(emb: &Embedding) -> String {
    let mut out = String::new();
    for (i, kl) in emb.trace.iter().enumerate() {
        out.push_str(&serde_json::json!({ "iteration": i, "kl": kl }).to_string());
        out.push('\n');
    }
    out
}
