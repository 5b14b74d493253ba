//! The fusion encoder (feature fusion + positional encoding, per-step GAT,
//! Gaussian-masked causal transformer blocks), the temporal and adjacency
//! decoders, and the fine-tune head.
//!
//! Every function records onto a [`Graph`] and works on a batch of samples
//! with a common node count: panels are `[B, N, T, F]`, encoder outputs
//! `[B, N, T, d_model]`, reconstructed adjacencies `[B, N, N]` and head
//! scores `[B, N]`.

use crate::augment::MaskedSample;
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Initializer, ParamStore, Real, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input features per step.
    pub f: usize,
    /// Window length.
    pub t: usize,
    pub d_model: usize,
    pub gat_heads: usize,
    pub gat_dim: usize,
    pub tgm_blocks: usize,
    pub tgm_heads: usize,
    pub ffn_dim: usize,
    pub sigma_h: f64,
    /// Width of the adjacency decoder factors.
    pub d_a: usize,
    /// Hidden width of the fine-tune head.
    pub head_hidden: usize,
    pub leaky_slope: f64,
    /// When false the GAT and its projection are skipped entirely.
    pub use_gat: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f: 1,
            t: 30,
            d_model: 128,
            gat_heads: 4,
            gat_dim: 32,
            tgm_blocks: 3,
            tgm_heads: 8,
            ffn_dim: 256,
            sigma_h: 7.5,
            d_a: 32,
            head_hidden: 128,
            leaky_slope: 0.2,
            use_gat: true,
        }
    }
}

const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f", self.f),
            ("t", self.t),
            ("d_model", self.d_model),
            ("gat_heads", self.gat_heads),
            ("gat_dim", self.gat_dim),
            ("tgm_blocks", self.tgm_blocks),
            ("tgm_heads", self.tgm_heads),
            ("ffn_dim", self.ffn_dim),
            ("d_a", self.d_a),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.tgm_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by tgm_heads {}",
                self.d_model, self.tgm_heads
            )));
        }
        if !(self.sigma_h > 0.0) {
            return Err(Error::Config("sigma_h must be positive".into()));
        }
        Ok(())
    }

    /// Key/value form stored in checkpoint metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("f", self.f.to_string()),
            ("t", self.t.to_string()),
            ("d_model", self.d_model.to_string()),
            ("gat_heads", self.gat_heads.to_string()),
            ("gat_dim", self.gat_dim.to_string()),
            ("tgm_blocks", self.tgm_blocks.to_string()),
            ("tgm_heads", self.tgm_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("sigma_h", self.sigma_h.to_string()),
            ("d_a", self.d_a.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("use_gat", self.use_gat.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Shape of every parameter, keyed by path.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, gd) = (self.d_model, self.gat_dim);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("encoder.fuse.weight".into(), vec![self.f, d]),
            ("encoder.fuse.bias".into(), vec![d]),
        ];
        if self.use_gat {
            for k in 0..self.gat_heads {
                out.push((format!("encoder.gat.head{k}.weight"), vec![d, gd]));
                out.push((format!("encoder.gat.head{k}.attn"), vec![2 * gd, 1]));
            }
            out.push(("encoder.proj.weight".into(), vec![gd, d]));
            out.push(("encoder.proj.bias".into(), vec![d]));
        }
        for l in 0..self.tgm_blocks {
            out.extend(self.block_shapes(&format!("encoder.block{l}")));
        }
        out.extend(self.block_shapes("temporal_decoder.block"));
        out.push(("temporal_decoder.out.weight".into(), vec![d, self.f]));
        out.push(("temporal_decoder.out.bias".into(), vec![self.f]));
        for side in ["left", "right"] {
            out.push((format!("adjacency_decoder.{side}.weight"), vec![d, self.d_a]));
            out.push((format!("adjacency_decoder.{side}.bias"), vec![self.d_a]));
        }
        out.push(("head.fc1.weight".into(), vec![d, self.head_hidden]));
        out.push(("head.fc1.bias".into(), vec![self.head_hidden]));
        out.push(("head.fc2.weight".into(), vec![self.head_hidden, d]));
        out.push(("head.fc2.bias".into(), vec![d]));
        out.push(("head.predict.weight".into(), vec![self.t * d, 1]));
        out.push(("head.predict.bias".into(), vec![1]));
        out
    }

    fn block_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = Vec::new();
        for m in ["q", "k", "v"] {
            out.push((format!("{prefix}.{m}.weight"), vec![d, d]));
        }
        out.push((format!("{prefix}.o.weight"), vec![d, d]));
        out.push((format!("{prefix}.o.bias"), vec![d]));
        out.push((format!("{prefix}.ln1.gain"), vec![d]));
        out.push((format!("{prefix}.ln1.bias"), vec![d]));
        out.push((format!("{prefix}.ffn1.weight"), vec![d, self.ffn_dim]));
        out.push((format!("{prefix}.ffn1.bias"), vec![self.ffn_dim]));
        out.push((format!("{prefix}.ffn2.weight"), vec![self.ffn_dim, d]));
        out.push((format!("{prefix}.ffn2.bias"), vec![d]));
        out.push((format!("{prefix}.ln2.gain"), vec![d]));
        out.push((format!("{prefix}.ln2.bias"), vec![d]));
        out
    }

    /// Checks that `params` holds exactly this configuration's parameters.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let shapes = self.param_shapes();
        for (path, shape) in &shapes {
            match params.get(path) {
                None => return Err(Error::Checkpoint(format!("missing parameter {path}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "{path} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if params.len() != shapes.len() {
            let known: std::collections::BTreeSet<&str> = shapes.iter().map(|(p, _)| p.as_str()).collect();
            let extra = params.paths().find(|p| !known.contains(p.as_str())).cloned().unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Seeded parameters: fan-in-scaled uniform weights; zero biases; unit
/// layer-norm gains.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new(seed);
    for (path, shape) in cfg.param_shapes() {
        let t = if path.ends_with(".gain") {
            Tensor::full(&shape, T::one())
        } else if path.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            init.uniform(&shape, shape[0])
        };
        store.insert(path, t);
    }
    Ok(store)
}

/// Prefix shared by every encoder parameter.
pub const ENCODER_PREFIX: &str = "encoder.";
/// Prefix shared by every fine-tune head parameter.
pub const HEAD_PREFIX: &str = "head.";

/// Sinusoidal table `[T, d]`: channel `2i` holds `sin(t / 10000^(2i/d))`,
/// channel `2i+1` the matching cosine.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for step in 0..t {
        for c in 0..d {
            let i2 = (c - c % 2) as f64;
            let angle = step as f64 / 10000f64.powf(i2 / d as f64);
            pe[step * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Causal Gaussian decay `[T, T]`: `m_ij = exp(−(j−i)²/(2σ²))` for `j ≤ i`,
/// 0 for `j > i`.
pub fn gaussian_mask(t: usize, sigma_h: f64) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            let d = (j as f64) - (i as f64);
            m[i * t + j] = (-d * d / (2.0 * sigma_h * sigma_h)).exp();
        }
    }
    m
}

/// Model inputs for a batch: values `[B, N, T, F]` and the additive GAT
/// adjacency mask `[B, 1, N, N]` (0 on edges and self-loops, −∞ elsewhere).
#[derive(Clone, Debug)]
pub struct EncoderInput<T> {
    pub values: Tensor<T>,
    pub log_adj: Tensor<T>,
}

impl<T: Real> EncoderInput<T> {
    /// From raw `[B·N·T·F]` values and `[B·N·N]` connectivity.
    pub fn new(b: usize, n: usize, t: usize, f: usize, values: &[f64], connectivity: &[bool]) -> Result<Self> {
        if values.len() != b * n * t * f || connectivity.len() != b * n * n {
            return Err(Error::invalid("encoder input buffers do not match B×N×T×F / B×N×N"));
        }
        let log_adj = connectivity
            .iter()
            .map(|&c| if c { T::zero() } else { T::neg_infinity() })
            .collect();
        Ok(EncoderInput {
            values: Tensor::new(vec![b, n, t, f], values.iter().map(|&v| T::of(v)).collect())?,
            log_adj: Tensor::new(vec![b, 1, n, n], log_adj)?,
        })
    }

    /// Stacks masked samples (masked values and masked-graph connectivity).
    pub fn from_samples(samples: &[&MaskedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (n, t, f) = (first.panel.n, first.panel.t, first.panel.f);
        let mut values = Vec::with_capacity(samples.len() * n * t * f);
        let mut conn = Vec::with_capacity(samples.len() * n * n);
        for s in samples {
            if (s.panel.n, s.panel.t, s.panel.f) != (n, t, f) {
                return Err(Error::invalid("batch samples differ in shape"));
            }
            values.extend_from_slice(&s.panel.values);
            conn.extend(s.graph.connectivity());
        }
        Self::new(samples.len(), n, t, f, &values, &conn)
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let y = g.scoped(prefix, |g| g.matmul(x, w))?;
    if bias {
        let b = g.param(&format!("{prefix}.bias"))?;
        g.scoped(prefix, |g| g.add(y, b))
    } else {
        Ok(y)
    }
}

fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.scoped(prefix, |g| {
        let axis = g.shape(x).len() - 1;
        let mu = g.mean_axis(x, axis)?;
        let xc = g.sub(x, mu)?;
        let sq = g.square(xc)?;
        let var = g.mean_axis(sq, axis)?;
        let var = g.add_scalar(var, LN_EPS);
        let sd = g.sqrt(var);
        let xn = g.div(xc, sd)?;
        let y = g.mul(xn, gain)?;
        g.add(y, bias)
    })
}

/// `x̂ = PE + x·W_f + b` on `[B, N, T, F]` input.
pub fn fuse_and_position<T: Real>(g: &mut Graph<T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[3] != cfg.f || s[2] != cfg.t {
        return Err(Error::Shape {
            op: "encoder/fuse".into(),
            detail: format!("input {s:?} does not match T={} F={}", cfg.t, cfg.f),
        });
    }
    let y = linear(g, x, "encoder.fuse", true)?;
    let pe = Tensor::from_f64(&[cfg.t, cfg.d_model], &positional_encoding(cfg.t, cfg.d_model))?;
    let pe = g.constant(pe);
    g.scoped("encoder/fuse", |g| g.add(y, pe))
}

/// One GAT head on `[B, N, T, d]`. Returns the attention weights
/// `[B, T, N, N]` (row `i` over neighbors `j`) and the aggregated features
/// `[B, T, N, gat_dim]`.
pub fn gat_head<T: Real>(g: &mut Graph<T>, xh: Var, log_adj: Var, k: usize, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let prefix = format!("encoder.gat.head{k}");
    let w = g.param(&format!("{prefix}.weight"))?;
    let a = g.param(&format!("{prefix}.attn"))?;
    let gd = cfg.gat_dim;
    g.scoped(&prefix, |g| {
        let wh = g.matmul(xh, w)?;
        let wh = g.permute(wh, &[0, 2, 1, 3])?;
        let a_src = g.narrow(a, 0, 0, gd)?;
        let a_dst = g.narrow(a, 0, gd, gd)?;
        let src = g.matmul(wh, a_src)?;
        let dst = g.matmul(wh, a_dst)?;
        let dst = g.transpose(dst)?;
        let e = g.add(src, dst)?;
        let e = g.leaky_relu(e, cfg.leaky_slope);
        let e = g.add(e, log_adj)?;
        let alpha = g.softmax(e, 3)?;
        let out = g.matmul(alpha, wh)?;
        Ok((alpha, out))
    })
}

/// Per-time-step multi-head GAT with shared weights: `[B, N, T, d]` →
/// `[B, N, T, gat_dim]`, LeakyReLU of the head mean.
pub fn gat_forward<T: Real>(g: &mut Graph<T>, xh: Var, log_adj: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for k in 0..cfg.gat_heads {
        let (_, h) = gat_head(g, xh, log_adj, k, cfg)?;
        acc = Some(match acc {
            None => h,
            Some(a) => g.scoped("encoder.gat", |g| g.add(a, h))?,
        });
    }
    let sum = acc.expect("at least one head");
    let mean = g.scale(sum, 1.0 / cfg.gat_heads as f64);
    let z = g.leaky_relu(mean, cfg.leaky_slope);
    g.scoped("encoder.gat", |g| g.permute(z, &[0, 2, 1, 3]))
}

/// Additive form of [`gaussian_mask`]: `ln m_ij`, −∞ above the diagonal.
pub fn log_gaussian_mask<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig) -> Result<Var> {
    let m: Vec<T> = gaussian_mask(cfg.t, cfg.sigma_h)
        .into_iter()
        .map(|v| if v > 0.0 { T::of(v.ln()) } else { T::neg_infinity() })
        .collect();
    Ok(g.constant(Tensor::new(vec![cfg.t, cfg.t], m)?))
}

/// Gaussian-masked causal attention over time for every node independently,
/// followed by the residual/normalization/feed-forward sublayers.
/// `log_mask` comes from [`log_gaussian_mask`].
pub fn tgm_block<T: Real>(g: &mut Graph<T>, z: Var, prefix: &str, log_mask: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let h = cfg.tgm_heads;
    let dk = d / h;
    let q = linear(g, z, &format!("{prefix}.q"), false)?;
    let k = linear(g, z, &format!("{prefix}.k"), false)?;
    let v = linear(g, z, &format!("{prefix}.v"), false)?;
    let attn = g.scoped(prefix, |g| {
        let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, n, t, h, dk])?;
            g.permute(x, &[0, 1, 3, 2, 4])
        };
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let scores = g.add(scores, log_mask)?;
        let w = g.softmax(scores, 4)?;
        let o = g.matmul(w, v)?;
        let o = g.permute(o, &[0, 1, 3, 2, 4])?;
        g.reshape(o, &[b, n, t, d])
    })?;
    let attn = linear(g, attn, &format!("{prefix}.o"), true)?;
    let r = g.scoped(prefix, |g| g.add(z, attn))?;
    let r = layer_norm(g, r, &format!("{prefix}.ln1"))?;
    let f = linear(g, r, &format!("{prefix}.ffn1"), true)?;
    let f = g.relu(f);
    let f = linear(g, f, &format!("{prefix}.ffn2"), true)?;
    let out = g.scoped(prefix, |g| g.add(r, f))?;
    layer_norm(g, out, &format!("{prefix}.ln2"))
}

/// Encoder output `O_l` of shape `[B, N, T, d_model]`.
pub fn encoder_forward<T: Real>(g: &mut Graph<T>, input: &EncoderInput<T>, cfg: &ModelConfig) -> Result<Var> {
    let x = g.constant(input.values.clone());
    let xh = fuse_and_position(g, x, cfg)?;
    let z = if cfg.use_gat {
        let adj = g.constant(input.log_adj.clone());
        let z = gat_forward(g, xh, adj, cfg)?;
        linear(g, z, "encoder.proj", true)?
    } else {
        xh
    };
    let mask = log_gaussian_mask(g, cfg)?;
    let mut o = z;
    for l in 0..cfg.tgm_blocks {
        o = tgm_block(g, o, &format!("encoder.block{l}"), mask, cfg)?;
    }
    Ok(o)
}

/// Reconstruction `[B, N, T, F]` through one causal block and a linear map.
pub fn temporal_decoder<T: Real>(g: &mut Graph<T>, o: Var, cfg: &ModelConfig) -> Result<Var> {
    let mask = log_gaussian_mask(g, cfg)?;
    let h = tgm_block(g, o, "temporal_decoder.block", mask, cfg)?;
    linear(g, h, "temporal_decoder.out", true)
}

/// `Â = L·Rᵀ` with `L, R` affine maps of the time-mean node summary.
pub fn adjacency_decoder<T: Real>(g: &mut Graph<T>, o: Var, _cfg: &ModelConfig) -> Result<Var> {
    let s = g.shape(o).to_vec();
    let (b, n, d) = (s[0], s[1], s[3]);
    let summary = g.scoped("adjacency_decoder", |g| {
        let m = g.mean_axis(o, 2)?;
        g.reshape(m, &[b, n, d])
    })?;
    let left = linear(g, summary, "adjacency_decoder.left", true)?;
    let right = linear(g, summary, "adjacency_decoder.right", true)?;
    g.scoped("adjacency_decoder", |g| {
        let rt = g.transpose(right)?;
        g.matmul(left, rt)
    })
}

/// Per-node score `[B, N]`: residual two-layer MLP on every step, then a
/// linear read-out of all `T` steps.
pub fn finetune_head<T: Real>(g: &mut Graph<T>, o: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = g.shape(o).to_vec();
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let h = linear(g, o, "head.fc1", true)?;
    let h = g.relu(h);
    let h = linear(g, h, "head.fc2", true)?;
    let o1 = g.scoped("head", |g| g.add(h, o))?;
    let flat = g.scoped("head", |g| g.reshape(o1, &[b, n, t * d]))?;
    let y = linear(g, flat, "head.predict", true)?;
    debug_assert_eq!(t, cfg.t);
    g.scoped("head", |g| g.reshape(y, &[b, n]))
}

/// Encoder plus both pretraining decoders.
pub struct PretrainOutputs {
    pub encoded: Var,
    pub reconstruction: Var,
    pub adjacency: Var,
}

pub fn pretrain_forward<T: Real>(g: &mut Graph<T>, input: &EncoderInput<T>, cfg: &ModelConfig) -> Result<PretrainOutputs> {
    let encoded = encoder_forward(g, input, cfg)?;
    let reconstruction = temporal_decoder(g, encoded, cfg)?;
    let adjacency = adjacency_decoder(g, encoded, cfg)?;
    Ok(PretrainOutputs {
        encoded,
        reconstruction,
        adjacency,
    })
}

/// Encoder followed by the fine-tune head.
pub fn predict_forward<T: Real>(g: &mut Graph<T>, input: &EncoderInput<T>, cfg: &ModelConfig) -> Result<Var> {
    let o = encoder_forward(g, input, cfg)?;
    finetune_head(g, o, cfg)
}
