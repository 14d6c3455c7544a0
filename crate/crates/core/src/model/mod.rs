//! Broadcasting residual classifier over feature matrices.
//!
//! The input plane is viewed as a `(channels, pooled axis, kept axis)`
//! tensor. Each block convolves along the pooled axis, mixes channels,
//! batch-normalizes, then summarizes by averaging over the pooled axis. The
//! instance-normalized summary is convolved along the kept axis, mixed, and
//! broadcast back over the pooled axis:
//!
//! `out = [x +] z + broadcast(g)`, `z = relu(bn(mix(dw(x))))`,
//! `g = relu(mix'(dw'(inorm(mean_pooled(z)))))`
//!
//! where the `x` term is present only when the block keeps its channel
//! count. With the temporal axis pooled (the default), summaries live on the
//! feature axis and are broadcast over time; the feature variant swaps the
//! roles.

mod checkpoint;
mod ops;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, N_FEATURES, N_FRAMES};
use crate::rng;
use crate::segment::N_CLASSES;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastAxis {
    /// Pool over time, broadcast summaries over time.
    Temporal,
    /// Pool over features, broadcast summaries over features.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub broadcast_axis: BroadcastAxis,
    pub block_channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub feature_kernel: usize,
    pub n_classes: usize,
    pub input_t: usize,
    pub input_f: usize,
    pub eps_norm: f64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
}

/// Default block widths: a narrow full-resolution path feeding one wide
/// summary stage.
pub const DEFAULT_BLOCK_CHANNELS: [usize; 3] = [4, 4, 232];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            broadcast_axis: BroadcastAxis::Temporal,
            block_channels: DEFAULT_BLOCK_CHANNELS.to_vec(),
            temporal_kernel: 3,
            feature_kernel: 3,
            n_classes: N_CLASSES,
            input_t: N_FRAMES,
            input_f: N_FEATURES,
            eps_norm: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Axis lengths and kernel sizes in pooled/kept terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub pooled_len: usize,
    pub kept_len: usize,
    pub pooled_kernel: usize,
    pub kept_kernel: usize,
}

impl Geometry {
    pub fn plane(&self) -> usize {
        self.pooled_len * self.kept_len
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return bad(format!(
                "block_channels must be non-empty and positive, got {:?}",
                self.block_channels
            ));
        }
        for (name, k) in [
            ("temporal_kernel", self.temporal_kernel),
            ("feature_kernel", self.feature_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.n_classes < 2 || self.input_t == 0 || self.input_f == 0 {
            return bad("n_classes >= 2 and non-empty input required".into());
        }
        if !(self.eps_norm > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("eps_norm must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        match self.broadcast_axis {
            BroadcastAxis::Temporal => Geometry {
                pooled_len: self.input_t,
                kept_len: self.input_f,
                pooled_kernel: self.temporal_kernel,
                kept_kernel: self.feature_kernel,
            },
            BroadcastAxis::Feature => Geometry {
                pooled_len: self.input_f,
                kept_len: self.input_t,
                pooled_kernel: self.feature_kernel,
                kept_kernel: self.temporal_kernel,
            },
        }
    }

    /// Same architecture with every width multiplied by `factor` (at least 1).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            block_channels: self
                .block_channels
                .iter()
                .map(|&c| ((c as f64 * factor).round() as usize).max(1))
                .collect(),
            ..self.clone()
        }
    }

    fn block_io(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(1)
            .chain(self.block_channels.iter().copied())
            .zip(self.block_channels.iter().copied())
    }
}

/// Learnable scalars implied by a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let g = cfg.geometry();
    let blocks: usize = cfg
        .block_io()
        .map(|(cin, c)| cin * g.pooled_kernel + c * cin + 2 * c + 2 * c * g.kept_len + c * g.kept_kernel + c * c + c)
        .sum();
    let c_last = *cfg.block_channels.last().unwrap_or(&0);
    2 * g.plane() + blocks + cfg.n_classes * c_last + cfg.n_classes
}

/// Multiply-accumulates for one inference. Convolutions count
/// output elements × taps × input channels (depthwise: × 1), affine maps
/// in × out, normalizations 2 per element, pooling 1 per input element;
/// activations, residual additions, bias additions and softmax are free.
pub fn count_macs(cfg: &ModelConfig) -> u64 {
    let g = cfg.geometry();
    let (p, lo) = (g.plane() as u64, g.kept_len as u64);
    let mut macs = 2 * p;
    for (cin, c) in cfg.block_io() {
        let (cin, c) = (cin as u64, c as u64);
        macs += cin * p * g.pooled_kernel as u64; // depthwise, pooled axis
        macs += c * cin * p; // channel mix
        macs += 2 * c * p; // batch norm
        macs += c * p; // mean over pooled axis
        macs += 2 * c * lo; // instance norm
        macs += c * lo * g.kept_kernel as u64; // depthwise, kept axis
        macs += c * c * lo; // summary channel mix
    }
    let c_last = *cfg.block_channels.last().unwrap_or(&0) as u64;
    macs + c_last * p + c_last * cfg.n_classes as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape and position of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    cin: usize,
    c: usize,
    dw_pooled: usize,
    mix: usize,
    bn_gamma: usize,
    bn_beta: usize,
    in_gamma: usize,
    in_beta: usize,
    dw_kept: usize,
    kept_mix: usize,
    kept_bias: usize,
}

impl BlockIds {
    fn identity(&self) -> bool {
        self.cin == self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    specs: Vec<ParamSpec>,
    blocks: Vec<BlockIds>,
    ln_gamma: usize,
    ln_beta: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Plan {
    fn new(cfg: &ModelConfig) -> Self {
        let g = cfg.geometry();
        let mut specs: Vec<ParamSpec> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            let offset = specs.last().map_or(0, |s| s.offset + s.len());
            specs.push(ParamSpec {
                name,
                shape,
                offset,
                init,
            });
            specs.len() - 1
        };
        let (la, lo) = (g.pooled_len, g.kept_len);
        let ln_gamma = add("input_norm.gamma".into(), vec![la, lo], Init::Ones);
        let ln_beta = add("input_norm.beta".into(), vec![la, lo], Init::Zeros);
        let mut blocks = Vec::new();
        for (i, (cin, c)) in cfg.block_io().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockIds {
                cin,
                c,
                dw_pooled: add(
                    n("pooled_dw"),
                    vec![cin, g.pooled_kernel],
                    Init::Uniform { fan_in: g.pooled_kernel },
                ),
                mix: add(n("mix"), vec![c, cin], Init::Uniform { fan_in: cin }),
                bn_gamma: add(n("bn.gamma"), vec![c], Init::Ones),
                bn_beta: add(n("bn.beta"), vec![c], Init::Zeros),
                in_gamma: add(n("summary_norm.gamma"), vec![c, lo], Init::Ones),
                in_beta: add(n("summary_norm.beta"), vec![c, lo], Init::Zeros),
                dw_kept: add(
                    n("summary_dw"),
                    vec![c, g.kept_kernel],
                    Init::Uniform { fan_in: g.kept_kernel },
                ),
                kept_mix: add(n("summary_mix.weight"), vec![c, c], Init::Uniform { fan_in: c }),
                kept_bias: add(n("summary_mix.bias"), vec![c], Init::Zeros),
            });
        }
        let c_last = *cfg.block_channels.last().expect("validated");
        let head_w = add(
            "head.weight".into(),
            vec![cfg.n_classes, c_last],
            Init::Uniform { fan_in: c_last },
        );
        let head_b = add("head.bias".into(), vec![cfg.n_classes], Init::Zeros);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        Self {
            specs,
            blocks,
            ln_gamma,
            ln_beta,
            head_w,
            head_b,
            total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch norm uses the statistics of the current batch.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// Per-channel batch-norm statistics (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    params: Vec<f64>,
    running: Vec<NormStats>,
    plan: Plan,
}

/// Gradient of the loss for every parameter, laid out like the model's.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub values: Vec<f64>,
}

impl GradientSet {
    pub fn tensor<'a>(&'a self, model: &Model, name: &str) -> Option<&'a [f64]> {
        model.spec(name).map(|s| &self.values[s.range()])
    }
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let plan = Plan::new(cfg);
    let mut r = rng::rng_from(seed, &[rng::tag("model-init")]);
    let mut params = vec![0.0; plan.total];
    for s in &plan.specs {
        let dst = &mut params[s.range()];
        match s.init {
            Init::Zeros => {}
            Init::Ones => dst.fill(1.0),
            Init::Uniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = r.random_range(-bound..bound));
            }
        }
    }
    let running = plan
        .blocks
        .iter()
        .map(|b| NormStats {
            mean: vec![0.0; b.c],
            var: vec![1.0; b.c],
        })
        .collect();
    Ok(Model {
        config: cfg.clone(),
        mode: Mode::Train,
        params,
        running,
        plan,
    })
}

/// Row-major `(pooled, kept)` plane from a `features × frames` matrix.
pub fn input_plane(cfg: &ModelConfig, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if x.shape() != (cfg.input_f, cfg.input_t) {
        return Err(Error::Shape {
            expected: format!("{} x {}", cfg.input_f, cfg.input_t),
            actual: format!("{} x {}", x.rows, x.cols),
        });
    }
    let (t_len, f_len) = (cfg.input_t, cfg.input_f);
    let mut out = vec![0.0; t_len * f_len];
    for f in 0..f_len {
        for t in 0..t_len {
            let v = x.values[f * t_len + t];
            match cfg.broadcast_axis {
                BroadcastAxis::Feature => out[f * t_len + t] = v,
                BroadcastAxis::Temporal => out[t * f_len + f] = v,
            }
        }
    }
    Ok(out)
}

struct SampleCache {
    u: Vec<f64>,
    r_hat: Vec<f64>,
    r_inv: f64,
    rn: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Batch-norm statistics in use, with the folded affine map
/// `y = scale·v + shift`.
struct BnUse {
    mean: Vec<f64>,
    inv: Vec<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

struct Pass {
    ln_hat: Vec<Vec<f64>>,
    ln_inv: Vec<f64>,
    inputs: Vec<Vec<Vec<f64>>>,
    caches: Vec<Vec<SampleCache>>,
    bn: Vec<BnUse>,
    batch_stats: Vec<NormStats>,
    pooled: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

/// Intermediate tensors of one block, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// `(channels, pooled, kept)` of the block input.
    pub input_shape: (usize, usize, usize),
    pub input: Vec<f64>,
    /// Full-resolution branch `z`, shape `(c, pooled, kept)`.
    pub temporal: Vec<f64>,
    /// Summary before normalization, shape `(c, 1, kept)`.
    pub summary_shape: (usize, usize, usize),
    pub summary: Vec<f64>,
    /// Normalized summary before its affine map.
    pub summary_hat: Vec<f64>,
    /// Broadcast branch `g`, shape `(c, 1, kept)`.
    pub broadcast: Vec<f64>,
    pub output_shape: (usize, usize, usize),
    pub output: Vec<f64>,
}

/// Loss, gradients and the batch statistics used to compute them.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: GradientSet,
    pub batch_stats: Vec<NormStats>,
}

impl Model {
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.plan.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.plan.specs.iter().find(|s| s.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.spec(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn running_stats(&self) -> &[NormStats] {
        &self.running
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn p(&self, id: usize) -> &[f64] {
        &self.params[self.plan.specs[id].range()]
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>, running: Vec<NormStats>) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(&config);
        if params.len() != plan.total || running.len() != plan.blocks.len() {
            return Err(Error::Shape {
                expected: format!("{} parameters", plan.total),
                actual: format!("{}", params.len()),
            });
        }
        Ok(Self {
            config,
            mode: Mode::Eval,
            params,
            running,
            plan,
        })
    }

    fn plane(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        input_plane(&self.config, x)
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, batch: &[NormStats]) {
        let m = self.config.bn_momentum;
        for (run, b) in self.running.iter_mut().zip(batch) {
            for (r, v) in run.mean.iter_mut().zip(&b.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in run.var.iter_mut().zip(&b.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Class probabilities for each input.
    pub fn forward_batch(&self, xs: &[&FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let planes = xs.iter().map(|x| self.plane(x)).collect::<Result<Vec<_>>>()?;
        if self.mode == Mode::Eval {
            // no cross-sample coupling: run one at a time to bound memory
            return planes
                .into_iter()
                .map(|p| Ok(ops::softmax(&self.run(vec![p], false, false).logits[0])))
                .collect();
        }
        let pass = self.run(planes, true, false);
        Ok(pass.logits.iter().map(|l| ops::softmax(l)).collect())
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<usize> {
        Ok(argmax(&forward(self, x)?))
    }

    fn run(&self, planes: Vec<Vec<f64>>, batch_stats: bool, keep: bool) -> Pass {
        let geo = self.config.geometry();
        let eps = self.config.eps_norm;
        let mut pass = Pass {
            ln_hat: Vec::new(),
            ln_inv: Vec::new(),
            inputs: Vec::new(),
            caches: Vec::new(),
            bn: Vec::new(),
            batch_stats: Vec::new(),
            pooled: Vec::new(),
            logits: Vec::new(),
        };
        let (g_ln, b_ln) = (self.p(self.plan.ln_gamma), self.p(self.plan.ln_beta));
        let mut xs = Vec::with_capacity(planes.len());
        for x in &planes {
            let mut hat = vec![0.0; geo.plane()];
            let mut out = vec![0.0; geo.plane()];
            let inv = ops::plane_norm(x, g_ln, b_ln, eps, &mut hat, &mut out);
            pass.ln_inv.push(inv);
            if keep {
                pass.ln_hat.push(hat);
            }
            xs.push(out);
        }
        let n_blocks = self.plan.blocks.len();
        for b in 0..n_blocks {
            let last = b + 1 == n_blocks;
            let (caches, bn, stats, outs) = self.block_forward(b, &xs, batch_stats, last);
            if keep {
                pass.inputs.push(std::mem::replace(&mut xs, outs));
                pass.caches.push(caches);
            } else {
                xs = outs;
            }
            pass.bn.push(bn);
            if let Some(s) = stats {
                pass.batch_stats.push(s);
            }
        }
        let (w, bias) = (self.p(self.plan.head_w), self.p(self.plan.head_b));
        let c_last = self.plan.blocks[n_blocks - 1].c;
        for pooled in xs {
            let logits: Vec<f64> = (0..self.config.n_classes)
                .map(|k| {
                    bias[k]
                        + w[k * c_last..(k + 1) * c_last]
                            .iter()
                            .zip(&pooled)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            debug_assert!(logits.iter().all(|v| v.is_finite()));
            pass.logits.push(logits);
            pass.pooled.push(pooled);
        }
        pass
    }

    fn bn_for(&self, b: usize, us: &[Vec<f64>], batch_stats: bool) -> (BnUse, Option<NormStats>) {
        let blk = &self.plan.blocks[b];
        let (cin, c) = (blk.cin, blk.c);
        let p = self.config.geometry().plane();
        let eps = self.config.eps_norm;
        let (mean, var) = if batch_stats {
            // statistics of mix·u follow from first and second moments of u
            let mut s = vec![0.0; cin];
            let mut mm = vec![0.0; cin * cin];
            for u in us {
                for (ci, sc) in s.iter_mut().enumerate() {
                    *sc += u[ci * p..(ci + 1) * p].iter().sum::<f64>();
                }
                ops::gemm(cin, p, cin, u, false, u, true, 1.0, &mut mm);
            }
            let np = (us.len() * p) as f64;
            let w = self.p(blk.mix);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for co in 0..c {
                let wr = &w[co * cin..(co + 1) * cin];
                let mu = wr.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / np;
                let mut e2 = 0.0;
                for i in 0..cin {
                    for j in 0..cin {
                        e2 += wr[i] * mm[i * cin + j] * wr[j];
                    }
                }
                mean[co] = mu;
                var[co] = (e2 / np - mu * mu).max(0.0);
            }
            (mean, var)
        } else {
            (self.running[b].mean.clone(), self.running[b].var.clone())
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gam, bet) = (self.p(blk.bn_gamma), self.p(blk.bn_beta));
        let scale: Vec<f64> = (0..c).map(|ch| gam[ch] * inv[ch]).collect();
        let shift = (0..c).map(|ch| bet[ch] - scale[ch] * mean[ch]).collect();
        let stats = batch_stats.then(|| NormStats { mean: mean.clone(), var });
        (BnUse { mean, inv, scale, shift }, stats)
    }

    #[allow(clippy::type_complexity)]
    fn block_forward(
        &self,
        b: usize,
        xs: &[Vec<f64>],
        batch_stats: bool,
        last: bool,
    ) -> (Vec<SampleCache>, BnUse, Option<NormStats>, Vec<Vec<f64>>) {
        let geo = self.config.geometry();
        let (la, lo, p) = (geo.pooled_len, geo.kept_len, geo.plane());
        let blk = &self.plan.blocks[b];
        let (cin, c) = (blk.cin, blk.c);
        let us: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                let mut u = vec![0.0; cin * p];
                ops::dw_conv(x, cin, la, lo, self.p(blk.dw_pooled), geo.pooled_kernel, &mut u);
                u
            })
            .collect();
        let (bn, stats) = self.bn_for(b, &us, batch_stats);
        let w = self.p(blk.mix);
        let mut row = vec![0.0; p];
        let mut caches = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        for (x, u) in xs.iter().zip(us) {
            let mut z = if last { Vec::new() } else { vec![0.0; c * p] };
            let mut r = vec![0.0; c * lo];
            for ch in 0..c {
                ops::mix_row(&w[ch * cin..(ch + 1) * cin], &u, p, &mut row);
                let (sc, sh) = (bn.scale[ch], bn.shift[ch]);
                row.iter_mut().for_each(|v| *v = (sc * *v + sh).max(0.0));
                let rr = &mut r[ch * lo..(ch + 1) * lo];
                for line in row.chunks_exact(lo) {
                    rr.iter_mut().zip(line).for_each(|(a, b)| *a += b);
                }
                rr.iter_mut().for_each(|a| *a /= la as f64);
                if !last {
                    z[ch * p..(ch + 1) * p].copy_from_slice(&row);
                }
            }
            let (g_out, cache) = self.summary_forward(blk, r.clone(), u);
            if last {
                let pooled = (0..c)
                    .map(|ch| {
                        let mut s = mean(&r[ch * lo..(ch + 1) * lo]) + mean(&g_out[ch * lo..(ch + 1) * lo]);
                        if blk.identity() {
                            s += mean(&x[ch * p..(ch + 1) * p]);
                        }
                        s
                    })
                    .collect();
                outs.push(pooled);
            } else {
                outs.push(combine(blk.identity().then_some(x.as_slice()), &z, &g_out, c, la, lo));
            }
            caches.push(cache);
        }
        (caches, bn, stats, outs)
    }

    fn summary_forward(&self, blk: &BlockIds, r: Vec<f64>, u: Vec<f64>) -> (Vec<f64>, SampleCache) {
        let geo = self.config.geometry();
        let lo = geo.kept_len;
        let c = blk.c;
        let mut r_hat = vec![0.0; c * lo];
        let mut rn = vec![0.0; c * lo];
        let r_inv = ops::plane_norm(
            &r,
            self.p(blk.in_gamma),
            self.p(blk.in_beta),
            self.config.eps_norm,
            &mut r_hat,
            &mut rn,
        );
        let mut h1 = vec![0.0; c * lo];
        ops::dw_conv(&rn, c, lo, 1, self.p(blk.dw_kept), geo.kept_kernel, &mut h1);
        let mut h2 = vec![0.0; c * lo];
        ops::gemm(c, c, lo, self.p(blk.kept_mix), false, &h1, false, 0.0, &mut h2);
        let bias = self.p(blk.kept_bias);
        for ch in 0..c {
            h2[ch * lo..(ch + 1) * lo].iter_mut().for_each(|v| *v += bias[ch]);
        }
        let g = h2.iter().map(|v| v.max(0.0)).collect();
        (
            g,
            SampleCache {
                u,
                r_hat,
                r_inv,
                rn,
                h1,
                h2,
            },
        )
    }

    /// Forward pass that keeps every block's addends. Uses running
    /// statistics in eval mode and single-instance statistics in train mode.
    pub fn trace(&self, x: &FeatureMatrix) -> Result<Vec<BlockTrace>> {
        let geo = self.config.geometry();
        let (la, lo, p) = (geo.pooled_len, geo.kept_len, geo.plane());
        let plane = self.plane(x)?;
        let mut hat = vec![0.0; p];
        let mut cur = vec![0.0; p];
        ops::plane_norm(
            &plane,
            self.p(self.plan.ln_gamma),
            self.p(self.plan.ln_beta),
            self.config.eps_norm,
            &mut hat,
            &mut cur,
        );
        let mut out = Vec::new();
        for (b, blk) in self.plan.blocks.iter().enumerate() {
            let (cin, c) = (blk.cin, blk.c);
            let mut u = vec![0.0; cin * p];
            ops::dw_conv(&cur, cin, la, lo, self.p(blk.dw_pooled), geo.pooled_kernel, &mut u);
            let (bn, _) = self.bn_for(b, std::slice::from_ref(&u), self.mode == Mode::Train);
            let mut z = vec![0.0; c * p];
            ops::gemm(c, cin, p, self.p(blk.mix), false, &u, false, 0.0, &mut z);
            let mut r = vec![0.0; c * lo];
            for ch in 0..c {
                for a in 0..la {
                    for o in 0..lo {
                        let i = ch * p + a * lo + o;
                        z[i] = (bn.scale[ch] * z[i] + bn.shift[ch]).max(0.0);
                        r[ch * lo + o] += z[i] / la as f64;
                    }
                }
            }
            let (g, cache) = self.summary_forward(blk, r.clone(), u);
            let output = combine(blk.identity().then_some(cur.as_slice()), &z, &g, c, la, lo);
            debug_assert!(output.iter().all(|v| v.is_finite()));
            out.push(BlockTrace {
                input_shape: (cin, la, lo),
                input: std::mem::take(&mut cur),
                temporal: z,
                summary_shape: (c, 1, lo),
                summary: r,
                summary_hat: cache.r_hat,
                broadcast: g,
                output_shape: (c, la, lo),
                output: output.clone(),
            });
            cur = output;
        }
        Ok(out)
    }

    fn backward(&self, pass: &Pass, targets: &[usize]) -> (f64, GradientSet) {
        let geo = self.config.geometry();
        let p = geo.plane();
        let n = targets.len();
        let nc = self.config.n_classes;
        let mut grads = vec![0.0; self.plan.total];
        let mut loss = 0.0;
        let n_blocks = self.plan.blocks.len();
        let c_last = self.plan.blocks[n_blocks - 1].c;
        let hw = self.p(self.plan.head_w);
        let mut chans = Vec::with_capacity(n);
        for ((logits, pooled), &t) in pass.logits.iter().zip(&pass.pooled).zip(targets) {
            let lsm = ops::log_softmax(logits);
            loss -= lsm[t] / n as f64;
            let dl: Vec<f64> = (0..nc)
                .map(|k| (lsm[k].exp() - if k == t { 1.0 } else { 0.0 }) / n as f64)
                .collect();
            let (wo, bo) = (
                self.plan.specs[self.plan.head_w].offset,
                self.plan.specs[self.plan.head_b].offset,
            );
            let mut dpooled = vec![0.0; c_last];
            for k in 0..nc {
                grads[bo + k] += dl[k];
                for ch in 0..c_last {
                    grads[wo + k * c_last + ch] += dl[k] * pooled[ch];
                    dpooled[ch] += hw[k * c_last + ch] * dl[k];
                }
            }
            chans.push(dpooled.into_iter().map(|d| d / p as f64).collect::<Vec<f64>>());
        }
        let mut full: Option<Vec<Vec<f64>>> = None;
        let mut chan = Some(chans);
        for b in (0..n_blocks).rev() {
            let dx = self.block_backward(b, pass, full.as_deref(), chan.as_deref(), &mut grads);
            full = Some(dx);
            chan = None;
        }
        let dx0 = full.expect("at least one block");
        let (go, bo) = (
            self.plan.specs[self.plan.ln_gamma].range(),
            self.plan.specs[self.plan.ln_beta].range(),
        );
        let mut dg = vec![0.0; p];
        let mut db = vec![0.0; p];
        for i in 0..n {
            ops::plane_norm_backward(
                &dx0[i],
                &pass.ln_hat[i],
                pass.ln_inv[i],
                self.p(self.plan.ln_gamma),
                None,
                &mut dg,
                &mut db,
            );
        }
        grads[go].iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
        grads[bo].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        (loss, GradientSet { values: grads })
    }

    fn block_backward(
        &self,
        b: usize,
        pass: &Pass,
        full: Option<&[Vec<f64>]>,
        chan: Option<&[Vec<f64>]>,
        grads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let geo = self.config.geometry();
        let (la, lo, p) = (geo.pooled_len, geo.kept_len, geo.plane());
        let blk = &self.plan.blocks[b];
        let (cin, c) = (blk.cin, blk.c);
        let xs = &pass.inputs[b];
        let caches = &pass.caches[b];
        let bn = &pass.bn[b];
        let n = xs.len();
        let np = (n * p) as f64;
        let (w, gam) = (self.p(blk.mix), self.p(blk.bn_gamma));
        let wk = self.p(blk.kept_mix);

        let mut d_dw_pooled = vec![0.0; cin * geo.pooled_kernel];
        let mut d_mix = vec![0.0; c * cin];
        let mut d_gam = vec![0.0; c];
        let mut d_bet = vec![0.0; c];
        let mut d_in_g = vec![0.0; c * lo];
        let mut d_in_b = vec![0.0; c * lo];
        let mut d_dw_kept = vec![0.0; c * geo.kept_kernel];
        let mut d_kmix = vec![0.0; c * c];
        let mut d_kbias = vec![0.0; c];

        let mut row = vec![0.0; p];
        let mut dy = vec![0.0; p];
        let mut drow = vec![0.0; lo];
        // dy = relu'(y) · (upstream + summary-branch gradient), one channel row
        let grad_row = |i: usize, ch: usize, dr: &[f64], v: &[f64], drow: &mut [f64], dy: &mut [f64]| {
            let base = chan.map_or(0.0, |cv| cv[i][ch]);
            drow.iter_mut()
                .zip(&dr[ch * lo..(ch + 1) * lo])
                .for_each(|(d, r)| *d = base + r / la as f64);
            let (sc, sh) = (bn.scale[ch], bn.shift[ch]);
            let f = full.map(|f| &f[i][ch * p..(ch + 1) * p]);
            for a in 0..la {
                let span = a * lo..(a + 1) * lo;
                let (vs, ds) = (&v[span.clone()], &mut dy[span.clone()]);
                match f {
                    Some(f) => {
                        for (((d, &vv), &up), &dd) in ds.iter_mut().zip(vs).zip(&f[span]).zip(drow.iter()) {
                            *d = if sc * vv + sh > 0.0 { up + dd } else { 0.0 };
                        }
                    }
                    None => {
                        for ((d, &vv), &dd) in ds.iter_mut().zip(vs).zip(drow.iter()) {
                            *d = if sc * vv + sh > 0.0 { dd } else { 0.0 };
                        }
                    }
                }
            }
        };

        let mut drs = Vec::with_capacity(n);
        for i in 0..n {
            let cache = &caches[i];
            let mut dg = vec![0.0; c * lo];
            if let Some(f) = full {
                for ch in 0..c {
                    let dgr = &mut dg[ch * lo..(ch + 1) * lo];
                    for line in f[i][ch * p..(ch + 1) * p].chunks_exact(lo) {
                        dgr.iter_mut().zip(line).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if let Some(cv) = chan {
                for ch in 0..c {
                    dg[ch * lo..(ch + 1) * lo]
                        .iter_mut()
                        .for_each(|a| *a += la as f64 * cv[i][ch]);
                }
            }
            let dh2: Vec<f64> = dg
                .iter()
                .zip(&cache.h2)
                .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
                .collect();
            for ch in 0..c {
                d_kbias[ch] += dh2[ch * lo..(ch + 1) * lo].iter().sum::<f64>();
            }
            ops::gemm(c, lo, c, &dh2, false, &cache.h1, true, 1.0, &mut d_kmix);
            let mut dh1 = vec![0.0; c * lo];
            ops::gemm(c, c, lo, wk, true, &dh2, false, 0.0, &mut dh1);
            let mut drn = vec![0.0; c * lo];
            ops::dw_conv_backward(
                &dh1,
                &cache.rn,
                c,
                lo,
                1,
                self.p(blk.dw_kept),
                geo.kept_kernel,
                &mut drn,
                &mut d_dw_kept,
            );
            let mut dr = vec![0.0; c * lo];
            ops::plane_norm_backward(
                &drn,
                &cache.r_hat,
                cache.r_inv,
                self.p(blk.in_gamma),
                Some(&mut dr),
                &mut d_in_g,
                &mut d_in_b,
            );

            for ch in 0..c {
                ops::mix_row(&w[ch * cin..(ch + 1) * cin], &cache.u, p, &mut row);
                grad_row(i, ch, &dr, &row, &mut drow, &mut dy);
                // Σ dy·v̂ = inv·(Σ dy·v − μ·Σ dy)
                let (sdy, sdyv) = (ops::sum(&dy), ops::dot(&dy, &row));
                d_gam[ch] += bn.inv[ch] * (sdyv - bn.mean[ch] * sdy);
                d_bet[ch] += sdy;
            }
            drs.push(dr);
        }

        let k1: Vec<f64> = (0..c).map(|ch| gam[ch] * d_bet[ch] / np).collect();
        let k2: Vec<f64> = (0..c).map(|ch| gam[ch] * d_gam[ch] / np).collect();
        let mut dxs = Vec::with_capacity(n);
        let mut du = vec![0.0; cin * p];
        for i in 0..n {
            let cache = &caches[i];
            du.fill(0.0);
            for ch in 0..c {
                ops::mix_row(&w[ch * cin..(ch + 1) * cin], &cache.u, p, &mut row);
                grad_row(i, ch, &drs[i], &row, &mut drow, &mut dy);
                let (inv, mu, g) = (bn.inv[ch], bn.mean[ch], gam[ch]);
                let (a1, a2) = (inv * k2[ch] * inv, inv * k1[ch]);
                // dv = inv·(γ·dy − k1 − v̂·k2), with v̂ = (v − μ)·inv
                for (vv, &d) in row.iter_mut().zip(&dy) {
                    *vv = inv * g * d - a2 - (*vv - mu) * a1;
                }
                for ci in 0..cin {
                    let us = &cache.u[ci * p..(ci + 1) * p];
                    d_mix[ch * cin + ci] += ops::dot(&row, us);
                    let wc = w[ch * cin + ci];
                    du[ci * p..(ci + 1) * p].iter_mut().zip(&row).for_each(|(a, b)| *a += wc * b);
                }
            }
            let mut dx = vec![0.0; cin * p];
            ops::dw_conv_backward(
                &du,
                &xs[i],
                cin,
                la,
                lo,
                self.p(blk.dw_pooled),
                geo.pooled_kernel,
                &mut dx,
                &mut d_dw_pooled,
            );
            if blk.identity() {
                if let Some(f) = full {
                    dx.iter_mut().zip(&f[i]).for_each(|(a, b)| *a += b);
                }
                if let Some(cv) = chan {
                    for ch in 0..c {
                        dx[ch * p..(ch + 1) * p].iter_mut().for_each(|a| *a += cv[i][ch]);
                    }
                }
            }
            dxs.push(dx);
        }

        for (id, local) in [
            (blk.dw_pooled, &d_dw_pooled),
            (blk.mix, &d_mix),
            (blk.bn_gamma, &d_gam),
            (blk.bn_beta, &d_bet),
            (blk.in_gamma, &d_in_g),
            (blk.in_beta, &d_in_b),
            (blk.dw_kept, &d_dw_kept),
            (blk.kept_mix, &d_kmix),
            (blk.kept_bias, &d_kbias),
        ] {
            let r = self.plan.specs[id].range();
            grads[r].iter_mut().zip(local.iter()).for_each(|(a, b)| *a += b);
        }
        dxs
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `[x +] z + broadcast(g)` with `g` replicated over the pooled axis.
fn combine(x: Option<&[f64]>, z: &[f64], g: &[f64], c: usize, la: usize, lo: usize) -> Vec<f64> {
    let p = la * lo;
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        for a in 0..la {
            for o in 0..lo {
                let i = ch * p + a * lo + o;
                let base = x.map_or(z[i], |x| x[i] + z[i]);
                out[i] = base + g[ch * lo + o];
            }
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for one feature matrix.
pub fn forward(m: &Model, x: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(m.forward_batch(&[x])?.remove(0))
}

/// Mean cross-entropy of a batch and its exact gradient, using batch
/// statistics in every batch-norm layer regardless of mode.
pub fn loss_and_grad(m: &Model, batch: &[(&FeatureMatrix, usize)]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if let Some(&(_, t)) = batch.iter().find(|(_, t)| *t >= m.config.n_classes) {
        return Err(Error::InvalidParameter(format!("target class {t} out of range")));
    }
    let planes = batch.iter().map(|(x, _)| m.plane(x)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = batch.iter().map(|&(_, t)| t).collect();
    let pass = m.run(planes, true, true);
    let (loss, grads) = m.backward(&pass, &targets);
    Ok(LossGrad {
        loss,
        grads,
        batch_stats: pass.batch_stats,
    })
}

/// Loss only, with batch statistics (used by gradient checks).
pub fn batch_loss(m: &Model, batch: &[(&FeatureMatrix, usize)]) -> Result<f64> {
    let planes = batch.iter().map(|(x, _)| m.plane(x)).collect::<Result<Vec<_>>>()?;
    let pass = m.run(planes, true, false);
    Ok(pass
        .logits
        .iter()
        .zip(batch)
        .map(|(l, &(_, t))| -ops::log_softmax(l)[t])
        .sum::<f64>()
        / batch.len() as f64)
}

/// Mean cross-entropy under the model's current mode.
pub fn eval_loss(m: &Model, batch: &[(&FeatureMatrix, usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let xs: Vec<&FeatureMatrix> = batch.iter().map(|(x, _)| *x).collect();
    let probs = m.forward_batch(&xs)?;
    Ok(probs
        .iter()
        .zip(batch)
        .map(|(p, &(_, t))| -p[t].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn apply_gradients(m: &mut Model, g: &GradientSet, st: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    adam_step(&mut m.params, &g.values, st, cfg)
}

pub fn adam_step(params: &mut [f64], g: &[f64], st: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if g.len() != params.len() || st.m.len() != params.len() || st.v.len() != params.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient entries", params.len()),
            actual: format!("{} (moments {})", g.len(), st.m.len()),
        });
    }
    st.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(st.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        params[i] -= cfg.lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
