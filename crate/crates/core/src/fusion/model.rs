use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FusionConfig, FusionError};
use crate::NUM_LABELS;

/// Row-major `out x in` weights followed by `out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    offset: usize,
    inp: usize,
    out: usize,
}

impl Linear {
    fn len(&self) -> usize {
        self.inp * self.out + self.out
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.inp * self.out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.inp * self.out;
        &p[start..start + self.out]
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let w = self.weights(p);
        let b = self.bias(p);
        let mut y = Vec::with_capacity(x.len() / self.inp * self.out);
        for xr in x.chunks_exact(self.inp) {
            for (wr, bo) in w.chunks_exact(self.inp).zip(b) {
                y.push(bo + dot(wr, xr));
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when asked.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
        let w = self.weights(p);
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(self.inp * self.out);
        let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
        for (b, (xr, dyr)) in x.chunks_exact(self.inp).zip(dy.chunks_exact(self.out)).enumerate() {
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                axpy(g, xr, &mut gw[o * self.inp..(o + 1) * self.inp]);
                if want_dx {
                    axpy(g, &w[o * self.inp..(o + 1) * self.inp], &mut dx[b * self.inp..(b + 1) * self.inp]);
                }
            }
        }
        dx
    }
}

/// Batch normalization: `gamma` then `beta` in the parameter vector,
/// running mean then running variance in the statistics buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BatchNorm {
    offset: usize,
    stats: usize,
    dim: usize,
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Branch {
    first: Linear,
    norm: BatchNorm,
    second: Linear,
}

struct BranchCache {
    input: Vec<f64>,
    norm: NormCache,
    /// Post-norm activations before the rectifier.
    normed: Vec<f64>,
    mask: Option<Vec<f64>>,
    /// Input to the second linear layer.
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    heuristic: Branch,
    dmrs: Branch,
    head: Vec<Linear>,
    params: usize,
    stats: usize,
}

impl Layout {
    fn new(c: &FusionConfig) -> Self {
        let mut offset = 0;
        let mut stats = 0;
        let next_linear = |offset: &mut usize, inp: usize, out: usize| {
            let l = Linear {
                offset: *offset,
                inp,
                out,
            };
            *offset += l.len();
            l
        };
        let make_branch = |offset: &mut usize, stats: &mut usize, inp: usize| {
            let first = next_linear(offset, inp, c.branch_hidden);
            let norm = BatchNorm {
                offset: *offset,
                stats: *stats,
                dim: c.branch_hidden,
            };
            *offset += 2 * c.branch_hidden;
            *stats += 2 * c.branch_hidden;
            let second = next_linear(offset, c.branch_hidden, c.branch_out);
            Branch { first, norm, second }
        };
        let heuristic = make_branch(&mut offset, &mut stats, c.heur_dim);
        let dmrs = make_branch(&mut offset, &mut stats, c.dmrs_dim);
        let mut head = Vec::new();
        let mut width = c.fused_dim;
        for &d in c.head_dims.iter().chain(core::iter::once(&c.num_labels)) {
            let l = Linear {
                offset,
                inp: width,
                out: d,
            };
            offset += l.len();
            head.push(l);
            width = d;
        }
        Layout {
            heuristic,
            dmrs,
            head,
            params: offset,
            stats,
        }
    }
}

/// Named contiguous slice of the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub range: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the current batch's statistics.
    Batch,
    /// Normalize with frozen running statistics.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub norm: NormMode,
    pub dropout: bool,
}

impl Pass {
    pub const INFERENCE: Pass = Pass {
        norm: NormMode::Running,
        dropout: false,
    };
    pub const TRAIN: Pass = Pass {
        norm: NormMode::Batch,
        dropout: true,
    };
}

/// One input triple. The label lives outside so inference can reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub embedding: Vec<f64>,
    pub heuristics: Vec<f64>,
    pub dmrs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    /// Mean smoothed cross-entropy over the batch.
    pub loss: f64,
    pub params: Vec<f64>,
    /// `d loss / d embedding`, row-major `batch x text_dim`.
    pub embeddings: Vec<f64>,
    /// Running statistics after this batch, present for batch-norm passes.
    pub running_stats: Option<Vec<f64>>,
}

struct Forward {
    heuristic: BranchCache,
    dmrs: BranchCache,
    /// Inputs to each head layer; the first is the fused vector.
    head_inputs: Vec<Vec<f64>>,
    /// Dropout masks per hidden head layer.
    head_masks: Vec<Option<Vec<f64>>>,
    logits: Vec<f64>,
    running_stats: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: FusionConfig,
    layout: Layout,
    params: Vec<f64>,
    running: Vec<f64>,
}

impl FusionModel {
    /// Fresh model; weights and biases drawn `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// from `config.seed`, norm scale 1 and shift 0.
    pub fn new(config: FusionConfig) -> Result<Self, FusionError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.params];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = |l: &Linear, params: &mut [f64]| {
            let bound = 1.0 / libm::sqrt(l.inp as f64);
            for p in &mut params[l.offset..l.offset + l.len()] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        for b in [&layout.heuristic, &layout.dmrs] {
            init(&b.first, &mut params);
            params[b.norm.offset..b.norm.offset + b.norm.dim].fill(1.0);
            init(&b.second, &mut params);
        }
        for l in &layout.head {
            init(l, &mut params);
        }
        let mut running = vec![0.0; layout.stats];
        for b in [&layout.heuristic, &layout.dmrs] {
            let var = b.norm.stats + b.norm.dim;
            running[var..var + b.norm.dim].fill(1.0);
        }
        Ok(FusionModel {
            config,
            layout,
            params,
            running,
        })
    }

    /// Rebuild from stored buffers.
    pub fn from_parts(config: FusionConfig, params: Vec<f64>, running: Vec<f64>) -> Result<Self, FusionError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.params {
            return Err(FusionError::ParamCount {
                expected: layout.params,
                found: params.len(),
            });
        }
        if running.len() != layout.stats {
            return Err(FusionError::ParamCount {
                expected: layout.stats,
                found: running.len(),
            });
        }
        Ok(FusionModel {
            config,
            layout,
            params,
            running,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[f64] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<f64>) -> Result<(), FusionError> {
        if stats.len() != self.layout.stats {
            return Err(FusionError::ParamCount {
                expected: self.layout.stats,
                found: stats.len(),
            });
        }
        self.running = stats;
        Ok(())
    }

    /// `heuristic_branch`, `dmrs_branch`, `head`, in storage order.
    pub fn param_groups(&self) -> [ParamGroup; 3] {
        let l = &self.layout;
        let dmrs_start = l.dmrs.first.offset;
        let head_start = l.head[0].offset;
        [
            ParamGroup {
                name: "heuristic_branch",
                range: 0..dmrs_start,
            },
            ParamGroup {
                name: "dmrs_branch",
                range: dmrs_start..head_start,
            },
            ParamGroup {
                name: "head",
                range: head_start..l.params,
            },
        ]
    }

    /// Width of the concatenated representation entering the head.
    pub fn fused_width(&self) -> usize {
        self.layout.head[0].inp
    }

    fn check(&self, e: &Example) -> Result<(), FusionError> {
        let c = &self.config;
        for (what, expected, found) in [
            ("embedding", c.text_dim, e.embedding.len()),
            ("heuristic features", c.heur_dim, e.heuristics.len()),
            ("dmrs profile", c.dmrs_dim, e.dmrs.len()),
        ] {
            if expected != found {
                return Err(FusionError::Shape { what, expected, found });
            }
        }
        Ok(())
    }

    /// Class distribution for one example, inference mode.
    pub fn forward(&self, example: &Example) -> Result<[f64; NUM_LABELS], FusionError> {
        Ok(self.forward_batch(core::slice::from_ref(example))?[0])
    }

    /// Class distributions in inference mode.
    pub fn forward_batch(&self, batch: &[Example]) -> Result<Vec<[f64; NUM_LABELS]>, FusionError> {
        let logits = self.logits(batch, Pass::INFERENCE, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(logits.chunks_exact(NUM_LABELS).map(super::train::softmax).collect())
    }

    /// Raw logits, row-major `batch x 9`.
    pub fn logits(&self, batch: &[Example], pass: Pass, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, FusionError> {
        Ok(self.run(batch, pass, rng)?.logits)
    }

    /// The concatenated `[embedding | heuristic code | dmrs code]` vector
    /// for one example in inference mode.
    pub fn fused_representation(&self, example: &Example) -> Result<Vec<f64>, FusionError> {
        let mut f = self.run(core::slice::from_ref(example), Pass::INFERENCE, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(f.head_inputs.swap_remove(0))
    }

    fn run(&self, batch: &[Example], pass: Pass, rng: &mut ChaCha8Rng) -> Result<Forward, FusionError> {
        if batch.is_empty() {
            return Err(FusionError::Shape {
                what: "batch",
                expected: 1,
                found: 0,
            });
        }
        for e in batch {
            self.check(e)?;
        }
        if pass.norm == NormMode::Batch && batch.len() < 2 {
            return Err(FusionError::Shape {
                what: "batch for batch statistics",
                expected: 2,
                found: batch.len(),
            });
        }
        let c = &self.config;
        let stack = |f: fn(&Example) -> &[f64]| batch.iter().flat_map(|e| f(e).iter().copied()).collect::<Vec<_>>();
        let mut running = (pass.norm == NormMode::Batch).then(|| self.running.clone());
        let heuristic = self.branch_forward(&self.layout.heuristic, stack(|e| &e.heuristics), pass, rng, running.as_mut());
        let dmrs = self.branch_forward(&self.layout.dmrs, stack(|e| &e.dmrs), pass, rng, running.as_mut());

        let code = c.branch_out;
        let mut fused = Vec::with_capacity(batch.len() * c.fused_dim);
        for (b, e) in batch.iter().enumerate() {
            fused.extend_from_slice(&e.embedding);
            fused.extend_from_slice(&heuristic.out[b * code..(b + 1) * code]);
            fused.extend_from_slice(&dmrs.out[b * code..(b + 1) * code]);
        }
        debug_assert_eq!(fused.len(), batch.len() * self.fused_width());

        let mut head_inputs = vec![fused];
        let mut head_masks = Vec::new();
        let last = self.layout.head.len() - 1;
        let mut logits = Vec::new();
        for (i, layer) in self.layout.head.iter().enumerate() {
            let mut z = layer.forward(&self.params, &head_inputs[i]);
            if i == last {
                logits = z;
                break;
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            let mask = (pass.dropout && c.head_dropout > 0.0).then(|| dropout_mask(z.len(), c.head_dropout, rng));
            if let Some(m) = &mask {
                z.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            head_masks.push(mask);
            head_inputs.push(z);
        }
        Ok(Forward {
            heuristic,
            dmrs,
            head_inputs,
            head_masks,
            logits,
            running_stats: running,
        })
    }

    fn branch_forward(
        &self,
        branch: &Branch,
        input: Vec<f64>,
        pass: Pass,
        rng: &mut ChaCha8Rng,
        running: Option<&mut Vec<f64>>,
    ) -> BranchCache {
        let z = branch.first.forward(&self.params, &input);
        let (normed, norm) = self.norm_forward(&branch.norm, &z, pass.norm, running);
        let mut hidden: Vec<f64> = normed.iter().map(|v| v.max(0.0)).collect();
        let p = self.config.branch_dropout;
        let mask = (pass.dropout && p > 0.0).then(|| dropout_mask(hidden.len(), p, rng));
        if let Some(m) = &mask {
            hidden.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let out = branch.second.forward(&self.params, &hidden);
        BranchCache {
            input,
            norm,
            normed,
            mask,
            hidden,
            out,
        }
    }

    fn norm_forward(
        &self,
        bn: &BatchNorm,
        z: &[f64],
        mode: NormMode,
        running: Option<&mut Vec<f64>>,
    ) -> (Vec<f64>, NormCache) {
        let d = bn.dim;
        let n = z.len() / d;
        let eps = self.config.bn_eps;
        let gamma = &self.params[bn.offset..bn.offset + d];
        let beta = &self.params[bn.offset + d..bn.offset + 2 * d];
        let (mean, var) = match mode {
            NormMode::Running => (
                self.running[bn.stats..bn.stats + d].to_vec(),
                self.running[bn.stats + d..bn.stats + 2 * d].to_vec(),
            ),
            NormMode::Batch => {
                let mut mean = vec![0.0; d];
                for row in z.chunks_exact(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in z.chunks_exact(d) {
                    for j in 0..d {
                        var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                if let Some(r) = running {
                    let m = self.config.bn_momentum;
                    let unbias = n as f64 / (n as f64 - 1.0);
                    for j in 0..d {
                        r[bn.stats + j] = (1.0 - m) * r[bn.stats + j] + m * mean[j];
                        r[bn.stats + d + j] = (1.0 - m) * r[bn.stats + d + j] + m * var[j] * unbias;
                    }
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = Vec::with_capacity(z.len());
        let mut y = Vec::with_capacity(z.len());
        for row in z.chunks_exact(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(gamma[j] * h + beta[j]);
            }
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                batch: mode == NormMode::Batch,
            },
        )
    }

    fn norm_backward(&self, bn: &BatchNorm, cache: &NormCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = bn.dim;
        let n = dy.len() / d;
        let gamma = &self.params[bn.offset..bn.offset + d];
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for (dr, hr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
            for j in 0..d {
                sum_dy[j] += dr[j];
                sum_dy_xhat[j] += dr[j] * hr[j];
            }
        }
        for j in 0..d {
            grad[bn.offset + j] += sum_dy_xhat[j];
            grad[bn.offset + d + j] += sum_dy[j];
        }
        let mut dz = Vec::with_capacity(dy.len());
        for (dr, hr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
            for j in 0..d {
                let g = gamma[j] * cache.inv_std[j];
                dz.push(if cache.batch {
                    g * (dr[j] - sum_dy[j] / n as f64 - hr[j] * sum_dy_xhat[j] / n as f64)
                } else {
                    g * dr[j]
                });
            }
        }
        dz
    }

    fn branch_backward(&self, branch: &Branch, cache: &BranchCache, dout: &[f64], grad: &mut [f64]) {
        let mut dh = branch.second.backward(&self.params, &cache.hidden, dout, grad, true);
        if let Some(m) = &cache.mask {
            dh.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        dh.iter_mut().zip(&cache.normed).for_each(|(g, &v)| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
        let dz = self.norm_backward(&branch.norm, &cache.norm, &dh, grad);
        branch.first.backward(&self.params, &cache.input, &dz, grad, false);
    }

    /// Mean smoothed cross-entropy and its gradients for one batch.
    pub fn loss_and_grad(
        &self,
        batch: &[Example],
        labels: &[u8],
        pass: Pass,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossGrad, FusionError> {
        if labels.len() != batch.len() {
            return Err(FusionError::Shape {
                what: "labels",
                expected: batch.len(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(FusionError::Eval(crate::evaluation::EvalError::OutOfRange(bad)));
        }
        let f = self.run(batch, pass, rng)?;
        let (loss, dlogits) = super::train::smoothed_cross_entropy(&f.logits, labels, self.config.label_smoothing);
        let mut grad = vec![0.0; self.params.len()];

        let mut dy = dlogits;
        for i in (0..self.layout.head.len()).rev() {
            let mut dx = self.layout.head[i].backward(&self.params, &f.head_inputs[i], &dy, &mut grad, true);
            if i > 0 {
                if let Some(m) = &f.head_masks[i - 1] {
                    dx.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
                }
                // the stored input is post-dropout; zero there means the rectifier or dropout was inactive
                dx.iter_mut().zip(&f.head_inputs[i]).for_each(|(g, &v)| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            dy = dx;
        }

        let c = &self.config;
        let (t, code) = (c.text_dim, c.branch_out);
        let mut d_emb = Vec::with_capacity(batch.len() * t);
        let mut d_heur = Vec::with_capacity(batch.len() * code);
        let mut d_dmrs = Vec::with_capacity(batch.len() * code);
        for row in dy.chunks_exact(c.fused_dim) {
            d_emb.extend_from_slice(&row[..t]);
            d_heur.extend_from_slice(&row[t..t + code]);
            d_dmrs.extend_from_slice(&row[t + code..]);
        }
        self.branch_backward(&self.layout.heuristic, &f.heuristic, &d_heur, &mut grad);
        self.branch_backward(&self.layout.dmrs, &f.dmrs, &d_dmrs, &mut grad);

        Ok(LossGrad {
            loss,
            params: grad,
            embeddings: d_emb,
            running_stats: f.running_stats,
        })
    }
}

fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
