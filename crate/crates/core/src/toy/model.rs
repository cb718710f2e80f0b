//! Pre-LayerNorm decoder-only transformer with hand-written backprop.
//!
//! The input is a begin-of-sequence token, the symbol grid and the question.
//! Every position gets
//! a learned token embedding plus a learned positional embedding; the cell
//! marker at the end additionally carries the positional embedding of the
//! cell it names. The answer is read from the last position.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::ToyConfig;
use super::linalg::{acc_at_b, acc_rows, affine, dot, gelu, gelu_grad, matmul_bt, softmax};
use super::task::Sample;
use crate::dump::{AttentionDump, DumpShape, RowCheck};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::select::HeadId;
use crate::steer::Plan;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    wout: usize,
    bout: usize,
    total: usize,
    tensors: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    pub fn new(cfg: &ToyConfig) -> Self {
        let (d, f, m) = (cfg.d_model, cfg.d_ff, cfg.seq_len());
        let mut next = 0usize;
        let mut tensors = Vec::new();
        let mut take = |name: String, n: usize| {
            let at = next;
            next += n;
            tensors.push((name, at..next));
            at
        };
        let tok = take("tok".into(), cfg.vocab() * d);
        let pos = take("pos".into(), m * d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut t = |s: &str, n| take(alloc::format!("layer{l}.{s}"), n);
                LayerOffsets {
                    ln1_g: t("ln1.g", d),
                    ln1_b: t("ln1.b", d),
                    wqkv: t("attn.wqkv", d * 3 * d),
                    bqkv: t("attn.bqkv", 3 * d),
                    wo: t("attn.wo", d * d),
                    bo: t("attn.bo", d),
                    ln2_g: t("ln2.g", d),
                    ln2_b: t("ln2.b", d),
                    w1: t("mlp.w1", d * f),
                    b1: t("mlp.b1", f),
                    w2: t("mlp.w2", f * d),
                    b2: t("mlp.b2", d),
                }
            })
            .collect();
        let lnf_g = take("lnf.g".into(), d);
        let lnf_b = take("lnf.b".into(), d);
        let wout = take("out.w".into(), d * cfg.symbols);
        let bout = take("out.b".into(), cfg.symbols);
        Self {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            wout,
            bout,
            total: next,
            tensors,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Named ranges of the flat vector, in storage order.
    pub fn tensors(&self) -> &[(String, Range<usize>)] {
        &self.tensors
    }
}

/// Intervention applied to the post-softmax attention row of the
/// question-end token, the position that generates the answer.
#[derive(Debug, Clone, Copy, Default)]
pub enum Hook<'a> {
    #[default]
    None,
    Plan(&'a Plan),
    /// Moves all visual attention of the listed heads onto `tokens`, in
    /// proportion to what they already receive (evenly if they receive
    /// nothing). Used as the oracle-attention ceiling.
    Focus { heads: &'a [HeadId], tokens: &'a [usize] },
}

impl Hook<'_> {
    fn targets(&self, layer: usize, head: usize) -> bool {
        match self {
            Hook::None => false,
            Hook::Plan(p) => p.targets(layer, head),
            Hook::Focus { heads, .. } => heads.contains(&HeadId::new(layer, head)),
        }
    }

    fn apply(&self, row: &mut [f64], visual: Range<usize>) -> Result<()> {
        match self {
            Hook::None => Ok(()),
            Hook::Plan(p) => p.apply(row),
            Hook::Focus { tokens, .. } => {
                let mass: f64 = row[visual.clone()].iter().sum();
                let inside: f64 = tokens.iter().map(|&t| row[t]).sum();
                let share: Vec<f64> = tokens
                    .iter()
                    .map(|&t| if inside > 0.0 { row[t] / inside } else { 1.0 / tokens.len() as f64 })
                    .collect();
                row[visual].iter_mut().for_each(|v| *v = 0.0);
                for (&t, s) in tokens.iter().zip(share) {
                    row[t] = mass * s;
                }
                Ok(())
            }
        }
    }
}

/// Logits plus the attention rows of the question-end token, `[L][H][M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub qt_rows: Vec<f64>,
    layers: usize,
    heads: usize,
}

impl ForwardOutput {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn qt_row(&self, layer: usize, head: usize) -> &[f64] {
        let m = self.qt_rows.len() / (self.layers * self.heads);
        let at = (layer * self.heads + head) * m;
        &self.qt_rows[at..at + m]
    }

    /// The question-end rows as a dump. Rows go through lenient validation
    /// since masking without renormalization leaves them below unit mass.
    pub fn dump(&self, layout: &TokenLayout) -> Result<AttentionDump> {
        let data = self.qt_rows.iter().map(|&v| v as f32).collect();
        AttentionDump::new(DumpShape::qt_slice(self.layers, self.heads), layout.clone(), data, RowCheck::Lenient)
            .map(|(d, _)| d)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    yc: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: f64,
    z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyConfig,
    params: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / libm::sqrt(var + LN_EPS);
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

/// Accumulates parameter gradients and adds the input gradient to `dx`.
fn layer_norm_back(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let d = dy.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        let dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for i in 0..dy.len() {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

impl ToyModel {
    /// Fresh model with parameters drawn from `cfg.seed`.
    pub fn init(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = vec![0.0; layout.total];
        let d = cfg.d_model;
        let normal = |rng: &mut ChaCha8Rng, out: &mut [f64], std: f64| {
            for v in out {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        };
        let uniform = |rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let u = Uniform::new(-bound, bound).expect("finite bound");
            for v in out {
                *v = u.sample(rng);
            }
        };
        normal(&mut rng, &mut p[layout.tok..layout.tok + cfg.vocab() * d], 1.0);
        normal(&mut rng, &mut p[layout.pos..layout.pos + cfg.seq_len() * d], cfg.pos_init);
        for o in &layout.layers {
            p[o.ln1_g..o.ln1_g + d].fill(1.0);
            p[o.ln2_g..o.ln2_g + d].fill(1.0);
            uniform(&mut rng, &mut p[o.wqkv..o.bqkv + 3 * d], d);
            uniform(&mut rng, &mut p[o.wo..o.bo + d], d);
            uniform(&mut rng, &mut p[o.w1..o.b1 + cfg.d_ff], d);
            uniform(&mut rng, &mut p[o.w2..o.b2 + d], cfg.d_ff);
        }
        p[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        uniform(&mut rng, &mut p[layout.wout..layout.bout + cfg.symbols], d);
        Ok(Self { cfg: *cfg, params: p })
    }

    pub fn from_params(cfg: &ToyConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let want = ParamLayout::new(cfg).total;
        if params.len() != want {
            return Err(Error::Shape(alloc::format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { cfg: *cfg, params })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_layout(&self) -> ParamLayout {
        ParamLayout::new(&self.cfg)
    }

    pub fn forward(&self, sample: &Sample, hook: Hook<'_>) -> Result<ForwardOutput> {
        self.check_hook(hook)?;
        let (out, _) = self.run(sample, hook, false)?;
        Ok(out)
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(self.forward(sample, Hook::None)?.prediction())
    }

    fn check_hook(&self, hook: Hook<'_>) -> Result<()> {
        let heads: &[HeadId] = match hook {
            Hook::None => return Ok(()),
            Hook::Plan(p) => {
                p.validate(&super::task::layout(&self.cfg)?)?;
                p.heads()
            }
            Hook::Focus { heads, tokens } => {
                let (s, n) = (self.cfg.visual_start(), self.cfg.visual_tokens());
                if let Some(&t) = tokens.iter().find(|&&t| !(s..s + n).contains(&t)) {
                    return Err(Error::NotVisual(t));
                }
                heads
            }
        };
        match heads.iter().find(|h| h.layer >= self.cfg.layers || h.head >= self.cfg.heads) {
            Some(h) => Err(Error::OutOfRange {
                what: if h.layer >= self.cfg.layers { "layer" } else { "head" },
                index: if h.layer >= self.cfg.layers { h.layer } else { h.head },
                len: if h.layer >= self.cfg.layers { self.cfg.layers } else { self.cfg.heads },
            }),
            None => Ok(()),
        }
    }

    /// Mean cross-entropy over `samples`; adds its gradient to `grad`.
    pub fn loss_and_grad(&self, samples: &[Sample], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer length".into()));
        }
        let scale = 1.0 / samples.len() as f64;
        let mut loss = 0.0;
        for s in samples {
            let (out, cache) = self.run(s, Hook::None, true)?;
            let mut probs = out.logits.clone();
            softmax(&mut probs);
            loss -= libm::log(probs[s.answer]);
            probs[s.answer] -= 1.0;
            probs.iter_mut().for_each(|v| *v *= scale);
            self.backward(s, cache.expect("cache requested"), &probs, grad);
        }
        Ok(loss * scale)
    }

    /// Mean cross-entropy over `samples`.
    pub fn loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut loss = 0.0;
        for s in samples {
            let mut p = self.forward(s, Hook::None)?.logits;
            softmax(&mut p);
            loss -= libm::log(p[s.answer]);
        }
        Ok(loss / samples.len() as f64)
    }

    fn run(&self, sample: &Sample, hook: Hook<'_>, keep: bool) -> Result<(ForwardOutput, Option<Cache>)> {
        let cfg = &self.cfg;
        let lay = ParamLayout::new(cfg);
        let p = &self.params;
        let (d, m, nh, dh, f, nv) = (cfg.d_model, cfg.seq_len(), cfg.heads, cfg.head_dim(), cfg.d_ff, cfg.visual_tokens());
        let vs = cfg.visual_start();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let tokens = sample.tokens(cfg);
        if sample.grid.len() != nv || sample.cell >= nv {
            return Err(Error::Shape("sample does not fit the model grid".into()));
        }

        let mut x = vec![0.0; m * d];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            for c in 0..d {
                row[c] = p[lay.tok + t * d + c];
            }
            for (j, w) in sample.position_code(cfg, i) {
                for c in 0..d {
                    row[c] += w * p[lay.pos + j * d + c];
                }
            }
        }
        for c in 0..d {
            x[(m - 1) * d + c] += p[lay.pos + (vs + sample.cell) * d + c];
        }

        let mut qt_rows = vec![0.0; cfg.layers * nh * m];
        let mut caches = Vec::with_capacity(if keep { cfg.layers } else { 0 });
        for (l, o) in lay.layers.iter().enumerate() {
            let r0 = if l + 1 == cfg.layers { m - 1 } else { 0 };
            let rows = m - r0;
            let mut lc = LayerCache {
                xhat1: vec![0.0; m * d],
                rstd1: vec![0.0; m],
                h1: vec![0.0; m * d],
                qkv: vec![0.0; m * 3 * d],
                att: vec![0.0; nh * m * m],
                yc: vec![0.0; rows * d],
                xhat2: vec![0.0; rows * d],
                rstd2: vec![0.0; rows],
                h2: vec![0.0; rows * d],
                u: vec![0.0; rows * f],
                g: vec![0.0; rows * f],
            };
            for i in 0..m {
                lc.rstd1[i] = layer_norm(
                    &x[i * d..(i + 1) * d],
                    &p[o.ln1_g..o.ln1_g + d],
                    &p[o.ln1_b..o.ln1_b + d],
                    &mut lc.xhat1[i * d..(i + 1) * d],
                    &mut lc.h1[i * d..(i + 1) * d],
                );
            }
            affine(&mut lc.qkv, &lc.h1, &p[o.wqkv..o.bqkv], &p[o.bqkv..o.bqkv + 3 * d], m, d, 3 * d);
            for hh in 0..nh {
                let targeted = hook.targets(l, hh);
                for i in r0..m {
                    let q = &lc.qkv[i * 3 * d + hh * dh..i * 3 * d + (hh + 1) * dh];
                    let row = &mut lc.att[(hh * m + i) * m..(hh * m + i + 1) * m];
                    for j in 0..=i {
                        row[j] = scale * dot(q, &lc.qkv[j * 3 * d + d + hh * dh..j * 3 * d + d + (hh + 1) * dh]);
                    }
                    softmax(&mut row[..=i]);
                    if targeted && i == m - 1 {
                        hook.apply(row, vs..vs + nv)?;
                    }
                    let y = &mut lc.yc[(i - r0) * d + hh * dh..(i - r0) * d + (hh + 1) * dh];
                    for j in 0..=i {
                        let a = row[j];
                        if a == 0.0 {
                            continue;
                        }
                        let v = &lc.qkv[j * 3 * d + 2 * d + hh * dh..j * 3 * d + 2 * d + (hh + 1) * dh];
                        for (yv, vv) in y.iter_mut().zip(v) {
                            *yv += a * vv;
                        }
                    }
                }
                let src = &lc.att[(hh * m + m - 1) * m..(hh * m + m) * m];
                qt_rows[(l * nh + hh) * m..(l * nh + hh + 1) * m].copy_from_slice(src);
            }
            let mut tmp = vec![0.0; rows * d];
            affine(&mut tmp, &lc.yc, &p[o.wo..o.bo], &p[o.bo..o.bo + d], rows, d, d);
            for (xv, t) in x[r0 * d..].iter_mut().zip(&tmp) {
                *xv += t;
            }
            for r in 0..rows {
                let i = r0 + r;
                lc.rstd2[r] = layer_norm(
                    &x[i * d..(i + 1) * d],
                    &p[o.ln2_g..o.ln2_g + d],
                    &p[o.ln2_b..o.ln2_b + d],
                    &mut lc.xhat2[r * d..(r + 1) * d],
                    &mut lc.h2[r * d..(r + 1) * d],
                );
            }
            affine(&mut lc.u, &lc.h2, &p[o.w1..o.b1], &p[o.b1..o.b1 + f], rows, d, f);
            for (gv, uv) in lc.g.iter_mut().zip(&lc.u) {
                *gv = gelu(*uv);
            }
            affine(&mut tmp, &lc.g, &p[o.w2..o.b2], &p[o.b2..o.b2 + d], rows, f, d);
            for (xv, t) in x[r0 * d..].iter_mut().zip(&tmp) {
                *xv += t;
            }
            if keep {
                caches.push(lc);
            }
        }

        let mut xhatf = vec![0.0; d];
        let mut z = vec![0.0; d];
        let rstdf = layer_norm(
            &x[(m - 1) * d..],
            &p[lay.lnf_g..lay.lnf_g + d],
            &p[lay.lnf_b..lay.lnf_b + d],
            &mut xhatf,
            &mut z,
        );
        let mut logits = vec![0.0; cfg.symbols];
        affine(&mut logits, &z, &p[lay.wout..lay.bout], &p[lay.bout..lay.bout + cfg.symbols], 1, d, cfg.symbols);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(0));
        }
        let out = ForwardOutput {
            logits,
            qt_rows,
            layers: cfg.layers,
            heads: nh,
        };
        let cache = keep.then_some(Cache {
            layers: caches,
            xhatf,
            rstdf,
            z,
        });
        Ok((out, cache))
    }

    fn backward(&self, sample: &Sample, cache: Cache, dlogits: &[f64], grad: &mut [f64]) {
        let cfg = &self.cfg;
        let lay = ParamLayout::new(cfg);
        let p = &self.params;
        let (d, m, nh, dh, f, s) = (cfg.d_model, cfg.seq_len(), cfg.heads, cfg.head_dim(), cfg.d_ff, cfg.symbols);
        let scale = 1.0 / libm::sqrt(dh as f64);

        acc_at_b(&mut grad[lay.wout..lay.bout], &cache.z, dlogits, 1, d, s);
        acc_rows(&mut grad[lay.bout..lay.bout + s], dlogits, s);
        let mut dz = vec![0.0; d];
        matmul_bt(&mut dz, dlogits, &p[lay.wout..lay.bout], 1, s, d);
        let mut dx = vec![0.0; m * d];
        {
            let (gs, bs) = grad[lay.lnf_g..lay.lnf_b + d].split_at_mut(d);
            layer_norm_back(&dz, &cache.xhatf, cache.rstdf, &p[lay.lnf_g..lay.lnf_g + d], gs, bs, &mut dx[(m - 1) * d..]);
        }

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let o = &lay.layers[l];
            let r0 = if l + 1 == cfg.layers { m - 1 } else { 0 };
            let rows = m - r0;

            // feed-forward block
            let dxr = dx[r0 * d..].to_vec();
            let mut du = vec![0.0; rows * f];
            matmul_bt(&mut du, &dxr, &p[o.w2..o.b2], rows, d, f);
            acc_at_b(&mut grad[o.w2..o.b2], &lc.g, &dxr, rows, f, d);
            acc_rows(&mut grad[o.b2..o.b2 + d], &dxr, d);
            for (dv, uv) in du.iter_mut().zip(&lc.u) {
                *dv *= gelu_grad(*uv);
            }
            acc_at_b(&mut grad[o.w1..o.b1], &lc.h2, &du, rows, d, f);
            acc_rows(&mut grad[o.b1..o.b1 + f], &du, f);
            let mut dh2 = vec![0.0; rows * d];
            matmul_bt(&mut dh2, &du, &p[o.w1..o.b1], rows, f, d);
            for r in 0..rows {
                let (gs, bs) = grad[o.ln2_g..o.ln2_b + d].split_at_mut(d);
                layer_norm_back(
                    &dh2[r * d..(r + 1) * d],
                    &lc.xhat2[r * d..(r + 1) * d],
                    lc.rstd2[r],
                    &p[o.ln2_g..o.ln2_g + d],
                    gs,
                    bs,
                    &mut dx[(r0 + r) * d..(r0 + r + 1) * d],
                );
            }

            // attention block
            let dxr = dx[r0 * d..].to_vec();
            let mut dyc = vec![0.0; rows * d];
            matmul_bt(&mut dyc, &dxr, &p[o.wo..o.bo], rows, d, d);
            acc_at_b(&mut grad[o.wo..o.bo], &lc.yc, &dxr, rows, d, d);
            acc_rows(&mut grad[o.bo..o.bo + d], &dxr, d);
            let mut dqkv = vec![0.0; m * 3 * d];
            let mut da = vec![0.0; m];
            for hh in 0..nh {
                for i in r0..m {
                    let row = &lc.att[(hh * m + i) * m..(hh * m + i + 1) * m];
                    let dy = &dyc[(i - r0) * d + hh * dh..(i - r0) * d + (hh + 1) * dh];
                    let mut rowdot = 0.0;
                    for j in 0..=i {
                        let vo = j * 3 * d + 2 * d + hh * dh;
                        da[j] = dot(dy, &lc.qkv[vo..vo + dh]);
                        rowdot += row[j] * da[j];
                        let a = row[j];
                        for (dv, yv) in dqkv[vo..vo + dh].iter_mut().zip(dy) {
                            *dv += a * yv;
                        }
                    }
                    let qo = i * 3 * d + hh * dh;
                    for j in 0..=i {
                        let ds = row[j] * (da[j] - rowdot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = j * 3 * d + d + hh * dh;
                        for c in 0..dh {
                            dqkv[qo + c] += ds * lc.qkv[ko + c];
                            dqkv[ko + c] += ds * lc.qkv[qo + c];
                        }
                    }
                }
            }
            acc_at_b(&mut grad[o.wqkv..o.bqkv], &lc.h1, &dqkv, m, d, 3 * d);
            acc_rows(&mut grad[o.bqkv..o.bqkv + 3 * d], &dqkv, 3 * d);
            let mut dh1 = vec![0.0; m * d];
            matmul_bt(&mut dh1, &dqkv, &p[o.wqkv..o.bqkv], m, 3 * d, d);
            for i in 0..m {
                let (gs, bs) = grad[o.ln1_g..o.ln1_b + d].split_at_mut(d);
                layer_norm_back(
                    &dh1[i * d..(i + 1) * d],
                    &lc.xhat1[i * d..(i + 1) * d],
                    lc.rstd1[i],
                    &p[o.ln1_g..o.ln1_g + d],
                    gs,
                    bs,
                    &mut dx[i * d..(i + 1) * d],
                );
            }
        }

        let tokens = sample.tokens(cfg);
        for (i, &t) in tokens.iter().enumerate() {
            for c in 0..d {
                grad[lay.tok + t * d + c] += dx[i * d + c];
            }
            for (j, w) in sample.position_code(cfg, i) {
                for c in 0..d {
                    grad[lay.pos + j * d + c] += w * dx[i * d + c];
                }
            }
        }
        for c in 0..d {
            grad[lay.pos + (cfg.visual_start() + sample.cell) * d + c] += dx[(m - 1) * d + c];
        }
    }
}
