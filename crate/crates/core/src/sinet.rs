//! A small scale-invariant transformer encoder.
//!
//! Every encoder tensor lives in one parameter group whose scale the output ignores:
//! token and position embeddings (degree 1) pass through an affine layer norm (degree 1)
//! and a projection (degree 2), after which each PreNorm layer adds degree-2 branches to
//! a degree-2 stream. A final layer norm without affine parameters brings the features
//! back to degree 0 before the classification head, which is an ordinary group.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogeneity::{check_map_homogeneity, HomogeneityReport};
use crate::losses::{Evaluation, GroupSpec, StochasticLoss};
use crate::optim::ParamGroup;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Init std of weights at `init_scale = 1`.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of a standard normal truncated to `[−2, 2]`; dividing by it makes
/// the truncated draw's actual std equal the requested one.
const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

pub const CHECKPOINT_HEADER: &str = "silab-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// `Norm(ReLU(QKᵀ))`: row-sum normalization of rectified scores.
    #[default]
    ScaleInvariant,
    /// Ordinary softmax scores; breaks invariance, kept as a negative control.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinetConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    /// Real tokens; the embedding table has one extra row for the mask token.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub head_enabled: bool,
    pub attention: AttentionKind,
}

impl Default for SinetConfig {
    fn default() -> Self {
        SinetConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 32,
            head_enabled: true,
            attention: AttentionKind::ScaleInvariant,
        }
    }
}

impl SinetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract("SinetConfig", format!("{name} must be ≥ 1")));
        }
        if self.d_model != self.n_heads * self.d_v {
            return Err(Error::contract(
                "SinetConfig",
                format!("d_model {} ≠ n_heads {} · d_v {}", self.d_model, self.n_heads, self.d_v),
            ));
        }
        // layer norm needs at least two features to standardize
        if self.d_model < 2 {
            return Err(Error::contract("SinetConfig", "d_model must be ≥ 2"));
        }
        Ok(())
    }

    /// Id of the mask token (one past the real vocabulary).
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }

    fn per_layer(&self) -> usize {
        4 * self.n_heads + 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Weight,
    Gain,
    Bias,
}

/// Encoder tensors in storage order with their init kinds.
fn encoder_layout(cfg: &SinetConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("embed.tok".into(), vec![cfg.vocab_size + 1, d], InitKind::Weight),
        ("embed.pos".into(), vec![cfg.max_seq_len, d], InitKind::Weight),
        ("embed.ln_gain".into(), vec![d], InitKind::Gain),
        ("embed.ln_bias".into(), vec![d], InitKind::Bias),
        ("embed.proj".into(), vec![d, d], InitKind::Weight),
    ];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let p = format!("layer{l}.head{h}");
            out.push((format!("{p}.wq"), vec![d, cfg.d_k], InitKind::Weight));
            out.push((format!("{p}.wk"), vec![d, cfg.d_k], InitKind::Weight));
            out.push((format!("{p}.wv"), vec![d, cfg.d_v], InitKind::Weight));
            out.push((format!("{p}.wo"), vec![cfg.d_v, d], InitKind::Weight));
        }
        out.push((format!("layer{l}.ff.w1"), vec![d, cfg.d_ff], InitKind::Weight));
        out.push((format!("layer{l}.ff.b1"), vec![cfg.d_ff], InitKind::Bias));
        out.push((format!("layer{l}.ff.w2"), vec![cfg.d_ff, d], InitKind::Weight));
    }
    out
}

fn head_layout(cfg: &SinetConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    vec![
        ("head.w".into(), vec![cfg.d_model, cfg.vocab_size], InitKind::Weight),
        ("head.b".into(), vec![cfg.vocab_size], InitKind::Bias),
    ]
}

pub fn encoder_tensor_names(cfg: &SinetConfig) -> Vec<String> {
    encoder_layout(cfg).into_iter().map(|(n, _, _)| n).collect()
}

/// One attention head's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinetModel {
    pub cfg: SinetConfig,
    pub encoder: ParamGroup,
    pub head: ParamGroup,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std / TRUNC2_STD;
        }
    }
}

fn init_tensors(layout: &[(String, Vec<usize>, InitKind)], scale: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    layout
        .iter()
        .map(|(_, shape, kind)| {
            let n: usize = shape.iter().product();
            let data = match kind {
                InitKind::Weight => (0..n).map(|_| truncated_normal(rng, INIT_STD * scale)).collect(),
                InitKind::Gain => vec![scale; n],
                InitKind::Bias => vec![0.0; n],
            };
            Tensor::new(shape.clone(), data).expect("layout shapes are consistent")
        })
        .collect()
}

/// Weights from a ±2σ truncated normal with actual std `0.02·init_scale`, layer-norm gains
/// `init_scale`, biases 0. The head ignores `init_scale`.
pub fn init_model(cfg: &SinetConfig, init_scale: f64, seed: u64) -> Result<SinetModel> {
    cfg.validate()?;
    if !(init_scale > 0.0 && init_scale.is_finite()) {
        return Err(Error::contract("init_model", format!("init_scale must be > 0, got {init_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = init_tensors(&encoder_layout(cfg), init_scale, &mut rng);
    let head = init_tensors(&head_layout(cfg), 1.0, &mut rng);
    Ok(SinetModel {
        cfg: cfg.clone(),
        encoder: ParamGroup::new("encoder", enc, true, 0),
        head: ParamGroup::new("head", head, false, 1),
    })
}

impl SinetModel {
    /// Copy with every encoder tensor multiplied by `c`.
    pub fn scaled_encoder(&self, c: f64) -> SinetModel {
        SinetModel {
            encoder: self.encoder.scaled(c),
            ..self.clone()
        }
    }

    pub fn layer(&self, l: usize) -> Result<LayerWeights> {
        if l >= self.cfg.n_layers {
            return Err(Error::Input(format!("layer {l} of {}", self.cfg.n_layers)));
        }
        let t = &self.encoder.tensors;
        let base = 5 + l * self.cfg.per_layer();
        let heads = (0..self.cfg.n_heads)
            .map(|h| {
                let i = base + 4 * h;
                HeadWeights {
                    wq: t[i].clone(),
                    wk: t[i + 1].clone(),
                    wv: t[i + 2].clone(),
                    wo: t[i + 3].clone(),
                }
            })
            .collect();
        let f = base + 4 * self.cfg.n_heads;
        Ok(LayerWeights {
            heads,
            ff_w1: t[f].clone(),
            ff_b1: t[f + 1].clone(),
            ff_w2: t[f + 2].clone(),
        })
    }

    /// Logits `[n × vocab]` for one sequence, or the final features `[n × d_model]` when the
    /// head is disabled.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens, false)?;
        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, self);
        let mut trace = Trace::off();
        let out = run(&mut tape, &vars, &self.cfg, tokens, tokens.len(), &mut trace)?;
        Ok(tape.value(out).clone())
    }

    /// Every named intermediate of one forward pass, in evaluation order.
    pub fn forward_traced(&self, tokens: &[usize]) -> Result<Vec<(String, Tensor)>> {
        self.check_tokens(tokens, false)?;
        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, self);
        let mut trace = Trace::on();
        run(&mut tape, &vars, &self.cfg, tokens, tokens.len(), &mut trace)?;
        Ok(trace
            .entries
            .unwrap_or_default()
            .into_iter()
            .map(|(n, v)| (n, tape.value(v).clone()))
            .collect())
    }

    fn check_tokens(&self, tokens: &[usize], allow_mask: bool) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        let limit = self.cfg.vocab_size + usize::from(allow_mask);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::Input(format!("token id {bad} ≥ vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }
}

struct HeadVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

struct LayerVars {
    heads: Vec<HeadVars>,
    w1: Var,
    b1: Var,
    w2: Var,
}

struct ModelVars {
    tok: Var,
    pos: Var,
    ln_gain: Var,
    ln_bias: Var,
    proj: Var,
    layers: Vec<LayerVars>,
    head: Option<(Var, Var)>,
    /// Encoder vars in storage order, then head vars.
    all: Vec<Var>,
}

impl ModelVars {
    fn build(cfg: &SinetConfig, enc: &[Var], head: Option<(Var, Var)>) -> Self {
        let per = cfg.per_layer();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let base = 5 + l * per;
                let heads = (0..cfg.n_heads)
                    .map(|h| {
                        let i = base + 4 * h;
                        HeadVars {
                            wq: enc[i],
                            wk: enc[i + 1],
                            wv: enc[i + 2],
                            wo: enc[i + 3],
                        }
                    })
                    .collect();
                let f = base + 4 * cfg.n_heads;
                LayerVars {
                    heads,
                    w1: enc[f],
                    b1: enc[f + 1],
                    w2: enc[f + 2],
                }
            })
            .collect();
        let mut all = enc.to_vec();
        if let Some((w, b)) = head {
            all.extend([w, b]);
        }
        ModelVars {
            tok: enc[0],
            pos: enc[1],
            ln_gain: enc[2],
            ln_bias: enc[3],
            proj: enc[4],
            layers,
            head,
            all,
        }
    }

    fn constants(tape: &mut Tape, m: &SinetModel) -> Self {
        let enc: Vec<Var> = m.encoder.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let head = m.cfg.head_enabled.then(|| {
            (
                tape.constant(m.head.tensors[0].clone()),
                tape.constant(m.head.tensors[1].clone()),
            )
        });
        ModelVars::build(&m.cfg, &enc, head)
    }

    /// Differentiable leaves cut from flat group vectors.
    fn leaves(tape: &mut Tape, cfg: &SinetConfig, enc_flat: &[f64], head_flat: &[f64]) -> Result<Self> {
        let mut cut = |layout: Vec<(String, Vec<usize>, InitKind)>, flat: &[f64]| -> Result<Vec<Var>> {
            let total: usize = layout.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
            if flat.len() != total {
                return Err(Error::dim("sinet", format!("expected {total} parameters, got {}", flat.len())));
            }
            let mut off = 0;
            let mut vars = Vec::with_capacity(layout.len());
            for (_, shape, _) in layout {
                let n: usize = shape.iter().product();
                vars.push(tape.leaf(Tensor::new(shape, flat[off..off + n].to_vec())?));
                off += n;
            }
            Ok(vars)
        };
        let enc = cut(encoder_layout(cfg), enc_flat)?;
        let head = cut(head_layout(cfg), head_flat)?;
        Ok(ModelVars::build(cfg, &enc, Some((head[0], head[1]))))
    }
}

/// Optional record of named intermediates.
struct Trace {
    entries: Option<Vec<(String, Var)>>,
}

impl Trace {
    fn on() -> Self {
        Trace { entries: Some(Vec::new()) }
    }

    fn off() -> Self {
        Trace { entries: None }
    }

    fn record(&mut self, name: impl FnOnce() -> String, v: Var) {
        if let Some(e) = &mut self.entries {
            e.push((name(), v));
        }
    }

    fn enabled(&self) -> bool {
        self.entries.is_some()
    }
}

/// Multi-head attention over consecutive blocks of `seq_len` rows.
#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: &[HeadVars],
    kind: AttentionKind,
    seq_len: usize,
    trace: &mut Trace,
    prefix: &str,
) -> Result<Var> {
    let rows = tape.value(q).dims2("attention")?.0;
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim("attention", format!("{rows} rows not a multiple of {seq_len}")));
    }
    let n_seq = rows / seq_len;
    let mut total: Option<Var> = None;
    for (i, h) in heads.iter().enumerate() {
        let qs = tape.matmul(q, h.wq)?;
        let ks = tape.matmul(k, h.wk)?;
        let vs = tape.matmul(v, h.wv)?;
        let mut mixed = Vec::with_capacity(n_seq);
        let mut scores = Vec::new();
        for s in 0..n_seq {
            let qb = tape.slice_rows(qs, s * seq_len, seq_len)?;
            let kb = tape.slice_rows(ks, s * seq_len, seq_len)?;
            let vb = tape.slice_rows(vs, s * seq_len, seq_len)?;
            let raw = tape.matmul_bt(qb, kb)?;
            let p = match kind {
                AttentionKind::ScaleInvariant => {
                    let r = tape.relu(raw);
                    tape.row_normalize_sum(r)?
                }
                AttentionKind::Softmax => tape.softmax_rows(raw),
            };
            if trace.enabled() {
                scores.push(p);
            }
            mixed.push(tape.matmul(p, vb)?);
        }
        if trace.enabled() {
            let all = tape.concat_rows(&scores)?;
            trace.record(|| format!("{prefix}.head{i}.scores"), all);
        }
        let mixed = if n_seq == 1 { mixed[0] } else { tape.concat_rows(&mixed)? };
        let out = tape.matmul(mixed, h.wo)?;
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    total.ok_or_else(|| Error::contract("attention", "no heads"))
}

/// Encoder (and head, when present) over `tokens`, a concatenation of sequences of length
/// `seq_len`.
fn run(
    tape: &mut Tape,
    p: &ModelVars,
    cfg: &SinetConfig,
    tokens: &[usize],
    seq_len: usize,
    trace: &mut Trace,
) -> Result<Var> {
    let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
    let tok = tape.gather_rows(p.tok, tokens)?;
    trace.record(|| "embed.tok".into(), tok);
    let pos = tape.gather_rows(p.pos, &positions)?;
    trace.record(|| "embed.pos".into(), pos);
    let e = tape.add(tok, pos)?;
    trace.record(|| "embed.sum".into(), e);
    let e = tape.layer_norm(e, Some((p.ln_gain, p.ln_bias)))?;
    trace.record(|| "embed.ln".into(), e);
    let mut z = tape.matmul(e, p.proj)?;
    trace.record(|| "embed.proj".into(), z);

    for (l, layer) in p.layers.iter().enumerate() {
        let pre = format!("layer{l}");
        let n1 = tape.layer_norm(z, None)?;
        trace.record(|| format!("{pre}.ln_attn"), n1);
        let a = attention(tape, n1, n1, n1, &layer.heads, cfg.attention, seq_len, trace, &pre)?;
        trace.record(|| format!("{pre}.attn"), a);
        z = tape.add(z, a)?;
        trace.record(|| format!("{pre}.resid_attn"), z);

        let n2 = tape.layer_norm(z, None)?;
        trace.record(|| format!("{pre}.ln_ff"), n2);
        let h = tape.matmul(n2, layer.w1)?;
        trace.record(|| format!("{pre}.ff.pre"), h);
        let h = tape.add_row(h, layer.b1)?;
        trace.record(|| format!("{pre}.ff.biased"), h);
        let h = tape.relu(h);
        trace.record(|| format!("{pre}.ff.hidden"), h);
        let f = tape.matmul(h, layer.w2)?;
        trace.record(|| format!("{pre}.ff.out"), f);
        z = tape.add(z, f)?;
        trace.record(|| format!("{pre}.out"), z);
    }

    let out = tape.layer_norm(z, None)?;
    trace.record(|| "final".into(), out);
    let Some((w, b)) = p.head else { return Ok(out) };
    let logits = tape.matmul(out, w)?;
    let logits = tape.add_row(logits, b)?;
    trace.record(|| "logits".into(), logits);
    Ok(logits)
}

/// Single-sequence attention with `n × d_model` inputs.
pub fn si_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: &[HeadWeights], kind: AttentionKind) -> Result<Tensor> {
    let (n, _) = q.dims2("si_attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::dim("si_attention", "Q, K, V shapes differ"));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let hv = head_constants(&mut tape, heads);
    let out = attention(&mut tape, qv, kv, vv, &hv, kind, n, &mut Trace::off(), "")?;
    Ok(tape.value(out).clone())
}

/// Attention score matrices `[n × n]`, one per head.
pub fn attention_scores(q: &Tensor, k: &Tensor, heads: &[HeadWeights], kind: AttentionKind) -> Result<Vec<Tensor>> {
    let (n, _) = q.dims2("attention_scores")?;
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let hv = head_constants(&mut tape, heads);
    let mut trace = Trace::on();
    attention(&mut tape, qv, kv, kv, &hv, kind, n, &mut trace, "a")?;
    Ok(trace.entries.unwrap_or_default().into_iter().map(|(_, v)| tape.value(v).clone()).collect())
}

fn head_constants(tape: &mut Tape, heads: &[HeadWeights]) -> Vec<HeadVars> {
    heads
        .iter()
        .map(|h| HeadVars {
            wq: tape.constant(h.wq.clone()),
            wk: tape.constant(h.wk.clone()),
            wv: tape.constant(h.wv.clone()),
            wo: tape.constant(h.wo.clone()),
        })
        .collect()
}

/// One PreNorm layer `z + ATTN(N(z))` then `z + FF(N(z))` on a single sequence.
pub fn encoder_layer(z: &Tensor, layer: &LayerWeights, kind: AttentionKind) -> Result<Tensor> {
    let (n, _) = z.dims2("encoder_layer")?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let heads = head_constants(&mut tape, &layer.heads);
    let (w1, b1, w2) = (
        tape.constant(layer.ff_w1.clone()),
        tape.constant(layer.ff_b1.clone()),
        tape.constant(layer.ff_w2.clone()),
    );
    let n1 = tape.layer_norm(zv, None)?;
    let a = attention(&mut tape, n1, n1, n1, &heads, kind, n, &mut Trace::off(), "")?;
    let z1 = tape.add(zv, a)?;
    let n2 = tape.layer_norm(z1, None)?;
    let h = tape.matmul(n2, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, w2)?;
    let out = tape.add(z1, f)?;
    Ok(tape.value(out).clone())
}

/// An addition node and the degrees of the edges entering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Addition {
    pub node: String,
    pub inputs: Vec<(String, i32)>,
}

/// Claimed homogeneity degree of every named intermediate with respect to the encoder
/// group, derived by composing per-block rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HomogeneityDegreeMap {
    pub degrees: Vec<(String, i32)>,
    pub additions: Vec<Addition>,
}

/// Degree rules of the building blocks: `(input degree) → output degree`.
mod rule {
    /// Token ids carry no parameters.
    pub const INPUT: i32 = 0;
    pub const PARAM: i32 = 1;

    pub fn linear(x: i32) -> i32 {
        x + 1
    }

    pub fn embedding(x: i32) -> i32 {
        x + 1
    }

    pub fn ln_plain(_x: i32) -> i32 {
        0
    }

    pub fn ln_affine(_x: i32) -> i32 {
        1
    }

    pub fn relu(x: i32) -> i32 {
        x
    }

    pub fn attention_scores(_x: i32) -> i32 {
        0
    }

    pub fn attention(x: i32) -> i32 {
        x + 2
    }
}

impl HomogeneityDegreeMap {
    fn set(&mut self, name: impl Into<String>, degree: i32) -> i32 {
        self.degrees.push((name.into(), degree));
        degree
    }

    /// Records an addition; the node takes the first input's degree.
    fn sum(&mut self, name: impl Into<String>, inputs: &[(String, i32)]) -> i32 {
        let name = name.into();
        let d = inputs[0].1;
        self.additions.push(Addition {
            node: name.clone(),
            inputs: inputs.to_vec(),
        });
        self.set(name, d)
    }

    pub fn degree(&self, name: &str) -> Option<i32> {
        self.degrees.iter().find(|(n, _)| n == name).map(|(_, d)| *d)
    }

    /// Additions whose inputs disagree in degree.
    pub fn residual_rule_violations(&self) -> Vec<&Addition> {
        self.additions
            .iter()
            .filter(|a| a.inputs.iter().any(|(_, d)| *d != a.inputs[0].1))
            .collect()
    }
}

pub fn degree_map(cfg: &SinetConfig) -> HomogeneityDegreeMap {
    let mut m = HomogeneityDegreeMap::default();
    let tok = m.set("embed.tok", rule::embedding(rule::INPUT));
    let pos = m.set("embed.pos", rule::embedding(rule::INPUT));
    let sum = m.sum("embed.sum", &[("embed.tok".into(), tok), ("embed.pos".into(), pos)]);
    // inside the affine norm: N(x)·gain (degree 0 + 1) plus bias (degree 1)
    m.additions.push(Addition {
        node: "embed.ln".into(),
        inputs: vec![
            ("embed.ln:normalized·gain".into(), rule::ln_plain(sum) + rule::PARAM),
            ("embed.ln_bias".into(), rule::PARAM),
        ],
    });
    let ln = m.set("embed.ln", rule::ln_affine(sum));
    let mut z = m.set("embed.proj", rule::linear(ln));
    let mut z_name = "embed.proj".to_string();
    for l in 0..cfg.n_layers {
        let p = format!("layer{l}");
        let n1 = m.set(format!("{p}.ln_attn"), rule::ln_plain(z));
        for h in 0..cfg.n_heads {
            m.set(format!("{p}.head{h}.scores"), rule::attention_scores(n1));
        }
        let a = m.set(format!("{p}.attn"), rule::attention(n1));
        z = m.sum(format!("{p}.resid_attn"), &[(z_name.clone(), z), (format!("{p}.attn"), a)]);
        let n2 = m.set(format!("{p}.ln_ff"), rule::ln_plain(z));
        let pre = m.set(format!("{p}.ff.pre"), rule::linear(n2));
        let biased = m.sum(
            format!("{p}.ff.biased"),
            &[(format!("{p}.ff.pre"), pre), (format!("{p}.ff.b1"), rule::PARAM)],
        );
        let hidden = m.set(format!("{p}.ff.hidden"), rule::relu(biased));
        let f = m.set(format!("{p}.ff.out"), rule::linear(hidden));
        z = m.sum(
            format!("{p}.out"),
            &[(format!("{p}.resid_attn"), z), (format!("{p}.ff.out"), f)],
        );
        z_name = format!("{p}.out");
    }
    let fin = m.set("final", rule::ln_plain(z));
    if cfg.head_enabled {
        // the head is outside the encoder group, so it preserves the degree
        m.set("logits", fin);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub name: String,
    pub claimed: i32,
    pub report: HomogeneityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeAudit {
    pub lines: Vec<AuditLine>,
    pub residual_rule_ok: bool,
    /// Traced intermediates and the degree map name the same tensors.
    pub names_match: bool,
    pub passed: bool,
}

impl DegreeAudit {
    pub fn failures(&self) -> Vec<&AuditLine> {
        self.lines.iter().filter(|l| !l.report.passed).collect()
    }
}

/// Measures each traced intermediate's homogeneity in the encoder group against its
/// claimed degree.
pub fn degree_audit(model: &SinetModel, tokens: &[usize], scales: &[f64], tol: f64) -> Result<DegreeAudit> {
    let map = degree_map(&model.cfg);
    let traced = model.forward_traced(tokens)?;
    let traced_names: BTreeSet<&str> = traced.iter().map(|(n, _)| n.as_str()).collect();
    let claimed_names: BTreeSet<&str> = map.degrees.iter().map(|(n, _)| n.as_str()).collect();
    let names_match = traced_names == claimed_names;

    let theta = model.encoder.flat();
    let mut lines = Vec::with_capacity(map.degrees.len());
    for (name, claimed) in &map.degrees {
        let f = |x: &[f64]| -> Result<Vec<f64>> {
            let m = SinetModel {
                encoder: model.encoder.with_flat(x)?,
                ..model.clone()
            };
            let tr = m.forward_traced(tokens)?;
            tr.into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.into_data())
                .ok_or_else(|| Error::contract("degree_audit", format!("`{name}` not traced")))
        };
        let report = check_map_homogeneity(&f, std::slice::from_ref(&theta), f64::from(*claimed), scales, tol)?;
        lines.push(AuditLine {
            name: name.clone(),
            claimed: *claimed,
            report,
        });
    }
    let residual_rule_ok = map.residual_rule_violations().is_empty();
    let passed = names_match && residual_rule_ok && lines.iter().all(|l| l.report.passed);
    Ok(DegreeAudit {
        lines,
        residual_rule_ok,
        names_match,
        passed,
    })
}

/// A batch of masked sequences laid end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub seq_len: usize,
}

impl MaskedBatch {
    pub fn n_masked(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Clustered Markov chain: tokens are split (by a seeded permutation) into cycles of
/// `CLUSTER` tokens; each step follows the cycle with probability `STAY`, else jumps to a
/// uniform token.
#[derive(Debug, Clone, PartialEq)]
struct ClusterChain {
    vocab: usize,
    /// `next[t]`: successor of `t` within its cycle.
    next: Vec<usize>,
}

impl ClusterChain {
    const CLUSTER: usize = 4;
    const STAY: f64 = 0.9;

    fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..vocab).collect();
        for i in (1..vocab).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut next = vec![0; vocab];
        for chunk in perm.chunks(Self::CLUSTER) {
            for (i, &t) in chunk.iter().enumerate() {
                next[t] = chunk[(i + 1) % chunk.len()];
            }
        }
        ClusterChain { vocab, next }
    }

    fn sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut t = rng.gen_range(0..self.vocab);
        for _ in 0..len {
            out.push(t);
            t = if rng.gen_bool(Self::STAY) {
                self.next[t]
            } else {
                rng.gen_range(0..self.vocab)
            };
        }
        out
    }
}

/// Masked-token prediction on sequences from a seeded clustered Markov chain; the loss is
/// the mean cross-entropy over masked positions (0 when nothing is masked).
#[derive(Debug, Clone)]
pub struct MaskedTokenTask {
    cfg: SinetConfig,
    seq_len: usize,
    mask_rate: f64,
    batch_size: usize,
    chain: ClusterChain,
    eval_samples: Vec<u64>,
}

pub const DEFAULT_BATCH: usize = 8;
const EVAL_BATCHES: usize = 4;

impl MaskedTokenTask {
    pub fn new(cfg: SinetConfig, seq_len: usize, mask_rate: f64, batch_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !cfg.head_enabled {
            return Err(Error::contract("masked_token_task", "the task needs the classification head"));
        }
        if !(mask_rate > 0.0 && mask_rate < 1.0) {
            return Err(Error::contract("masked_token_task", format!("mask_rate {mask_rate} not in (0, 1)")));
        }
        if seq_len == 0 || seq_len > cfg.max_seq_len || batch_size == 0 {
            return Err(Error::contract(
                "masked_token_task",
                format!("seq_len {seq_len} must be in 1..={} and batch_size ≥ 1", cfg.max_seq_len),
            ));
        }
        let chain = ClusterChain::new(cfg.vocab_size, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
        let eval_samples = (0..EVAL_BATCHES).map(|_| rng.gen()).collect();
        Ok(MaskedTokenTask {
            cfg,
            seq_len,
            mask_rate,
            batch_size,
            chain,
            eval_samples,
        })
    }

    pub fn config(&self) -> &SinetConfig {
        &self.cfg
    }

    /// The batch a sample handle stands for.
    pub fn batch(&self, sample: u64) -> MaskedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(sample);
        let mut inputs = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(inputs.capacity());
        for _ in 0..self.batch_size {
            for t in self.chain.sequence(self.seq_len, &mut rng) {
                if rng.gen_bool(self.mask_rate) {
                    inputs.push(self.cfg.mask_id());
                    targets.push(Some(t));
                } else {
                    inputs.push(t);
                    targets.push(None);
                }
            }
        }
        MaskedBatch {
            inputs,
            targets,
            seq_len: self.seq_len,
        }
    }

    /// Mean masked cross-entropy and its gradient in `[encoder, head]` order.
    pub fn batch_loss(&self, batch: &MaskedBatch, x: &[f64]) -> Result<Evaluation> {
        let enc_len = self.enc_len();
        if x.len() != enc_len + self.head_len() {
            return Err(Error::dim("masked_token_task", format!("expected {} parameters, got {}", self.dim(), x.len())));
        }
        let count = batch.n_masked();
        if count == 0 {
            return Ok(Evaluation {
                loss: 0.0,
                grad: vec![0.0; x.len()],
            });
        }
        let mut tape = Tape::new();
        let vars = ModelVars::leaves(&mut tape, &self.cfg, &x[..enc_len], &x[enc_len..])?;
        let logits = run(&mut tape, &vars, &self.cfg, &batch.inputs, batch.seq_len, &mut Trace::off())?;
        let ce = tape.cross_entropy(logits, &batch.targets)?;
        let loss = tape.scale(ce, 1.0 / count as f64);
        tape.backward(loss)?;
        let mut grad = Vec::with_capacity(x.len());
        for &v in &vars.all {
            match tape.grad(v) {
                Some(g) => grad.extend_from_slice(g),
                None => grad.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
            }
        }
        Ok(Evaluation {
            loss: tape.value(loss).item(),
            grad,
        })
    }

    fn enc_len(&self) -> usize {
        encoder_layout(&self.cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    fn head_len(&self) -> usize {
        head_layout(&self.cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Flat `[encoder, head]` parameters of a model built for this task.
    pub fn flatten(&self, model: &SinetModel) -> Result<Vec<f64>> {
        if model.cfg != self.cfg {
            return Err(Error::contract("masked_token_task", "model config differs from the task's"));
        }
        let mut x = model.encoder.flat();
        x.extend(model.head.flat());
        Ok(x)
    }
}

pub fn masked_token_task(cfg: SinetConfig, seq_len: usize, mask_rate: f64, seed: u64) -> Result<MaskedTokenTask> {
    MaskedTokenTask::new(cfg, seq_len, mask_rate, DEFAULT_BATCH, seed)
}

impl StochasticLoss for MaskedTokenTask {
    fn name(&self) -> &str {
        "sinet"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![
            GroupSpec::new("encoder", self.enc_len(), true),
            GroupSpec::new("head", self.head_len(), false),
        ]
    }

    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        rng.gen()
    }

    fn eval(&self, sample: u64, x: &[f64]) -> Result<Evaluation> {
        self.batch_loss(&self.batch(sample), x)
    }

    /// Average over a fixed set of held-out batches, a stand-in for the population loss.
    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut grad = vec![0.0; x.len()];
        for &s in &self.eval_samples {
            let e = self.eval(s, x)?;
            loss += e.loss;
            for (g, v) in grad.iter_mut().zip(&e.grad) {
                *g += v;
            }
        }
        let k = self.eval_samples.len() as f64;
        Ok(Evaluation {
            loss: loss / k,
            grad: grad.into_iter().map(|g| g / k).collect(),
        })
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// Text checkpoint:
///
/// ```text
/// silab-checkpoint v1
/// config <json SinetConfig>
/// tensor <group> <name> <dim,dim,…>
/// <space-separated values>
/// …
/// ```
///
/// Values use the shortest representation that parses back to the same `f64`.
pub fn save_checkpoint<W: Write>(model: &SinetModel, mut out: W) -> Result<()> {
    let cfg = serde_json::to_string(&model.cfg).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "config {cfg}")?;
    let groups = [
        (&model.encoder, encoder_layout(&model.cfg)),
        (&model.head, head_layout(&model.cfg)),
    ];
    for (group, layout) in groups {
        for (t, (name, _, _)) in group.tensors.iter().zip(layout) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {} {name} {}", group.name, dims.join(","))?;
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            writeln!(out, "{}", vals.join(" "))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: R) -> Result<SinetModel> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Input(format!("checkpoint truncated before {what}")))
    };
    let header = next("header")?;
    if header.trim_end() != CHECKPOINT_HEADER {
        return Err(Error::Input(format!("unsupported checkpoint header `{header}`")));
    }
    let cfg_line = next("config")?;
    let json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Input("missing config line".into()))?;
    let cfg: SinetConfig = serde_json::from_str(json).map_err(|e| Error::Input(format!("bad config: {e}")))?;
    cfg.validate()?;

    let mut read_group = |group: &str, layout: Vec<(String, Vec<usize>, InitKind)>| -> Result<Vec<Tensor>> {
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, _) in layout {
            let head = next(&name)?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let expect_dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            if parts.len() != 4 || parts[0] != "tensor" || parts[1] != group || parts[2] != name || parts[3] != expect_dims.join(",") {
                return Err(Error::Input(format!(
                    "expected `tensor {group} {name} {}`, found `{head}`",
                    expect_dims.join(",")
                )));
            }
            let data: Vec<f64> = next(&name)?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Input(format!("{name}: {e}"))))
                .collect::<Result<_>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(tensors)
    };
    let enc = read_group("encoder", encoder_layout(&cfg))?;
    let head = read_group("head", head_layout(&cfg))?;
    Ok(SinetModel {
        encoder: ParamGroup::new("encoder", enc, true, 0),
        head: ParamGroup::new("head", head, false, 1),
        cfg,
    })
}
