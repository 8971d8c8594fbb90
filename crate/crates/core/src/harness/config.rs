//! Flat `key = value` experiment configs with a canonical text form.
//!
//! Blank lines and `#` comments are ignored. Every key may appear once. The canonical
//! form lists every key the chosen loss understands, defaults filled in, in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{AngleFamily, MatFac, MultiGroup, ProductLogistic, Rayleigh, StochasticLoss, StochasticRayleigh};
use crate::optim::{groups_from_flat, OptimizerConfig, ParamGroup};
use crate::sinet::{init_model, AttentionKind, MaskedTokenTask, SinetConfig};
use crate::tensor::Tensor;
use crate::vecmath::scaled;

#[derive(Debug, Clone, PartialEq)]
pub struct SinetSpec {
    pub model: SinetConfig,
    pub seq_len: usize,
    pub mask_rate: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Angle {
        sigma: f64,
    },
    /// `diag(spectrum)`.
    Rayleigh {
        spectrum: Vec<f64>,
    },
    StochRayleigh {
        spectrum: Vec<f64>,
        noise_scale: f64,
        spike_prob: f64,
        spike_factor: f64,
    },
    /// `diag(spectrum)` on `x`, `diag(spectrum_b)` on `y`.
    MultiGroup {
        spectrum: Vec<f64>,
        spectrum_b: Vec<f64>,
    },
    Example1 {
        data: Vec<(f64, f64)>,
        k: usize,
    },
    /// Square target given row-major.
    Example2 {
        target: Vec<f64>,
        rank: usize,
    },
    Sinet(SinetSpec),
}

impl LossSpec {
    pub fn id(&self) -> &'static str {
        match self {
            LossSpec::Angle { .. } => "angle",
            LossSpec::Rayleigh { .. } => "rayleigh",
            LossSpec::StochRayleigh { .. } => "stoch-rayleigh",
            LossSpec::MultiGroup { .. } => "multigroup",
            LossSpec::Example1 { .. } => "example1",
            LossSpec::Example2 { .. } => "example2",
            LossSpec::Sinet(_) => "sinet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    pub init_scales: Vec<f64>,
    /// Explicit start; otherwise a seeded random point (or a fresh model for sinet).
    pub x0: Option<Vec<f64>>,
    pub out_dir: PathBuf,
}

/// Key/value pairs awaiting typed extraction, with their line numbers.
struct Raw {
    entries: BTreeMap<String, (usize, String)>,
}

type Parse<T> = fn(&str) -> std::result::Result<T, String>;

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    field: body.to_string(),
                    detail: "expected `key = value`".into(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    field: String::new(),
                    detail: "empty key".into(),
                });
            }
            if let Some((prev, _)) = entries.insert(k.to_string(), (line_no, v.to_string())) {
                return Err(Error::Config {
                    line: line_no,
                    field: k.to_string(),
                    detail: format!("duplicate key, first set on line {prev}"),
                });
            }
        }
        Ok(Raw { entries })
    }

    fn opt<T>(&mut self, key: &str, parse: Parse<T>) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse(&v).map(Some).map_err(|detail| Error::Config {
                line,
                field: key.to_string(),
                detail,
            }),
        }
    }

    fn or<T>(&mut self, key: &str, default: T, parse: Parse<T>) -> Result<T> {
        Ok(self.opt(key, parse)?.unwrap_or(default))
    }

    fn req<T>(&mut self, key: &str, parse: Parse<T>) -> Result<T> {
        self.opt(key, parse)?.ok_or_else(|| Error::Config {
            line: 0,
            field: key.to_string(),
            detail: "required key missing".into(),
        })
    }

    /// Leftover keys are unknown for this loss.
    fn finish(self, loss: &str) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config {
                line,
                field: k,
                detail: format!("unknown key for loss `{loss}`"),
            }),
        }
    }
}

fn p_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}` is not a number: {e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn p_pos(s: &str) -> std::result::Result<f64, String> {
    let v = p_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {v}"))
    }
}

fn p_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|e| format!("`{s}` is not a non-negative integer: {e}"))
}

fn p_u64(s: &str) -> std::result::Result<u64, String> {
    s.parse().map_err(|e| format!("`{s}` is not a non-negative integer: {e}"))
}

fn p_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|x| p_f64(x.trim())).collect::<std::result::Result<_, _>>()?;
    if v.is_empty() {
        Err("empty list".into())
    } else {
        Ok(v)
    }
}

fn p_opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "none" {
        Ok(None)
    } else {
        p_pos(s).map(Some)
    }
}

fn p_opt_list(s: &str) -> std::result::Result<Option<Vec<f64>>, String> {
    if s == "none" {
        Ok(None)
    } else {
        p_list(s).map(Some)
    }
}

fn p_pairs(s: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    s.split(',')
        .map(|pair| {
            let (a, b) = pair.trim().split_once(':').ok_or_else(|| format!("`{pair}` is not `a:b`"))?;
            Ok((p_f64(a.trim())?, p_f64(b.trim())?))
        })
        .collect()
}

fn p_schedule(s: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|pair| {
            let (a, b) = pair.trim().split_once(':').ok_or_else(|| format!("`{pair}` is not `step:multiplier`"))?;
            Ok((p_usize(a.trim())?, p_pos(b.trim())?))
        })
        .collect()
}

fn p_attention(s: &str) -> std::result::Result<AttentionKind, String> {
    match s {
        "si" => Ok(AttentionKind::ScaleInvariant),
        "softmax" => Ok(AttentionKind::Softmax),
        _ => Err(format!("`{s}` is not `si` or `softmax`")),
    }
}

fn p_string(s: &str) -> std::result::Result<String, String> {
    Ok(s.to_string())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut raw = Raw::parse(text)?;
        let loss_id = raw.req("loss", p_string)?;
        let eta = raw.req("eta", p_pos)?;
        let lambda = raw.or("lambda", 0.0, p_f64)?;
        let mut optimizer = OptimizerConfig::new(eta, lambda);
        optimizer.clip_factor = raw.or("clip", None, p_opt_f64)?;
        optimizer.plain_eta = raw.or("plain_eta", None, p_opt_f64)?;
        optimizer.schedule = raw.or("schedule", Vec::new(), p_schedule)?;
        optimizer.divergence_norm = raw.or("divergence_norm", optimizer.divergence_norm, p_pos)?;
        let steps = raw.req("steps", p_usize)?;
        let seed = raw.or("seed", 0, p_u64)?;
        let init_scales = raw.or("init_scales", vec![1.0], p_list)?;
        let x0 = raw.or("x0", None, p_opt_list)?;
        let out_dir = PathBuf::from(raw.or("out_dir", "out".to_string(), p_string)?);

        let loss = match loss_id.as_str() {
            "angle" => LossSpec::Angle {
                sigma: raw.or("sigma", 1.0, p_pos)?,
            },
            "rayleigh" => LossSpec::Rayleigh {
                spectrum: raw.req("spectrum", p_list)?,
            },
            "stoch-rayleigh" => LossSpec::StochRayleigh {
                spectrum: raw.req("spectrum", p_list)?,
                noise_scale: raw.or("noise_scale", 0.5, p_f64)?,
                spike_prob: raw.or("spike_prob", 0.0, p_f64)?,
                spike_factor: raw.or("spike_factor", 1.0, p_pos)?,
            },
            "multigroup" => LossSpec::MultiGroup {
                spectrum: raw.req("spectrum", p_list)?,
                spectrum_b: raw.req("spectrum_b", p_list)?,
            },
            "example1" => LossSpec::Example1 {
                data: raw.or("data", vec![(1.0, 1.0), (1.0, 1.0), (1.0, -1.0)], p_pairs)?,
                k: raw.or("k", 2, p_usize)?,
            },
            "example2" => LossSpec::Example2 {
                target: raw.req("target", p_list)?,
                rank: raw.or("rank", 1, p_usize)?,
            },
            "sinet" => {
                let d = SinetConfig::default();
                let seq_len = raw.or("seq_len", d.max_seq_len, p_usize)?;
                let model = SinetConfig {
                    n_layers: raw.or("n_layers", d.n_layers, p_usize)?,
                    d_model: raw.or("d_model", d.d_model, p_usize)?,
                    n_heads: raw.or("n_heads", d.n_heads, p_usize)?,
                    d_k: raw.or("d_k", d.d_k, p_usize)?,
                    d_v: raw.or("d_v", d.d_v, p_usize)?,
                    d_ff: raw.or("d_ff", d.d_ff, p_usize)?,
                    vocab_size: raw.or("vocab", d.vocab_size, p_usize)?,
                    max_seq_len: seq_len,
                    head_enabled: true,
                    attention: raw.or("attention", d.attention, p_attention)?,
                };
                LossSpec::Sinet(SinetSpec {
                    model,
                    seq_len,
                    mask_rate: raw.or("mask_rate", 0.15, p_pos)?,
                    batch: raw.or("batch", crate::sinet::DEFAULT_BATCH, p_usize)?,
                })
            }
            other => {
                return Err(Error::Config {
                    line: 0,
                    field: "loss".into(),
                    detail: format!(
                        "unknown loss `{other}` (angle, rayleigh, stoch-rayleigh, multigroup, example1, example2, sinet)"
                    ),
                });
            }
        };
        raw.finish(&loss_id)?;
        let cfg = ExperimentConfig {
            loss,
            optimizer,
            steps,
            seed,
            init_scales,
            x0,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks beyond per-field parsing, reported against the offending key.
    fn validate(&self) -> Result<()> {
        let cfg_err = |field: &str, e: Error| Error::Config {
            line: 0,
            field: field.into(),
            detail: e.to_string(),
        };
        self.optimizer.validate().map_err(|e| cfg_err("eta/lambda/clip/schedule", e))?;
        if self.steps == 0 {
            return Err(cfg_err("steps", Error::Input("must be ≥ 1".into())));
        }
        if self.init_scales.iter().any(|&s| s <= 0.0) {
            return Err(cfg_err("init_scales", Error::Input("scales must be > 0".into())));
        }
        self.build_loss().map_err(|e| cfg_err("loss", e))?;
        Ok(())
    }

    /// Canonical text; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("loss", self.loss.id().into());
        kv("eta", o.eta.to_string());
        kv("lambda", o.lambda.to_string());
        kv("clip", fmt_opt(o.clip_factor));
        kv("plain_eta", fmt_opt(o.plain_eta));
        let sched = if o.schedule.is_empty() {
            "none".to_string()
        } else {
            o.schedule.iter().map(|(t, m)| format!("{t}:{m}")).collect::<Vec<_>>().join(",")
        };
        kv("schedule", sched);
        kv("divergence_norm", o.divergence_norm.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("init_scales", fmt_list(&self.init_scales));
        kv("x0", self.x0.as_deref().map_or("none".into(), fmt_list));
        kv("out_dir", self.out_dir.display().to_string());
        match &self.loss {
            LossSpec::Angle { sigma } => kv("sigma", sigma.to_string()),
            LossSpec::Rayleigh { spectrum } => kv("spectrum", fmt_list(spectrum)),
            LossSpec::StochRayleigh {
                spectrum,
                noise_scale,
                spike_prob,
                spike_factor,
            } => {
                kv("spectrum", fmt_list(spectrum));
                kv("noise_scale", noise_scale.to_string());
                kv("spike_prob", spike_prob.to_string());
                kv("spike_factor", spike_factor.to_string());
            }
            LossSpec::MultiGroup { spectrum, spectrum_b } => {
                kv("spectrum", fmt_list(spectrum));
                kv("spectrum_b", fmt_list(spectrum_b));
            }
            LossSpec::Example1 { data, k } => {
                kv("data", data.iter().map(|(z, y)| format!("{z}:{y}")).collect::<Vec<_>>().join(","));
                kv("k", k.to_string());
            }
            LossSpec::Example2 { target, rank } => {
                kv("target", fmt_list(target));
                kv("rank", rank.to_string());
            }
            LossSpec::Sinet(sp) => {
                let m = &sp.model;
                kv("n_layers", m.n_layers.to_string());
                kv("d_model", m.d_model.to_string());
                kv("n_heads", m.n_heads.to_string());
                kv("d_k", m.d_k.to_string());
                kv("d_v", m.d_v.to_string());
                kv("d_ff", m.d_ff.to_string());
                kv("vocab", m.vocab_size.to_string());
                kv("seq_len", sp.seq_len.to_string());
                kv("mask_rate", sp.mask_rate.to_string());
                kv("batch", sp.batch.to_string());
                let att = match m.attention {
                    AttentionKind::ScaleInvariant => "si",
                    AttentionKind::Softmax => "softmax",
                };
                kv("attention", att.into());
            }
        }
        s
    }

    pub fn build_loss(&self) -> Result<Box<dyn StochasticLoss>> {
        Ok(match &self.loss {
            LossSpec::Angle { sigma } => Box::new(AngleFamily::new(*sigma)),
            LossSpec::Rayleigh { spectrum } => Box::new(Rayleigh::new(Tensor::diag(spectrum))?),
            LossSpec::StochRayleigh {
                spectrum,
                noise_scale,
                spike_prob,
                spike_factor,
            } => Box::new(
                StochasticRayleigh::new(Tensor::diag(spectrum), *noise_scale)?.with_spikes(*spike_prob, *spike_factor)?,
            ),
            LossSpec::MultiGroup { spectrum, spectrum_b } => {
                Box::new(MultiGroup::new(Tensor::diag(spectrum), Tensor::diag(spectrum_b))?)
            }
            LossSpec::Example1 { data, k } => {
                // surfaces separable data and bad k before training starts
                crate::losses::product_logistic_loss(data, *k, &vec![1.0; 2 * k])?;
                Box::new(ProductLogistic { data: data.clone(), k: *k })
            }
            LossSpec::Example2 { target, rank } => {
                let d = (target.len() as f64).sqrt().round() as usize;
                if d * d != target.len() {
                    return Err(Error::Input(format!("target has {} entries, not a square", target.len())));
                }
                Box::new(MatFac::new(Tensor::new(vec![d, d], target.clone())?, *rank)?)
            }
            LossSpec::Sinet(sp) => Box::new(MaskedTokenTask::new(
                sp.model.clone(),
                sp.seq_len,
                sp.mask_rate,
                sp.batch,
                self.seed,
            )?),
        })
    }

    /// Starting groups at a given init scale.
    pub fn initial_groups(&self, loss: &dyn StochasticLoss, scale: f64) -> Result<Vec<ParamGroup>> {
        if let LossSpec::Sinet(sp) = &self.loss {
            if self.x0.is_none() {
                let m = init_model(&sp.model, scale, self.seed)?;
                return Ok(vec![m.encoder, m.head]);
            }
        }
        let x = match &self.x0 {
            Some(x) => x.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1a17);
                loss.random_unit_point(&mut rng)
            }
        };
        groups_from_flat(loss, &scaled(&x, scale))
    }
}
