//! Seeded synthetic traces with a known answer: an orthonormal unembedding,
//! a target token whose lens probability rises at a chosen layer, and a
//! direction outside the unembedding's row space whose sign carries the
//! linking outcome.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_store::{Setting, TraceHeader, TraceRecord, TraceSet, Unembedding};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_success: usize,
    pub num_failure: usize,
    /// Inclusive range the rise layer of successful datapoints is drawn from.
    pub success_rise: (usize, usize),
    pub failure_rise: (usize, usize),
    /// Slope of the logistic rise, per layer.
    pub rise_slope: f64,
    /// Per-coordinate standard deviation of hidden-state noise.
    pub noise: f64,
    /// Magnitude of the outcome direction at the last layer.
    pub link_strength: f64,
    /// Norm of the per-datapoint content vector shared by both settings.
    pub content_scale: f64,
    pub answer_steps: usize,
    /// Successful answers have perplexity `1 + Exp(mean)`.
    pub success_ppl_excess: f64,
    pub failure_ppl_mean: f64,
    pub failure_ppl_sd: f64,
    /// Seeds the unembedding and outcome direction.
    pub model_seed: u64,
    /// Seeds the datapoints.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model_id: "synthetic".into(),
            num_layers: 32,
            hidden_dim: 64,
            vocab_size: 32,
            num_success: 200,
            num_failure: 200,
            success_rise: (15, 25),
            failure_rise: (26, 32),
            rise_slope: 1.0,
            noise: 0.5,
            link_strength: 3.0,
            content_scale: 4.0,
            answer_steps: 2,
            success_ppl_excess: 1.0,
            failure_ppl_mean: 3.0,
            failure_ppl_sd: 0.3,
            model_seed: crate::DEFAULT_SEED,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.hidden_dim < self.vocab_size + 2 {
            return bad(format!(
                "hidden_dim {} must exceed vocab_size + 1 = {}",
                self.hidden_dim,
                self.vocab_size + 1
            ));
        }
        for (name, (lo, hi)) in [("success_rise", self.success_rise), ("failure_rise", self.failure_rise)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} ({lo}, {hi}) is not a range of layers"));
            }
            if hi > self.num_layers {
                return bad(format!(
                    "{name} reaches layer {hi} but there are {} layers",
                    self.num_layers
                ));
            }
        }
        if self.answer_steps == 0 {
            return bad("answer_steps must be at least 1".into());
        }
        for (name, v) in [
            ("rise_slope", self.rise_slope),
            ("noise", self.noise),
            ("link_strength", self.link_strength),
            ("content_scale", self.content_scale),
            ("success_ppl_excess", self.success_ppl_excess),
            ("failure_ppl_mean", self.failure_ppl_mean),
            ("failure_ppl_sd", self.failure_ppl_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.rise_slope == 0.0 || self.success_ppl_excess == 0.0 {
            return bad("rise_slope and success_ppl_excess must be positive".into());
        }
        Ok(())
    }

    /// Target-token coefficient on its unembedding row at `layer`.
    fn target_coefficient(&self, layer: usize, rise: usize) -> f64 {
        let x = self.rise_slope * (layer as f64 - rise as f64 + 0.5);
        (x + ((self.vocab_size - 1) as f64).ln()).max(0.0)
    }

    /// Noise-free lens probability of the target token at each layer for a
    /// datapoint rising at `rise`. Crosses 0.5 between `rise - 1` and `rise`.
    pub fn constructed_trajectory(&self, rise: usize) -> Vec<f64> {
        let v = self.vocab_size as f64;
        (1..=self.num_layers)
            .map(|l| {
                let a = self.target_coefficient(l, rise);
                a.exp() / (a.exp() + v - 1.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub unembedding: Unembedding,
    pub visual: TraceSet,
    pub fullinfo: TraceSet,
    /// Rise layer of each visual record, in record order.
    pub rise_layers: Vec<usize>,
    pub targets: Vec<u32>,
}

struct Basis {
    rows: Vec<Vec<f64>>,
    link: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components along `basis` (assumed orthonormal) and returns
/// the norm of what is left.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    // two passes keep the result orthogonal to working precision
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    dot(v, v).sqrt()
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, d);
        let n = orthogonalize(&mut v, &basis);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis
}

fn model_basis(cfg: &SynthConfig) -> Basis {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let mut all = orthonormal_basis(&mut rng, cfg.vocab_size + 1, cfg.hidden_dim);
    let link = all.pop().expect("basis has vocab_size + 1 vectors");
    Basis { rows: all, link }
}

/// Logits of one answer step: the chosen token gets probability `1 / ppl`,
/// the rest share the remainder.
fn step_logits(vocab: usize, chosen: u32, ppl: f64) -> Vec<f32> {
    let p = 1.0 / ppl;
    let z = ((vocab - 1) as f64 * p / (1.0 - p)).ln();
    let mut out = vec![0.0f32; vocab];
    out[chosen as usize] = z as f32;
    out
}

fn clamp_ppl(ppl: f64, vocab: usize) -> f64 {
    ppl.clamp(1.001, vocab as f64 * 0.999)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let basis = model_basis(cfg);
    let (big_l, d, v) = (cfg.num_layers, cfg.hidden_dim, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut outcomes = vec![true; cfg.num_success];
    outcomes.resize(cfg.num_success + cfg.num_failure, false);
    outcomes.shuffle(&mut rng);

    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let fail_ppl = Normal::new(cfg.failure_ppl_mean, cfg.failure_ppl_sd).expect("validated sd");
    let ok_ppl = Exp::new(1.0 / cfg.success_ppl_excess).expect("validated mean");
    let mut orth = basis.rows.clone();
    orth.push(basis.link.clone());

    let mut visual = Vec::with_capacity(outcomes.len());
    let mut fullinfo = Vec::with_capacity(outcomes.len());
    let mut rise_layers = Vec::with_capacity(outcomes.len());
    let mut targets = Vec::with_capacity(outcomes.len());
    for (i, &success) in outcomes.iter().enumerate() {
        let id = format!("synth-{i:05}");
        let target = rng.gen_range(0..v.min(4)) as u32;
        let (lo, hi) = if success { cfg.success_rise } else { cfg.failure_rise };
        let rise = rng.gen_range(lo..=hi);
        let full_rise = rng.gen_range(cfg.success_rise.0..=cfg.success_rise.1);

        let mut content = gaussian(&mut rng, d);
        let n = orthogonalize(&mut content, &orth);
        content.iter_mut().for_each(|x| *x *= cfg.content_scale / n.max(1e-12));

        let states = |rise: usize, sign: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            (1..=big_l)
                .map(|l| {
                    let a = cfg.target_coefficient(l, rise);
                    let b = sign * cfg.link_strength * l as f64 / big_l as f64;
                    let row = &basis.rows[target as usize];
                    (0..d)
                        .map(|k| {
                            let e: f64 = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                            (a * row[k] + b * basis.link[k] + content[k] + e) as f32
                        })
                        .collect()
                })
                .collect()
        };
        let vis_states = states(rise, if success { 1.0 } else { -1.0 }, &mut rng);
        let full_states = states(full_rise, 1.0, &mut rng);

        let mut ids = vec![target];
        for _ in 1..cfg.answer_steps {
            ids.push(rng.gen_range(0..v) as u32);
        }
        let vis_ppl = clamp_ppl(
            if success {
                1.0 + ok_ppl.sample(&mut rng)
            } else {
                fail_ppl.sample(&mut rng)
            },
            v,
        );
        let full_ppl = clamp_ppl(1.0 + ok_ppl.sample(&mut rng), v);
        let logits = |ppl: f64| ids.iter().map(|&t| step_logits(v, t, ppl)).collect::<Vec<_>>();

        visual.push(TraceRecord {
            datapoint_id: id.clone(),
            hidden_states: vis_states,
            output_logits: logits(vis_ppl),
            generated_token_ids: ids.clone(),
            correct: Some(success),
        });
        fullinfo.push(TraceRecord {
            datapoint_id: id,
            hidden_states: full_states,
            output_logits: logits(full_ppl),
            generated_token_ids: ids,
            correct: Some(true),
        });
        rise_layers.push(rise);
        targets.push(target);
    }

    let rows: Vec<Vec<f32>> = basis
        .rows
        .iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect();
    let unembedding =
        Unembedding::from_rows(cfg.model_id.clone(), &rows).expect("orthonormal rows are finite and rectangular");
    let n = visual.len();
    Ok(SynthOutput {
        unembedding,
        visual: TraceSet::new(TraceHeader::new(&cfg.model_id, Setting::Visual, big_l, d, v, n), visual),
        fullinfo: TraceSet::new(
            TraceHeader::new(&cfg.model_id, Setting::FullInfo, big_l, d, v, n),
            fullinfo,
        ),
        rise_layers,
        targets,
    })
}

/// Three training datasets and one held-out dataset from the same model,
/// differing in noise level and datapoints.
pub fn ood_configs(base: &SynthConfig) -> Vec<(String, SynthConfig)> {
    [("train-a", 0.3), ("train-b", 0.5), ("train-c", 0.7), ("heldout", 0.6)]
        .iter()
        .enumerate()
        .map(|(i, &(name, noise))| {
            let cfg = SynthConfig {
                noise,
                seed: base.seed.wrapping_add(1 + i as u64),
                ..base.clone()
            };
            (name.to_string(), cfg)
        })
        .collect()
}
