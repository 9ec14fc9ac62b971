//! Imitation learning: per-head MLP nominal policies, exact reverse-mode
//! gradients through the sequential projections and head combination, and an
//! Adam training loop. No autodiff framework: the pipeline is small enough
//! that hand-coded adjoints are simpler and exactly auditable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{CombineMode, CompositionError, HeadCombiner};
use crate::dynamics::{Episode, Scenario};
use crate::geometry::{
    threshold_gain_grad, Gains, GeometryError, Halfspace, DEFAULT_RAW_GAIN, DELTA_BOUNDARY,
    EPS_FEAS,
};
use crate::linalg::{self, dot};
use crate::poset::LinearExtension;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint for scenario '{found}' does not match '{expected}'")]
    ScenarioMismatch { expected: String, found: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("malformed dataset file: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Dense fully connected network with rectifier hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Per layer, row-major `out x in`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer forward intermediates for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer (post-activation of the previous one), plus the
    /// final output at the end.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each hidden layer.
    pub pre_acts: Vec<Vec<f64>>,
}

/// Gradient buffers shaped like [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform init in +-1/sqrt(fan_in) per layer.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>(),
            );
            biases.push((0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
        }
        Self { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.layer_count()).map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1]).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: &[f64]) -> (Vec<f64>, MlpTape) {
        assert_eq!(x.len(), self.sizes[0]);
        let mut layer_inputs = vec![x.to_vec()];
        let mut pre_acts = Vec::new();
        let mut h = x.to_vec();
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = self.biases[l].clone();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += dot(&self.weights[l][o * n_in..(o + 1) * n_in], &h);
            }
            let last = l == self.layer_count() - 1;
            if last {
                h = z;
            } else {
                pre_acts.push(z.clone());
                h = z.iter().map(|&v| v.max(0.0)).collect();
                let _ = n_out;
            }
            layer_inputs.push(h.clone());
        }
        let out = h;
        (out, MlpTape { layer_inputs, pre_acts })
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Accumulates parameter gradients for `d_out` = dL/d(output).
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64], grads: &mut MlpGrads) {
        let mut delta = d_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let n_in = self.sizes[l];
            if l < self.layer_count() - 1 {
                // rectifier adjoint; subgradient 0 at the kink
                for (d, &z) in delta.iter_mut().zip(&tape.pre_acts[l]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &tape.layer_inputs[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                for (i, &xi) in input.iter().enumerate() {
                    grads.weights[l][o * n_in + i] += d * xi;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    for (i, p) in prev.iter_mut().enumerate() {
                        *p += d * self.weights[l][o * n_in + i];
                    }
                }
                delta = prev;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One expert-labelled step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub episode: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

/// Expert demonstrations plus the episode contexts needed to rebuild policy
/// features and per-episode barriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenario: String,
    pub episodes: Vec<Episode>,
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-channel max |u| across the dataset; the 10% noise scale.
    pub fn control_scale(&self, m: usize) -> Vec<f64> {
        let mut scale = vec![0.0f64; m];
        for s in &self.samples {
            for (sc, &u) in scale.iter_mut().zip(&s.u) {
                *sc = (*sc).max(u.abs());
            }
        }
        scale
    }

    /// CSV with a mandatory header: episode, t, state..., u_expert...,
    /// per-barrier b values. Episode contexts go to `<base>.meta.json`.
    pub fn save(&self, base: &std::path::Path) -> Result<(), LearnerError> {
        let csv = base.with_extension("csv");
        let mut out = String::new();
        let (n, m, k) = self.dims();
        out.push_str("episode,t");
        for i in 0..n {
            out.push_str(&format!(",x{}", i));
        }
        for i in 0..m {
            out.push_str(&format!(",u{}", i));
        }
        for i in 0..k {
            out.push_str(&format!(",b{}", i));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{}", s.episode, s.t));
            for v in s.x.iter().chain(&s.u).chain(&s.b) {
                out.push_str(&format!(",{:.17e}", v));
            }
            out.push('\n');
        }
        std::fs::write(&csv, out)?;
        let meta = serde_json::json!({
            "scenario": self.scenario,
            "episodes": self.episodes,
            "dims": { "state": n, "control": m, "barriers": k },
        });
        std::fs::write(base.with_extension("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(base: &std::path::Path) -> Result<Self, LearnerError> {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("meta.json"))?)?;
        let scenario = meta["scenario"]
            .as_str()
            .ok_or_else(|| LearnerError::Parse("missing scenario in meta".into()))?
            .to_string();
        let episodes: Vec<Episode> = serde_json::from_value(meta["episodes"].clone())?;
        let n = meta["dims"]["state"].as_u64().unwrap_or(0) as usize;
        let m = meta["dims"]["control"].as_u64().unwrap_or(0) as usize;
        let k = meta["dims"]["barriers"].as_u64().unwrap_or(0) as usize;
        let text = std::fs::read_to_string(base.with_extension("csv"))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LearnerError::Parse("empty csv".into()))?;
        if !header.starts_with("episode,t") {
            return Err(LearnerError::Parse(format!("bad header: {}", header)));
        }
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + n + m + k {
                return Err(LearnerError::Parse(format!("row {} has {} fields", ln, fields.len())));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| LearnerError::Parse(format!("row {}: {}", ln, e)))
            };
            let episode = fields[0]
                .parse::<usize>()
                .map_err(|e| LearnerError::Parse(format!("row {}: {}", ln, e)))?;
            let t = fields[1]
                .parse::<usize>()
                .map_err(|e| LearnerError::Parse(format!("row {}: {}", ln, e)))?;
            let x = fields[2..2 + n].iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
            let u = fields[2 + n..2 + n + m].iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
            let b = fields[2 + n + m..].iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
            samples.push(DataSample { episode, t, x, u, b });
        }
        Ok(Self { scenario, episodes, samples })
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.samples
            .first()
            .map(|s| (s.x.len(), s.u.len(), s.b.len()))
            .unwrap_or((0, 0, 0))
    }

    /// Fixed train/validation split: the last 10% of episodes (at least one
    /// when there are two or more) are held out.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n_ep = self.episodes.len();
        let n_val_ep = if n_ep >= 2 { (n_ep / 10).max(1) } else { 0 };
        let first_val = n_ep - n_val_ep;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.episode >= first_val {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub mode: CombineMode,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 32, 32],
            heads: 2,
            mode: CombineMode::Mixture,
            temperature: 1.0,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

/// Full learnable state: per-head nominal networks, per-constraint raw
/// gains (shared across heads), and combiner logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub scenario: String,
    pub heads: Vec<Mlp>,
    pub extensions: Vec<LinearExtension>,
    pub gains: Vec<Gains>,
    pub combiner: HeadCombiner,
    pub opt: AdamState,
    pub seed: u64,
    pub step: usize,
}

impl TrainState {
    pub fn init(scenario: &Scenario, config: &LearnerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sizes = vec![scenario.feature_dim()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(scenario.control_dim());
        let heads: Vec<Mlp> = (0..config.heads).map(|_| Mlp::init(&sizes, &mut rng)).collect();
        let extensions = scenario.head_extensions(config.heads);
        let gains =
            vec![Gains::from_raw(DEFAULT_RAW_GAIN, DEFAULT_RAW_GAIN); scenario.n_constraints()];
        let combiner =
            HeadCombiner::new(config.mode, vec![0.0; config.heads], config.temperature);
        let mut state = Self {
            scenario: scenario.name().to_string(),
            heads,
            extensions,
            gains,
            combiner,
            opt: AdamState::default(),
            seed: config.seed,
            step: 0,
        };
        let n = state.param_count();
        state.opt.m = vec![0.0; n];
        state.opt.v = vec![0.0; n];
        state
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(Mlp::param_count).sum::<usize>()
            + 2 * self.gains.len()
            + self.combiner.logits.len()
    }

    /// Flat parameter layout: heads (weights then biases per layer), then
    /// raw gains (raw1, raw2 per constraint), then combiner logits.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for h in &self.heads {
            for l in 0..h.layer_count() {
                out.extend_from_slice(&h.weights[l]);
                out.extend_from_slice(&h.biases[l]);
            }
        }
        for g in &self.gains {
            out.push(g.raw1);
            out.push(g.raw2);
        }
        out.extend_from_slice(&self.combiner.logits);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut i = 0;
        for h in &mut self.heads {
            for l in 0..h.sizes.len() - 1 {
                let wl = h.weights[l].len();
                h.weights[l].copy_from_slice(&flat[i..i + wl]);
                i += wl;
                let bl = h.biases[l].len();
                h.biases[l].copy_from_slice(&flat[i..i + bl]);
                i += bl;
            }
        }
        for g in &mut self.gains {
            g.raw1 = flat[i];
            g.raw2 = flat[i + 1];
            i += 2;
        }
        self.combiner.logits.copy_from_slice(&flat[i..]);
    }

    /// The combiner used during optimization: hard mode trains through the
    /// Gumbel relaxation and only evaluates by argmax.
    fn training_combiner(&self) -> HeadCombiner {
        let mut c = self.combiner.clone();
        if c.mode == CombineMode::Hard {
            c.mode = CombineMode::Gumbel;
        }
        c
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProjStepRecord {
    pub constraint: usize,
    pub active: bool,
    /// |residual| < boundary tolerance: gradient is one-sided here.
    pub near_boundary: bool,
}

/// Everything recorded during one forward pass, sufficient for exact
/// reverse-mode gradients and bit-exact replay.
#[derive(Debug, Clone)]
pub struct Tape {
    pub features: Vec<f64>,
    pub head_tapes: Vec<MlpTape>,
    pub head_nominals: Vec<Vec<f64>>,
    pub head_controls: Vec<Vec<f64>>,
    pub proj_records: Vec<Vec<ProjStepRecord>>,
    pub weights: Vec<f64>,
    pub gumbel_noise: Option<Vec<f64>>,
    pub halfspaces: Vec<Halfspace>,
    /// dc/d(raw1, raw2) per constraint at this state.
    pub gain_grads: Vec<(f64, f64)>,
    pub boundary_hit: bool,
}

/// Runs the full pipeline for one sample: per-head MLP, per-head sequential
/// projection, head combination. `rng` enables stochastic Gumbel sampling
/// during training; pass `None` for deterministic inference.
pub fn forward<R: Rng>(
    state: &TrainState,
    scenario: &Scenario,
    episode: &Episode,
    x: &[f64],
    rng: Option<&mut R>,
) -> Result<(Vec<f64>, Tape), LearnerError> {
    let features = scenario.features(x, episode);
    let halfspaces = scenario.compile_halfspaces(x, &state.gains, episode)?;
    let barriers = scenario.control_barriers(episode);
    let gain_grads: Vec<(f64, f64)> = barriers
        .iter()
        .enumerate()
        .map(|(i, b)| threshold_gain_grad(b.as_ref(), &state.gains[i], x))
        .collect();

    let mut head_tapes = Vec::new();
    let mut head_nominals = Vec::new();
    let mut head_controls = Vec::new();
    let mut proj_records = Vec::new();
    let mut boundary_hit = false;
    for (h, mlp) in state.heads.iter().enumerate() {
        let (u_nom, tape) = mlp.forward_tape(&features);
        let mut u = u_nom.clone();
        let mut records = Vec::new();
        for &j in state.extensions[h].order() {
            let hs = &halfspaces[j];
            let residual = hs.c - dot(&hs.a, &u);
            let active = residual > EPS_FEAS;
            let near_boundary = residual.abs() < DELTA_BOUNDARY;
            boundary_hit |= near_boundary;
            records.push(ProjStepRecord { constraint: j, active, near_boundary });
            u = hs.project(&u)?;
        }
        head_tapes.push(tape);
        head_nominals.push(u_nom);
        head_controls.push(u);
        proj_records.push(records);
    }

    let combiner = if rng.is_some() { state.training_combiner() } else { state.combiner.clone() };
    let (out, sel) = combiner.combine(&head_controls, rng)?;
    Ok((
        out,
        Tape {
            features,
            head_tapes,
            head_nominals,
            head_controls,
            proj_records,
            weights: sel.weights,
            gumbel_noise: sel.gumbel_noise,
            halfspaces,
            gain_grads,
            boundary_hit,
        },
    ))
}

/// Flat gradient buffer matching [`TrainState::flatten`].
pub struct FlatGrads(pub Vec<f64>);

fn accumulate_sample_grads(
    state: &TrainState,
    tape: &Tape,
    d_out: &[f64],
    head_grads: &mut [MlpGrads],
    gain_grads: &mut [(f64, f64)],
    logit_grads: &mut [f64],
) {
    let hs_count = state.heads.len();
    // combiner adjoint
    let scores: Vec<f64> =
        (0..hs_count).map(|h| dot(d_out, &tape.head_controls[h])).collect();
    match (state.training_combiner().mode, &tape.gumbel_noise) {
        (CombineMode::Mixture, _) => {
            let mean: f64 = tape.weights.iter().zip(&scores).map(|(&w, &s)| w * s).sum();
            for h in 0..hs_count {
                logit_grads[h] += tape.weights[h] * (scores[h] - mean);
            }
        }
        (CombineMode::Gumbel, Some(_)) => {
            // softmax over (logits + noise)/T: same Jacobian scaled by 1/T
            let mean: f64 = tape.weights.iter().zip(&scores).map(|(&w, &s)| w * s).sum();
            for h in 0..hs_count {
                logit_grads[h] +=
                    tape.weights[h] * (scores[h] - mean) / state.combiner.temperature;
            }
        }
        _ => {} // one-hot selection: no logit gradient
    }

    for h in 0..hs_count {
        let w = tape.weights[h];
        if w == 0.0 {
            continue;
        }
        let mut gbar: Vec<f64> = d_out.iter().map(|&g| g * w).collect();
        for rec in tape.proj_records[h].iter().rev() {
            if !rec.active {
                continue;
            }
            let hs = &tape.halfspaces[rec.constraint];
            let nsq = linalg::norm_sq(&hs.a);
            let dc = dot(&gbar, &hs.a) / nsq;
            let (d1, d2) = tape.gain_grads[rec.constraint];
            gain_grads[rec.constraint].0 += dc * d1;
            gain_grads[rec.constraint].1 += dc * d2;
            // gbar <- (I - a a^T / |a|^2) gbar (projector is symmetric)
            linalg::axpy(-dc, &hs.a, &mut gbar);
        }
        state.heads[h].backward(&tape.head_tapes[h], &gbar, &mut head_grads[h]);
    }
}

/// Mean-squared-error loss and exact gradients over a batch of dataset
/// indices. Deterministic given the RNG state (Gumbel noise is drawn
/// sample-by-sample in batch order).
pub fn loss_and_grad<R: Rng>(
    state: &TrainState,
    scenario: &Scenario,
    dataset: &Dataset,
    batch: &[usize],
    rng: &mut R,
) -> Result<(f64, FlatGrads), LearnerError> {
    assert!(!batch.is_empty());
    let mut head_grads: Vec<MlpGrads> = state.heads.iter().map(Mlp::zero_grads).collect();
    let mut gain_grads = vec![(0.0, 0.0); state.gains.len()];
    let mut logit_grads = vec![0.0; state.combiner.logits.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / batch.len() as f64;
    for &idx in batch {
        let s = &dataset.samples[idx];
        let episode = &dataset.episodes[s.episode];
        let (u, tape) = forward(state, scenario, episode, &s.x, Some(rng))?;
        let err: Vec<f64> = u.iter().zip(&s.u).map(|(a, b)| a - b).collect();
        loss += linalg::norm_sq(&err) * inv_n;
        let d_out: Vec<f64> = err.iter().map(|&e| 2.0 * e * inv_n).collect();
        accumulate_sample_grads(
            state,
            &tape,
            &d_out,
            &mut head_grads,
            &mut gain_grads,
            &mut logit_grads,
        );
    }
    let mut flat = Vec::with_capacity(state.param_count());
    for g in &head_grads {
        for l in 0..g.weights.len() {
            flat.extend_from_slice(&g.weights[l]);
            flat.extend_from_slice(&g.biases[l]);
        }
    }
    for &(g1, g2) in &gain_grads {
        flat.push(g1);
        flat.push(g2);
    }
    flat.extend_from_slice(&logit_grads);
    Ok((loss, FlatGrads(flat)))
}

/// Mean squared error in deterministic inference mode (no Gumbel noise).
pub fn evaluate_mse(
    state: &TrainState,
    scenario: &Scenario,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64, LearnerError> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &idx in indices {
        let s = &dataset.samples[idx];
        let episode = &dataset.episodes[s.episode];
        let (u, _) = forward::<ChaCha8Rng>(state, scenario, episode, &s.x, None)?;
        total += linalg::dist_sq(&u, &s.u);
    }
    Ok(total / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn write_curve_csv(path: &std::path::Path, curve: &[CurvePoint]) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for p in curve {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", p.epoch, p.train_mse, p.val_mse));
    }
    std::fs::write(path, out)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Learning-rate multiplier for the barrier-gain parameters. The gains are a
/// handful of physical parameters whose gradients are sparse (only samples
/// near a constraint boundary touch them), so they train far slower than the
/// network weights at a shared rate.
const GAIN_LR_MULT: f64 = 10.0;
/// Lower bound on every learned barrier gain, enforced by projecting the raw
/// parameters after each optimizer step. Demonstrations may violate a
/// constraint the layer must uphold; without a floor, imitation would shrink
/// that constraint's gain toward zero and effectively disable it.
const GAIN_MIN: f64 = 0.5;

fn adam_step(state: &mut TrainState, grads: &FlatGrads, lr: f64) {
    let mut params = state.flatten();
    state.opt.t += 1;
    let t = state.opt.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let gain_start: usize = state.heads.iter().map(|h| h.param_count()).sum();
    let gain_end = gain_start + 2 * state.gains.len();
    for i in 0..params.len() {
        let g = grads.0[i];
        state.opt.m[i] = ADAM_BETA1 * state.opt.m[i] + (1.0 - ADAM_BETA1) * g;
        state.opt.v[i] = ADAM_BETA2 * state.opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.opt.m[i] / bc1;
        let vh = state.opt.v[i] / bc2;
        let in_gains = (gain_start..gain_end).contains(&i);
        let rate = if in_gains { lr * GAIN_LR_MULT } else { lr };
        params[i] -= rate * mh / (vh.sqrt() + ADAM_EPS);
        if in_gains {
            // softplus(raw) >= GAIN_MIN  <=>  raw >= ln(e^GAIN_MIN - 1)
            let raw_min = (GAIN_MIN.exp() - 1.0).ln();
            params[i] = params[i].max(raw_min);
        }
    }
    state.unflatten(&params);
}

/// Imitation training loop: Adam over shuffled minibatches, per-epoch
/// train/validation MSE. Fully deterministic given the config seed and
/// dataset order.
pub fn train(
    scenario: &Scenario,
    dataset: &Dataset,
    config: &LearnerConfig,
) -> Result<(TrainState, Vec<CurvePoint>), LearnerError> {
    train_with_extensions(scenario, dataset, config, None)
}

/// [`train`] with the per-head linear extensions overridden; used by the
/// order-sensitivity ablation, which needs deliberately invalid orders.
pub fn train_with_extensions(
    scenario: &Scenario,
    dataset: &Dataset,
    config: &LearnerConfig,
    extensions: Option<Vec<LinearExtension>>,
) -> Result<(TrainState, Vec<CurvePoint>), LearnerError> {
    if dataset.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let mut state = TrainState::init(scenario, config);
    if let Some(ext) = extensions {
        assert_eq!(ext.len(), config.heads, "one extension per head");
        state.extensions = ext;
    }
    let (train_idx, val_idx) = dataset.split();
    let mut curve = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6013));
    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (step, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let (loss, grads) =
                loss_and_grad(&state, scenario, dataset, chunk, &mut noise_rng)?;
            if !loss.is_finite() {
                return Err(LearnerError::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
            adam_step(&mut state, &grads, config.learning_rate);
            state.step += 1;
        }
        // train MSE is the running average over the epoch's minibatches, so
        // the first epoch reflects the initial loss; val is post-epoch
        let train_mse = loss_sum / loss_n.max(1) as f64;
        let val_mse = evaluate_mse(&state, scenario, dataset, &val_idx)?;
        curve.push(CurvePoint { epoch, train_mse, val_mse });
    }
    Ok((state, curve))
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Plain (unprotected) MLP training, for the end-to-end baseline
// ---------------------------------------------------------------------------

/// Trains a single MLP on features -> expert control with no safety layer.
pub fn train_plain_mlp(
    scenario: &Scenario,
    dataset: &Dataset,
    config: &LearnerConfig,
) -> Result<(Mlp, Vec<CurvePoint>), LearnerError> {
    if dataset.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![scenario.feature_dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(scenario.control_dim());
    let mut mlp = Mlp::init(&sizes, &mut rng);
    let n = mlp.param_count();
    let (mut m1, mut v1) = (vec![0.0; n], vec![0.0; n]);
    let mut t = 0usize;
    let (train_idx, val_idx) = dataset.split();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mse = |mlp: &Mlp, idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return f64::NAN;
        }
        idx.iter()
            .map(|&i| {
                let s = &dataset.samples[i];
                let f = scenario.features(&s.x, &dataset.episodes[s.episode]);
                linalg::dist_sq(&mlp.forward(&f), &s.u)
            })
            .sum::<f64>()
            / idx.len() as f64
    };
    let mut curve = Vec::new();
    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut grads = mlp.zero_grads();
            let inv_n = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &dataset.samples[i];
                let f = scenario.features(&s.x, &dataset.episodes[s.episode]);
                let (u, tape) = mlp.forward_tape(&f);
                loss_sum += linalg::dist_sq(&u, &s.u);
                let d_out: Vec<f64> =
                    u.iter().zip(&s.u).map(|(a, b)| 2.0 * (a - b) * inv_n).collect();
                mlp.backward(&tape, &d_out, &mut grads);
            }
            // flat Adam over the single network
            let mut flat = Vec::with_capacity(n);
            let mut gflat = Vec::with_capacity(n);
            for l in 0..mlp.layer_count() {
                flat.extend_from_slice(&mlp.weights[l]);
                flat.extend_from_slice(&mlp.biases[l]);
                gflat.extend_from_slice(&grads.weights[l]);
                gflat.extend_from_slice(&grads.biases[l]);
            }
            t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powf(t as f64);
            let bc2 = 1.0 - ADAM_BETA2.powf(t as f64);
            for i in 0..n {
                let g = gflat[i];
                m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g;
                v1[i] = ADAM_BETA2 * v1[i] + (1.0 - ADAM_BETA2) * g * g;
                flat[i] -= config.learning_rate * (m1[i] / bc1) / ((v1[i] / bc2).sqrt() + ADAM_EPS);
            }
            let mut idx = 0;
            for l in 0..mlp.layer_count() {
                let wl = mlp.weights[l].len();
                mlp.weights[l].copy_from_slice(&flat[idx..idx + wl]);
                idx += wl;
                let bl = mlp.biases[l].len();
                mlp.biases[l].copy_from_slice(&flat[idx..idx + bl]);
                idx += bl;
            }
        }
        // same running-average convention as the layered trainer
        let train_mse = loss_sum / train_idx.len().max(1) as f64;
        curve.push(CurvePoint { epoch, train_mse, val_mse: mse(&mlp, &val_idx) });
    }
    Ok((mlp, curve))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: LearnerConfig,
    pub state: TrainState,
    /// Baseline nominal network trained without the safety layer, used by
    /// the simultaneous-QP and unprotected benchmark policies.
    pub plain: Option<Mlp>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), LearnerError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LearnerError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ScenarioConfig;
    use approx::assert_relative_eq;

    fn tiny_config(mode: CombineMode, heads: usize, seed: u64) -> LearnerConfig {
        LearnerConfig {
            hidden: vec![16, 8],
            heads,
            mode,
            epochs: 5,
            batch_size: 8,
            seed,
            ..LearnerConfig::default()
        }
    }

    fn synthetic_dataset(scenario: &Scenario, episodes: usize, steps: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eps = Vec::new();
        let mut samples = Vec::new();
        for e in 0..episodes {
            let ep = scenario.sample_episode(&mut rng);
            let mut x = ep.x0.clone();
            for t in 0..steps {
                let u = crate::qp::expert_control(scenario, &x, &ep).unwrap();
                let b = scenario.barrier_values(&x, &ep);
                samples.push(DataSample { episode: e, t, x: x.clone(), u: u.clone(), b });
                x = scenario.step(&x, &u).unwrap();
            }
            eps.push(ep);
        }
        Dataset { scenario: scenario.name().into(), episodes: eps, samples }
    }

    #[test]
    fn zero_weight_mlp_is_bias_path() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 1, 1);
        let mut st = TrainState::init(&sc, &cfg);
        for l in 0..st.heads[0].layer_count() {
            st.heads[0].weights[l].iter_mut().for_each(|w| *w = 0.0);
            st.heads[0].biases[l].iter_mut().for_each(|b| *b = 0.0);
        }
        let last = st.heads[0].layer_count() - 1;
        st.heads[0].biases[last] = vec![0.3, -0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sc.sample_episode(&mut rng);
        // far from every obstacle: all projections inactive
        let x = vec![0.0, -5.0, 0.0, 0.5];
        let (u, tape) = forward::<ChaCha8Rng>(&st, &sc, &ep, &x, None).unwrap();
        assert!(tape.proj_records[0].iter().all(|r| !r.active));
        assert_relative_eq!(u[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(u[1], -0.2, epsilon = 1e-12);
    }

    #[test]
    fn loss_arithmetic_single_sample() {
        // 1-D analog checked through the real pipeline: output 0, target 2
        // per channel scaled so the squared error is exactly 4.
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 1, 3);
        let mut st = TrainState::init(&sc, &cfg);
        for l in 0..st.heads[0].layer_count() {
            st.heads[0].weights[l].iter_mut().for_each(|w| *w = 0.0);
            st.heads[0].biases[l].iter_mut().for_each(|b| *b = 0.0);
        }
        let mut ds = synthetic_dataset(&sc, 1, 1, 4);
        ds.samples[0].x = vec![0.0, -5.0, 0.0, 0.5];
        ds.samples[0].u = vec![2.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (loss, grads) = loss_and_grad(&st, &sc, &ds, &[0], &mut rng).unwrap();
        assert_relative_eq!(loss, 4.0, epsilon = 1e-12);
        assert!(grads.0.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn perfect_prediction_gives_zero_loss_and_grads() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 2, 6);
        let st = TrainState::init(&sc, &cfg);
        let mut ds = synthetic_dataset(&sc, 1, 1, 7);
        ds.samples[0].x = vec![0.0, -5.0, 0.0, 0.5];
        let ep = ds.episodes[0].clone();
        let (u, _) = forward::<ChaCha8Rng>(&st, &sc, &ep, &ds.samples[0].x, None).unwrap();
        ds.samples[0].u = u;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (loss, grads) = loss_and_grad(&st, &sc, &ds, &[0], &mut rng).unwrap();
        assert!(loss <= 1e-24);
        assert!(grads.0.iter().all(|&g| g.abs() <= 1e-12));
    }

    #[test]
    fn single_active_constraint_gradient_is_projector() {
        // With one head and one always-active constraint, d(output)/d(u_nom)
        // must equal I - a a^T/|a|^2. Checked through the loss gradient on
        // the output-layer biases of a zero-weight network (d u_nom / d bias
        // = I there).
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 1, 9);
        let mut st = TrainState::init(&sc, &cfg);
        for l in 0..st.heads[0].layer_count() {
            st.heads[0].weights[l].iter_mut().for_each(|w| *w = 0.0);
            st.heads[0].biases[l].iter_mut().for_each(|b| *b = 0.0);
        }
        // close in front of obstacle 0, moving at it fast: its constraint
        // activates at u_nom = 0
        let x = vec![1.65, 0.9, 0.0, 1.4];
        let mut ds = synthetic_dataset(&sc, 1, 1, 10);
        ds.samples[0].x = x.clone();
        ds.samples[0].u = vec![0.0, 0.0];
        let ep = ds.episodes[0].clone();
        let (_, tape) = forward::<ChaCha8Rng>(&st, &sc, &ep, &x, None).unwrap();
        let active: Vec<_> = tape.proj_records[0].iter().filter(|r| r.active).collect();
        assert_eq!(active.len(), 1, "setup should activate exactly one constraint");
        let a = tape.halfspaces[active[0].constraint].a.clone();
        let nsq = linalg::norm_sq(&a);

        // probe the chain rule: dL/d bias = P^T dL/du with P the projector
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, grads) = loss_and_grad(&st, &sc, &ds, &[0], &mut rng).unwrap();
        let (u_out, _) = forward::<ChaCha8Rng>(&st, &sc, &ep, &x, None).unwrap();
        let d_out: Vec<f64> = u_out.iter().map(|&v| 2.0 * v).collect();
        let mut expected = d_out.clone();
        let dc = dot(&expected, &a) / nsq;
        linalg::axpy(-dc, &a, &mut expected);
        // output-layer biases are the last two entries of head 0's params
        let head_params = st.heads[0].param_count();
        let got = &grads.0[head_params - 2..head_params];
        assert_relative_eq!(got[0], expected[0], epsilon = 1e-10);
        assert_relative_eq!(got[1], expected[1], epsilon = 1e-10);
    }

    fn fd_check(mode: CombineMode, seed: u64) {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(mode, 3, seed);
        let mut st = TrainState::init(&sc, &cfg);
        // non-uniform logits so combiner gradients are exercised
        st.combiner.logits = vec![0.3, -0.2, 0.1];
        let ds = synthetic_dataset(&sc, 2, 4, seed + 1);
        let batch: Vec<usize> = (0..5).collect();
        let noise_seed = seed + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (_, grads) = loss_and_grad(&st, &sc, &ds, &batch, &mut rng).unwrap();
        let params = st.flatten();
        let head_params: usize = st.heads.iter().map(Mlp::param_count).sum();
        let gain_params = 2 * st.gains.len();
        // sample indices across all three parameter groups
        let mut probes = vec![0, head_params / 3, head_params - 1];
        probes.extend((0..gain_params).map(|i| head_params + i));
        probes.extend((0..st.combiner.logits.len()).map(|i| head_params + gain_params + i));
        let h = 1e-6;
        for &i in &probes {
            let mut stp = st.clone();
            let mut p = params.clone();
            p[i] += h;
            stp.unflatten(&p);
            let mut rng_p = ChaCha8Rng::seed_from_u64(noise_seed);
            let (lp, _) = loss_and_grad(&stp, &sc, &ds, &batch, &mut rng_p).unwrap();
            p[i] -= 2.0 * h;
            stp.unflatten(&p);
            let mut rng_m = ChaCha8Rng::seed_from_u64(noise_seed);
            let (lm, _) = loss_and_grad(&stp, &sc, &ds, &batch, &mut rng_m).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(grads.0[i].abs()).max(1e-6);
            assert!(
                (grads.0[i] - fd).abs() / scale <= 1e-5,
                "param {}: analytic {} vs fd {}",
                i,
                grads.0[i],
                fd
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_mixture() {
        fd_check(CombineMode::Mixture, 20);
    }

    #[test]
    fn gradients_match_finite_differences_gumbel() {
        fd_check(CombineMode::Gumbel, 30);
    }

    #[test]
    fn single_sample_overfit() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = LearnerConfig {
            hidden: vec![16, 8],
            heads: 2,
            mode: CombineMode::Mixture,
            epochs: 400,
            batch_size: 1,
            learning_rate: 3e-3,
            seed: 40,
            ..LearnerConfig::default()
        };
        let ds = synthetic_dataset(&sc, 1, 1, 41);
        let (_, curve) = train(&sc, &ds, &cfg).unwrap();
        let last = curve.last().unwrap();
        assert!(last.train_mse < 1e-6, "final mse {}", last.train_mse);
    }

    #[test]
    fn training_is_deterministic() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Gumbel, 2, 50);
        let ds = synthetic_dataset(&sc, 3, 10, 51);
        let (s1, c1) = train(&sc, &ds, &cfg).unwrap();
        let (s2, c2) = train(&sc, &ds, &cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(s1.flatten(), s2.flatten());
    }

    #[test]
    fn learned_gains_stay_positive() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 2, 60);
        let ds = synthetic_dataset(&sc, 3, 10, 61);
        let (st, _) = train(&sc, &ds, &cfg).unwrap();
        for g in &st.gains {
            assert!(g.kappa1() > 0.0 && g.kappa2() > 0.0);
        }
    }

    #[test]
    fn mixture_weights_on_simplex_after_training() {
        let sc = Scenario::by_name("navigation").unwrap();
        let cfg = tiny_config(CombineMode::Mixture, 4, 70);
        let ds = synthetic_dataset(&sc, 2, 8, 71);
        let (st, _) = train(&sc, &ds, &cfg).unwrap();
        let w = crate::linalg::softmax(&st.combiner.logits);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn dataset_roundtrip_and_scale() {
        let sc = Scenario::by_name("navigation").unwrap();
        let ds = synthetic_dataset(&sc, 2, 5, 80);
        let dir = std::env::temp_dir().join("posafe_test_ds");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("nav");
        ds.save(&base).unwrap();
        let back = Dataset::load(&base).unwrap();
        assert_eq!(ds.samples.len(), back.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.u, b.u);
        }
        let scale = ds.control_scale(2);
        assert!(scale.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let sc = Scenario::by_name("manipulation").unwrap();
        let cfg = tiny_config(CombineMode::Hard, 2, 90);
        let st = TrainState::init(&sc, &cfg);
        let ck = Checkpoint { version: CHECKPOINT_VERSION, config: cfg, state: st.clone(), plain: None };
        let dir = std::env::temp_dir().join("posafe_test_ck");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.state.flatten(), st.flatten());
        assert_eq!(back.version, CHECKPOINT_VERSION);
    }

    #[test]
    fn scenario_kind_available_for_all_names() {
        // head extension counts follow the scenario posets
        for (name, heads) in [("navigation", 6), ("manipulation", 2), ("driving2", 2)] {
            let sc = Scenario::by_name(name).unwrap();
            let cfg = tiny_config(CombineMode::Mixture, heads, 100);
            let st = TrainState::init(&sc, &cfg);
            assert_eq!(st.extensions.len(), heads);
            for e in &st.extensions {
                assert!(e.check_against(&sc.poset).is_ok());
            }
        }
        let _ = ScenarioConfig::by_name("driving4").unwrap();
    }
}
