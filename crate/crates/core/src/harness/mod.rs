//! Experiment loop: quantization taps around the CNN engine, the once per
//! iteration precision update, periodic evaluation and metrics.
//!
//! Each training iteration:
//! 1. quantizes the full-precision master weights into working copies
//!    (weights window),
//! 2. runs forward with every layer output quantized (activations window),
//! 3. runs backward with every propagated and parameter gradient quantized
//!    (gradients window),
//! 4. applies SGD to the master weights with the quantized gradients,
//! 5. in DPS mode updates the formats from the three windows, then resets
//!    them. Statistics of iteration `k` choose the formats of iteration `k+1`.

pub mod metrics;

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::controller::{Attribute, PerAttribute, PrecisionState};
use crate::error::{DivergenceSite, Error, Result};
use crate::fixed_point::{quantize_tensor, FixedPointFormat, RoundingMode};
use crate::mnist::{batch_indices, Dataset};
use crate::nn::{self, Identity, Network, Sgd, Tap, TapSite};
use crate::quant_stats::QuantStats;
use crate::rng::substream;
use crate::tensor::Tensor;

pub use metrics::{mean_bitwidths, moving_average, moving_average_bitwidths, MetricsRow, WindowStats, CSV_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full precision, no quantization.
    FloatBaseline,
    /// Fixed formats per attribute, no controller.
    StaticFixed,
    /// Formats adapted every iteration.
    Dps,
}

/// How activation gradients pass back through a saturated activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationGrad {
    /// Zero the gradient where the forward value was clamped to the range
    /// bound (the derivative of saturation); rounding is straight-through.
    #[default]
    Mask,
    /// Pass every gradient through unchanged.
    StraightThrough,
}

// Substream tags.
const STREAM_WEIGHTS: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_ACT_GRAD: u64 = 3;
const STREAM_PARAM_GRAD: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_INIT: u64 = 6;

const EVAL_BATCH: usize = 100;

/// Tap quantizing activations and gradients into the current formats.
struct QuantTap<'a> {
    formats: PerAttribute<FixedPointFormat>,
    rounding: RoundingMode,
    seed: u64,
    /// Iteration tag for substreams; evaluation uses a distinct domain.
    key: [u64; 2],
    stats: &'a mut PerAttribute<QuantStats>,
    quantize_grads: bool,
    /// Per layer, which outputs were saturated in the forward pass.
    saturated: Option<Vec<Option<Vec<bool>>>>,
}

impl QuantTap<'_> {
    fn quantize(&mut self, attr: Attribute, stream: u64, index: usize, role: String, t: Tensor) -> Result<Tensor> {
        let mut rng: ChaCha8Rng = substream(self.seed, &[self.key[0], self.key[1], stream, index as u64]);
        quantize_tensor(&t, self.formats[attr], self.rounding, &mut rng, &mut self.stats[attr])
            .map_err(|e| e.in_context(&role, None))
    }
}

impl Tap for QuantTap<'_> {
    fn tap(&mut self, site: TapSite, t: Tensor) -> Result<Tensor> {
        match site {
            TapSite::Activation(i) => {
                if let Some(sat) = &mut self.saturated {
                    let (lo, hi) = self.formats.activations.representable_range();
                    if sat.len() <= i {
                        sat.resize(i + 1, None);
                    }
                    sat[i] = Some(t.data().iter().map(|&v| v < lo || v > hi).collect());
                }
                self.quantize(Attribute::Activations, STREAM_ACT, i, format!("activations[{i}]"), t)
            }
            TapSite::ActivationGrad(i) if self.quantize_grads => {
                let mut t = t;
                if let Some(Some(mask)) = self.saturated.as_ref().and_then(|s| s.get(i)) {
                    for (g, &m) in t.data_mut().iter_mut().zip(mask) {
                        if m {
                            *g = 0.0;
                        }
                    }
                }
                self.quantize(Attribute::Gradients, STREAM_ACT_GRAD, i, format!("activation gradients[{i}]"), t)
            }
            TapSite::ParamGrad(p) if self.quantize_grads => {
                self.quantize(Attribute::Gradients, STREAM_PARAM_GRAD, p, format!("parameter gradients[{p}]"), t)
            }
            _ => Ok(t),
        }
    }
}

fn quantize_params(
    params: &[Tensor],
    format: FixedPointFormat,
    rounding: RoundingMode,
    seed: u64,
    key: [u64; 2],
    stats: &mut QuantStats,
) -> Result<Vec<Tensor>> {
    params
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let mut rng = substream(seed, &[key[0], key[1], STREAM_WEIGHTS, p as u64]);
            quantize_tensor(t, format, rounding, &mut rng, stats).map_err(|e| e.in_context(&format!("weights[{p}]"), None))
        })
        .collect()
}

/// Test error in percent: 100 * misclassified / total, argmax with the
/// lowest index winning ties.
///
/// With `quant` set, weights are quantized once and every layer output is
/// quantized during inference; statistics are discarded.
pub fn evaluate(
    net: &Network,
    params: &[Tensor],
    test: &Dataset,
    quant: Option<(PerAttribute<FixedPointFormat>, RoundingMode, u64)>,
    tag: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut scratch = PerAttribute::splat(QuantStats::default());
    let working;
    let weights = match quant {
        Some((formats, rounding, seed)) => {
            working = quantize_params(params, formats.weights, rounding, seed, [STREAM_EVAL, tag], &mut scratch.weights)?;
            &working[..]
        }
        None => params,
    };
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..test.len()).collect();
    for (b, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let (x, labels) = test.gather(chunk);
        let logits = match quant {
            Some((formats, rounding, seed)) => {
                let mut tap = QuantTap {
                    formats,
                    rounding,
                    seed,
                    key: [STREAM_EVAL, tag ^ ((b as u64 + 1) << 32)],
                    stats: &mut scratch,
                    quantize_grads: false,
                    saturated: None,
                };
                nn::forward(net, weights, &x, &mut tap)?.0
            }
            None => nn::forward(net, weights, &x, &mut Identity)?.0,
        };
        wrong += nn::argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 * 100.0 / test.len() as f64)
}

/// Mutable training state for one run.
pub struct Trainer {
    net: Network,
    mode: RunMode,
    params: Vec<Tensor>,
    sgd: Sgd,
    rounding: RoundingMode,
    saturation_grad: SaturationGrad,
    quant_seed: u64,
    eval_quantized: bool,
    /// Present in DPS mode.
    precision: Option<PrecisionState>,
    static_formats: PerAttribute<FixedPointFormat>,
    windows: PerAttribute<QuantStats>,
    last_windows: PerAttribute<QuantStats>,
    iter: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, net: Network) -> Result<Self> {
        config.validate()?;
        let params = net.init_weights(&mut substream(config.seed_init, &[STREAM_INIT]));
        Self::with_params(config, net, params)
    }

    pub fn with_params(config: &RunConfig, net: Network, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let precision = match config.mode {
            RunMode::Dps => Some(PrecisionState::new(config.initial_formats(), config.controller())?),
            _ => None,
        };
        let sgd = Sgd::new(config.sgd(), net.param_shapes());
        Ok(Trainer {
            net,
            mode: config.mode,
            params,
            sgd,
            rounding: config.rounding,
            saturation_grad: config.saturation_grad,
            quant_seed: config.seed_quant,
            eval_quantized: config.eval_quantized,
            precision,
            static_formats: config.static_formats(),
            windows: PerAttribute::default(),
            last_windows: PerAttribute::default(),
            iter: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Full-precision master weights.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Formats the next iteration will use; `None` for the float baseline.
    pub fn formats(&self) -> Option<PerAttribute<FixedPointFormat>> {
        match self.mode {
            RunMode::FloatBaseline => None,
            RunMode::StaticFixed => Some(self.static_formats),
            RunMode::Dps => self.precision.map(|p| *p.formats()),
        }
    }

    /// Statistics windows of the most recent iteration.
    pub fn last_windows(&self) -> &PerAttribute<QuantStats> {
        &self.last_windows
    }

    /// One training iteration on a batch.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<MetricsRow> {
        let iter = self.iter;
        let formats = self.formats();
        let key = [0, iter as u64];
        let (grads, loss) = match formats {
            None => {
                let (_, cache) = nn::forward(&self.net, &self.params, images, &mut Identity)?;
                nn::backward(&self.net, &self.params, cache, labels, &mut Identity)?
            }
            Some(formats) => {
                let working = quantize_params(
                    &self.params,
                    formats.weights,
                    self.rounding,
                    self.quant_seed,
                    key,
                    &mut self.windows.weights,
                )?;
                let mut tap = QuantTap {
                    formats,
                    rounding: self.rounding,
                    seed: self.quant_seed,
                    key,
                    stats: &mut self.windows,
                    quantize_grads: true,
                    saturated: match self.saturation_grad {
                        SaturationGrad::Mask => Some(Vec::new()),
                        SaturationGrad::StraightThrough => None,
                    },
                };
                let (_, cache) = nn::forward(&self.net, &working, images, &mut tap)?;
                nn::backward(&self.net, &working, cache, labels, &mut tap)?
            }
        };
        let lr = nn::lr_at(iter, self.sgd.config());
        self.sgd.step(&mut self.params, &grads, iter)?;
        for (p, t) in self.params.iter().enumerate() {
            t.check_finite().map_err(|e| e.in_context(&format!("master weights[{p}]"), None))?;
        }

        let windows = self.windows.map(|_, s| match (s.overflow_rate(), s.avg_error_pct()) {
            (Ok(overflow_rate), Ok(avg_error)) => Some(WindowStats { overflow_rate, avg_error }),
            _ => None,
        });
        if let Some(state) = &mut self.precision {
            *state = state.update_all(&self.windows);
        }
        self.last_windows = std::mem::take(&mut self.windows);
        self.iter += 1;

        Ok(MetricsRow { iter, loss, test_error_pct: None, lr, formats, windows })
    }

    /// Test error of the current master weights. Quantized modes quantize
    /// inference with the current formats unless disabled in the config.
    pub fn evaluate(&self, test: &Dataset) -> Result<f64> {
        let quant = match (self.formats(), self.eval_quantized) {
            (Some(f), true) => Some((f, self.rounding, self.quant_seed)),
            _ => None,
        };
        evaluate(&self.net, &self.params, test, quant, self.iter as u64)
    }
}

/// Result of a run. A divergence ends the run early but is not an error: the
/// rows up to that point are kept.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_test_error: Option<f64>,
    pub divergence: Option<DivergenceSite>,
    pub mean_bits: Option<PerAttribute<f64>>,
    pub params: Vec<Tensor>,
    pub wall_time: Duration,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Loads the dataset named by `config` and runs the experiment.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (train, test) = Dataset::load_dir(&config.data_dir)?;
    run_on(config, &train, &test, &mut |_| {})
}

/// Runs the experiment on in-memory data, calling `observe` after each
/// iteration's row is complete.
pub fn run_on(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    observe: &mut dyn FnMut(&MetricsRow),
) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train = match config.train_limit {
        Some(n) => train.take(n),
        None => train.clone(),
    };
    let test = match config.test_limit {
        Some(n) => test.take(n),
        None => test.clone(),
    };
    if train.is_empty() && config.iterations > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let net = Network::new(&train.image_shape(), Network::lenet_specs())?;
    let mut trainer = Trainer::new(config, net)?;

    let mut rows = Vec::with_capacity(config.iterations);
    let mut divergence = None;
    let mut epoch = 0u64;
    let mut batches = batch_indices(train.len(), config.batch_size, config.seed_shuffle, epoch).into_iter();
    for iter in 0..config.iterations {
        let idx = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = batch_indices(train.len(), config.batch_size, config.seed_shuffle, epoch).into_iter();
                batches.next().expect("nonempty epoch")
            }
        };
        let (x, labels) = train.gather(&idx);
        let step = trainer.step(&x, &labels).and_then(|mut row| {
            if (iter + 1) % config.eval_interval == 0 || iter + 1 == config.iterations {
                row.test_error_pct = Some(trainer.evaluate(&test)?);
            }
            Ok(row)
        });
        match step {
            Ok(row) => {
                observe(&row);
                rows.push(row);
            }
            Err(Error::Divergence(mut site)) => {
                site.iteration.get_or_insert(iter);
                divergence = Some(site);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let final_test_error = match (divergence.is_some(), rows.last()) {
        (true, _) => None,
        (false, Some(last)) => last.test_error_pct,
        (false, None) => Some(trainer.evaluate(&test)?),
    };
    Ok(RunOutcome {
        mean_bits: mean_bitwidths(&rows),
        rows,
        final_test_error,
        divergence,
        params: trainer.params.clone(),
        wall_time: start.elapsed(),
    })
}
