//! Ellipse-world data generation and the exact counterfactual oracle.
//!
//! A sample is a point `x` on an axis-aligned ellipse: `u` holds the
//! semi-axis parameters, `pa` is the angle selecting the point, and `z` is a
//! shared confounder. Three graph variants are supported:
//!
//! - `Markovian`: `pa` is randomised uniformly, so `U ⫫ PA`,
//! - `Backdoor`: `pa` and `u` are confounded through `z`,
//! - `Frontdoor`: `pa` acts on `x` only through a unit-circle mediator `m`,
//!   with nonlinear confounding `pa ← z → u → x`.
//!
//! Because every mechanism is invertible in closed form, the module doubles
//! as the ground-truth oracle that counterfactual estimates are scored
//! against.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

/// Causal graph variant of the data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphVariant {
    Markovian,
    Backdoor,
    Frontdoor,
}

impl GraphVariant {
    pub fn label(self) -> &'static str {
        match self {
            GraphVariant::Markovian => "markovian",
            GraphVariant::Backdoor => "backdoor",
            GraphVariant::Frontdoor => "frontdoor",
        }
    }
}

/// Shape of the exogenous noise distribution feeding `U`.
///
/// The bimodal/multimodal variants add a random location shift inside `U0`'s
/// mechanism (after the exp term, before the additive uniform noise); the
/// graph structure is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorVariant {
    Original,
    Bimodal,
    Multimodal,
}

impl PriorVariant {
    pub fn label(self) -> &'static str {
        match self {
            PriorVariant::Original => "original",
            PriorVariant::Bimodal => "bimodal",
            PriorVariant::Multimodal => "multimodal",
        }
    }

    fn draw_shift<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            PriorVariant::Original => 0.0,
            PriorVariant::Bimodal => {
                if rng.random::<f64>() < 0.5 {
                    -2.0
                } else {
                    2.0
                }
            }
            PriorVariant::Multimodal => {
                // Shifts {-4, -2, 2, 4} with probabilities (0.3, 0.2, 0.2, 0.3).
                let p = rng.random::<f64>();
                if p < 0.3 {
                    -4.0
                } else if p < 0.5 {
                    -2.0
                } else if p < 0.7 {
                    2.0
                } else {
                    4.0
                }
            }
        }
    }
}

/// Configuration of one dataset draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub graph_variant: GraphVariant,
    pub prior_variant: PriorVariant,
    pub n_samples: usize,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(
        graph_variant: GraphVariant,
        prior_variant: PriorVariant,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("dgp.n_samples must be > 0".into()));
        }
        Ok(Self {
            graph_variant,
            prior_variant,
            n_samples,
            seed,
        })
    }
}

/// Raw noise draws behind one sample, kept so the generative recurrence can
/// be replayed bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraws {
    pub eps_z: f64,
    /// Standard normal for the confounded variants, uniform in [0,1) for the
    /// randomised (Markovian) parent mechanism.
    pub eps_pa: f64,
    pub eps_u0: f64,
    pub eps_u1: f64,
    pub eps_m: Option<[f64; 2]>,
    /// Location shift selected by the prior variant (0 for `Original`).
    pub shift: f64,
}

/// One generated observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub z: f64,
    pub pa: f64,
    pub u: [f64; 2],
    /// Unit-circle mediator, present only for the frontdoor variant.
    pub m: Option<[f64; 2]>,
    pub x: [f64; 2],
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Samples plus split tags. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    /// Present for generated datasets; absent after a CSV round trip.
    pub noise: Vec<NoiseDraws>,
    pub config: DgpConfig,
}

impl Dataset {
    pub fn rows(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(sample, _)| sample)
    }

    pub fn split_vec(&self, split: Split) -> Vec<Sample> {
        self.rows(split).copied().collect()
    }
}

// Mechanism constants from the generative recurrences.
const PA_SLOPE: f64 = 1.44254843;
const PA_OFFSET: f64 = 0.59701923;
const U0_SLOPE: f64 = 1.64985274;
const U0_OFFSET: f64 = 0.2656131;
const U1_SLOPE: f64 = 1.61323358;
const U1_OFFSET: f64 = -0.18070237;
const MEDIATOR_NOISE_STD: f64 = 0.1; // variance 0.01

fn mech_pa_confounded(z: f64, eps_pa: f64) -> f64 {
    (PA_SLOPE * z + PA_OFFSET + eps_pa).rem_euclid(TAU)
}

/// `U` mechanism shared by the markovian and backdoor variants; the
/// frontdoor variant squares `z` inside the exponentials.
fn mech_u(z_feature: f64, eps_u0: f64, eps_u1: f64, shift: f64) -> [f64; 2] {
    let u0 = (U0_SLOPE * z_feature + U0_OFFSET).exp() + shift + eps_u0;
    let u1 = u0 * (1.0 + eps_u1 * (U1_SLOPE * z_feature + U1_OFFSET).exp());
    [u0, u1]
}

fn mech_m(pa: f64, eps_m: [f64; 2]) -> [f64; 2] {
    let raw = [pa.sin() + eps_m[0], pa.cos() + eps_m[1]];
    let beta = 1.0 / (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
    [beta * raw[0], beta * raw[1]]
}

fn mech_x(u: [f64; 2], drive: [f64; 2]) -> [f64; 2] {
    [u[0] * (2.0 + drive[0]), u[1] * (2.0 + drive[1])]
}

fn exp_draw<R: Rng>(rng: &mut R) -> f64 {
    // Exponential(1) via inverse CDF.
    -(1.0 - rng.random::<f64>()).ln()
}

/// Replays the generative recurrence for one sample from recorded noise.
pub fn regenerate(config: &DgpConfig, noise: &NoiseDraws) -> Sample {
    let z = noise.eps_z;
    let pa = match config.graph_variant {
        GraphVariant::Markovian => noise.eps_pa * TAU,
        GraphVariant::Backdoor | GraphVariant::Frontdoor => mech_pa_confounded(z, noise.eps_pa),
    };
    match config.graph_variant {
        GraphVariant::Markovian | GraphVariant::Backdoor => {
            let u = mech_u(z, noise.eps_u0, noise.eps_u1, noise.shift);
            let x = mech_x(u, [pa.sin(), pa.cos()]);
            Sample {
                z,
                pa,
                u,
                m: None,
                x,
            }
        }
        GraphVariant::Frontdoor => {
            let m = mech_m(pa, noise.eps_m.expect("frontdoor noise has mediator draws"));
            let u = mech_u(z * z, noise.eps_u0, noise.eps_u1, noise.shift);
            let x = mech_x(u, m);
            Sample {
                z,
                pa,
                u,
                m: Some(m),
                x,
            }
        }
    }
}

fn draw_noise<R: Rng>(config: &DgpConfig, rng: &mut R) -> NoiseDraws {
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let eps_z = rng.random::<f64>() - 0.5;
    let eps_pa = match config.graph_variant {
        GraphVariant::Markovian => rng.random::<f64>(),
        GraphVariant::Backdoor | GraphVariant::Frontdoor => std_normal.sample(rng),
    };
    let eps_m = match config.graph_variant {
        GraphVariant::Frontdoor => {
            let m_noise = Normal::new(0.0, MEDIATOR_NOISE_STD).expect("valid normal");
            Some([m_noise.sample(rng), m_noise.sample(rng)])
        }
        _ => None,
    };
    let shift = config.prior_variant.draw_shift(rng);
    let eps_u0 = rng.random::<f64>(); // Beta(1,1) == Uniform(0,1)
    let eps_u1 = exp_draw(rng);
    NoiseDraws {
        eps_z,
        eps_pa,
        eps_u0,
        eps_u1,
        eps_m,
        shift,
    }
}

fn split_counts(n: usize) -> (usize, usize, usize) {
    let n_train = (0.70 * n as f64).round() as usize;
    let n_val = (0.10 * n as f64).round() as usize;
    let n_test = n - n_train - n_val;
    (n_train, n_val, n_test)
}

/// Draws a dataset of `config.n_samples` rows. Each row consumes its own
/// counter-based substream, so the result is independent of evaluation
/// order. Split tags are 70/10/20 train/val/test.
pub fn gen_dataset(config: &DgpConfig) -> Dataset {
    let n = config.n_samples;
    let mut samples = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(config.seed, Domain::DataGen, i as u64);
        let draws = draw_noise(config, &mut rng);
        samples.push(regenerate(config, &draws));
        noise.push(draws);
    }
    let (n_train, n_val, _) = split_counts(n);
    let splits = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    Dataset {
        samples,
        splits,
        noise,
        config: config.clone(),
    }
}

/// Exact noise abduction `u = f⁻¹(pa, x)` for the angle-driven mechanism.
pub fn true_abduct(pa: f64, x: [f64; 2]) -> [f64; 2] {
    [x[0] / (2.0 + pa.sin()), x[1] / (2.0 + pa.cos())]
}

/// Exact noise abduction from the mediator, `u = (x0/(2+m0), x1/(2+m1))`.
pub fn true_abduct_m(m: [f64; 2], x: [f64; 2]) -> [f64; 2] {
    [x[0] / (2.0 + m[0]), x[1] / (2.0 + m[1])]
}

/// Ground-truth counterfactual `x* = f(pa*, f⁻¹(pa, x))`.
pub fn true_counterfactual(pa: f64, x: [f64; 2], pa_star: f64) -> [f64; 2] {
    let u = true_abduct(pa, x);
    mech_x(u, [pa_star.sin(), pa_star.cos()])
}

/// Frontdoor ground truth: abduct `u` through the observed mediator, then
/// re-apply the mechanism at the noise-free mediator position for `pa*`.
pub fn true_counterfactual_frontdoor(m: [f64; 2], x: [f64; 2], pa_star: f64) -> [f64; 2] {
    let u = true_abduct_m(m, x);
    mech_x(u, [pa_star.sin(), pa_star.cos()])
}

/// Ground-truth counterfactuals of `(pa, x)` at `k` target angles uniformly
/// spaced on `[0, 2π)`.
pub fn ellipse_points(pa: f64, x: [f64; 2], k: usize) -> Vec<[f64; 2]> {
    assert!(k >= 1, "ellipse_points requires k >= 1");
    (0..k)
        .map(|j| true_counterfactual(pa, x, j as f64 * TAU / k as f64))
        .collect()
}

/// Uniform grid of `k` target angles on `[0, 2π)`, matching [`ellipse_points`].
pub fn angle_grid(k: usize) -> Vec<f64> {
    (0..k).map(|j| j as f64 * TAU / k as f64).collect()
}

/// Online conditional sampling used by the Markovian batch-OT coupling.
/// Every call consumes draws from `rng` only; the fixed conditioning values
/// are never re-sampled.
pub struct DgpSampler<'a> {
    pub config: &'a DgpConfig,
}

impl<'a> DgpSampler<'a> {
    pub fn new(config: &'a DgpConfig) -> Self {
        Self { config }
    }

    /// Draws the per-batch conditioning values: the model parents plus any
    /// extra values that must stay fixed within the batch.
    pub fn draw_parents<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self.config.graph_variant {
            GraphVariant::Markovian => vec![rng.random::<f64>() * TAU],
            GraphVariant::Backdoor => {
                let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
                let z = rng.random::<f64>() - 0.5;
                let pa = mech_pa_confounded(z, std_normal.sample(rng));
                vec![pa, z]
            }
            GraphVariant::Frontdoor => {
                // Parent draw for the mediator flow: pa from its marginal.
                let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
                let z = rng.random::<f64>() - 0.5;
                vec![mech_pa_confounded(z, std_normal.sample(rng))]
            }
        }
    }

    /// Samples `x | parents` at the fixed conditioning vector returned by
    /// [`Self::draw_parents`].
    pub fn sample_conditional<R: Rng>(&self, parents: &[f64], rng: &mut R) -> [f64; 2] {
        match self.config.graph_variant {
            GraphVariant::Markovian => {
                let pa = parents[0];
                let z = rng.random::<f64>() - 0.5;
                let shift = self.config.prior_variant.draw_shift(rng);
                let u = mech_u(z, rng.random::<f64>(), exp_draw(rng), shift);
                mech_x(u, [pa.sin(), pa.cos()])
            }
            GraphVariant::Backdoor => {
                let (pa, z) = (parents[0], parents[1]);
                let shift = self.config.prior_variant.draw_shift(rng);
                let u = mech_u(z, rng.random::<f64>(), exp_draw(rng), shift);
                mech_x(u, [pa.sin(), pa.cos()])
            }
            GraphVariant::Frontdoor => {
                // Mediator flow target: m | pa.
                let pa = parents[0];
                let m_noise = Normal::new(0.0, MEDIATOR_NOISE_STD).expect("valid normal");
                mech_m(pa, [m_noise.sample(rng), m_noise.sample(rng)])
            }
        }
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset as CSV: `z,pa,u0,u1,m0,m1,x0,x1,split`, mediator
/// columns empty for non-frontdoor variants, floats at 17 significant
/// digits.
pub fn write_csv<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    writeln!(out, "z,pa,u0,u1,m0,m1,x0,x1,split")?;
    for (sample, split) in dataset.samples.iter().zip(&dataset.splits) {
        let (m0, m1) = match sample.m {
            Some(m) => (fmt_float(m[0]), fmt_float(m[1])),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt_float(sample.z),
            fmt_float(sample.pa),
            fmt_float(sample.u[0]),
            fmt_float(sample.u[1]),
            m0,
            m1,
            fmt_float(sample.x[0]),
            fmt_float(sample.x[1]),
            split,
        )?;
    }
    Ok(())
}

pub fn write_csv_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(dataset, &mut file)
}

/// Reads rows written by [`write_csv`]. Noise draws are not part of the
/// format, so the returned pairs carry observations and split tags only.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<(Sample, Split)>> {
    let reader = BufReader::new(input);
    let mut rows = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line_no == 0 {
            if line.trim() != "z,pa,u0,u1,m0,m1,x0,x1,split" {
                return Err(Error::Config(format!("unexpected CSV header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!(
                "line {}: expected 9 fields, got {}",
                line_no + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("line {}: bad float {s:?}: {e}", line_no + 1)))
        };
        let m = if fields[4].is_empty() && fields[5].is_empty() {
            None
        } else {
            Some([num(fields[4])?, num(fields[5])?])
        };
        let split = match fields[8].trim() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split tag {other:?}"))),
        };
        rows.push((
            Sample {
                z: num(fields[0])?,
                pa: num(fields[1])?,
                u: [num(fields[2])?, num(fields[3])?],
                m,
                x: [num(fields[6])?, num(fields[7])?],
            },
            split,
        ));
    }
    Ok(rows)
}
