//! A small trainable noise predictor.
//!
//! Input is `[x, time features, condition embedding]`; hidden layers use SiLU
//! and the output layer is linear. All parameters live in one flat vector in
//! checkpoint order: the condition-embedding table, then `(W, b)` for each
//! dense layer with `W` row-major `[out][in]`.

mod adam;
mod data;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::error::{check_dim, Error, Result};
use crate::predictor::{Condition, NoisePredictor};
use crate::rng;
use crate::schedule::NoiseSchedule;

pub use adam::{Adam, AdamConfig};
pub use data::{Dataset, Shape, ShapesDataset, IMAGE_PIXELS, IMAGE_SIDE};
pub use train::{eps_matching_loss, train, Example, TrainConfig, TrainLog};

pub const TIME_FEATURES: usize = 16;
const MAGIC: &[u8; 8] = b"LEDMLP\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub data_dim: usize,
    /// Conditions excluding the unconditional slot.
    pub num_conditions: usize,
    pub cond_width: usize,
    pub hidden: Vec<usize>,
}

impl MlpArch {
    pub fn new(data_dim: usize, num_conditions: usize) -> Self {
        Self {
            data_dim,
            num_conditions,
            cond_width: 8,
            hidden: vec![128, 128],
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    fn input_width(&self) -> usize {
        self.data_dim + TIME_FEATURES + self.cond_width
    }

    /// Dense layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.data_dim);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::param("layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

/// Sinusoidal features of `t / T`.
pub fn time_features(t: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let tau = t as f64 / steps as f64;
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..TIME_FEATURES / 2 {
        let freq = std::f64::consts::FRAC_PI_2 * (1u64 << i) as f64;
        out[2 * i] = (freq * tau).sin();
        out[2 * i + 1] = (freq * tau).cos();
    }
    out
}

fn silu(a: f64) -> f64 {
    a / (1.0 + (-a).exp())
}

fn silu_grad(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a).exp());
    s * (1.0 + a * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: MlpArch,
    params: Vec<f64>,
    layers: Vec<Dense>,
    schedule: NoiseSchedule,
}

/// Activations kept for backprop.
struct Tape {
    cond_id: usize,
    // Input to each dense layer.
    inputs: Vec<Vec<f64>>,
    // Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpDenoiser {
    /// Zero-initialised model bound to the diffusion schedule it denoises.
    pub fn zeros(arch: MlpArch, schedule: &NoiseSchedule) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let mut offset = (arch.num_conditions + 1) * arch.cond_width;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            layers.push(Dense {
                w: offset,
                b: offset + n_in * n_out,
                n_in,
                n_out,
            });
            offset += n_in * n_out + n_out;
        }
        Ok(Self {
            arch,
            params: vec![0.0; offset],
            layers,
            schedule: schedule.clone(),
        })
    }

    /// Seeded random init: weights `N(0, 1/fan_in)`, zero biases, embedding
    /// rows `N(0, 1)`.
    pub fn init(arch: MlpArch, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, schedule)?;
        let mut r = rng::seeded(seed);
        let table = model.embedding_len();
        let e = rng::standard_normal(&mut r, table);
        model.params[..table].copy_from_slice(&e);
        for layer in model.layers.clone() {
            let scale = 1.0 / (layer.n_in as f64).sqrt();
            let w = rng::standard_normal(&mut r, layer.n_in * layer.n_out);
            for (p, v) in model.params[layer.w..layer.b].iter_mut().zip(w) {
                *p = scale * v;
            }
        }
        Ok(model)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn embedding_len(&self) -> usize {
        (self.arch.num_conditions + 1) * self.arch.cond_width
    }

    pub fn unconditional_id(&self) -> usize {
        self.arch.num_conditions
    }

    /// Maps a condition to its embedding row. Only single-class subsets and
    /// the unconditional slot exist.
    pub fn condition_id(&self, condition: &Condition) -> Result<usize> {
        match condition {
            Condition::Unconditional => Ok(self.unconditional_id()),
            Condition::Subset(idx) if idx.len() == 1 && idx[0] < self.arch.num_conditions => {
                Ok(idx[0])
            }
            other => Err(Error::UnknownCondition(format!(
                "{other} (model knows {} single-class conditions)",
                self.arch.num_conditions
            ))),
        }
    }

    fn run(&self, x: &[f64], t: usize, cond_id: usize) -> Result<Tape> {
        check_dim(self.arch.data_dim, x.len())?;
        if cond_id > self.arch.num_conditions {
            return Err(Error::UnknownCondition(format!("condition id {cond_id}")));
        }
        let cw = self.arch.cond_width;
        let mut input = Vec::with_capacity(self.arch.input_width());
        input.extend_from_slice(x);
        input.extend_from_slice(&time_features(t, self.schedule.steps()));
        input.extend_from_slice(&self.params[cond_id * cw..(cond_id + 1) * cw]);

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.w..layer.b];
            let b = &self.params[layer.b..layer.b + layer.n_out];
            let a: Vec<f64> = (0..layer.n_out)
                .map(|o| {
                    let row = &w[o * layer.n_in..(o + 1) * layer.n_in];
                    b[o] + row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>()
                })
                .collect();
            inputs.push(h);
            if li + 1 == self.layers.len() {
                h = a;
            } else {
                h = a.iter().map(|&v| silu(v)).collect();
                pre.push(a);
            }
        }
        Ok(Tape {
            cond_id,
            inputs,
            pre,
            output: h,
        })
    }

    pub fn forward(&self, x: &[f64], t: usize, cond_id: usize) -> Result<Vec<f64>> {
        Ok(self.run(x, t, cond_id)?.output)
    }

    /// Accumulates `d_output`-weighted parameter gradients into `grads`.
    fn backward(&self, tape: &Tape, d_output: &[f64], grads: &mut [f64]) {
        let mut g = d_output.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let input = &tape.inputs[li];
            for o in 0..layer.n_out {
                let go = g[o];
                grads[layer.b + o] += go;
                if go != 0.0 {
                    let row = &mut grads[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += go * x;
                    }
                }
            }
            let w = &self.params[layer.w..layer.b];
            let mut g_in = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                for (gi, wi) in g_in
                    .iter_mut()
                    .zip(&w[o * layer.n_in..(o + 1) * layer.n_in])
                {
                    *gi += go * wi;
                }
            }
            if li > 0 {
                for (gi, &a) in g_in.iter_mut().zip(&tape.pre[li - 1]) {
                    *gi *= silu_grad(a);
                }
                g = g_in;
            } else {
                let cw = self.arch.cond_width;
                let start = self.arch.data_dim + TIME_FEATURES;
                let row = tape.cond_id * cw;
                for k in 0..cw {
                    grads[row + k] += g_in[start + k];
                }
            }
        }
    }

    /// Epsilon-matching MSE over `batch` and its gradient in parameter order.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::param("batch must be nonempty"));
        }
        let d = self.arch.data_dim;
        let norm = 1.0 / (batch.len() * d) as f64;
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for ex in batch {
            check_dim(d, ex.x0.len())?;
            check_dim(d, ex.eps.len())?;
            let x_t = ex.noised(&self.schedule)?;
            let tape = self.run(&x_t, ex.t, ex.cond_id)?;
            let resid: Vec<f64> = tape
                .output
                .iter()
                .zip(&ex.eps)
                .map(|(p, e)| p - e)
                .collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>();
            let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * norm * r).collect();
            self.backward(&tape, &d_out, &mut grads);
        }
        Ok((loss * norm, grads))
    }

    /// Checks that a run uses the betas the model was trained with.
    pub fn check_compatible(&self, schedule: &NoiseSchedule) -> Result<()> {
        let (a, b) = (self.schedule.params(), schedule.params());
        if a.steps != b.steps || a.beta_start != b.beta_start || a.beta_end != b.beta_end {
            return Err(Error::Compatibility(format!(
                "model trained with T={} betas [{}, {}], run uses T={} betas [{}, {}]",
                a.steps, a.beta_start, a.beta_end, b.steps, b.beta_start, b.beta_end
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = BinWriter::new(w, MAGIC, VERSION)?;
        out.u64(self.arch.data_dim as u64)?;
        out.u64(self.arch.num_conditions as u64)?;
        out.u64(self.arch.cond_width as u64)?;
        out.u64(TIME_FEATURES as u64)?;
        out.u64(self.arch.hidden.len() as u64)?;
        for &h in &self.arch.hidden {
            out.u64(h as u64)?;
        }
        let sp = self.schedule.params();
        out.u64(sp.steps as u64)?;
        out.f64s(&[sp.beta_start, sp.beta_end])?;
        out.f64s(&self.params)?;
        out.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (mut inp, version) = BinReader::new(r, MAGIC)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        const LIMIT: usize = 1 << 16;
        let data_dim = inp.usize(LIMIT)?;
        let num_conditions = inp.usize(LIMIT)?;
        let cond_width = inp.usize(LIMIT)?;
        let time = inp.usize(LIMIT)?;
        if time != TIME_FEATURES {
            return Err(Error::Format(format!(
                "checkpoint has {time} time features, expected {TIME_FEATURES}"
            )));
        }
        let depth = inp.usize(64)?;
        let hidden = (0..depth)
            .map(|_| inp.usize(LIMIT))
            .collect::<Result<Vec<_>>>()?;
        let steps = inp.usize(1 << 20)?;
        let betas = inp.f64s(2)?;
        let schedule = NoiseSchedule::new(steps, betas[0], betas[1], 1.0)
            .map_err(|e| Error::Format(format!("checkpoint schedule: {e}")))?;
        let arch = MlpArch {
            data_dim,
            num_conditions,
            cond_width,
            hidden,
        };
        let mut model = Self::zeros(arch, &schedule).map_err(|e| Error::Format(e.to_string()))?;
        let params = inp.f64s(model.params.len())?;
        inp.finish()?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

impl NoisePredictor for MlpDenoiser {
    fn dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x: &[f64], t: usize, condition: &Condition) -> Result<Vec<f64>> {
        self.forward(x, t, self.condition_id(condition)?)
    }

    fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.check_compatible(schedule)
    }
}
