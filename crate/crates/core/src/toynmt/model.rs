use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ToyModelConfig;
use super::data::Example;
use super::tape::{Mat, Tape, Var};
use crate::bcq::{dequantize, QuantizedTensor};
use crate::container::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::planner::{model_parameters, quantize_model, FrequencyTable, ModelDims, ParamSpec, PrecisionPlan};
use crate::tensor::DenseTensor;

pub const CONFIG_ATTRIBUTE: &str = "toy_config";

/// Dense f32 weights of the toy encoder-decoder, in canonical parameter
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<DenseTensor>,
    index: HashMap<String, usize>,
}

impl ToyModel {
    /// Random initialisation: weights `N(0, 1/in)`, embedding `N(0, 1/d)`,
    /// layer-norm gains one, biases zero.
    pub fn new(config: ToyModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, t) in model.specs.iter().zip(model.params.iter_mut()) {
            if spec.name.ends_with(".gain") {
                t.data.fill(1.0);
            } else if spec.group.is_some() {
                let std = (1.0 / spec.cols as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in t.data.iter_mut() {
                    *v = normal.sample(&mut rng) as f32;
                }
            }
        }
        Ok(model)
    }

    /// Every parameter zero, layer-norm gains included.
    pub fn zeros(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = model_parameters(&config.dims());
        let params = specs.iter().map(|s| DenseTensor::zeros(s.name.clone(), s.rows, s.cols)).collect();
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { config, specs, params, index })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.config.dims()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[DenseTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&DenseTensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub(crate) fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    /// f64 copy of every parameter, the form the tape differentiates.
    pub fn snapshot(&self) -> Vec<Mat> {
        self.params.iter().map(|t| Mat::from_f32(t.rows, t.cols, &t.data)).collect()
    }

    pub fn check_tokens(&self, src: &[usize], tgt: &[usize]) -> Result<()> {
        let c = &self.config;
        for (side, ids) in [("source", src), ("target", tgt)] {
            if ids.is_empty() || ids.len() > c.max_len {
                return Err(Error::InvalidInput(format!(
                    "{side} length {} outside 1..={}",
                    ids.len(),
                    c.max_len
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab) {
                return Err(Error::InvalidInput(format!("{side} token {bad} outside vocabulary of {}", c.vocab)));
            }
        }
        Ok(())
    }

    fn embed(&self, t: &mut Tape, ids: &[usize]) -> Var {
        let e = t.param(self.idx("embedding"));
        let x = t.gather(e, ids);
        let x = t.scale(x, (self.config.d_model as f64).sqrt());
        let pe = t.constant(sinusoid(ids.len(), self.config.d_model));
        t.add(x, pe)
    }

    fn ln(&self, t: &mut Tape, x: Var, prefix: &str) -> Var {
        let g = t.param(self.idx(&format!("{prefix}.gain")));
        let b = t.param(self.idx(&format!("{prefix}.bias")));
        t.layer_norm(x, g, b)
    }

    fn linear(&self, t: &mut Tape, x: Var, prefix: &str) -> Var {
        let w = t.param(self.idx(&format!("{prefix}.weight")));
        let b = t.param(self.idx(&format!("{prefix}.bias")));
        t.linear(x, w, b)
    }

    fn attention(&self, t: &mut Tape, x: Var, mem: Var, prefix: &str, causal: bool) -> Var {
        let q = self.linear(t, x, &format!("{prefix}.q"));
        let k = self.linear(t, mem, &format!("{prefix}.k"));
        let v = self.linear(t, mem, &format!("{prefix}.v"));
        let dh = self.config.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let qh = t.slice_cols(q, h * dh, dh);
                let kh = t.slice_cols(k, h * dh, dh);
                let vh = t.slice_cols(v, h * dh, dh);
                let s = t.matmul_t(qh, kh);
                let s = t.scale(s, inv);
                let p = t.softmax(s, causal);
                t.matmul(p, vh)
            })
            .collect();
        let cat = t.concat_cols(&heads);
        self.linear(t, cat, &format!("{prefix}.o"))
    }

    fn ffn(&self, t: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.linear(t, x, &format!("{prefix}.w1"));
        let h = t.relu(h);
        self.linear(t, h, &format!("{prefix}.w2"))
    }

    /// Teacher-forced logits `[tgt_in.len(), vocab]` built on `t`.
    pub fn tape_logits(&self, t: &mut Tape, src: &[usize], tgt_in: &[usize]) -> Var {
        let mut x = self.embed(t, src);
        for l in 0..self.config.n_layers_enc {
            let h = self.ln(t, x, &format!("enc.{l}.ln1"));
            let a = self.attention(t, h, h, &format!("enc.{l}.self_attn"), false);
            x = t.add(x, a);
            let h = self.ln(t, x, &format!("enc.{l}.ln2"));
            let f = self.ffn(t, h, &format!("enc.{l}.ffn"));
            x = t.add(x, f);
        }
        let mem = self.ln(t, x, "enc.final_ln");

        let mut y = self.embed(t, tgt_in);
        for l in 0..self.config.n_layers_dec {
            let h = self.ln(t, y, &format!("dec.{l}.ln1"));
            let a = self.attention(t, h, h, &format!("dec.{l}.self_attn"), true);
            y = t.add(y, a);
            let h = self.ln(t, y, &format!("dec.{l}.ln2"));
            let c = self.attention(t, h, mem, &format!("dec.{l}.cross_attn"), false);
            y = t.add(y, c);
            let h = self.ln(t, y, &format!("dec.{l}.ln3"));
            let f = self.ffn(t, h, &format!("dec.{l}.ffn"));
            y = t.add(y, f);
        }
        let h = self.ln(t, y, "dec.final_ln");
        let e = t.param(self.idx("embedding"));
        t.matmul_t(h, e)
    }

    /// Mean token cross-entropy of one example against `snapshot`.
    pub fn example_loss(&self, snapshot: &[Mat], ex: &Example) -> Result<f64> {
        self.check_tokens(&ex.src, &ex.tgt_in)?;
        let mut t = Tape::new(snapshot);
        let logits = self.tape_logits(&mut t, &ex.src, &ex.tgt_in);
        let loss = t.cross_entropy(logits, &ex.tgt_out);
        Ok(t.value(loss).data[0])
    }

    /// Loss and per-parameter gradients of one example.
    pub fn loss_and_grads(&self, snapshot: &[Mat], ex: &Example) -> Result<(f64, Vec<Option<Mat>>)> {
        self.check_tokens(&ex.src, &ex.tgt_in)?;
        let mut t = Tape::new(snapshot);
        let logits = self.tape_logits(&mut t, &ex.src, &ex.tgt_in);
        let loss = t.cross_entropy(logits, &ex.tgt_out);
        Ok((t.value(loss).data[0], t.backward(loss)))
    }

    /// Token-weighted mean cross-entropy over `examples`.
    pub fn eval_loss(&self, examples: &[Example]) -> Result<f64> {
        let snap = self.snapshot();
        let mut total = 0.0;
        let mut tokens = 0usize;
        for ex in examples {
            total += self.example_loss(&snap, ex)? * ex.tgt_out.len() as f64;
            tokens += ex.tgt_out.len();
        }
        if tokens == 0 {
            return Err(Error::InvalidInput("empty evaluation set".into()));
        }
        Ok(total / tokens as f64)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().cloned().map(Tensor::Dense).collect()
    }

    /// Quantizes the planned weights and writes their reconstruction back in
    /// place. Returns the quantized tensors that were applied.
    pub fn project(&mut self, plan: &PrecisionPlan, freq: Option<&FrequencyTable>) -> Result<Vec<QuantizedTensor>> {
        self.check_plan(plan)?;
        let mut applied = Vec::new();
        for t in quantize_model(&self.tensors(), plan, freq)? {
            if let Tensor::Quantized(q) = t {
                let i = self.idx(&q.name);
                self.params[i] = dequantize(&q);
                applied.push(q);
            }
        }
        Ok(applied)
    }

    pub fn check_plan(&self, plan: &PrecisionPlan) -> Result<()> {
        if plan.model != self.dims() {
            return Err(Error::ShapeMismatch(format!(
                "plan is for {:?}, model is {:?}",
                plan.model,
                self.dims()
            )));
        }
        Ok(())
    }

    /// Checkpoint with `quantized` replacing the dense tensors of the same
    /// name; the config is stored as an attribute.
    pub fn to_checkpoint(&self, quantized: &[QuantizedTensor]) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .map(|p| match quantized.iter().find(|q| q.name == p.name) {
                Some(q) => Tensor::Quantized(q.clone()),
                None => Tensor::Dense(p.clone()),
            })
            .collect();
        let mut ck = Checkpoint::new(tensors);
        ck.attributes
            .insert(CONFIG_ATTRIBUTE.into(), serde_json::to_string(&self.config).expect("config serializes"));
        ck
    }

    /// Rebuilds a model; quantized tensors are dequantized.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ToyModelConfig = match ck.attributes.get(CONFIG_ATTRIBUTE) {
            Some(text) => serde_json::from_str(text)?,
            None => return Err(Error::Metadata(format!("checkpoint has no {CONFIG_ATTRIBUTE} attribute"))),
        };
        let mut model = Self::zeros(config)?;
        for i in 0..model.specs.len() {
            let spec = &model.specs[i];
            let t = ck
                .get(&spec.name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint is missing {}", spec.name)))?;
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::ShapeMismatch(format!("{}: {:?}", spec.name, t.shape())));
            }
            model.params[i] = match t {
                Tensor::Dense(d) => d.clone(),
                Tensor::Quantized(q) => dequantize(q),
            };
        }
        Ok(model)
    }
}

/// Sinusoidal position encodings `[len, d]`.
pub fn sinusoid(len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(len, d);
    for pos in 0..len {
        let row = m.row_mut(pos);
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}
