//! f32 inference over dense or packed weights.

use std::collections::HashMap;

use super::config::ToyModelConfig;
use super::data::{BOS, EOS};
use super::model::{sinusoid, ToyModel, CONFIG_ATTRIBUTE};
use crate::bcq::QuantizedTensor;
use crate::container::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::kernel::{gemv_direct, gemv_lut};
use crate::planner::{quantize_model, FrequencyTable, PrecisionPlan};
use crate::tensor::DenseTensor;

/// Which quantized product to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Direct,
    Lut { mu: usize },
}

#[derive(Clone, Debug)]
pub enum Linear {
    Dense(DenseTensor),
    Quantized { t: QuantizedTensor, stored_of: Vec<usize> },
}

impl Linear {
    fn from_tensor(t: Tensor) -> Self {
        match t {
            Tensor::Dense(d) => Linear::Dense(d),
            Tensor::Quantized(q) => {
                let mut stored_of = vec![0; q.rows];
                for k in 0..q.rows {
                    stored_of[q.logical_row(k)] = k;
                }
                Linear::Quantized { t: q, stored_of }
            }
        }
    }

    fn apply(&self, x: &[f32], kernel: Kernel) -> Result<Vec<f32>> {
        match (self, kernel) {
            (Linear::Dense(w), _) => w.matvec(x),
            (Linear::Quantized { t, .. }, Kernel::Direct) => gemv_direct(t, x),
            (Linear::Quantized { t, .. }, Kernel::Lut { mu }) => gemv_lut(t, x, mu),
        }
    }

    fn row(&self, r: usize) -> Vec<f32> {
        match self {
            Linear::Dense(w) => w.row(r).to_vec(),
            Linear::Quantized { t, stored_of } => t.stored_row(stored_of[r]).reconstruct(),
        }
    }

    fn vector(&self) -> &[f32] {
        match self {
            Linear::Dense(w) => &w.data,
            Linear::Quantized { .. } => unreachable!("biases and norms are never quantized"),
        }
    }
}

/// Read-only inference model; safe to share across evaluation threads.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    config: ToyModelConfig,
    weights: HashMap<String, Linear>,
    pub kernel: Kernel,
}

impl InferenceModel {
    pub fn from_tensors(config: ToyModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = crate::planner::model_parameters(&config.dims());
        let mut by_name: HashMap<String, Tensor> = tensors.into_iter().map(|t| (t.name().to_string(), t)).collect();
        let mut weights = HashMap::new();
        for s in specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::InvalidInput(format!("missing tensor {}", s.name)))?;
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::ShapeMismatch(format!("{}: {:?}", s.name, t.shape())));
            }
            if s.group.is_none() && t.as_quantized().is_some() {
                return Err(Error::InvalidInput(format!("{} must stay dense", s.name)));
            }
            weights.insert(s.name, Linear::from_tensor(t));
        }
        Ok(Self { config, weights, kernel: Kernel::Direct })
    }

    /// Quantizes `model` per `plan` (dense when `None`).
    pub fn new(model: &ToyModel, plan: Option<&PrecisionPlan>, freq: Option<&FrequencyTable>) -> Result<Self> {
        let tensors = match plan {
            Some(p) => {
                model.check_plan(p)?;
                quantize_model(&model.tensors(), p, freq)?
            }
            None => model.tensors(),
        };
        Self::from_tensors(*model.config(), tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .attributes
            .get(CONFIG_ATTRIBUTE)
            .ok_or_else(|| Error::Metadata(format!("checkpoint has no {CONFIG_ATTRIBUTE} attribute")))?;
        let config: ToyModelConfig = serde_json::from_str(text)?;
        Self::from_tensors(config, ck.tensors.clone())
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    fn w(&self, name: &str) -> &Linear {
        &self.weights[name]
    }

    fn linear(&self, xs: &[Vec<f32>], prefix: &str) -> Result<Vec<Vec<f32>>> {
        let w = self.w(&format!("{prefix}.weight"));
        let b = self.w(&format!("{prefix}.bias")).vector();
        xs.iter()
            .map(|x| {
                let mut y = w.apply(x, self.kernel)?;
                for (o, bv) in y.iter_mut().zip(b) {
                    *o += bv;
                }
                Ok(y)
            })
            .collect()
    }

    fn ln(&self, xs: &[Vec<f32>], prefix: &str) -> Vec<Vec<f32>> {
        let g = self.w(&format!("{prefix}.gain")).vector();
        let b = self.w(&format!("{prefix}.bias")).vector();
        xs.iter()
            .map(|x| {
                let n = x.len() as f64;
                let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + super::tape::LN_EPS).sqrt();
                x.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| gi * ((v as f64 - mean) * inv) as f32 + bi)
                    .collect()
            })
            .collect()
    }

    fn attention(&self, xs: &[Vec<f32>], mem: &[Vec<f32>], prefix: &str, causal: bool) -> Result<Vec<Vec<f32>>> {
        let q = self.linear(xs, &format!("{prefix}.q"))?;
        let k = self.linear(mem, &format!("{prefix}.k"))?;
        let v = self.linear(mem, &format!("{prefix}.v"))?;
        let dh = self.config.head_dim();
        let inv = 1.0 / (dh as f32).sqrt();
        let mut out = vec![vec![0.0f32; self.config.d_model]; xs.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let live = if causal { i + 1 } else { mem.len() };
            for h in 0..self.config.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qi = &q[i][cols.clone()];
                let mut s: Vec<f32> = (0..live)
                    .map(|j| qi.iter().zip(&k[j][cols.clone()]).map(|(a, b)| a * b).sum::<f32>() * inv)
                    .collect();
                let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for e in s.iter_mut() {
                    *e = (*e - max).exp();
                    sum += *e;
                }
                for (j, p) in s.iter().enumerate() {
                    for (oc, vc) in o[cols.clone()].iter_mut().zip(&v[j][cols.clone()]) {
                        *oc += p / sum * vc;
                    }
                }
            }
        }
        self.linear(&out, &format!("{prefix}.o"))
    }

    fn ffn(&self, xs: &[Vec<f32>], prefix: &str) -> Result<Vec<Vec<f32>>> {
        let mut h = self.linear(xs, &format!("{prefix}.w1"))?;
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
        }
        self.linear(&h, &format!("{prefix}.w2"))
    }

    fn embed(&self, ids: &[usize]) -> Vec<Vec<f32>> {
        let e = self.w("embedding");
        let scale = (self.config.d_model as f32).sqrt();
        let pe = sinusoid(ids.len(), self.config.d_model);
        ids.iter()
            .enumerate()
            .map(|(p, &id)| e.row(id).iter().zip(pe.row(p)).map(|(&v, &q)| v * scale + q as f32).collect())
            .collect()
    }

    fn check_tokens(&self, src: &[usize], tgt: &[usize]) -> Result<()> {
        let c = &self.config;
        for ids in [src, tgt] {
            if ids.is_empty() || ids.len() > c.max_len {
                return Err(Error::InvalidInput(format!("sequence length {} outside 1..={}", ids.len(), c.max_len)));
            }
            if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab) {
                return Err(Error::InvalidInput(format!("token {bad} outside vocabulary of {}", c.vocab)));
            }
        }
        Ok(())
    }

    /// Logits for every position of `tgt_prefix`.
    pub fn logits_all(&self, src: &[usize], tgt_prefix: &[usize]) -> Result<Vec<Vec<f32>>> {
        self.check_tokens(src, tgt_prefix)?;
        let add = |a: &mut Vec<Vec<f32>>, b: Vec<Vec<f32>>| {
            for (x, y) in a.iter_mut().zip(b) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += q;
                }
            }
        };
        let mut x = self.embed(src);
        for l in 0..self.config.n_layers_enc {
            let h = self.ln(&x, &format!("enc.{l}.ln1"));
            add(&mut x, self.attention(&h, &h, &format!("enc.{l}.self_attn"), false)?);
            let h = self.ln(&x, &format!("enc.{l}.ln2"));
            add(&mut x, self.ffn(&h, &format!("enc.{l}.ffn"))?);
        }
        let mem = self.ln(&x, "enc.final_ln");
        let mut y = self.embed(tgt_prefix);
        for l in 0..self.config.n_layers_dec {
            let h = self.ln(&y, &format!("dec.{l}.ln1"));
            add(&mut y, self.attention(&h, &h, &format!("dec.{l}.self_attn"), true)?);
            let h = self.ln(&y, &format!("dec.{l}.ln2"));
            add(&mut y, self.attention(&h, &mem, &format!("dec.{l}.cross_attn"), false)?);
            let h = self.ln(&y, &format!("dec.{l}.ln3"));
            add(&mut y, self.ffn(&h, &format!("dec.{l}.ffn"))?);
        }
        let h = self.ln(&y, "dec.final_ln");
        let e = self.w("embedding");
        h.iter().map(|r| e.apply(r, self.kernel)).collect()
    }

    /// Next-token logits after `tgt_prefix`.
    pub fn logits(&self, src: &[usize], tgt_prefix: &[usize]) -> Result<Vec<f32>> {
        Ok(self.logits_all(src, tgt_prefix)?.pop().expect("non-empty prefix"))
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
    pub fn greedy_decode(&self, src: &[usize]) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS];
        while prefix.len() < self.config.max_len {
            let l = self.logits(src, &prefix)?;
            let next = l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("non-empty vocabulary");
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }
}

/// Next-token logits of `model`, quantized per `plan` when given.
pub fn forward(model: &ToyModel, plan: Option<&PrecisionPlan>, src: &[usize], tgt_prefix: &[usize]) -> Result<Vec<f32>> {
    InferenceModel::new(model, plan, None)?.logits(src, tgt_prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcq::dequantize;
    use crate::planner::Group;
    use crate::toynmt::tape::Tape;

    fn tiny() -> ToyModelConfig {
        ToyModelConfig { d_model: 16, d_ffn: 32, n_layers_enc: 1, n_layers_dec: 2, n_heads: 4, vocab: 20, max_len: 8 }
    }

    const SRC: [usize; 5] = [3, 9, 4, 17, 5];
    const TGT: [usize; 4] = [1, 5, 17, 4];

    #[test]
    fn dense_inference_matches_tape() {
        let model = ToyModel::new(tiny(), 3).unwrap();
        let snap = model.snapshot();
        let mut t = Tape::new(&snap);
        let l = model.tape_logits(&mut t, &SRC, &TGT);
        let reference = t.value(l).clone();
        let got = InferenceModel::new(&model, None, None).unwrap().logits_all(&SRC, &TGT).unwrap();
        for (r, row) in got.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let want = reference.row(r)[c];
                assert!((v as f64 - want).abs() <= 1e-4 * (1.0 + want.abs()), "{r},{c}: {v} vs {want}");
            }
        }
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    // Greedy codes stall near 11% relative weight error at 8 bits on
    // Gaussian rows, so q=8 logits are not within 1e-2 of dense on random
    // models. Deviation still shrinks with q.
    #[test]
    fn logit_deviation_shrinks_with_bits() {
        let model = ToyModel::new(tiny(), 8).unwrap();
        let dense = forward(&model, None, &SRC, &TGT).unwrap();
        let dev: Vec<f32> = [1u8, 2, 8]
            .iter()
            .map(|&q| {
                let l = forward(&model, Some(&PrecisionPlan::uniform(model.dims(), q)), &SRC, &TGT).unwrap();
                max_abs_diff(&dense, &l)
            })
            .collect();
        assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
    }

    #[test]
    fn representable_weights_quantize_exactly_at_eight_bits() {
        let mut model = ToyModel::new(tiny(), 8).unwrap();
        let plan = PrecisionPlan::uniform(model.dims(), 8);
        // rows of the form ±c are reproduced exactly by any width
        model.project(&PrecisionPlan::uniform(model.dims(), 1), None).unwrap();
        let dense = forward(&model, None, &SRC, &TGT).unwrap();
        let q8 = forward(&model, Some(&plan), &SRC, &TGT).unwrap();
        assert!(max_abs_diff(&dense, &q8) <= 1e-5, "{}", max_abs_diff(&dense, &q8));
    }

    #[test]
    fn packed_kernels_match_dequantized_weights() {
        let model = ToyModel::new(tiny(), 11).unwrap();
        let plan = PrecisionPlan::uniform(model.dims(), 2).with(Group::EncFfn, crate::planner::Precision::Bits(3));
        let tensors = quantize_model(&model.tensors(), &plan, None).unwrap();
        let dequantized: Vec<Tensor> = tensors
            .iter()
            .map(|t| match t {
                Tensor::Quantized(q) => Tensor::Dense(dequantize(q)),
                d => d.clone(),
            })
            .collect();
        let reference = InferenceModel::from_tensors(tiny(), dequantized).unwrap().logits(&SRC, &TGT).unwrap();
        let mut packed = InferenceModel::from_tensors(tiny(), tensors).unwrap();
        for kernel in [Kernel::Direct, Kernel::Lut { mu: 4 }] {
            packed.kernel = kernel;
            let got = packed.logits(&SRC, &TGT).unwrap();
            for (a, b) in got.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{kernel:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let model = ToyModel::zeros(tiny()).unwrap();
        let l = forward(&model, None, &SRC, &TGT).unwrap();
        assert_eq!(l.len(), 20);
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyModel::new(tiny(), 1).unwrap();
        let plan = PrecisionPlan::uniform(model.dims(), 3);
        let a = forward(&model, Some(&plan), &SRC, &TGT).unwrap();
        let b = forward(&model, Some(&plan), &SRC, &TGT).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn errors_on_bad_tokens_and_gaps() {
        let model = ToyModel::new(tiny(), 1).unwrap();
        assert!(forward(&model, None, &[3, 20], &TGT).is_err());
        let gap = PrecisionPlan::uniform(model.dims(), 2);
        let mut gap = gap;
        gap.groups.remove(&Group::DecEd);
        assert!(matches!(forward(&model, Some(&gap), &SRC, &TGT), Err(Error::Coverage(_))));
    }
}
