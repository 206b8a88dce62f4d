use serde::Serialize;

use super::data::Example;
use super::model::ToyModel;
use crate::error::{Error, Result};
use crate::bcq::MAX_BITS;
use crate::planner::{Group, Precision, PrecisionPlan};

/// Sweep width meaning "leave the group in full precision".
pub const PASSTHROUGH_BITS: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub group: Group,
    pub q: u8,
    pub metric: f64,
    pub degradation: f64,
}

/// Eval cross-entropy with one group quantized at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub baseline: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Mean degradation of `group` over its swept widths.
    pub fn average_degradation(&self, group: Group) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter(|r| r.group == group).map(|r| r.degradation).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn get(&self, group: Group, q: u8) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.group == group && r.q == q)
    }
}

/// Quantizes each group alone at each width (no retraining) and evaluates.
/// A width of 32 is a passthrough point that leaves the weights untouched.
pub fn sensitivity_sweep(model: &ToyModel, groups: &[Group], bits: &[u8], eval: &[Example]) -> Result<SweepTable> {
    for &q in bits {
        if q != PASSTHROUGH_BITS && !(1..=MAX_BITS).contains(&(q as usize)) {
            return Err(Error::BitsOutOfRange(q as usize));
        }
    }
    for &g in groups {
        if !model.specs().iter().any(|s| s.group == Some(g) && s.numel() > 0) {
            return Err(Error::InvalidInput(format!("group {g} has no parameters in this model")));
        }
    }
    let baseline = model.eval_loss(eval)?;
    let mut rows = Vec::with_capacity(groups.len() * bits.len());
    for &group in groups {
        for &q in bits {
            let metric = if q == PASSTHROUGH_BITS {
                model.eval_loss(eval)?
            } else {
                let plan = PrecisionPlan::full_precision(model.dims()).with(group, Precision::Bits(q));
                let mut trial = model.clone();
                trial.project(&plan, None)?;
                trial.eval_loss(eval)?
            };
            rows.push(SweepRow { group, q, metric, degradation: metric - baseline });
        }
    }
    Ok(SweepTable { baseline, rows })
}
