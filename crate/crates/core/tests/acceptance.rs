//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! every criterion prints one `PASS`/`FAIL` line and the binary exits
//! non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use bcq_core::planner::{sublayer_average_bits, Block, Group};
use bcq_core::toynmt::{
    multiphase_retrain, phase_plans, pnr_retrain, sensitivity_sweep, train_dense, Example, SyntheticTask, Task,
    ToyModel, ToyModelConfig, TrainOptions, TrainSchedule,
};
use bcq_core::{
    average_bits_embedding, cluster_embedding, dequantize, gemv_direct, gemv_lut, greedy_quantize_vector,
    memory_footprint, model_size, quantize_matrix, BitCluster, Checkpoint, DenseTensor, ModelDims, PrecisionPlan,
    QuantizedTensor, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SIZE: usize = 256;
const DENSE_STEPS: usize = 1500;
const RETRAIN_STEPS: usize = 6000;
const PNR: usize = 300;
const RETRAIN_LR: f64 = 2e-3;
const BATCH: usize = 8;

type Check = std::result::Result<String, String>;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn ac1() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    for (r, want) in [(1.0, 2.5), (2.0, 1.733), (4.0, 1.318), (8.0, 1.142)] {
        let got = average_bits_embedding(&cluster_embedding(32768, 4, r).map_err(|e| e.to_string())?);
        ok &= within(got, want, 1e-3);
        notes.push(format!("r={r}: {got:.4}"));
    }
    let plan = PrecisionPlan::mixed(ModelDims::BASE, 1.0);
    let dec = sublayer_average_bits(&plan, Block::Decoder).map_err(|e| e.to_string())?;
    let enc = sublayer_average_bits(&plan, Block::Encoder).map_err(|e| e.to_string())?;
    let size = model_size(&plan).map_err(|e| e.to_string())?;
    ok &= within(dec, 1.75, 1e-9) && within(enc, 11.0 / 3.0, 1e-9);
    ok &= within(size.whole_model_avg_bits, 2.6, 0.05);
    notes.push(format!("decoder {dec:.3}, encoder {enc:.3}, whole model {:.3}", size.whole_model_avg_bits));
    let msg = notes.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ac2() -> Check {
    let spec = cluster_embedding(32768, 4, 8.0).map_err(|e| e.to_string())?;
    let one_bit: usize = spec.clusters.iter().filter(|c| c.bits == 1).map(|c| c.rows).sum();
    let share = one_bit as f64 / 32768.0;
    let msg = format!("{one_bit} of 32768 rows at 1 bit ({:.3}%)", share * 100.0);
    if within(share, 0.875, 0.001) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ac3() -> Check {
    let size = model_size(&PrecisionPlan::mixed(ModelDims::BASE, 1.0)).map_err(|e| e.to_string())?;
    let msg = format!("{} / {} bytes = {:.3}x", size.dense_bytes, size.quantized_bytes, size.ratio);
    if (size.ratio / 11.8 - 1.0).abs() <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dense_reference(w: &DenseTensor, x: &[f32]) -> Vec<f64> {
    (0..w.rows).map(|r| w.row(r).iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum()).collect()
}

/// `Σᵢ αᵢ (bᵢ·x)` from unpacked codes, with no f32 rounding of weights.
fn code_reference(t: &QuantizedTensor, x: &[f32]) -> Vec<f64> {
    let mut out = vec![0.0; t.rows];
    for k in 0..t.rows {
        let row = t.stored_row(k);
        out[t.logical_row(k)] = (0..row.bits())
            .map(|i| {
                let dot: f64 = row.code(i).iter().zip(x).map(|(&b, &v)| b as f64 * v as f64).sum();
                row.scales[i] as f64 * dot
            })
            .sum();
    }
    out
}

fn ac4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 2];
    let mut failures = [0usize; 2];
    let instances = 1000;
    for i in 0..instances {
        let (rows, cols) = match i {
            0 => (512, 2048),
            1 => (1, 1),
            _ if i % 50 == 2 => (rng.random_range(64..=512), rng.random_range(1..=2048)),
            _ => (rng.random_range(1..=64), rng.random_range(1..=2048)),
        };
        let q = rng.random_range(1..=4);
        // odd instances use weights up to 100, where an f32 weight matrix
        // itself rounds at the 1e-5 level; only the exact reference applies
        let wide = i % 2 == 1;
        let scale = 10f32.powi(if wide { rng.random_range(-2..=2) } else { rng.random_range(-3..=0) });
        let data = gaussian(&mut rng, rows * cols).into_iter().map(|v| v * scale).collect();
        let w = DenseTensor::new("w", rows, cols, data).unwrap();
        let x = gaussian(&mut rng, cols);
        let t = quantize_matrix(&w, &BitCluster::uniform(rows, q)).map_err(|e| e.to_string())?;
        let mut outputs = vec![gemv_direct(&t, &x).map_err(|e| e.to_string())?];
        for mu in [1, 4, 8] {
            outputs.push(gemv_lut(&t, &x, mu).map_err(|e| e.to_string())?);
        }
        let mut references = vec![(1, code_reference(&t, &x))];
        if !wide {
            references.push((0, dense_reference(&dequantize(&t), &x)));
        }
        for (slot, reference) in &references {
            for y in &outputs {
                for (&a, &b) in y.iter().zip(reference) {
                    let err = (a as f64 - b).abs() / (1.0 + b.abs());
                    worst[*slot] = worst[*slot].max(err);
                    if err > 1e-5 {
                        failures[*slot] += 1;
                    }
                }
            }
        }
    }
    let msg = format!(
        "{instances} instances x (direct, lut mu 1/4/8); worst scaled error vs dequantized weights {:.2e}, vs exact code sums {:.2e}",
        worst[0], worst[1]
    );
    if failures == [0, 0] {
        Ok(msg)
    } else {
        Err(format!("{msg}; elements over 1e-5: {failures:?}"))
    }
}

/// Greedy recursion written out directly; scales are kept as f32 like the
/// stored ones so later signs see the same residual.
fn greedy_oracle(w: &[f32], q: usize) -> Vec<(f64, Vec<i8>)> {
    let mut r: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(q);
    for _ in 0..q {
        let b: Vec<i8> = r.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
        let alpha = (r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64) as f32 as f64;
        for (v, &s) in r.iter_mut().zip(&b) {
            *v -= alpha * s as f64;
        }
        out.push((alpha, b));
    }
    out
}

fn residual_norm(w: &[f32], planes: &[(f64, Vec<i8>)]) -> f64 {
    w.iter()
        .enumerate()
        .map(|(j, &v)| {
            let approx: f64 = planes.iter().map(|(a, b)| a * b[j] as f64).sum();
            (v as f64 - approx).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

fn ac5() -> Check {
    let worked = greedy_quantize_vector(&[3.0, 1.0, -2.0, 0.5], 2).map_err(|e| e.to_string())?;
    if worked.scales != [1.625, 0.875] || worked.code(0) != [1, 1, -1, 1] || worked.code(1) != [1, -1, -1, -1] {
        return Err(format!("worked example gave {:?}", worked));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vectors = 1000;
    let mut issues = [0usize; 4];
    let mut first_unordered = None;
    for i in 0..vectors {
        let len = if i % 10 == 0 { rng.random_range(1..=8) } else { rng.random_range(1..=512) };
        let w = gaussian(&mut rng, len);
        let row = greedy_quantize_vector(&w, 8).map_err(|e| e.to_string())?;
        let planes: Vec<(f64, Vec<i8>)> = (0..8).map(|k| (row.scales[k] as f64, row.code(k))).collect();

        let oracle = greedy_oracle(&w, 8);
        let agrees = oracle.iter().zip(&planes).all(|((a, b), (sa, sb))| {
            b == sb && (a - sa).abs() <= 1e-5 * (1.0 + a.abs())
        });
        if !agrees {
            issues[0] += 1;
        }

        let norm = (w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
        let slack = 1e-6 * (1.0 + norm);
        let norms: Vec<f64> = (0..=8).map(|k| residual_norm(&w, &planes[..k])).collect();
        if norms.windows(2).any(|p| p[1] > p[0] + slack) {
            issues[1] += 1;
        }
        if row.scales.windows(2).any(|s| s[1] > s[0]) {
            issues[2] += 1;
            first_unordered.get_or_insert_with(|| format!("{w:?} gives scales {:?}", row.scales));
        }
        let frob: Vec<f64> = (1..=8)
            .map(|q| {
                let r = greedy_quantize_vector(&w, q).unwrap();
                let planes: Vec<(f64, Vec<i8>)> = (0..q).map(|k| (r.scales[k] as f64, r.code(k))).collect();
                residual_norm(&w, &planes)
            })
            .collect();
        if frob.windows(2).any(|p| p[1] > p[0] + slack) {
            issues[3] += 1;
        }
    }
    let msg = format!(
        "{vectors} vectors, q up to 8: oracle mismatches {}, residual increases {}, scale order breaks {}, error increases in q {}",
        issues[0], issues[1], issues[2], issues[3]
    );
    match first_unordered {
        _ if issues.iter().all(|&n| n == 0) => Ok(msg),
        Some(example) => Err(format!("{msg}; e.g. {example}")),
        None => Err(msg),
    }
}

fn closed_form_bytes(cols: usize, clusters: &[BitCluster]) -> usize {
    let words = cols.div_ceil(32);
    clusters.iter().map(|c| c.rows * (c.bits as usize * words * 4 + c.bits as usize * 4)).sum()
}

fn ac6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut footprints = 0;
    let mut files = 0;
    for i in 0..200 {
        let rows = rng.random_range(1..=48);
        let cols = rng.random_range(1..=300);
        let mut clusters = Vec::new();
        let mut left = rows;
        while left > 0 {
            let n = rng.random_range(1..=left);
            clusters.push(BitCluster { rows: n, bits: rng.random_range(1..=8) });
            left -= n;
        }
        let w = DenseTensor::new("w", rows, cols, gaussian(&mut rng, rows * cols)).unwrap();
        let t = quantize_matrix(&w, &clusters).map_err(|e| e.to_string())?;
        if memory_footprint(&t) != closed_form_bytes(cols, &clusters) {
            return Err(format!("footprint {} for {rows}x{cols} {clusters:?}", memory_footprint(&t)));
        }
        footprints += 1;

        if i % 4 == 0 {
            let bias = DenseTensor::new("b", 1, cols, gaussian(&mut rng, cols)).unwrap();
            let payloads = closed_form_bytes(cols, &clusters) + 4 * cols;
            let ck = Checkpoint::new(vec![Tensor::Quantized(t), Tensor::Dense(bias)]);
            let path = dir.path().join(format!("{i}.bcq"));
            let written = ck.write(&path).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            if bytes.len() != 16 + meta_len + payloads || written as usize != bytes.len() {
                return Err(format!("file {} bytes, header 16 + {meta_len}, payloads {payloads}", bytes.len()));
            }
            files += 1;
        }
    }
    Ok(format!("{footprints} footprints and {files} checkpoint files exact"))
}

fn trained_dense(seed: u64, task: &SyntheticTask) -> ToyModel {
    let mut m = ToyModel::new(ToyModelConfig::default(), seed).unwrap();
    let sched = TrainSchedule { pnr: 1, total_steps: DENSE_STEPS, ..Default::default() };
    train_dense(&mut m, task, &sched, &TrainOptions { batch_size: BATCH, seed }).unwrap();
    m
}

fn retrain_schedule() -> TrainSchedule {
    // constant learning rate for the whole run
    let d = ToyModelConfig::default().d_model;
    TrainSchedule::with_plateau(RETRAIN_LR, RETRAIN_STEPS, RETRAIN_STEPS, PNR, d)
}

struct SeedRun {
    seed: u64,
    dense: f64,
    no_retrain: f64,
    retrained: f64,
}

fn ac7(models: &[(ToyModel, Vec<Example>)], task: &SyntheticTask) -> (Check, Vec<SeedRun>) {
    let mut runs = Vec::new();
    for (&seed, (dense, eval)) in SEEDS.iter().zip(models) {
        let plan = PrecisionPlan::uniform(dense.dims(), 2);
        let mut once = dense.clone();
        once.project(&plan, None).unwrap();
        let opts = TrainOptions { batch_size: BATCH, seed: seed + 100 };
        let out = pnr_retrain(dense, &plan, &retrain_schedule(), task, &opts, None).unwrap();
        runs.push(SeedRun {
            seed,
            dense: dense.eval_loss(eval).unwrap(),
            no_retrain: once.eval_loss(eval).unwrap(),
            retrained: out.quantized_model().eval_loss(eval).unwrap(),
        });
    }
    let ok = runs.iter().all(|r| r.retrained < r.no_retrain && r.retrained <= 1.5 * r.dense);
    let msg = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: dense {:.4}, no retrain {:.4}, retrained {:.4} ({:.2}x dense)",
                r.seed,
                r.dense,
                r.no_retrain,
                r.retrained,
                r.retrained / r.dense
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (if ok { Ok(msg) } else { Err(msg) }, runs)
}

fn ac8(models: &[(ToyModel, Vec<Example>)]) -> Check {
    let bits = [1u8, 2, 3, 4];
    let mut mean = vec![[0.0f64; 4]; Group::ALL.len()];
    for (model, eval) in models {
        let table = sensitivity_sweep(model, &Group::ALL, &bits, eval).map_err(|e| e.to_string())?;
        if table.rows.len() != 24 {
            return Err(format!("sweep has {} cells", table.rows.len()));
        }
        for (gi, &g) in Group::ALL.iter().enumerate() {
            for (qi, &q) in bits.iter().enumerate() {
                mean[gi][qi] += table.get(g, q).unwrap().degradation / models.len() as f64;
            }
        }
    }
    let mut ok = true;
    let mut notes = Vec::new();
    for (gi, g) in Group::ALL.iter().enumerate() {
        let d = mean[gi];
        ok &= d.windows(2).all(|p| p[1] <= p[0]);
        notes.push(format!("{g} [{:.3} {:.3} {:.3} {:.3}]", d[0], d[1], d[2], d[3]));
    }
    let msg = format!("24 cells per seed; mean degradation q=1..4: {}", notes.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median_ns(mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..21)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn ac9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = DenseTensor::new("w", 512, 512, gaussian(&mut rng, 512 * 512)).unwrap();
    let x = gaussian(&mut rng, 512);
    let dense_bytes = 4 * 512 * 512;
    let mut notes = Vec::new();
    let mut ok = true;
    for q in [1, 2] {
        let t: QuantizedTensor = quantize_matrix(&w, &BitCluster::uniform(512, q)).map_err(|e| e.to_string())?;
        let bytes = memory_footprint(&t);
        let expected = 512 * q * (16 * 4 + 4);
        ok &= bytes == expected && bytes * 10 <= dense_bytes;
        let dense_t = median_ns(|| {
            std::hint::black_box(w.matvec(&x).unwrap());
        });
        let lut_t = median_ns(|| {
            std::hint::black_box(gemv_lut(&t, &x, 8).unwrap());
        });
        notes.push(format!(
            "q={q}: {bytes} bytes, {:.1}x smaller, lut speedup {:.2}x (not gated)",
            dense_bytes as f64 / bytes as f64,
            dense_t / lut_t
        ));
    }
    let msg = notes.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn report(name: &str, check: &Check) -> bool {
    match check {
        Ok(msg) => println!("{name} PASS  {msg}"),
        Err(msg) => println!("{name} FAIL  {msg}"),
    }
    check.is_ok()
}

fn main() -> ExitCode {
    // `cargo test --test acceptance -- AC4 AC7` runs a subset
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |name: &str| only.is_empty() || only.iter().any(|o| o == name);
    let mut all = true;
    let quick: [(&str, fn() -> Check); 6] =
        [("AC1", ac1), ("AC2", ac2), ("AC3", ac3), ("AC4", ac4), ("AC5", ac5), ("AC6", ac6)];
    for (name, check) in quick {
        if want(name) {
            all &= report(name, &check());
        }
    }

    if want("AC7") || want("AC8") {
        let task = SyntheticTask::new(Task::Copy, ToyModelConfig::default().vocab);
        let models: Vec<(ToyModel, Vec<Example>)> =
            SEEDS.iter().map(|&s| (trained_dense(s, &task), task.eval_set(s, EVAL_SIZE))).collect();
        if want("AC7") {
            let (check, runs) = ac7(&models, &task);
            all &= report("AC7", &check);
            record_multiphase(&models[0], &task, runs[0].retrained);
        }
        if want("AC8") {
            all &= report("AC8", &ac8(&models));
        }
    }
    if want("AC9") {
        all &= report("AC9", &ac9());
    }

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Three cumulative phases against one all-at-once run; printed, not gated.
fn record_multiphase((dense, eval): &(ToyModel, Vec<Example>), task: &SyntheticTask, single: f64) {
    let target = PrecisionPlan::uniform(dense.dims(), 2);
    let plans = phase_plans(&target, 3).unwrap();
    let opts = TrainOptions { batch_size: BATCH, seed: SEEDS[0] + 100 };
    let phases = multiphase_retrain(dense, &plans, &retrain_schedule(), task, &opts, None).unwrap();
    let three = phases.last().unwrap().quantized_model().eval_loss(eval).unwrap();
    println!(
        "note  3-phase retraining {three:.4} vs single phase {single:.4} ({:+.1}%) on seed {}",
        100.0 * (three / single - 1.0),
        SEEDS[0]
    );
}
