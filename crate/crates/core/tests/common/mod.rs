//! Independent oracles shared by the integration tests and the acceptance
//! binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use clm_core::data::{DatasetManifest, GrayImage, Record, TissueClass};
use clm_core::nn::{build_model, Mode, Model, ModelSpec};
use clm_core::tensor::{numeric_gradient, relative_error, BatchNormStats, PoolKind};
use clm_core::weights::{WeightContainer, WeightData, WeightEntry};
use clm_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor::new(shape, v).unwrap()
}

// ---------------------------------------------------------------- convolution

pub struct ConvCase {
    pub input: Tensor<f64>,
    pub weight: Tensor<f64>,
    pub bias: Option<Tensor<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn random_conv_case(rng: &mut ChaCha8Rng, groups: usize, stride: usize, padding: usize) -> ConvCase {
    let n = rng.random_range(1..=2);
    let c_in = groups * rng.random_range(1..=2);
    let c_out = groups * rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let h = rng.random_range(k.max(3)..=8);
    let w = rng.random_range(k.max(3)..=8);
    ConvCase {
        input: normal_tensor(rng, &[n, c_in, h, w], 1.0),
        weight: normal_tensor(rng, &[c_out, c_in / groups, k, k], 1.0),
        bias: rng.random_bool(0.5).then(|| normal_tensor(rng, &[c_out], 1.0)),
        stride,
        padding,
        groups,
    }
}

/// Direct nested summation over the definition of a grouped, strided,
/// zero-padded cross-correlation.
pub fn direct_conv(c: &ConvCase) -> (Vec<usize>, Vec<f64>) {
    let [n, c_in, h, w]: [usize; 4] = c.input.shape().try_into().unwrap();
    let [c_out, cpg, kh, kw]: [usize; 4] = c.weight.shape().try_into().unwrap();
    let oh = (h + 2 * c.padding - kh) / c.stride + 1;
    let ow = (w + 2 * c.padding - kw) / c.stride + 1;
    let out_per_group = c_out / c.groups;
    assert_eq!(cpg * c.groups, c_in);
    let mut out = Vec::with_capacity(n * c_out * oh * ow);
    for b in 0..n {
        for o in 0..c_out {
            let g = o / out_per_group;
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = c.bias.as_ref().map_or(0.0, |t| t.data()[o]);
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * c.stride + ky) as isize - c.padding as isize;
                                let ix = (x * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = c.input.at(&[b, g * cpg + ci, iy as usize, ix as usize]);
                                s += xv * c.weight.at(&[o, ci, ky, kx]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    (vec![n, c_out, oh, ow], out)
}

pub fn tape_conv(c: &ConvCase) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let x = tape.leaf(c.input.clone());
    let w = tape.leaf(c.weight.clone());
    let b = c.bias.clone().map(|b| tape.leaf(b));
    let y = tape.conv2d(x, w, b, c.stride, c.padding, c.groups).unwrap();
    tape.value(y).clone()
}

/// Runs every (groups, stride, padding) combination `per_combo` times and
/// returns the case count and the largest absolute deviation.
pub fn conv_oracle_sweep(seed: u64, per_combo: usize) -> (usize, f64) {
    let mut rng = rng(seed);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for groups in [1, 2, 4] {
        for stride in [1, 2] {
            for padding in [0, 1, 3] {
                for _ in 0..per_combo {
                    let c = random_conv_case(&mut rng, groups, stride, padding);
                    let (shape, expect) = direct_conv(&c);
                    let got = tape_conv(&c);
                    assert_eq!(got.shape(), shape.as_slice());
                    for (a, b) in got.data().iter().zip(&expect) {
                        worst = worst.max((a - b).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    (cases, worst)
}

// ------------------------------------------------------------ gradient checks

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// A differentiable operation applied to some inputs.
pub struct OpCase {
    pub inputs: Vec<Tensor<f64>>,
    pub op: OpFn,
}

/// `sum(op(inputs) * r)` for a fixed random projection `r`.
fn projected_loss(case: &OpCase, inputs: &[Tensor<f64>], proj: &Tensor<f64>, tape: &mut Tape<f64>) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = (case.op)(tape, &vars);
    let r = tape.leaf(proj.clone());
    let prod = tape.mul(y, r).unwrap();
    (vars, tape.sum(prod))
}

fn check_case(case: &OpCase, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let out_shape = {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = (case.op)(&mut tape, &vars);
        tape.shape(y).to_vec()
    };
    let proj = normal_tensor(rng, &out_shape, 1.0);
    let mut tape = Tape::new();
    let (vars, loss) = projected_loss(case, &case.inputs, &proj, &mut tape);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*v).unwrap();
        let numeric = numeric_gradient(
            |probe| {
                let mut inputs = case.inputs.clone();
                inputs[i] = probe.clone();
                let mut t = Tape::inference();
                let (_, l) = projected_loss(case, &inputs, &proj, &mut t);
                t.value(l).data()[0]
            },
            &case.inputs[i],
            FD_STEP,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, GRAD_FLOOR));
            coords += 1;
        }
    }
    (coords, worst)
}

/// Values at least `gap` away from zero, for kinked operations.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = normal_tensor(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// Distinct values spaced by `gap` in random order, so pooling windows
/// never tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

pub type CaseBuilder = fn(&mut ChaCha8Rng, usize) -> OpCase;

fn pool_case(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> OpFn {
    Box::new(move |t, v| t.pool2d(v[0], kind, kernel, stride, padding).unwrap())
}

/// Every differentiable tape operation with an input generator.
pub fn op_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("conv2d", |rng, i| {
            let (groups, stride, padding) = ([1, 2, 4][i % 3], 1 + i % 2, [0, 1, 3][(i / 2) % 3]);
            let c = random_conv_case(rng, groups, stride, padding);
            let mut inputs = vec![c.input, c.weight];
            let has_bias = c.bias.is_some();
            inputs.extend(c.bias);
            OpCase {
                inputs,
                op: Box::new(move |t, v| {
                    t.conv2d(v[0], v[1], has_bias.then(|| v[2]), stride, padding, groups)
                        .unwrap()
                }),
            }
        }),
        ("batch_norm_train", |rng, _| OpCase {
            inputs: vec![
                normal_tensor(rng, &[2, 3, 3, 3], 1.0),
                normal_tensor(rng, &[3], 1.0),
                normal_tensor(rng, &[3], 1.0),
            ],
            op: Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], BatchNormStats::Batch, 1e-5).unwrap().0),
        }),
        ("batch_norm_eval", |rng, _| {
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
            OpCase {
                inputs: vec![
                    normal_tensor(rng, &[2, 3, 2, 3], 1.0),
                    normal_tensor(rng, &[3], 1.0),
                    normal_tensor(rng, &[3], 1.0),
                ],
                op: Box::new(move |t, v| {
                    let stats = BatchNormStats::Running { mean: &mean, var: &var };
                    t.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap().0
                }),
            }
        }),
        ("relu", |rng, _| OpCase {
            inputs: vec![away_from_zero(rng, &[2, 3, 4], 1e-3)],
            op: Box::new(|t, v| t.relu(v[0])),
        }),
        ("sigmoid", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 3, 4], 2.0)],
            op: Box::new(|t, v| t.sigmoid(v[0])),
        }),
        ("max_pool", |rng, i| OpCase {
            inputs: vec![distinct(rng, &[2, 2, 6, 6], 0.01)],
            op: if i % 2 == 0 {
                pool_case(PoolKind::Max, 2, 2, 0)
            } else {
                pool_case(PoolKind::Max, 3, 2, 1)
            },
        }),
        ("avg_pool", |rng, i| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 2, 6, 6], 1.0)],
            op: if i % 2 == 0 {
                pool_case(PoolKind::Avg, 2, 2, 0)
            } else {
                pool_case(PoolKind::Avg, 3, 1, 0)
            },
        }),
        ("global_avg_pool", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 3, 4, 5], 1.0)],
            op: pool_case(PoolKind::GlobalAvg, 0, 1, 0),
        }),
        ("concat_channels", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 2, 3, 3], 1.0), normal_tensor(rng, &[2, 3, 3, 3], 1.0)],
            op: Box::new(|t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
        }),
        ("linear", |rng, i| {
            let with_bias = i % 2 == 0;
            let mut inputs = vec![normal_tensor(rng, &[3, 5], 1.0), normal_tensor(rng, &[4, 5], 1.0)];
            if with_bias {
                inputs.push(normal_tensor(rng, &[4], 1.0));
            }
            OpCase {
                inputs,
                op: Box::new(move |t, v| t.linear(v[0], v[1], with_bias.then(|| v[2])).unwrap()),
            }
        }),
        ("softmax_cross_entropy", |rng, _| {
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            OpCase {
                inputs: vec![normal_tensor(rng, &[4, 3], 2.0)],
                op: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap()),
            }
        }),
        ("add", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 3, 2], 1.0), normal_tensor(rng, &[2, 3, 2], 1.0)],
            op: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        }),
        ("mul", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 3, 2], 1.0), normal_tensor(rng, &[2, 3, 2], 1.0)],
            op: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        }),
        ("scale_channels", |rng, i| {
            let scale_shape: &[usize] = if i % 2 == 0 { &[2, 3] } else { &[2, 3, 1, 1] };
            OpCase {
                inputs: vec![normal_tensor(rng, &[2, 3, 3, 2], 1.0), normal_tensor(rng, scale_shape, 1.0)],
                op: Box::new(|t, v| t.scale_channels(v[0], v[1]).unwrap()),
            }
        }),
        ("sum", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[3, 4], 1.0)],
            op: Box::new(|t, v| t.sum(v[0])),
        }),
        ("reshape", |rng, _| OpCase {
            inputs: vec![normal_tensor(rng, &[2, 3, 4], 1.0)],
            op: Box::new(|t, v| t.reshape(v[0], &[6, 4]).unwrap()),
        }),
    ]
}

pub fn check_op(name: &str, build: CaseBuilder, instances: usize, seed: u64) -> GradReport {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for i in 0..instances {
        let case = build(&mut rng, i);
        let (n, w) = check_case(&case, &mut rng);
        coords += n;
        worst = worst.max(w);
    }
    GradReport {
        name: name.to_string(),
        instances,
        coordinates: coords,
        max_rel_err: worst,
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Add(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    /// node, weight input
    Conv(usize, usize),
    /// node, gamma input, beta input
    Norm(usize, usize, usize),
    /// node, scale input
    Scale(usize, usize),
}

/// A random chain of up to `max_depth` shape-preserving operations on a
/// (2,2,4,4) tensor, where every step may read any earlier node, so values
/// are reused along several paths.
pub fn composed_graph(rng: &mut ChaCha8Rng, max_depth: usize) -> OpCase {
    const SHAPE: [usize; 4] = [2, 2, 4, 4];
    let mut inputs = vec![normal_tensor(rng, &SHAPE, 1.0)];
    let mut steps = Vec::new();
    let depth = rng.random_range(1..=max_depth);
    for k in 0..depth {
        let nodes = k + 1;
        let a = rng.random_range(0..nodes);
        let b = rng.random_range(0..nodes);
        let step = match rng.random_range(0..6) {
            0 => Step::Add(a, b),
            1 => Step::Mul(a, b),
            2 => Step::Sigmoid(a),
            3 => {
                inputs.push(normal_tensor(rng, &[2, 2, 3, 3], 0.5));
                Step::Conv(a, inputs.len() - 1)
            }
            4 => {
                inputs.push(normal_tensor(rng, &[2], 1.0));
                inputs.push(normal_tensor(rng, &[2], 1.0));
                Step::Norm(a, inputs.len() - 2, inputs.len() - 1)
            }
            _ => {
                inputs.push(normal_tensor(rng, &[2, 2], 1.0));
                Step::Scale(a, inputs.len() - 1)
            }
        };
        steps.push(step);
    }
    OpCase {
        inputs,
        op: Box::new(move |t, v| {
            let mut nodes = vec![v[0]];
            for step in &steps {
                let y = match *step {
                    Step::Add(a, b) => t.add(nodes[a], nodes[b]).unwrap(),
                    Step::Mul(a, b) => t.mul(nodes[a], nodes[b]).unwrap(),
                    Step::Sigmoid(a) => t.sigmoid(nodes[a]),
                    Step::Conv(a, w) => t.conv2d(nodes[a], v[w], None, 1, 1, 1).unwrap(),
                    Step::Norm(a, g, b) => t.batch_norm(nodes[a], v[g], v[b], BatchNormStats::Batch, 1e-5).unwrap().0,
                    Step::Scale(a, s) => t.scale_channels(nodes[a], v[s]).unwrap(),
                };
                nodes.push(y);
            }
            *nodes.last().unwrap()
        }),
    }
}

/// Gradient check of `graphs` random composed graphs.
pub fn check_composed(graphs: usize, seed: u64) -> GradReport {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..graphs {
        let case = composed_graph(&mut rng, 6);
        let (n, w) = check_case(&case, &mut rng);
        coords += n;
        worst = worst.max(w);
    }
    GradReport {
        name: "composed graphs".to_string(),
        instances: graphs,
        coordinates: coords,
        max_rel_err: worst,
    }
}

/// ReLU inputs smaller than this are round-off, not a position on a kink.
const KINK_NOISE: f64 = 1e-13;

/// Whether two evaluations fall on different linear pieces: some ReLU input
/// changed sign by more than round-off.
fn crosses_kink(base: &[f64], other: &[f64]) -> bool {
    base.iter()
        .zip(other)
        .any(|(&a, &b)| (a > 0.0) != (b > 0.0) && a.abs().max(b.abs()) > KINK_NOISE)
}

/// Training-mode loss and the ReLU inputs it was computed on.
fn train_loss(model: &mut Model<f64>, x: &Tensor<f64>, targets: &[usize]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = model.forward(&mut tape, v, Mode::Train).unwrap();
    let l = tape.softmax_cross_entropy(y, targets).unwrap();
    (tape.value(l).data()[0], tape.relu_inputs())
}

#[derive(Debug, Clone)]
pub struct PresetGradReport {
    pub report: GradReport,
    /// Draws rejected because the ±h stencil crossed a ReLU kink.
    pub redrawn: usize,
    /// Tensors where every draw crossed a kink.
    pub unresolved: Vec<String>,
}

impl PresetGradReport {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.unresolved.is_empty()
    }
}

/// Training-mode loss gradients of a whole preset against central
/// differences, on `per_tensor` random coordinates of every trainable
/// tensor per instance.
///
/// Central differences are only a valid reference where the loss is smooth
/// over the stencil, so a coordinate whose ±h evaluations change any ReLU
/// sign is redrawn (and counted).
pub fn check_preset(preset: &str, batch: usize, size: usize, instances: usize, per_tensor: usize, seed: u64) -> PresetGradReport {
    const MAX_DRAWS: usize = 50;
    let mut rng = rng(seed);
    let spec = ModelSpec::preset(preset, 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut redrawn = 0;
    let mut unresolved = Vec::new();
    for inst in 0..instances {
        let mut model = build_model::<f64>(&spec, seed.wrapping_mul(1000) + inst as u64).unwrap();
        // Default init zeroes biases, which with one image puts SE hidden
        // units exactly on their ReLU kink; move off it.
        for (_, p) in model.named_params_mut() {
            if p.is_trainable() && p.tensor.shape().len() == 1 {
                for v in p.tensor.data_mut() {
                    *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let x = normal_tensor(&mut rng, &[batch, 3, size, size], 1.0);
        let targets: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        model.loss_and_grads(&x, &targets).unwrap();
        let (_, pattern) = train_loss(&mut model, &x, &targets);
        let names: Vec<(String, Vec<f64>)> = model
            .named_params()
            .into_iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(n, p)| (n, p.tensor.grad().unwrap().to_vec()))
            .collect();
        for (name, grad) in names {
            for _ in 0..per_tensor {
                let mut accepted = false;
                for _ in 0..MAX_DRAWS {
                    let i = rng.random_range(0..grad.len());
                    let orig = model.param(&name).unwrap().tensor.data()[i];
                    model.param_mut(&name).unwrap().tensor.data_mut()[i] = orig + FD_STEP;
                    let (up, p_up) = train_loss(&mut model, &x, &targets);
                    model.param_mut(&name).unwrap().tensor.data_mut()[i] = orig - FD_STEP;
                    let (down, p_down) = train_loss(&mut model, &x, &targets);
                    model.param_mut(&name).unwrap().tensor.data_mut()[i] = orig;
                    if crosses_kink(&pattern, &p_up) || crosses_kink(&pattern, &p_down) {
                        redrawn += 1;
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    worst = worst.max(relative_error(grad[i], numeric, GRAD_FLOOR));
                    coords += 1;
                    accepted = true;
                    break;
                }
                if !accepted {
                    unresolved.push(name.clone());
                }
            }
        }
    }
    PresetGradReport {
        report: GradReport {
            name: preset.to_string(),
            instances,
            coordinates: coords,
            max_rel_err: worst,
        },
        redrawn,
        unresolved,
    }
}

// ------------------------------------------------------------------ manifests

pub fn record(subject: &str, class: TissueClass, i: usize) -> Record {
    Record {
        path: PathBuf::from(format!("images/{subject}/{class}_{i:03}.png")),
        subject: subject.to_string(),
        class,
    }
}

/// Manifest with `counts[subject][class]` records and no image files.
pub fn manifest_from_counts(counts: &BTreeMap<String, [usize; 4]>) -> DatasetManifest {
    let mut records = Vec::new();
    for (s, per_class) in counts {
        for (ci, class) in TissueClass::ALL.iter().enumerate() {
            for i in 0..per_class[ci] {
                records.push(record(s, *class, i));
            }
        }
    }
    DatasetManifest::from_records("/nonexistent", (384, 384), records).unwrap()
}

/// Ten subjects carrying the published class totals (533 HC, 309 MC,
/// 343 HP, 392 MP) with `no_hc` lacking HC and `no_mp` lacking MP.
pub fn census_manifest(no_hc: &str, no_mp: &str) -> DatasetManifest {
    let totals = [533usize, 309, 343, 392];
    let subjects: Vec<String> = (1..=10).map(|i| format!("S{i:02}")).collect();
    let mut counts: BTreeMap<String, [usize; 4]> = subjects.iter().map(|s| (s.clone(), [0; 4])).collect();
    for (ci, total) in totals.iter().enumerate() {
        let holders: Vec<&String> = subjects
            .iter()
            .filter(|s| !((ci == 0 && *s == no_hc) || (ci == 3 && *s == no_mp)))
            .collect();
        for (k, s) in holders.iter().enumerate() {
            let share = total / holders.len() + usize::from(k < total % holders.len());
            counts.get_mut(*s).unwrap()[ci] = share;
        }
    }
    manifest_from_counts(&counts)
}

// ------------------------------------------------------------------- spectral

/// Share of spectral power (DC removed) above `cutoff` cycles per pixel.
pub fn high_frequency_fraction(img: &GrayImage, cutoff: f64) -> f64 {
    let (w, h) = (img.width, img.height);
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / (w * h) as f64;
    let mut buf: Vec<Complex<f64>> = img.pixels.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let freq = |k: usize, n: usize| {
        let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
        k / n as f64
    };
    let (mut high, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = buf[y * w + x].norm_sqr();
            total += p;
            if freq(x, w).hypot(freq(y, h)) > cutoff {
                high += p;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        high / total
    }
}

/// Best single-threshold accuracy separating two labelled feature sets.
pub fn threshold_separability(features: &[(f64, usize)]) -> f64 {
    let mut sorted = features.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let positives = sorted.iter().filter(|f| f.1 == 1).count();
    let mut best = 0usize;
    // Threshold between k-1 and k: predict positive for indices >= k (or < k).
    // Only boundaries between distinct values are realizable.
    let mut pos_below = 0;
    for k in 0..=n {
        if k == 0 || k == n || sorted[k - 1].0 < sorted[k].0 {
            let neg_below = k - pos_below;
            let above_rule = neg_below + (positives - pos_below);
            best = best.max(above_rule).max(n - above_rule);
        }
        if k < n && sorted[k].1 == 1 {
            pos_below += 1;
        }
    }
    best as f64 / n as f64
}

// -------------------------------------------------------------------- weights

pub fn random_container(rng: &mut ChaCha8Rng) -> WeightContainer {
    let mut c = WeightContainer::new();
    let count = rng.random_range(0..=5);
    let mut k = 0;
    while c.len() < count {
        k += 1;
        let base: String = (0..rng.random_range(0..12))
            .map(|_| ['a', 'b', '.', '_', '7', 'é', '字'][rng.random_range(0..7)])
            .collect();
        let name = format!("{base}{k}");
        let rank = rng.random_range(0..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..=4)).collect();
        let n: usize = shape.iter().product();
        let data = if rng.random_bool(0.5) {
            WeightData::F32((0..n).map(|_| f32::from_bits(rng.random())).collect())
        } else {
            WeightData::F64((0..n).map(|_| f64::from_bits(rng.random())).collect())
        };
        c.push(WeightEntry::new(name, shape, data).unwrap()).unwrap();
    }
    c
}

// ------------------------------------------------------------------- training

/// `n` synthetic organ-task samples (HC label 0, HP label 1) of side `size`.
pub fn organ_samples(n: usize, size: usize, seed: u64) -> Vec<clm_core::data::Sample> {
    use clm_core::data::{synthesize_images, Sample, SynthConfig, TissueClass};
    let per_class = n.div_ceil(4).max(1);
    let items = synthesize_images(&SynthConfig::new(2, per_class, size, seed)).unwrap();
    let mut by_label: [Vec<Sample>; 2] = [Vec::new(), Vec::new()];
    for (r, image) in items {
        let label = match r.class {
            TissueClass::HC => 0,
            TissueClass::HP => 1,
            _ => continue,
        };
        by_label[label].push(Sample { image, label });
    }
    let mut out = Vec::new();
    for i in 0..n {
        out.push(by_label[i % 2][i / 2].clone());
    }
    out
}

/// After one training-mode backward pass on grayscale input, the largest
/// absolute first-layer gradient on channels 1 and 2 and on channel 0.
pub fn first_layer_channel_grads(preset: &str, seed: u64) -> (f64, f64) {
    use clm_core::data::{image_to_input, AugmentationConfig};
    let spec = ModelSpec::preset(preset, 2).unwrap();
    let mut model = build_model::<f32>(&spec, seed).unwrap();
    let samples = organ_samples(4, 32, seed);
    let aug = AugmentationConfig::identity(32);
    let inputs: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| image_to_input(&s.image, aug.standardize.as_ref()).unwrap())
        .collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    model.loss_and_grads(&Tensor::stack(&inputs).unwrap(), &targets).unwrap();
    let name = model.input_layer_weight().unwrap();
    let w = &model.param(&name).unwrap().tensor;
    let [o, c, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    assert_eq!(c, 3);
    let g = w.grad().unwrap();
    let (mut other, mut gray) = (0.0f64, 0.0f64);
    for oi in 0..o {
        for ci in 0..c {
            for k in 0..kh * kw {
                let v = (g[(oi * c + ci) * kh * kw + k] as f64).abs();
                if ci == 0 {
                    gray = gray.max(v);
                } else {
                    other = other.max(v);
                }
            }
        }
    }
    (other, gray)
}

// -------------------------------------------------------------------- metrics

/// Accuracy, sensitivity, specificity and F1 straight from the label lists;
/// F1 as the harmonic mean of precision and sensitivity.
pub fn brute_force_metrics(predicted: &[usize], actual: &[usize]) -> [Option<f64>; 4] {
    let n = actual.len();
    let correct = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    let pos: Vec<usize> = (0..n).filter(|&i| actual[i] == 1).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| actual[i] == 0).collect();
    let called: Vec<usize> = (0..n).filter(|&i| predicted[i] == 1).collect();
    let frac = |hits: usize, of: usize| (of > 0).then(|| hits as f64 / of as f64);
    let sens = frac(pos.iter().filter(|&&i| predicted[i] == 1).count(), pos.len());
    let spec = frac(neg.iter().filter(|&&i| predicted[i] == 0).count(), neg.len());
    let prec = frac(called.iter().filter(|&&i| actual[i] == 1).count(), called.len());
    let f1 = match (prec, sens) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        // No true positives but something was called or missed.
        (Some(_), _) | (_, Some(_)) => Some(0.0),
        (None, None) => None,
    };
    [frac(correct, n), sens, spec, f1]
}

/// Compares `metrics()` with the brute-force oracle on random label sets;
/// returns the number of sets and the largest deviation (infinite on a
/// definedness mismatch).
pub fn metrics_oracle_sweep(sets: usize, seed: u64) -> (usize, f64) {
    use clm_core::eval::{metrics, ConfusionCounts};
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let n = rng.random_range(1..=60);
        let bias = rng.random_range(0.0..=1.0);
        let actual: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(bias))).collect();
        let predicted: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
        let m = metrics(&ConfusionCounts::from_labels(&predicted, &actual).unwrap()).unwrap();
        for (got, want) in m.values().iter().zip(brute_force_metrics(&predicted, &actual)) {
            let d = match (got, want) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(d);
        }
    }
    (sets, worst)
}

/// Published macro means for two table rows and their expected strings.
pub fn published_rows() -> Vec<(clm_core::data::Task, &'static str, [f64; 4], &'static str)> {
    use clm_core::data::Task;
    vec![
        (Task::Organ, "Dense TL", [0.908, 0.802, 0.939, 0.917], "90.8 80.2 93.9 91.7"),
        (Task::Peritoneum, "Dense TL", [0.891, 0.809, 0.872, 0.900], "89.1 80.9 87.2 90.0"),
    ]
}

/// Renders the published rows and returns `(expected, rendered)` pairs.
pub fn render_published() -> Vec<(String, String)> {
    use clm_core::eval::{render_table, Metrics, MetricsReport};
    let rows = published_rows();
    let reports: Vec<MetricsReport> = rows
        .iter()
        .map(|(task, variant, v, _)| MetricsReport::from_means(*task, *variant, Metrics::from_values(v.map(Some))))
        .collect();
    let table = render_table(&reports);
    rows.iter()
        .zip(&table.rows)
        .map(|(r, t)| (r.3.to_string(), t.values_line()))
        .collect()
}

// ---------------------------------------------------------------- weight fuzz

/// Save/load round trips through bytes and through a file; returns the
/// number of containers that did not come back bit-identical.
pub fn weight_round_trips(cases: usize, seed: u64) -> usize {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ntwc");
    let mut bad = 0;
    for _ in 0..cases {
        let c = random_container(&mut rng);
        let bytes = c.to_bytes();
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        c.save(&path).unwrap();
        let loaded = WeightContainer::load(&path).unwrap();
        if !back.bit_eq(&c) || !loaded.bit_eq(&c) || back.to_bytes() != bytes {
            bad += 1;
        }
    }
    bad
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub cases: usize,
    /// Truncated inputs that parsed (must stay 0).
    pub accepted_truncations: usize,
    pub panics: usize,
}

/// Every strict prefix of random containers, plus random byte flips,
/// parsed under `catch_unwind`.
pub fn weight_fuzz(containers: usize, flips: usize, seed: u64) -> FuzzOutcome {
    let mut rng = rng(seed);
    let mut out = FuzzOutcome::default();
    let parse = |b: &[u8]| std::panic::catch_unwind(|| WeightContainer::from_bytes(b).is_ok());
    for _ in 0..containers {
        let bytes = random_container(&mut rng).to_bytes();
        for cut in 0..bytes.len() {
            out.cases += 1;
            match parse(&bytes[..cut]) {
                Ok(true) => out.accepted_truncations += 1,
                Ok(false) => {}
                Err(_) => out.panics += 1,
            }
        }
        for _ in 0..flips {
            let mut b = bytes.clone();
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
            out.cases += 1;
            if parse(&b).is_err() {
                out.panics += 1;
            }
        }
    }
    out
}

const SENTINEL: f64 = -12345.5;

/// Strict import into a model whose every value is a sentinel; returns the
/// non-head tensors still holding a sentinel afterwards.
pub fn strict_import_leftovers(preset: &str) -> Vec<String> {
    use clm_core::weights::{export_weights, import_pretrained, ImportPolicy};
    let spec = ModelSpec::preset(preset, 2).unwrap();
    let source = build_model::<f32>(&spec, 1).unwrap();
    let container = export_weights(&source).unwrap();
    let mut target = build_model::<f32>(&spec, 2).unwrap();
    for (_, p) in target.named_params_mut() {
        p.tensor.data_mut().fill(SENTINEL as f32);
    }
    import_pretrained(&mut target, &container, &ImportPolicy::default()).unwrap();
    let head = target.head_param_names();
    target
        .named_params()
        .into_iter()
        .filter(|(n, p)| !head.contains(n) && p.tensor.data().iter().any(|&v| v as f64 == SENTINEL))
        .map(|(n, _)| n)
        .collect()
}
