//! Finite-difference gradient checks of the tape against the f64 reference.

#![allow(dead_code)]

use pipnet::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as rf, R};

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-2;
pub const SMALL: f64 = 1e-6;

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type RefFn = Box<dyn Fn(&[R]) -> f64>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<R>,
    pub tape_fn: TapeFn,
    pub ref_fn: RefFn,
    /// Central-difference step. Cases containing kinks (relu, max) use a
    /// tiny step so the perturbation does not cross a kink.
    pub step: f64,
}

#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn to_tensor(r: &R) -> Tensor {
    Tensor::new(r.shape.clone(), r.data.iter().map(|&v| v as f32).collect())
        .unwrap()
        .with_grad()
}

/// Rounds reference inputs to f32 so both sides see identical values.
fn snap(r: R) -> R {
    r.map(|v| v as f32 as f64)
}

pub fn check(case: &Case) -> Outcome {
    let inputs: Vec<R> = case.inputs.iter().cloned().map(snap).collect();
    let tensors: Vec<Tensor> = inputs.iter().map(to_tensor).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let loss = (case.tape_fn)(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");

    let mut out = Outcome {
        name: case.name.clone(),
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient");
        for j in 0..inputs[i].data.len() {
            let mut plus = inputs.clone();
            plus[i].data[j] += case.step;
            let mut minus = inputs.clone();
            minus[i].data[j] -= case.step;
            let numeric = ((case.ref_fn)(&plus) - (case.ref_fn)(&minus)) / (2.0 * case.step);
            let a = analytic[j] as f64;
            let mag = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            out.checked += 1;
            let ok = if mag < SMALL {
                err < ABS_FLOOR
            } else {
                let rel = err / mag;
                out.worst_rel = out.worst_rel.max(rel);
                rel < REL_TOL
            };
            if !ok {
                out.failures.push(format!(
                    "input {i}[{j}]: analytic {a:.8e} numeric {numeric:.8e}"
                ));
            }
        }
    }
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> R {
    let n = shape.iter().product();
    R::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

fn weights(r: &mut ChaCha8Rng, shape: &[usize]) -> R {
    uniform(r, shape, 0.5, 1.5)
}

/// `sum(y * w)` on the tape for a fixed weight tensor `w`.
fn dot_const(tape: &mut Tape, y: Var, w: &R) -> Var {
    let c = tape.constant(
        Tensor::new(w.shape.clone(), w.data.iter().map(|&v| v as f32).collect()).unwrap(),
    );
    let p = tape.mul(y, c).unwrap();
    tape.sum(p)
}

fn dot_ref(y: &R, w: &R) -> f64 {
    let w32 = w.map(|v| v as f32 as f64);
    y.zip(&w32, |a, b| a * b).sum()
}

pub fn conv_sum_case() -> Case {
    let mut r = rng(11);
    Case {
        name: "conv2d sum(output), 2x3x8x8 * 4x3x3x3".into(),
        inputs: vec![uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0), uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0)],
        tape_fn: Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0).unwrap();
            t.sum(y)
        }),
        ref_fn: Box::new(|x| rf::conv2d(&x[0], &x[1], None, 1, 0).sum()),
        step: 1e-3,
    }
}

pub fn conv_strided_case() -> Case {
    let mut r = rng(12);
    let w = weights(&mut r, &[2, 4, 4, 4]);
    let w2 = w.clone();
    Case {
        name: "conv2d stride 2 pad 1 with bias, weighted".into(),
        inputs: vec![
            uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0),
            uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[4], -1.0, 1.0),
        ],
        tape_fn: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::conv2d(&x[0], &x[1], Some(&x[2]), 2, 1), &w2)),
        step: 1e-3,
    }
}

pub fn softmax_case() -> Case {
    let mut r = rng(13);
    let w = uniform(&mut r, &[2, 5, 3, 3], -1.0, 1.0);
    let w2 = w.clone();
    Case {
        name: "softmax_channel".into(),
        inputs: vec![uniform(&mut r, &[2, 5, 3, 3], -2.0, 2.0)],
        tape_fn: Box::new(move |t, v| {
            let y = t.softmax_channel(v[0]).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::softmax_channel(&x[0]), &w2)),
        step: 1e-3,
    }
}

pub fn max_pool_case() -> Case {
    let mut r = rng(14);
    let w = weights(&mut r, &[2, 3]);
    let w2 = w.clone();
    Case {
        name: "spatial_max_pool".into(),
        inputs: vec![uniform(&mut r, &[2, 3, 4, 4], 0.0, 1.0)],
        tape_fn: Box::new(move |t, v| {
            let (y, _) = t.spatial_max_pool(v[0]).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::spatial_max(&x[0]), &w2)),
        step: 1e-6,
    }
}

pub fn matmul_case() -> Case {
    let mut r = rng(15);
    let w = weights(&mut r, &[3, 2]);
    let w2 = w.clone();
    Case {
        name: "matmul".into(),
        inputs: vec![uniform(&mut r, &[3, 5], -1.0, 1.0), uniform(&mut r, &[5, 2], -1.0, 1.0)],
        tape_fn: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::matmul(&x[0], &x[1]), &w2)),
        step: 1e-3,
    }
}

pub fn elementwise_case() -> Case {
    let mut r = rng(16);
    let w = weights(&mut r, &[2, 3, 2, 2]);
    let w2 = w.clone();
    Case {
        name: "elementwise add/sub/mul/scale/add_scalar/tanh/log/log1p/relu".into(),
        inputs: vec![
            uniform(&mut r, &[2, 3, 2, 2], 0.2, 1.0),
            uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0),
        ],
        tape_fn: Box::new(move |t, v| {
            let a = t.mul(v[0], v[1]).unwrap();
            let b = t.add(a, v[0]).unwrap();
            let c = t.sub(b, v[1]).unwrap();
            let d = t.tanh(c);
            let e = t.scale(d, 1.7);
            let f = t.log(v[0]);
            let g = t.add(e, f).unwrap();
            let h = t.relu(v[1]);
            let i = t.log1p(h);
            let j = t.add_scalar(i, 0.3);
            let k = t.mul(g, j).unwrap();
            dot_const(t, k, &w)
        }),
        ref_fn: Box::new(move |x| {
            let g = x[0]
                .zip(&x[1], |a, b| 1.7 * (a * b + a - b).tanh() + a.ln());
            let j = x[1].map(|b| b.max(0.0).ln_1p() + 0.3);
            dot_ref(&g.zip(&j, |a, b| a * b), &w2)
        }),
        step: 1e-6,
    }
}

pub fn reductions_case() -> Case {
    let mut r = rng(17);
    let w = weights(&mut r, &[2, 4]);
    let w2 = w.clone();
    Case {
        name: "sum_axis/mean/slice_batch".into(),
        inputs: vec![uniform(&mut r, &[3, 2, 3, 4], -1.0, 1.0)],
        tape_fn: Box::new(move |t, v| {
            let s = t.slice_batch(v[0], 1, 2).unwrap();
            let a = t.sum_axis(s, 1).unwrap(); // [2,3,4]
            let b = t.sum_axis(a, 1).unwrap(); // [2,4]
            let d = dot_const(t, b, &w);
            let m = t.mean(v[0]);
            let m = t.scale(m, 3.0);
            let both = t.add(d, m).unwrap();
            t.sum(both)
        }),
        ref_fn: Box::new(move |x| {
            let row = 2 * 3 * 4;
            let s = R::new(&[2, 2, 3, 4], x[0].data[row..3 * row].to_vec());
            let b = rf::sum_axis(&rf::sum_axis(&s, 1), 1);
            dot_ref(&b, &w2) + 3.0 * x[0].sum() / x[0].data.len() as f64
        }),
        step: 1e-3,
    }
}

pub fn gather_case() -> Case {
    let mut r = rng(18);
    let w = weights(&mut r, &[2, 2, 2, 3]);
    let w2 = w.clone();
    let maps = vec![vec![2, 1, 0, 5, 4, 3], vec![0, 0, 1, 2, 3, 4]];
    let maps2 = maps.clone();
    Case {
        name: "gather_cells".into(),
        inputs: vec![uniform(&mut r, &[2, 2, 2, 3], -1.0, 1.0)],
        tape_fn: Box::new(move |t, v| {
            let y = t.gather_cells(v[0], maps.clone()).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::gather_cells(&x[0], &maps2), &w2)),
        step: 1e-3,
    }
}

pub fn cross_entropy_case() -> Case {
    let mut r = rng(19);
    let targets = vec![0usize, 2, 1, 2];
    let t2 = targets.clone();
    Case {
        name: "cross_entropy".into(),
        inputs: vec![uniform(&mut r, &[4, 3], -2.0, 2.0)],
        tape_fn: Box::new(move |t, v| t.cross_entropy(v[0], &targets).unwrap()),
        ref_fn: Box::new(move |x| rf::cross_entropy(&x[0], &t2)),
        step: 1e-3,
    }
}

pub fn layer_norm_case() -> Case {
    let mut r = rng(20);
    let w = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let w2 = w.clone();
    Case {
        name: "layer_norm".into(),
        inputs: vec![uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0)],
        tape_fn: Box::new(move |t, v| {
            let y = t.layer_norm(v[0]).unwrap();
            dot_const(t, y, &w)
        }),
        ref_fn: Box::new(move |x| dot_ref(&rf::layer_norm(&x[0], LAYER_NORM_EPS), &w2)),
        step: 1e-3,
    }
}

/// conv -> softmax_channel -> spatial max -> dot, the model's own pipeline.
pub fn pipeline_case() -> Case {
    let mut r = rng(21);
    let w = weights(&mut r, &[2, 4]);
    let w2 = w.clone();
    Case {
        name: "conv -> softmax_channel -> pool -> dot".into(),
        inputs: vec![
            uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0),
            uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0),
        ],
        tape_fn: Box::new(move |t, v| {
            let c = t.conv2d(v[0], v[1], None, 2, 1).unwrap();
            let z = t.softmax_channel(c).unwrap();
            let (p, _) = t.spatial_max_pool(z).unwrap();
            dot_const(t, p, &w)
        }),
        ref_fn: Box::new(move |x| {
            let z = rf::softmax_channel(&rf::conv2d(&x[0], &x[1], None, 2, 1));
            dot_ref(&rf::spatial_max(&z), &w2)
        }),
        step: 1e-6,
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Relu,
    Tanh,
    Softmax,
    Norm,
    Conv,
    Scale,
}

const LAYERS: [Layer; 6] = [
    Layer::Relu,
    Layer::Tanh,
    Layer::Softmax,
    Layer::Norm,
    Layer::Conv,
    Layer::Scale,
];

/// A random 3-deep chain of shape-preserving layers over `[2, 3, 4, 4]`,
/// finished by spatial max pooling and a weighted sum.
pub fn random_composition(seed: u64) -> Case {
    let mut r = rng(1000 + seed);
    let layers: Vec<Layer> = (0..3).map(|_| LAYERS[r.gen_range(0..LAYERS.len())]).collect();
    let w = weights(&mut r, &[2, 3]);
    let w2 = w.clone();
    let mut inputs = vec![uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)];
    let mut kernel_slot = Vec::new();
    for l in &layers {
        if matches!(l, Layer::Conv) {
            kernel_slot.push(inputs.len());
            inputs.push(uniform(&mut r, &[3, 3, 3, 3], -0.5, 0.5));
        } else {
            kernel_slot.push(usize::MAX);
        }
    }
    let (l1, k1) = (layers.clone(), kernel_slot.clone());
    Case {
        name: format!("random composition #{seed}: {layers:?}"),
        inputs,
        tape_fn: Box::new(move |t, v| {
            let mut x = v[0];
            for (l, &k) in l1.iter().zip(&k1) {
                x = match l {
                    Layer::Relu => t.relu(x),
                    Layer::Tanh => t.tanh(x),
                    Layer::Softmax => t.softmax_channel(x).unwrap(),
                    Layer::Norm => t.layer_norm(x).unwrap(),
                    Layer::Conv => t.conv2d(x, v[k], None, 1, 1).unwrap(),
                    Layer::Scale => t.scale(x, -1.3),
                };
            }
            let (p, _) = t.spatial_max_pool(x).unwrap();
            dot_const(t, p, &w)
        }),
        ref_fn: Box::new(move |x| {
            let mut y = x[0].clone();
            for (l, &k) in layers.iter().zip(&kernel_slot) {
                y = match l {
                    Layer::Relu => y.map(|v| v.max(0.0)),
                    Layer::Tanh => y.map(f64::tanh),
                    Layer::Softmax => rf::softmax_channel(&y),
                    Layer::Norm => rf::layer_norm(&y, LAYER_NORM_EPS),
                    Layer::Conv => rf::conv2d(&y, &x[k], None, 1, 1),
                    Layer::Scale => y.map(|v| v * (-1.3f32) as f64),
                };
            }
            dot_ref(&rf::spatial_max(&y), &w2)
        }),
        step: 1e-6,
    }
}

pub const RANDOM_COMPOSITIONS: u64 = 24;

pub fn all_cases() -> Vec<Case> {
    let mut cases = vec![
        conv_sum_case(),
        conv_strided_case(),
        softmax_case(),
        max_pool_case(),
        matmul_case(),
        elementwise_case(),
        reductions_case(),
        gather_case(),
        cross_entropy_case(),
        layer_norm_case(),
        pipeline_case(),
    ];
    cases.extend((0..RANDOM_COMPOSITIONS).map(random_composition));
    cases
}
