//! Analytic gradients against central finite differences, in f64, for
//! every differentiable component and for the whole network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capsule::{capsule_average_pool_var, dynamic_route, form_predictions, squash_var, ConvCapsuleSpec};
use crate::error::{Error, Result};
use crate::network::{DCaps, DCapsConfig, Outputs};
use crate::numerics::{finite_diff_grad, relative_error, Padding, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

pub const COMPONENTS: [&str; 13] = [
    "conv2d",
    "conv_transpose2d",
    "squash",
    "form_predictions",
    "dynamic_route_r1",
    "dynamic_route_r3",
    "capsule_average_pool",
    "crop",
    "weighted_votes",
    "agreement",
    "reconstruction",
    "loss",
    "end_to_end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub component: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub worst_seed: u64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

impl fmt::Display for ComponentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} cases  worst relative error {:.3e} (seed {})  {}",
            self.component,
            self.cases,
            self.worst,
            self.worst_seed,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// A differentiable function of several tensors, evaluated on a fresh tape.
pub type Function = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Worst relative error over all inputs of `f`. The output is reduced to
/// a scalar by a fixed random weighting so every output element matters.
/// When `corrupt` is set the analytic gradients are scaled by 1.01 first.
pub fn check(inputs: &[Tensor<f64>], f: &Function, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    let probe = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let shape = out.shape();
        uniform(rng, &shape, 1.0)
    };
    let scalar = |tape: &Tape<f64>, vars: &[Var<'_, f64>]| -> Result<f64> {
        let out = f(tape, vars)?;
        let w = tape.constant(probe.clone());
        Ok(out.mul(w)?.sum().value().item())
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = out.mul(tape.constant(probe.clone()))?.sum();
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let mut analytic = grads.wrt(*v);
        if corrupt {
            analytic = analytic.map(|g| g * 1.01);
        }
        let numeric = finite_diff_grad(
            |x| {
                let tape = Tape::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { x.clone() } else { t.clone() }))
                    .collect();
                scalar(&tape, &vars)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95))
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn random_spec(rng: &mut ChaCha8Rng, iterations: usize) -> ConvCapsuleSpec {
    ConvCapsuleSpec {
        kernel: [1, 3][pick(rng, 0, 1)],
        stride: pick(rng, 1, 2),
        in_types: pick(rng, 1, 3),
        out_types: pick(rng, 1, 3),
        in_atoms: pick(rng, 2, 4),
        out_atoms: pick(rng, 2, 4),
        routing_iterations: iterations,
    }
}

/// Parameters of `net` as tape handles: the ones listed in `live` come
/// from `vars` in order, the rest are constants.
fn bind_some<'t>(tape: &'t Tape<f64>, net: &DCaps<f64>, live: &[usize], vars: &[Var<'t, f64>]) -> Vec<Var<'t, f64>> {
    net.params()
        .iter()
        .enumerate()
        .map(|(i, p)| match live.iter().position(|&j| j == i) {
            Some(k) => vars[k],
            None => tape.constant(p.value.clone()),
        })
        .collect()
}

fn tiny_net(rng: &mut ChaCha8Rng, classes: usize) -> Result<DCaps<f64>> {
    let mut config = DCapsConfig::tiny();
    config.num_classes = classes;
    let heads = config.heads();
    if let Some(last) = config.layer_specs.last_mut() {
        last.out_types = heads;
    }
    let mut net = DCaps::build(config, rng.gen())?;
    // Zero biases put every relu fed by an all-zero region exactly on its
    // kink, where central differences see half a slope.
    for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = uniform(rng, p.value.shape(), 0.2);
    }
    Ok(net)
}

/// Random inputs and function for one component at one seed.
fn case(component: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Box<Function>)> {
    Ok(match component {
        "conv2d" => {
            let (b, h, w) = (pick(rng, 1, 2), pick(rng, 3, 6), pick(rng, 3, 6));
            let (cin, cout, k) = (pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3));
            let stride = pick(rng, 1, 2);
            let padding = if rng.gen() { Padding::Same } else { Padding::Valid };
            (
                vec![
                    uniform(rng, &[b, h, w, cin], 1.0),
                    uniform(rng, &[k, k, cin, cout], 1.0),
                    uniform(rng, &[cout], 1.0),
                ],
                Box::new(move |_, v| v[0].conv2d(v[1], Some(v[2]), stride, padding)),
            )
        }
        "conv_transpose2d" => {
            let (b, h, w) = (pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 4));
            let (cin, cout, k) = (pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4));
            let stride = pick(rng, 1, 2);
            (
                vec![
                    uniform(rng, &[b, h, w, cin], 1.0),
                    uniform(rng, &[k, k, cin, cout], 1.0),
                    uniform(rng, &[cout], 1.0),
                ],
                Box::new(move |_, v| v[0].conv_transpose2d(v[1], Some(v[2]), stride)),
            )
        }
        "squash" => {
            let shape = [pick(rng, 1, 4), pick(rng, 2, 6)];
            let scale = [0.3, 1.0, 3.0][pick(rng, 0, 2)];
            (vec![uniform(rng, &shape, scale)], Box::new(|_, v| squash_var(v[0])))
        }
        "form_predictions" => {
            let spec = random_spec(rng, 1);
            let (b, h, w) = (pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 4));
            (
                vec![
                    uniform(rng, &[b, h, w, spec.in_types, spec.in_atoms], 1.0),
                    uniform(rng, &spec.transform_shape(), 1.0),
                ],
                Box::new(move |_, v| form_predictions(v[0], &spec, v[1])),
            )
        }
        "dynamic_route_r1" | "dynamic_route_r3" => {
            let iterations = if component.ends_with('1') { 1 } else { 3 };
            let (n, s, o, a) = (pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 3), pick(rng, 2, 4));
            (
                vec![uniform(rng, &[n, s, o, a], 1.0), uniform(rng, &[o, a], 0.5)],
                Box::new(move |_, v| dynamic_route(v[0], iterations, Some(v[1]), None)),
            )
        }
        "capsule_average_pool" => {
            let shape = [pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3), pick(rng, 1, 4)];
            (vec![uniform(rng, &shape, 1.0)], Box::new(|_, v| capsule_average_pool_var(v[0])))
        }
        "crop" => {
            let (b, h, w, c) = (pick(rng, 1, 2), pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 3));
            let (ch, cw) = (pick(rng, 1, h), pick(rng, 1, w));
            let (top, left) = (pick(rng, 0, h - ch), pick(rng, 0, w - cw));
            (
                vec![uniform(rng, &[b, h, w, c], 1.0)],
                Box::new(move |_, v| v[0].crop(top, left, ch, cw)),
            )
        }
        "weighted_votes" | "agreement" => {
            let (n, s, o, a) = (pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3), pick(rng, 1, 4));
            let u = uniform(rng, &[n, s, o, a], 1.0);
            if component == "weighted_votes" {
                (vec![uniform(rng, &[n, s, o], 1.0), u], Box::new(|_, v| v[0].weighted_votes(v[1])))
            } else {
                (vec![u, uniform(rng, &[n, o, a], 1.0)], Box::new(|_, v| v[0].agreement(v[1])))
            }
        }
        "reconstruction" => {
            let classes = pick(rng, 1, 2);
            let net = tiny_net(rng, classes)?;
            let (heads, atoms) = (net.config().heads(), net.config().output_atoms);
            let b = pick(rng, 1, 2);
            let live: Vec<usize> = net
                .params()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.name.starts_with("recon."))
                .map(|(i, _)| i)
                .collect();
            let mut inputs = vec![uniform(rng, &[b, heads, atoms], 1.0)];
            inputs.extend(live.iter().map(|&i| net.params().get(i).value.clone()));
            (
                inputs,
                Box::new(move |tape, v| {
                    let p = bind_some(tape, &net, &live, &v[1..]);
                    net.reconstruct_vars(&p, v[0])
                }),
            )
        }
        "loss" => {
            let classes = pick(rng, 1, 2);
            let net = tiny_net(rng, classes)?;
            let (heads, atoms) = (net.config().heads(), net.config().output_atoms);
            let [h, w, c] = net.config().input_shape;
            let b = pick(rng, 1, 3);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..heads.max(2))).collect();
            let images = unit(rng, &[b, h, w, c]);
            (
                vec![unit(rng, &[b, heads]), unit(rng, &[b, h, w, c])],
                Box::new(move |tape, v| {
                    let out = Outputs {
                        class_vectors: tape.constant(Tensor::zeros(&[b, heads, atoms])),
                        scores: v[0],
                        reconstruction: Some(v[1]),
                    };
                    Ok(net.loss_vars(&out, &labels, tape.constant(images.clone()))?.total)
                }),
            )
        }
        "end_to_end" => {
            let classes = pick(rng, 1, 2);
            let mut net = tiny_net(rng, classes)?;
            // Decoder gradients scale with the reconstruction weight; at
            // 0.1 they sit near the finite-difference noise floor.
            net.set_recon_weight(rng.gen_range(0.5..2.0));
            let heads = net.config().heads();
            let [h, w, c] = net.config().input_shape;
            let b = pick(rng, 1, 2);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..heads.max(2))).collect();
            let images = unit(rng, &[b, h, w, c]);
            let live: Vec<usize> = (0..net.params().len()).collect();
            let inputs = net.params().iter().map(|p| p.value.clone()).collect();
            (
                inputs,
                Box::new(move |tape, v| {
                    let p = bind_some(tape, &net, &live, v);
                    let x = tape.constant(images.clone());
                    let out = net.forward_vars(&p, x, true)?;
                    Ok(net.loss_vars(&out, &labels, x)?.total)
                }),
            )
        }
        other => return Err(Error::config(format!("unknown gradient check component {other:?}"))),
    })
}

/// Run `component` at seeds `seeds`. `corrupt` names a component whose
/// analytic gradient is deliberately perturbed (negative control).
pub fn check_component(
    component: &'static str,
    seeds: std::ops::Range<u64>,
    corrupt: Option<&str>,
) -> Result<ComponentReport> {
    let mut report = ComponentReport {
        component,
        cases: 0,
        worst: 0.0,
        worst_seed: seeds.start,
    };
    let index = COMPONENTS.iter().position(|&c| c == component).unwrap_or(COMPONENTS.len()) as u64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(index));
        let (inputs, f) = case(component, &mut rng)?;
        let err = check(&inputs, &*f, &mut rng, corrupt == Some(component))?;
        report.cases += 1;
        if err > report.worst || report.cases == 1 {
            report.worst = err;
            report.worst_seed = seed;
        }
    }
    Ok(report)
}

/// Every component at seeds `start..start + count`.
pub fn run_suite(start: u64, count: u64, corrupt: Option<&str>) -> Result<Vec<ComponentReport>> {
    if let Some(c) = corrupt {
        if !COMPONENTS.contains(&c) {
            return Err(Error::config(format!("unknown gradient check component {c:?}")));
        }
    }
    COMPONENTS
        .iter()
        .map(|&c| check_component(c, start..start + count, corrupt))
        .collect()
}
