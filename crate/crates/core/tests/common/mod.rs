//! Finite-difference gradient suite shared by the gradient tests and the
//! acceptance run.

use std::rc::Rc;

use mginr::multigrid::GridConfig;
use mginr::synthesis::NetConfig;
use mginr::tensor::{Activation, CustomOp, Tape, Tensor, Var};
use mginr::training::{MotionLoss, Ssim};
use mginr::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-5;
pub const NET_TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).into_param()
}

/// Values bounded away from zero so kinks of |x| and ReLU stay out of reach of `H`.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .into_param()
}

/// `mean(out * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let r = tape
        .constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let p = tape.mul(out, r).unwrap();
    tape.mean(p).unwrap()
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Checks d(f)/d(inputs) where `f` builds a scalar from the bound inputs.
fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor<f64>]| {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(i).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = t.data()[j];
            probe[i].data_mut()[j] = x + H;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x - H;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * H);
        }
        let e = rel_error(&analytic, &numeric);
        assert!(e.is_finite(), "{name}: input {i} gave a non-finite error");
        worst = worst.max(e);
    }
    worst
}

/// Relative errors of every case, by name.
#[derive(Default)]
pub struct Report(pub Vec<(String, f64)>);

impl Report {
    fn op(&mut self, name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let e = check(name, inputs, f);
        self.0.push((name.to_string(), e));
    }

    pub fn worst(&self) -> f64 {
        self.0.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

fn conv2d_three_by_three(rep: &mut Report) {
    for (i, (b, cin, cout, h, w)) in [(1, 2, 3, 5, 4), (2, 3, 2, 4, 6), (1, 1, 4, 3, 3)].into_iter().enumerate() {
        let seed = 10 * i as u64;
        let inputs = [
            random(&[b, cin, h, w], -1.0, 1.0, seed),
            random(&[cout, cin, 3, 3], -0.5, 0.5, seed + 1),
            random(&[cout], -0.2, 0.2, seed + 2),
        ];
        rep.op(&format!("conv2d {b}x{cin}x{h}x{w} -> {cout}"), &inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
            project(t, y, seed)
        });
    }
}

fn conv2d_pointwise(rep: &mut Report) {
    let inputs = [
        random(&[2, 4, 3, 5], -1.0, 1.0, 30),
        random(&[3, 4, 1, 1], -0.5, 0.5, 31),
        random(&[3], -0.2, 0.2, 32),
    ];
    rep.op("conv2d 1x1", &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 0).unwrap();
        project(t, y, 33)
    });
}

fn pixel_shuffle_and_unshuffle(rep: &mut Report) {
    for (shape, r) in [([1usize, 8, 2, 3], 2usize), ([2, 9, 2, 2], 3)] {
        let inputs = [random(&shape, -1.0, 1.0, 40 + r as u64)];
        rep.op(&format!("pixel_shuffle r={r}"), &inputs, |t, v| {
            let y = t.pixel_shuffle(v[0], r).unwrap();
            project(t, y, 41)
        });
    }
    let inputs = [random(&[1, 2, 4, 6], -1.0, 1.0, 42)];
    rep.op("pixel_unshuffle r=2", &inputs, |t, v| {
        let y = t.pixel_unshuffle(v[0], 2).unwrap();
        project(t, y, 43)
    });
}

fn activations(rep: &mut Report) {
    let inputs = [random(&[1, 3, 4, 5], -3.0, 3.0, 50)];
    rep.op("gelu", &inputs, |t, v| {
        let y = t.activation(v[0], Activation::Gelu).unwrap();
        project(t, y, 51)
    });
    rep.op("sigmoid", &inputs, |t, v| {
        let y = t.sigmoid(v[0]).unwrap();
        project(t, y, 52)
    });
    let inputs = [away_from_zero(&[2, 2, 3, 3], 53)];
    rep.op("relu", &inputs, |t, v| {
        let y = t.activation(v[0], Activation::Relu).unwrap();
        project(t, y, 54)
    });
}

fn elementwise_binary(rep: &mut Report) {
    let shape = [1, 2, 3, 4];
    let inputs = [random(&shape, -1.0, 1.0, 60), random(&shape, -1.0, 1.0, 61)];
    rep.op("add", &inputs, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 62)
    });
    rep.op("sub", &inputs, |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 63)
    });
    rep.op("mul", &inputs, |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 64)
    });
    // a - b bounded away from zero
    let a = away_from_zero(&shape, 65);
    let d = away_from_zero(&shape, 66);
    let b = Tensor::new(shape.to_vec(), a.data().iter().zip(d.data()).map(|(x, y)| x - y).collect())
        .unwrap()
        .into_param();
    rep.op("abs_diff", &[a, b], |t, v| {
        let y = t.abs_diff(v[0], v[1]).unwrap();
        project(t, y, 67)
    });
}

fn scale_and_mean(rep: &mut Report) {
    let inputs = [random(&[3, 5], -1.0, 1.0, 70)];
    rep.op("scalar_mul", &inputs, |t, v| {
        let y = t.scalar_mul(v[0], -2.5).unwrap();
        project(t, y, 71)
    });
    rep.op("mean", &inputs, |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y).unwrap()
    });
}

fn layout_ops(rep: &mut Report) {
    let a = random(&[1, 2, 3, 2], -1.0, 1.0, 80);
    let b = random(&[1, 2, 3, 3], -1.0, 1.0, 81);
    rep.op("concat last axis", &[a.clone(), b], |t, v| {
        let y = t.concat(&[v[0], v[1]], 3).unwrap();
        project(t, y, 82)
    });
    let c = random(&[2, 2, 3, 2], -1.0, 1.0, 83);
    rep.op("concat axis 0", &[a.clone(), c], |t, v| {
        let y = t.concat(&[v[0], v[1]], 0).unwrap();
        project(t, y, 84)
    });
    let g = random(&[3, 2, 2, 3, 2], -1.0, 1.0, 85);
    rep.op("select", &[g], |t, v| {
        let y = t.select(v[0], &[2, 1]).unwrap();
        project(t, y, 86)
    });
    rep.op("channels_first", &[a.clone()], |t, v| {
        let y = t.channels_first(v[0]).unwrap();
        project(t, y, 87)
    });
    rep.op("upsample_nearest", &[random(&[1, 2, 2, 3], -1.0, 1.0, 88)], |t, v| {
        let y = t.upsample_nearest(v[0], 3).unwrap();
        project(t, y, 89)
    });
}

fn loss_op(h: usize, w: usize, alpha: f64, seed: u64) -> MotionLoss<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MotionLoss {
        target: Rc::new((0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()),
        weight: Rc::new((0..h * w).map(|_| rng.random_range(0.5..1.0)).collect()),
        alpha,
        ssim: Rc::new(Ssim::new(h, w)),
    }
}

fn motion_loss_op(rep: &mut Report) {
    for (h, w, alpha) in [(8, 8, 0.7), (7, 9, 0.0), (12, 6, 0.3)] {
        // keep |r - t| away from zero
        let op = loss_op(h, w, alpha, 90 + h as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let recon: Vec<f64> = op
            .target
            .iter()
            .map(|&y| {
                let d = rng.random_range(0.02..0.3);
                if y > 0.5 {
                    y - d
                } else {
                    y + d
                }
            })
            .collect();
        let recon = Tensor::new(vec![1, 3, h, w], recon).unwrap().into_param();
        let op = Rc::new(op);
        rep.op(&format!("motion_loss {h}x{w} alpha={alpha}"), &[recon], |t, v| {
            let o = Rc::clone(&op);
            t.custom(&[v[0]], Box::new(Shared(o))).unwrap()
        });
    }
}

/// Lets one loss definition be recorded on several tapes.
struct Shared(Rc<MotionLoss<f64>>);

impl CustomOp<f64> for Shared {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn forward(&self, inputs: &[(&[f64], &[usize])]) -> Result<(Vec<f64>, Vec<usize>), mginr::tensor::TensorError> {
        self.0.forward(inputs)
    }

    fn backward(&self, inputs: &[(&[f64], &[usize])], grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        self.0.backward(inputs, grad_out, needs)
    }
}

fn two_block_model(ge: usize, act: Activation, seed: u64) -> Model<f64> {
    let grid = GridConfig::with_channels(2, 2, 2, 2, 6).unwrap();
    let net = NetConfig {
        in_channels: 6,
        upscales: vec![2, 2],
        channels: vec![6, 4],
        activation: act,
        ge_channels: ge,
        frames: 2,
        views: 2,
        h: 2,
        w: 2,
    };
    let mut m = Model::random(grid, net, seed).unwrap();
    // larger weights than the default init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in m.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.6..0.6);
        }
    }
    m
}

fn model_loss(model: &Model<f64>, tape: &mut Tape<f64>, op: &Rc<MotionLoss<f64>>, t: usize, v: usize) -> Var {
    let vars = model.bind(tape);
    let out = model.forward(tape, &vars, t, v).unwrap();
    tape.custom(&[out], Box::new(Shared(Rc::clone(op)))).unwrap()
}

fn end_to_end_two_block_net(rep: &mut Report) {
    let op = Rc::new(loss_op(8, 8, 0.7, 100));
    for (ge, act) in [(2, Activation::Gelu), (0, Activation::Gelu)] {
        let model = two_block_model(ge, act, 101);
        let (t, v) = (1, 0);
        let mut tape = Tape::new();
        let loss = model_loss(&model, &mut tape, &op, t, v);
        let grads = tape.backward(loss).unwrap();
        let eval = |m: &Model<f64>| {
            let mut tape = Tape::inference();
            let l = model_loss(m, &mut tape, &op, t, v);
            tape.value(l)[0]
        };
        let mut probe = model.clone();
        for (i, (name, tensor)) in model.named_tensors().into_iter().enumerate() {
            let analytic = grads.get(i).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tensor.numel()]);
            let mut numeric = vec![0.0; tensor.numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let x = tensor.data()[j];
                probe.tensors_mut()[i].data_mut()[j] = x + H;
                let up = eval(&probe);
                probe.tensors_mut()[i].data_mut()[j] = x - H;
                let down = eval(&probe);
                probe.tensors_mut()[i].data_mut()[j] = x;
                *slot = (up - down) / (2.0 * H);
            }
            rep.0.push((format!("two-block net ge={ge} {name}"), rel_error(&analytic, &numeric)));
        }
    }
}

/// Every differentiable tape op and the fused loss.
pub fn op_suite() -> Report {
    let mut rep = Report::default();
    conv2d_three_by_three(&mut rep);
    conv2d_pointwise(&mut rep);
    pixel_shuffle_and_unshuffle(&mut rep);
    activations(&mut rep);
    elementwise_binary(&mut rep);
    scale_and_mean(&mut rep);
    layout_ops(&mut rep);
    motion_loss_op(&mut rep);
    rep
}

/// Every parameter tensor of a two-block net on 8×8 frames, through the loss.
pub fn net_suite() -> Report {
    let mut rep = Report::default();
    end_to_end_two_block_net(&mut rep);
    rep
}
