#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunet::grad::{Tape, Tensor, Var};
use sunet::model::{ModelConfig, SunetModel};
use sunet::params::{ForwardPass, Mode, ParamStore};
use sunet::trainer::dice_loss;
use sunet::Result;

pub mod cs4941;
pub mod oracle;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar loss `sum(f(inputs) * weights)` with fixed random weights, so
/// every output element contributes with a distinct coefficient.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Max relative error between reverse-mode and central-difference
/// gradients of `sum(f(inputs) * w)` over every input element.
pub fn check_op(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let l = weighted(&mut tape, out, seed).unwrap();
        tape.data(l)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = weighted(&mut tape, out, seed).unwrap();
    tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[j], numeric));
        }
    }
    worst
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: sunet::backbone::BackboneConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 2,
            feature_channels: 2,
            input_size: [8, 8],
        },
        channel: Some(sunet::channel::ChannelConfig {
            sentence_length: 3,
            vocab_size: 6,
            hidden_size: 5,
            cell_size: 5,
            num_lstm_layers: 2,
            embedding_dim: 4,
            temperature: 1.0,
            straight_through: false,
            receiver_dim: 2,
            sender_input: sunet::channel::SenderInput::Pool,
        }),
    }
}

fn model_loss(model: &SunetModel, params: &ParamStore, images: &Tensor, target: &Tensor, seed: u64) -> f64 {
    let mut pass = ForwardPass::new(params, Mode::Train);
    let img = pass.tape.constant(images.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward(&mut pass, img, 1.0, Some(&mut rng)).unwrap();
    let l = dice_loss(&mut pass.tape, out.mask_prob, target).unwrap();
    pass.tape.data(l)[0]
}

/// Full model (backbone, training-mode sender, receiver, fusion) under the
/// dice loss: max relative error over every learnable parameter element.
pub fn check_full_model(seed: u64) -> f64 {
    let model = SunetModel::new(tiny_model_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let images = random_tensor(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let target = Tensor::new(
        [2, 1, 8, 8],
        (0..128).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect(),
    )
    .unwrap();

    let mut pass = ForwardPass::new(&model.params, Mode::Train);
    let img = pass.tape.constant(images.clone()).unwrap();
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward(&mut pass, img, 1.0, Some(&mut g)).unwrap();
    let l = dice_loss(&mut pass.tape, out.mask_prob, &target).unwrap();
    pass.tape.backward(l).unwrap();
    let bound = pass.bound_params();

    let mut worst: f64 = 0.0;
    for (name, var) in bound {
        let analytic = pass.tape.grad(var).unwrap().to_vec();
        for j in 0..analytic.len() {
            let mut plus = model.params.clone();
            plus.get_mut(&name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = model.params.clone();
            minus.get_mut(&name).unwrap().data_mut()[j] -= FD_STEP;
            let numeric = (model_loss(&model, &plus, &images, &target, seed)
                - model_loss(&model, &minus, &images, &target, seed))
                / (2.0 * FD_STEP);
            let e = rel_error(analytic[j], numeric);
            if e > 1e-4 {
                eprintln!("{name}[{j}]: analytic {} numeric {numeric}", analytic[j]);
            }
            worst = worst.max(e);
        }
    }
    worst
}
