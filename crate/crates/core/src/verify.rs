//! Finite-difference suites: every tape operator, plus the mask and the full
//! attention encoder end to end. Used by the `gradcheck` command and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, DaeModel};
use crate::diffcore::{finite_diff_check, Attrs, BnMode, GradReport, OpId, Tape, Tensor, Var};
use crate::error::Result;
use crate::networks::{ImageShape, Mode, ModelConfig};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn from_report(name: impl Into<String>, r: &GradReport) -> Self {
        Self {
            name: name.into(),
            max_rel_err: r.max_rel_err(),
            passed: r.passed(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values in ±[0.2, 1] so kinks (relu) sit well outside the fd stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(y ∘ proj)` with a fixed random projection, so every output element
/// carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let z = tape.mul(y, p)?;
    tape.sum(z)
}

fn check_op(op: OpId, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    macro_rules! projected {
        ($params:expr, $out_shape:expr, |$tape:ident, $p:ident| $body:expr) => {{
            let proj = u(rng, &$out_shape);
            finite_diff_check(
                |$tape: &mut Tape<f64>, $p: &[Var]| {
                    let y = $body?;
                    project($tape, y, &proj)
                },
                &$params,
                EPSILON,
                TOLERANCE,
            )
        }};
    }
    match op {
        OpId::Add => projected!([u(rng, &[3, 4]), u(rng, &[3, 4])], [3, 4], |t, p| t
            .add(p[0], p[1])),
        OpId::Sub => projected!([u(rng, &[3, 4]), u(rng, &[3, 4])], [3, 4], |t, p| t
            .sub(p[0], p[1])),
        OpId::Mul => projected!([u(rng, &[3, 4]), u(rng, &[3, 4])], [3, 4], |t, p| t
            .mul(p[0], p[1])),
        OpId::Matmul => projected!([u(rng, &[3, 5]), u(rng, &[5, 4])], [3, 4], |t, p| t
            .matmul(p[0], p[1])),
        OpId::Conv2d => {
            let params = [u(rng, &[2, 3, 6, 6]), u(rng, &[4, 3, 3, 3]), u(rng, &[4])];
            let a = projected!(params.clone(), [2, 4, 6, 6], |t, p| t
                .conv2d(p[0], p[1], p[2], 1))?;
            let b = projected!(params, [2, 4, 3, 3], |t, p| t.conv2d(p[0], p[1], p[2], 2))?;
            Ok(if a.max_rel_err() >= b.max_rel_err() {
                a
            } else {
                b
            })
        }
        OpId::NearestUpsample2x => projected!([u(rng, &[2, 2, 3, 4])], [2, 2, 6, 8], |t, p| t
            .upsample2x(p[0])),
        OpId::Relu => projected!([away_from_zero(rng, &[4, 5])], [4, 5], |t, p| t.relu(p[0])),
        OpId::Sigmoid => projected!([uniform(rng, &[4, 5], -3.0, 3.0)], [4, 5], |t, p| t
            .sigmoid(p[0])),
        OpId::Tanh => projected!([uniform(rng, &[4, 5], -2.0, 2.0)], [4, 5], |t, p| t
            .tanh(p[0])),
        OpId::BatchNorm2d => {
            let params = [
                u(rng, &[3, 2, 4, 4]),
                uniform(rng, &[2], 0.5, 1.5),
                u(rng, &[2]),
            ];
            let train = projected!(params.clone(), [3, 2, 4, 4], |t, p| t.batchnorm2d(
                p[0],
                p[1],
                p[2],
                BnMode::Train { eps: 1e-5 }
            ))?;
            let eval = projected!(params, [3, 2, 4, 4], |t, p| t.batchnorm2d(
                p[0],
                p[1],
                p[2],
                BnMode::Eval {
                    mean: vec![0.1, -0.2],
                    var: vec![0.8, 1.3],
                    eps: 1e-5
                }
            ))?;
            Ok(if train.max_rel_err() >= eval.max_rel_err() {
                train
            } else {
                eval
            })
        }
        OpId::ConcatChannels => projected!(
            [u(rng, &[2, 1, 3, 3]), u(rng, &[2, 3, 3, 3])],
            [2, 4, 3, 3],
            |t, p| t.concat_channels(&[p[0], p[1]])
        ),
        OpId::Mean => {
            finite_diff_check(|t, p| t.mean(p[0]), &[u(rng, &[3, 5])], EPSILON, TOLERANCE)
        }
        OpId::Sum => {
            let proj = u(rng, &[3, 5]);
            finite_diff_check(
                |t, p| {
                    let w = t.constant(proj.clone());
                    let z = t.mul(p[0], w)?;
                    t.sum(z)
                },
                &[u(rng, &[3, 5])],
                EPSILON,
                TOLERANCE,
            )
        }
        OpId::BceWithLogits => {
            let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            finite_diff_check(
                |t, p| t.bce_with_logits(p[0], targets.clone()),
                &[uniform(rng, &[6, 1], -3.0, 3.0)],
                EPSILON,
                TOLERANCE,
            )
        }
        OpId::SoftmaxCrossEntropy => finite_diff_check(
            |t, p| t.softmax_cross_entropy(p[0], vec![0, 3, 2, 4]),
            &[uniform(rng, &[4, 5], -2.0, 2.0)],
            EPSILON,
            TOLERANCE,
        ),
        OpId::Square => projected!([u(rng, &[4, 5])], [4, 5], |t, p| t.square(p[0])),
        OpId::L2Distance => finite_diff_check(
            |t, p| t.l2_distance(p[0], p[1]),
            &[u(rng, &[2, 3, 4]), u(rng, &[2, 3, 4])],
            EPSILON,
            TOLERANCE,
        ),
        OpId::Scale => projected!([u(rng, &[4, 5])], [4, 5], |t, p| t.scale(p[0], -1.7)),
        OpId::AddScalar => projected!([u(rng, &[4, 5])], [4, 5], |t, p| t.add_scalar(p[0], 0.3)),
        OpId::Reshape => projected!([u(rng, &[2, 3, 4])], [6, 4], |t, p| t.reshape(p[0], [6, 4])),
        OpId::Narrow => projected!([u(rng, &[3, 6])], [3, 2], |t, p| t.narrow(p[0], 1, 3, 2)),
        OpId::AddRowBias => projected!([u(rng, &[4, 5]), u(rng, &[5])], [4, 5], |t, p| t
            .add_row_bias(p[0], p[1])),
        OpId::GlobalAvgPool => projected!([u(rng, &[2, 3, 4, 4])], [2, 3], |t, p| t
            .global_avg_pool(p[0])),
        OpId::SoftBoxMask => {
            let centers = Tensor::from_f64([3, 2], &[4.3, 3.6, 2.2, 5.9, 6.1, 1.4])?;
            projected!([centers], [3, 1, 8, 8], |t, p| t.apply(
                Attrs::SoftBoxMask {
                    half_w: 2.0,
                    half_h: 1.5,
                    k: 10.0,
                    height: 8,
                    width: 8,
                },
                &[p[0]]
            ))
        }
    }
}

/// One finite-difference check per tape operator.
pub fn op_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OpId::ALL
        .iter()
        .map(|&op| check_op(op, &mut rng).map(|r| CheckOutcome::from_report(op.name(), &r)))
        .collect()
}

/// Plain mask sum w.r.t. centers near the grid border, where the sum
/// genuinely depends on placement.
pub fn mask_sum_check(k: f64) -> Result<GradReport> {
    let centers = Tensor::from_f64([3, 2], &[2.3, 13.6, 14.1, 1.7, 8.4, 3.2])?;
    finite_diff_check(
        |t, p| {
            let m = t.apply(
                Attrs::SoftBoxMask {
                    half_w: 4.0,
                    half_h: 4.0,
                    k,
                    height: 16,
                    width: 16,
                },
                &[p[0]],
            )?;
            t.sum(m)
        },
        &[centers],
        EPSILON,
        TOLERANCE,
    )
}

/// Every parameter of the attention encoder (encoder, localization head),
/// differentiated through the masks and the per-region encodings.
pub fn encode_instances_check(k: f64, seed: u64) -> Result<GradReport> {
    let image = ImageShape::new(1, 8, 8);
    let model = ModelConfig {
        encoder_channels: vec![2, 3],
        generator_channels: vec![2, 2],
        ..ModelConfig::default()
    };
    let cfg = AttentionConfig {
        n_regions: 2,
        k,
        half_width: 2.0,
        half_height: 2.0,
        k_anneal: None,
    };
    let mut dae = DaeModel::<f64>::new(image, cfg, &model, 3, false, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Masked-out pixels are ~0, which at the initial zero shifts would park
    // every relu on its kink; jitter all parameters off the init.
    for p in dae.net.params_mut() {
        let noise = uniform(&mut rng, p.shape(), -0.3, 0.3);
        for (v, e) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += *e;
        }
    }
    let x = uniform(&mut rng, &[3, 1, 8, 8], -1.0, 1.0);
    let proj = uniform(&mut rng, &[3, 3, 2, 2], -1.0, 1.0);
    finite_diff_check(
        |t, p| {
            let mut d = dae.clone();
            let xv = t.constant(x.clone());
            // eval-mode batchnorm keeps the check free of batch-statistic
            // coupling between regions
            let inst = d.encode_instances(t, p, xv, k, Mode::Eval)?;
            let mut total: Option<Var> = None;
            for &v in &inst.instances {
                let s = project(t, v, &proj)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => t.add(acc, s)?,
                });
            }
            let c = inst.centers.expect("localized").var;
            let cs = t.sum(c)?;
            let cs = t.scale(cs, 0.01)?;
            t.add(total.expect("two regions"), cs)
        },
        dae.net.params(),
        EPSILON,
        TOLERANCE,
    )
}

/// All suites at the given mask sharpness.
pub fn full_suite(k: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = op_suite(seed)?;
    out.push(CheckOutcome::from_report("make_mask", &mask_sum_check(k)?));
    out.push(CheckOutcome::from_report(
        "encode_instances",
        &encode_instances_check(k, seed)?,
    ));
    Ok(out)
}
