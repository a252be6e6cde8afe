//! Finite-difference verification of tape gradients.
//!
//! [`op_suite`] lists one randomized case generator per differentiable op;
//! [`check`] compares tape gradients with central differences.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::PlanBuilder;
use crate::conv::{ConvGeometry, Padding};
use crate::error::Result;
use crate::model::{loss_nvs, loss_pose, EpisodeBatch, Model, ModelConfig, Tasks};
use crate::rng::{normal_tensor, seeded, stream, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Inputs and a scalar function of them.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub f: LossFn,
}

/// Largest elementwise `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// over all inputs.
pub fn check(case: &Case, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.f)(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let l = (case.f)(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };
    let mut inputs = case.inputs.clone();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            inputs[i].data_mut()[e] = orig + eps;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[e] = orig - eps;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let err = libm::fabs(a - numeric) / libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(numeric)), REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(r.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn randn(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    normal_tensor(shape, 1.0, rng)
}

/// Normal samples pushed away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    randn(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn unary_case(x: Tensor<f64>, op: Unary, out_shape: &[usize], rng: &mut DetRng) -> Case {
    let r = randn(out_shape, rng);
    Case {
        inputs: vec![x],
        f: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            project(t, y, &r)
        }),
    }
}

fn conv_case(rng: &mut DetRng, geom: ConvGeometry, bias: bool) -> Case {
    let (n, c, o, s) = (2, 2, 3, 4 + 2 * rng.random_range(0..2usize));
    let x = randn(&[n, c, s, s], rng);
    let w = randn(&[o, c, geom.kernel, geom.kernel], rng);
    let b = randn(&[o], rng);
    let out = geom.output_size(s).expect("case geometry tiles");
    let r = randn(&[n, o, out, out], rng);
    Case {
        inputs: vec![x, w, b],
        f: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], if bias { Some(v[2]) } else { None }, geom)?;
            project(t, y, &r)
        }),
    }
}

/// A named randomized case generator.
pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut DetRng) -> Case,
}

/// One generator per differentiable tape op.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            make: |rng| {
                let (a, b, r) = (randn(&[5, 4], rng), randn(&[4, 6], rng), randn(&[5, 6], rng));
                Case {
                    inputs: vec![a, b],
                    f: Box::new(move |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "add_sub_mul",
            make: |rng| {
                let (a, b, r) = (randn(&[3, 4], rng), randn(&[3, 4], rng), randn(&[3, 4], rng));
                Case {
                    inputs: vec![a, b],
                    f: Box::new(move |t, v| {
                        let s = t.add(v[0], v[1])?;
                        let d = t.sub(v[0], v[1])?;
                        let m = t.mul(s, d)?;
                        let y = t.mul(m, v[0])?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "scale",
            make: |rng| unary_case(randn(&[7], rng), |t, x| Ok(t.scale(x, -1.7)), &[7], rng),
        },
        OpCase {
            name: "linear",
            make: |rng| {
                let (x, w, b, r) = (
                    randn(&[4, 3], rng),
                    randn(&[3, 5], rng),
                    randn(&[5], rng),
                    randn(&[4, 5], rng),
                );
                Case {
                    inputs: vec![x, w, b],
                    f: Box::new(move |t, v| {
                        let y = t.linear(v[0], v[1], v[2])?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "gelu",
            make: |rng| unary_case(randn(&[3, 5], rng).map(|v| 2.0 * v), |t, x| Ok(t.gelu(x)), &[3, 5], rng),
        },
        OpCase {
            name: "relu",
            make: |rng| unary_case(away_from_zero(&[3, 5], rng), |t, x| Ok(t.relu(x)), &[3, 5], rng),
        },
        OpCase {
            name: "sigmoid",
            make: |rng| unary_case(randn(&[3, 5], rng), |t, x| Ok(t.sigmoid(x)), &[3, 5], rng),
        },
        OpCase {
            name: "abs",
            make: |rng| unary_case(away_from_zero(&[3, 5], rng), |t, x| Ok(t.abs(x)), &[3, 5], rng),
        },
        OpCase {
            name: "square",
            make: |rng| unary_case(randn(&[3, 5], rng), |t, x| Ok(t.square(x)), &[3, 5], rng),
        },
        OpCase {
            name: "softmax_rows",
            make: |rng| unary_case(randn(&[3, 6], rng), |t, x| Ok(t.softmax_rows(x)), &[3, 6], rng),
        },
        OpCase {
            name: "layer_norm",
            make: |rng| {
                let (x, g, b, r) = (
                    randn(&[4, 6], rng),
                    randn(&[6], rng),
                    randn(&[6], rng),
                    randn(&[4, 6], rng),
                );
                Case {
                    inputs: vec![x, g, b],
                    f: Box::new(move |t, v| {
                        let y = t.layer_norm(v[0], v[1], v[2])?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "sum_mean",
            make: |rng| {
                let (x, r) = (randn(&[4, 3], rng), randn(&[4, 3], rng));
                Case {
                    inputs: vec![x],
                    f: Box::new(move |t, v| {
                        let s = project(t, v[0], &r)?;
                        let sq = t.square(v[0]);
                        let m = t.mean(sq);
                        let sm = t.mul(s, m)?;
                        Ok(sm)
                    }),
                }
            },
        },
        OpCase {
            name: "conv2d_3x3_replicate",
            make: |rng| conv_case(rng, ConvGeometry::new(3, 1, 1, Padding::Replicate), true),
        },
        OpCase {
            name: "conv2d_4x4_stride2",
            make: |rng| conv_case(rng, ConvGeometry::new(4, 2, 1, Padding::Replicate), true),
        },
        OpCase {
            name: "conv2d_zero_pad_no_bias",
            make: |rng| conv_case(rng, ConvGeometry::new(3, 1, 1, Padding::Zero), false),
        },
        OpCase {
            name: "conv2d_1x1",
            make: |rng| conv_case(rng, ConvGeometry::new(1, 1, 0, Padding::Zero), true),
        },
        OpCase {
            name: "upsample2x",
            make: |rng| unary_case(randn(&[2, 3, 2, 3], rng), |t, x| t.upsample2x(x), &[2, 3, 4, 6], rng),
        },
        OpCase {
            name: "chw_rows_roundtrip",
            make: |rng| {
                let (x, r1, r2) = (
                    randn(&[2, 3, 2, 2], rng),
                    randn(&[8, 3], rng),
                    randn(&[2, 3, 2, 2], rng),
                );
                Case {
                    inputs: vec![x],
                    f: Box::new(move |t, v| {
                        let rows = t.chw_to_rows(v[0])?;
                        let sq = t.square(rows);
                        let back = t.rows_to_chw(sq, 2, 2, 2)?;
                        let a = project(t, rows, &r1)?;
                        let b = project(t, back, &r2)?;
                        t.add(a, b)
                    }),
                }
            },
        },
        OpCase {
            name: "index_concat_rows",
            make: |rng| {
                let (a, b) = (randn(&[3, 4], rng), randn(&[2, 4], rng));
                let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
                let r = randn(&[7, 4], rng);
                Case {
                    inputs: vec![a, b],
                    f: Box::new(move |t, v| {
                        let c = t.concat_rows(&[v[0], v[1]])?;
                        let y = t.index_rows(c, idx.clone())?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "cross_entropy",
            make: |rng| {
                let x = randn(&[5, 4], rng);
                let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
                Case {
                    inputs: vec![x],
                    f: Box::new(move |t, v| t.cross_entropy(v[0], targets.clone())),
                }
            },
        },
        OpCase {
            name: "block_attention",
            make: |rng| {
                let (block, n) = (2, 3);
                let mut b = PlanBuilder::new(block);
                let trunk = b.push_trunk(n);
                b.push_branch(trunk, 0..n);
                b.push_branch(trunk, 1..n);
                let plan = Arc::new(b.build());
                let rows = plan.rows();
                let (q, k, vv, r) = (
                    randn(&[rows, 4], rng),
                    randn(&[rows, 4], rng),
                    randn(&[rows, 4], rng),
                    randn(&[rows, 4], rng),
                );
                Case {
                    inputs: vec![q, k, vv],
                    f: Box::new(move |t, v| {
                        let y = t.block_attention(v[0], v[1], v[2], 2, plan.clone())?;
                        project(t, y, &r)
                    }),
                }
            },
        },
        OpCase {
            name: "diff_w_h",
            make: |rng| {
                let (x, r1, r2) = (
                    randn(&[2, 3, 4, 4], rng),
                    randn(&[2, 3, 4, 3], rng),
                    randn(&[2, 3, 3, 4], rng),
                );
                Case {
                    inputs: vec![x],
                    f: Box::new(move |t, v| {
                        let dw = t.diff_w(v[0])?;
                        let dh = t.diff_h(v[0])?;
                        let a = project(t, dw, &r1)?;
                        let b = project(t, dh, &r2)?;
                        t.add(a, b)
                    }),
                }
            },
        },
        OpCase {
            name: "reshape",
            make: |rng| {
                let (x, r) = (randn(&[2, 6], rng), randn(&[3, 4], rng));
                Case {
                    inputs: vec![x],
                    f: Box::new(move |t, v| {
                        let y = t.reshape(v[0], &[3, 4])?;
                        let y = t.square(y);
                        project(t, y, &r)
                    }),
                }
            },
        },
    ]
}

/// Tiny transformer: `d_m = 8`, one layer, `n = 3`, `k = 2`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_m: 8,
        layers: 1,
        heads: 2,
        k: 2,
        n_lat: 6,
        n_min: 1,
        n: 3,
        init_std: 0.5,
        position_scale: 1.0,
    }
}

/// Random episode for [`tiny_model_config`] sized models.
pub fn random_episode(cfg: &ModelConfig, rng: &mut DetRng) -> EpisodeBatch {
    use crate::codebook::TokenGrid;
    use crate::pose::{normalize3, CameraPose, Quat};
    let tokens = (0..cfg.n)
        .map(|_| {
            let idx = (0..cfg.block()).map(|_| rng.random_range(0..cfg.n_lat)).collect();
            TokenGrid::new(cfg.k, idx, cfg.n_lat).unwrap()
        })
        .collect();
    let poses = (0..cfg.n)
        .map(|_| {
            let axis = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() + 0.1,
            ];
            let q = Quat::from_axis_angle(normalize3(axis), rng.random::<f64>() * 3.0);
            let pos = [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ];
            CameraPose::new(pos, q).unwrap()
        })
        .collect();
    EpisodeBatch::new(tokens, poses, cfg.n_min).unwrap()
}

/// Full tiny model: joint synthesis + pose loss as a function of every
/// parameter tensor.
pub fn tiny_model_case(rng: &mut DetRng) -> Case {
    let cfg = tiny_model_config();
    let model = Model::<f64>::new(cfg.clone(), rng).expect("valid tiny config");
    let episode = random_episode(&cfg, rng);
    let inputs = model.params.tensors().to_vec();
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let bound = crate::params::Bound::from_vars(v.to_vec());
            let out = model.forward_train(t, &bound, core::slice::from_ref(&episode), Tasks::Both)?;
            let a = loss_nvs(t, out.token_logits.unwrap(), &out.token_targets)?;
            let b = loss_pose(t, out.pose_estimates.unwrap(), &out.pose_targets)?;
            t.add(a, b)
        }),
    }
}

/// Worst relative error of each op over `cases` seeds.
pub fn run_op_suite(seed: u64, cases: usize) -> Result<Vec<(&'static str, f64)>> {
    op_suite()
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let mut worst = 0.0f64;
            for c in 0..cases {
                let mut rng = stream(seed, i as u64, c as u64);
                worst = worst.max(check(&(op.make)(&mut rng), FD_EPS)?);
            }
            Ok((op.name, worst))
        })
        .collect()
}

/// Worst relative error of the tiny model over `cases` seeds.
pub fn run_tiny_model(seed: u64, cases: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = seeded(seed.wrapping_add(c as u64));
        worst = worst.max(check(&tiny_model_case(&mut rng), FD_EPS)?);
    }
    Ok(worst)
}
