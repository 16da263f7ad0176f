//! A named battery of gradient checks covering every differentiable op and
//! the block forwards. The CLI runs it on demand and the test suite asserts
//! every row stays under tolerance; both share this table so they cannot
//! drift apart.

use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::autodiff::{NodeId, Tape};
use crate::blocks::{
    acfm_forward_t, acfm_global_t, acfm_local_t, caf_block_forward_t, msnn_forward_t, AcfmNodes,
    AcfmParams, CafBlockHyper, CafBlockNodes, CafBlockParams, MsnnNodes, MsnnParams,
};
use crate::conv::Conv2dGeom;
use crate::error::Result;
use crate::tensor::Tensor4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckRow {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.passes(tol)
    }
}

/// Tolerance every row is expected to beat.
pub const GRAD_TOL: f64 = 1e-4;

fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor4<f64> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor4::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized to match")
}

fn weighted_sum(tape: &mut Tape<f64>, x: NodeId, weight: &Tensor4<f64>) -> Result<NodeId> {
    let w = tape.leaf(weight.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum_all(p))
}

fn square_sum(tape: &mut Tape<f64>, x: NodeId) -> Result<NodeId> {
    let s = tape.mul(x, x)?;
    Ok(tape.sum_all(s))
}

/// Run the whole battery with `cfg`. Rows come back in a stable order.
pub fn standard_grad_checks(cfg: &GradCheckConfig) -> Result<Vec<CheckRow>> {
    standard_grad_checks_seeded(cfg, 0xc4ec)
}

/// Same battery with the input tensors drawn from `input_seed`, so the
/// ops can be re-checked on many independent instances.
pub fn standard_grad_checks_seeded(
    cfg: &GradCheckConfig,
    input_seed: u64,
) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        rows.push(CheckRow { name, report });
    };
    let mut r = ChaCha8Rng::seed_from_u64(input_seed);

    {
        let a = rand4(&mut r, (2, 3, 2, 2), -1.0, 1.0);
        let b = rand4(&mut r, (2, 3, 2, 2), -1.0, 1.0);
        push(
            "add",
            grad_check(
                &[a, b],
                |tape, ids| {
                    let s = tape.add(ids[0], ids[1])?;
                    square_sum(tape, s)
                },
                cfg,
            )?,
        );
    }
    {
        let a = rand4(&mut r, (2, 2, 3, 2), -1.0, 1.0);
        let b = rand4(&mut r, (2, 2, 3, 2), -1.0, 1.0);
        push(
            "mul",
            grad_check(&[a, b], |tape, ids| {
                let p = tape.mul(ids[0], ids[1])?;
                Ok(tape.sum_all(p))
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 2, 3, 4), -1.0, 1.0);
        push(
            "relu",
            grad_check(&[x], |tape, ids| {
                let h = tape.relu(ids[0]);
                square_sum(tape, h)
            }, cfg)?,
        );
    }
    for (name, ta, tb, sa, sb) in [
        ("matmul_nn", false, false, (2, 1, 3, 4), (2, 1, 4, 2)),
        ("matmul_nt", false, true, (1, 1, 3, 4), (1, 1, 2, 4)),
        ("matmul_tn", true, false, (1, 1, 4, 3), (1, 1, 4, 2)),
        ("matmul_tt", true, true, (1, 1, 4, 3), (1, 1, 2, 4)),
    ] {
        let a = rand4(&mut r, sa, -1.0, 1.0);
        let b = rand4(&mut r, sb, -1.0, 1.0);
        push(
            name,
            grad_check(&[a, b], move |tape, ids| {
                let m = tape.matmul(ids[0], ids[1], ta, tb)?;
                square_sum(tape, m)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 1, 3, 5), -2.0, 2.0);
        let wt = rand4(&mut r, (1, 1, 3, 5), -1.0, 1.0);
        push(
            "softmax_rows",
            grad_check(&[x], move |tape, ids| {
                let s = tape.softmax_rows(ids[0]);
                weighted_sum(tape, s, &wt)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (2, 4, 3, 3), -1.0, 1.0);
        let gamma = rand4(&mut r, (1, 4, 1, 1), 0.5, 1.5);
        let beta = rand4(&mut r, (1, 4, 1, 1), -0.5, 0.5);
        let wt = rand4(&mut r, (2, 4, 3, 3), -1.0, 1.0);
        push(
            "layer_norm",
            grad_check(&[x, gamma, beta], move |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_sum(tape, y, &wt)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 6, 2, 2), -1.0, 1.0);
        let wt = rand4(&mut r, (1, 6, 2, 2), -1.0, 1.0);
        push(
            "channel_shuffle",
            grad_check(&[x], move |tape, ids| {
                let s = tape.channel_shuffle(ids[0], 3)?;
                weighted_sum(tape, s, &wt)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 2, 3, 4), -1.0, 1.0);
        let wt = rand4(&mut r, (1, 1, 4, 6), -1.0, 1.0);
        push(
            "reshape",
            grad_check(&[x], move |tape, ids| {
                let s = tape.reshape(ids[0], (1, 1, 4, 6))?;
                weighted_sum(tape, s, &wt)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 5, 2, 2), -1.0, 1.0);
        push(
            "slice_channels",
            grad_check(&[x], |tape, ids| {
                let s = tape.slice_channels(ids[0], 1, 3)?;
                square_sum(tape, s)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 1, 2, 3), -1.0, 1.0);
        push(
            "exp",
            grad_check(&[x], |tape, ids| {
                let e = tape.exp(ids[0]);
                Ok(tape.sum_all(e))
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 1, 2, 3), -1.0, 1.0);
        let s = Tensor4::scalar(1.7);
        push(
            "div_by_scalar",
            grad_check(&[x, s], |tape, ids| {
                let d = tape.div_by_scalar(ids[0], ids[1])?;
                square_sum(tape, d)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 2, 2, 2), -1.0, 1.0);
        push(
            "scale",
            grad_check(&[x], |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                let s = tape.scale(sq, 2.5);
                Ok(tape.sum_all(s))
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (2, 2, 2, 2), -1.0, 1.0);
        push(
            "sum_all",
            grad_check(&[x], |tape, ids| Ok(tape.sum_all(ids[0])), cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 4, 5, 5), -1.0, 1.0);
        let w = rand4(&mut r, (6, 2, 3, 3), -0.5, 0.5);
        let b = rand4(&mut r, (1, 6, 1, 1), -0.2, 0.2);
        let geom = Conv2dGeom {
            stride: (2, 1),
            padding: (1, 2),
            dilation: (2, 1),
            groups: 2,
        };
        let wt = rand4(&mut r, (1, 6, 2, 7), -1.0, 1.0);
        push(
            "conv2d",
            grad_check(&[x, w, b], move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), geom)?;
                weighted_sum(tape, y, &wt)
            }, cfg)?,
        );
    }
    {
        let x = rand4(&mut r, (1, 4, 4, 4), -1.0, 1.0);
        let w = rand4(&mut r, (4, 6, 3, 3), -0.5, 0.5);
        let b = rand4(&mut r, (1, 4, 1, 1), -0.2, 0.2);
        let wt = rand4(&mut r, (1, 4, 4, 4), -1.0, 1.0);
        push(
            "conv3d_singleton",
            grad_check(&[x, w, b], move |tape, ids| {
                let y = tape.conv3d_singleton(ids[0], ids[1], Some(ids[2]), (1, 1, 1), 2)?;
                weighted_sum(tape, y, &wt)
            }, cfg)?,
        );
    }
    {
        let logits = rand4(&mut r, (2, 3, 2, 2), -2.0, 2.0);
        let targets = Tensor4::new(
            (2, 3, 2, 2),
            (0..24).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        push(
            "bce_with_logits_mean",
            grad_check(&[logits], move |tape, ids| {
                tape.bce_with_logits_mean(ids[0], targets.clone())
            }, cfg)?,
        );
    }
    {
        let pred = rand4(&mut r, (1, 3, 4, 4), -1.0, 1.0);
        let target = rand4(&mut r, (1, 3, 4, 4), -1.0, 1.0);
        let mask = Tensor4::new(
            (1, 3, 4, 4),
            (0..48).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        push(
            "masked_l1_mean",
            grad_check(&[pred], move |tape, ids| {
                tape.masked_l1_mean(ids[0], target.clone(), mask.clone())
            }, cfg)?,
        );
    }
    {
        let (n, k, h, w) = (1usize, 4usize, 3usize, 3usize);
        let logits = rand4(&mut r, (n, k, h, w), -2.0, 2.0);
        let mut onehot = Tensor4::zeros((n, k, h, w));
        let mut mask = Tensor4::zeros((n, 1, h, w));
        for y in 0..h {
            for x in 0..w {
                let cls = r.gen_range(0..k);
                *onehot.at_mut(0, cls, y, x) = 1.0;
                if r.gen_bool(0.6) || (y == 0 && x == 0) {
                    *mask.at_mut(0, 0, y, x) = 1.0;
                }
            }
        }
        push(
            "masked_ce_mean",
            grad_check(&[logits], move |tape, ids| {
                tape.masked_ce_mean(ids[0], onehot.clone(), mask.clone())
            }, cfg)?,
        );
    }

    let mut br = ChaCha8Rng::seed_from_u64(0xb10c);
    {
        let p = AcfmParams::<f64>::init(3, &mut br)?;
        let tensors: Vec<Tensor4<f64>> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let y = rand4(&mut br, (1, 3, 4, 4), -1.0, 1.0);
        let wt = rand4(&mut br, (1, 3, 4, 4), -1.0, 1.0);
        let sg = p.shuffle_groups;
        for (name, which) in [("acfm_global", 0), ("acfm_local", 1), ("acfm_forward", 2)] {
            let y = y.clone();
            let wt = wt.clone();
            push(
                name,
                grad_check(&tensors, move |tape, ids| {
                    let nodes = AcfmNodes::from_slice(ids);
                    let yid = tape.leaf(y.clone());
                    let out = match which {
                        0 => acfm_global_t(tape, yid, &nodes)?,
                        1 => acfm_local_t(tape, yid, &nodes, sg)?,
                        _ => acfm_forward_t(tape, yid, &nodes, sg)?,
                    };
                    weighted_sum(tape, out, &wt)
                }, cfg)?,
            );
        }
    }
    {
        let p = MsnnParams::<f64>::init(3, 6, (2, 3), &mut br)?;
        let tensors: Vec<Tensor4<f64>> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let x = rand4(&mut br, (1, 3, 4, 4), -1.0, 1.0);
        let wt = rand4(&mut br, (1, 3, 4, 4), -1.0, 1.0);
        push(
            "msnn_forward",
            grad_check(&tensors, move |tape, ids| {
                let nodes = MsnnNodes::from_slice(ids);
                let xid = tape.leaf(x.clone());
                let out = msnn_forward_t(tape, xid, &nodes, (2, 3))?;
                weighted_sum(tape, out, &wt)
            }, cfg)?,
        );
    }
    {
        let p = CafBlockParams::<f64>::init(4, &mut br)?;
        let hyper = CafBlockHyper::of(&p);
        let tensors: Vec<Tensor4<f64>> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let x = rand4(&mut br, (1, 4, 3, 3), -1.0, 1.0);
        let wt = rand4(&mut br, (1, 4, 3, 3), -1.0, 1.0);
        push(
            "caf_block_forward",
            grad_check(&tensors, move |tape, ids| {
                let nodes = CafBlockNodes::from_slice(ids);
                let xid = tape.leaf(x.clone());
                let out = caf_block_forward_t(tape, xid, &nodes, &hyper)?;
                weighted_sum(tape, out, &wt)
            }, cfg)?,
        );
    }

    Ok(rows)
}
