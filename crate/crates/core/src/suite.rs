//! The finite-difference suite: every differentiable operation on its own
//! (primitives) and the layers and model built from them (composites), all
//! in 64-bit.

use std::time::{Duration, Instant};

use crate::attention::{saa_fuse, FusionParams, Gsa, GsaSoftmaxAxis, Saa, SaaOptions, Tsa, TsaOptions};
use crate::error::Result;
use crate::gradcheck::{gradcheck_many, randn, GradcheckConfig, GradcheckReport};
use crate::loss::{bce_loss, combined_loss, dice_loss, LossConfig};
use crate::model::{
    decoder_stage, msc_cascade, msc_dense, msc_residual, DecoderStageOutput, ModelConfig, MscMode, TransAttUnet,
};
use crate::nn::{conv2d, maxpool2d, upsample_bilinear, BatchNorm2d, ConvBlock, Mode, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Composite,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub report: GradcheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max_rel={:.3e} tol={:.0e} coords={} ({:.2?})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_error,
            self.report.tol,
            self.report.coords_checked,
            self.elapsed
        )
    }
}

type CaseFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct Case {
    name: &'static str,
    kind: CaseKind,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

/// Reduces any output to a scalar that depends on every element.
fn probe(out: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let w = randn(out.shape(), &mut Rng::new(seed));
    Ok(out.mul(&w)?.sum_all())
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.uniform(0.5, 2.0)).collect(), shape).expect("consistent")
}

fn unit_interval(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.uniform(0.1, 0.9)).collect(), shape).expect("consistent")
}

fn binary(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        (0..n).map(|_| (rng.uniform(0.0, 1.0) < 0.4) as u8 as f64).collect(),
        shape,
    )
    .expect("consistent")
}

fn primitive(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
) -> Case {
    Case {
        name,
        kind: CaseKind::Primitive,
        inputs,
        f: Box::new(move |t| probe(f(t)?, 99)),
    }
}

fn composite(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
) -> Case {
    Case {
        name,
        kind: CaseKind::Composite,
        inputs,
        f: Box::new(move |t| probe(f(t)?, 98)),
    }
}

/// Loads `values` into `target`'s parameters in traversal order.
fn assign<P: Params<f64>>(target: &mut P, values: &[Tensor<f64>]) {
    let mut it = values.iter();
    target.visit_mut("", &mut |_, t, _| {
        *t = it.next().expect("one value per parameter").clone()
    });
}

fn params_of<P: Params<f64>>(p: &P) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t, _| out.push(t.detach()));
    out
}

fn cases() -> Result<Vec<Case>> {
    let mut rng = Rng::new(2024);
    let r = &mut rng;
    let mut cases = vec![
        primitive("add (broadcast)", vec![randn(&[2, 3, 4], r), randn(&[3, 4], r)], |t| {
            t[0].add(&t[1])
        }),
        primitive("sub (channel)", vec![randn(&[2, 3, 2, 2], r), randn(&[3], r)], |t| {
            t[0].sub(&t[1])
        }),
        primitive("mul (scalar)", vec![randn(&[3, 4], r), randn(&[1], r)], |t| {
            t[0].mul(&t[1])
        }),
        primitive("div", vec![randn(&[3, 4], r), positive(&[3, 4], r)], |t| {
            t[0].div(&t[1])
        }),
        primitive("relu", vec![randn(&[4, 5], r)], |t| t[0].relu()),
        primitive("sigmoid", vec![randn(&[4, 5], r)], |t| t[0].sigmoid()),
        primitive("exp", vec![randn(&[4, 5], r)], |t| t[0].exp()),
        primitive("log", vec![positive(&[4, 5], r)], |t| t[0].log()),
        primitive("neg", vec![randn(&[6], r)], |t| t[0].neg()),
        primitive("scale", vec![randn(&[6], r)], |t| t[0].scale(-1.7)),
        primitive("add_scalar", vec![randn(&[6], r)], |t| t[0].add_scalar(0.3)),
        primitive("clamp", vec![randn(&[4, 5], r)], |t| t[0].clamp(-0.8, 0.8)),
        primitive("square", vec![randn(&[4, 5], r)], |t| t[0].square()),
        primitive("one_minus", vec![randn(&[4, 5], r)], |t| t[0].one_minus()),
        primitive(
            "matmul (batched)",
            vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)],
            |t| t[0].matmul(&t[1]),
        ),
        primitive(
            "matmul (shared rhs)",
            vec![randn(&[2, 2, 3, 4], r), randn(&[2, 4, 3], r)],
            |t| t[0].matmul(&t[1]),
        ),
        primitive("softmax", vec![randn(&[2, 3, 4], r)], |t| t[0].softmax(1)),
        primitive("reshape", vec![randn(&[2, 6], r)], |t| t[0].reshape(&[3, 4])),
        primitive("permute", vec![randn(&[2, 3, 4], r)], |t| t[0].permute(&[2, 0, 1])),
        primitive("transpose", vec![randn(&[2, 3, 4], r)], |t| t[0].transpose(1, 2)),
        primitive("concat", vec![randn(&[2, 1, 3], r), randn(&[2, 2, 3], r)], |t| {
            Tensor::concat(&[&t[0], &t[1]], 1)
        }),
        primitive("narrow", vec![randn(&[2, 5, 3], r)], |t| t[0].narrow(1, 1, 3)),
        primitive("sum", vec![randn(&[2, 3, 4], r)], |t| t[0].sum(&[0, 2])),
        primitive("mean", vec![randn(&[2, 3, 4], r)], |t| t[0].mean(&[1])),
        primitive(
            "conv2d (pad 1)",
            vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            |t| conv2d(&t[0], &t[1], Some(&t[2]), 1, 1),
        ),
        primitive(
            "conv2d (stride 2)",
            vec![randn(&[1, 2, 6, 6], r), randn(&[2, 2, 3, 3], r)],
            |t| conv2d(&t[0], &t[1], None, 2, 0),
        ),
        primitive(
            "conv2d (1x1)",
            vec![randn(&[2, 3, 3, 3], r), randn(&[4, 3, 1, 1], r)],
            |t| conv2d(&t[0], &t[1], None, 1, 0),
        ),
        primitive("maxpool2d", vec![randn(&[2, 2, 4, 6], r)], |t| maxpool2d(&t[0], 2, 2)),
        primitive("upsample_bilinear", vec![randn(&[1, 2, 3, 2], r)], |t| {
            upsample_bilinear(&t[0], (6, 4))
        }),
        primitive("upsample_bilinear (x4)", vec![randn(&[1, 1, 2, 2], r)], |t| {
            upsample_bilinear(&t[0], (8, 8))
        }),
        primitive(
            "norm2d (train)",
            vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)],
            |t| {
                let mut bn = BatchNorm2d::new(3)?;
                bn.gamma = t[1].clone();
                bn.beta = t[2].clone();
                bn.forward(&t[0], Mode::Train)
            },
        ),
        primitive(
            "norm2d (eval)",
            vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)],
            |t| {
                let mut bn = BatchNorm2d::new(3)?;
                bn.set_running_stats(Some(crate::nn::RunningStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                }))?;
                bn.gamma = t[1].clone();
                bn.beta = t[2].clone();
                bn.forward(&t[0], Mode::Eval)
            },
        ),
    ];

    let loss_cfg = LossConfig::default();
    let (p, y) = (unit_interval(&[2, 1, 3, 3], r), binary(&[2, 1, 3, 3], r));
    for (name, f) in [
        (
            "bce_loss",
            bce_loss::<f64> as fn(&Tensor<f64>, &Tensor<f64>, &LossConfig) -> Result<Tensor<f64>>,
        ),
        ("dice_loss", dice_loss::<f64>),
        ("combined_loss", combined_loss::<f64>),
    ] {
        let (y, cfg) = (y.clone(), loss_cfg.clone());
        cases.push(composite(name, vec![p.clone()], move |t| f(&t[0], &y, &cfg)));
    }

    let block = ConvBlock::<f64>::new(2, 3, true, r)?;
    let mut inputs = vec![randn(&[2, 2, 4, 4], r)];
    inputs.extend(params_of(&block));
    cases.push(composite("conv_block", inputs, move |t| {
        let mut b = block.clone();
        assign(&mut b, &t[1..]);
        b.forward(&t[0], Mode::Train)
    }));

    for heads in [1, 4] {
        let opts = TsaOptions {
            heads,
            share_qkv: false,
            out_proj: true,
        };
        let tsa = Tsa::<f64>::new(8, (2, 2), opts, r)?;
        let mut inputs = vec![randn(&[1, 8, 2, 2], r)];
        inputs.extend(params_of(&tsa));
        let name = if heads == 1 { "tsa (1 head)" } else { "tsa (4 heads)" };
        cases.push(composite(name, inputs, move |t| {
            let mut m = tsa.clone();
            assign(&mut m, &t[1..]);
            m.forward(&t[0])
        }));
    }
    for axis in [GsaSoftmaxAxis::Source, GsaSoftmaxAxis::Target] {
        let gsa = Gsa::<f64>::new(8, axis, r)?;
        let mut inputs = vec![randn(&[1, 8, 2, 2], r)];
        inputs.extend(params_of(&gsa));
        let name = if axis == GsaSoftmaxAxis::Source {
            "gsa"
        } else {
            "gsa (target axis)"
        };
        cases.push(composite(name, inputs, move |t| {
            let mut m = gsa.clone();
            assign(&mut m, &t[1..]);
            m.forward(&t[0])
        }));
    }
    cases.push(composite(
        "saa_fuse",
        vec![
            randn(&[1, 8, 2, 2], r),
            randn(&[1, 8, 2, 2], r),
            randn(&[1, 8, 2, 2], r),
            randn(&[1], r),
            randn(&[1], r),
        ],
        |t| {
            let p = FusionParams {
                lambda1: Some(t[3].clone()),
                lambda2: Some(t[4].clone()),
            };
            saa_fuse(&t[0], Some(&t[1]), Some(&t[2]), &p)
        },
    ));
    let saa_opts = SaaOptions {
        use_tsa: true,
        use_gsa: true,
        tsa: TsaOptions {
            heads: 8,
            share_qkv: false,
            out_proj: true,
        },
        gsa_softmax_axis: GsaSoftmaxAxis::Source,
    };
    let mut saa = Saa::<f64>::new(8, (2, 2), saa_opts, r)?;
    saa.fusion.lambda1 = Some(Tensor::scalar(0.6));
    saa.fusion.lambda2 = Some(Tensor::scalar(-0.4));
    let mut inputs = vec![randn(&[1, 8, 2, 2], r)];
    inputs.extend(params_of(&saa));
    cases.push(composite("saa", inputs, move |t| {
        let mut m = saa.clone();
        assign(&mut m, &t[1..]);
        m.forward(&t[0])
    }));

    let block = ConvBlock::<f64>::new(6, 2, true, r)?;
    let mut inputs = vec![randn(&[1, 4, 2, 2], r), randn(&[1, 2, 4, 4], r)];
    inputs.extend(params_of(&block));
    cases.push(composite("decoder_stage", inputs, move |t| {
        let mut b = block.clone();
        assign(&mut b, &t[2..]);
        decoder_stage(&t[0], &t[1], &b, Mode::Train)
    }));

    let widths = [4usize, 3, 2];
    let stage_shapes: Vec<Vec<usize>> = (0..3).map(|i| vec![1, widths[i], 2 << i, 2 << i]).collect();
    for mode in [MscMode::Cascade, MscMode::Residual, MscMode::Dense] {
        let msc = crate::model::Msc::<f64>::new(mode, &widths, true, r)?;
        let mut inputs: Vec<Tensor<f64>> = stage_shapes.iter().map(|s| randn(s, r)).collect();
        inputs.extend(params_of(&msc));
        let name = match mode {
            MscMode::Cascade => "msc_cascade",
            MscMode::Residual => "msc_residual",
            _ => "msc_dense",
        };
        cases.push(composite(name, inputs, move |t| {
            let mut m = msc.clone();
            assign(&mut m, &t[3..]);
            let stages: Vec<DecoderStageOutput<f64>> = (0..3)
                .map(|i| DecoderStageOutput {
                    stage_index: i + 1,
                    features: t[i].clone(),
                    spatial_scale: 4 >> i,
                })
                .collect();
            match mode {
                MscMode::Cascade => msc_cascade(&stages, &m.fuse[0], Mode::Train),
                MscMode::Residual => msc_residual(&stages, &m.fuse, Mode::Train),
                _ => msc_dense(&stages, &m.fuse, Mode::Train),
            }
        }));
    }

    let mut model = TransAttUnet::<f64>::new(suite_model_config())?;
    model.saa.fusion.lambda1 = Some(Tensor::scalar(0.5));
    model.saa.fusion.lambda2 = Some(Tensor::scalar(-0.3));
    let mut inputs = vec![randn(&[1, 1, 16, 16], r)];
    inputs.extend(params_of(&model));
    cases.push(composite("model (1x1x16x16, depth 2)", inputs, move |t| {
        let mut m = model.clone();
        m.set_params(&t[1..])?;
        m.forward(&t[0], Mode::Train)
    }));
    Ok(cases)
}

/// The model checked end to end: every mechanism on, at the smallest size
/// with two pooling stages.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        depth: 2,
        heads: 2,
        image_size: [16, 16],
        msc_mode: MscMode::Residual,
        seed: 7,
        ..ModelConfig::default()
    }
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_gradcheck_suite(filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in cases()? {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let tol = match case.kind {
            CaseKind::Primitive => PRIMITIVE_TOL,
            CaseKind::Composite => COMPOSITE_TOL,
        };
        // composites contain relu/max kinks, so keep the step small
        let eps = match case.kind {
            CaseKind::Primitive => 1e-5,
            CaseKind::Composite => 1e-6,
        };
        let cfg = GradcheckConfig {
            eps,
            ..GradcheckConfig::with_tol(tol)
        };
        let start = Instant::now();
        let report = gradcheck_many(&case.f, &case.inputs, &cfg)?;
        out.push(CaseResult {
            name: case.name.to_string(),
            kind: case.kind,
            report,
            elapsed: start.elapsed(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_by_name() {
        let r = run_gradcheck_suite(Some("softmax")).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].passed(), "{}", r[0].line());
        assert_eq!(r[0].kind, CaseKind::Primitive);
    }
}
