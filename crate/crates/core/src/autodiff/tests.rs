use super::*;
use crate::conv::{BatchNormStats, ConvSpec, NormMode};
use crate::error::{Error, Result};
use crate::tensor::{PoolKind, Shape, SoftmaxAxis, Tensor};

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn weights(shape: Shape) -> Tensor {
    projection_weights(shape)
}

fn check<F>(name: &str, shapes: &[Shape], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let cfg = GradCheckConfig::default();
    let r = gradcheck_random(name, |t, v| project(t, f(t, v)?), shapes, 3, &cfg).unwrap();
    assert!(r.passed(cfg.tol), "{r:?}");
}

#[test]
fn sum_gives_ones() {
    let tape = Tape::new();
    let x = tape.var(weights(s(1, 2, 3, 3)));
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn square_sum_gives_two_x() {
    let tape = Tape::new();
    let xv = weights(s(1, 2, 3, 3));
    let x = tape.var(xv.clone());
    let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros(s(1, 1, 2, 2)));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_gradients_sum() {
    // y = 3x + x^2 through two separate branches
    let tape = Tape::new();
    let xv = weights(s(1, 1, 2, 3));
    let x = tape.var(xv.clone());
    let a = x.scale(3.0);
    let b = x.square();
    let g = tape.backward(a.add(b).unwrap().sum()).unwrap();
    let expect = xv.map(|v| 3.0 + 2.0 * v);
    assert!(g.get(x).unwrap().max_abs_diff(&expect).unwrap() < 1e-15);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.var(weights(s(1, 1, 2, 2)));
    let c = tape.constant(weights(s(1, 1, 2, 2)));
    let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x.detach()).is_none());
}

#[test]
fn grad_elementwise() {
    let sh = [s(2, 3, 3, 2), s(2, 3, 3, 2)];
    check("add", &sh, |_, v| v[0].add(v[1]));
    check("sub", &sh, |_, v| v[0].sub(v[1]));
    check("mul", &sh, |_, v| v[0].mul(v[1]));
    check("div", &sh, |_, v| v[0].div(v[1].square().add_scalar(0.5)));
    check("maximum", &sh, |_, v| v[0].maximum(v[1]));
    check("minimum", &sh, |_, v| v[0].minimum(v[1]));
    check("broadcast_mul", &[s(2, 3, 3, 2), s(2, 3, 1, 1)], |_, v| v[0].mul(v[1]));
    check("broadcast_add", &[s(2, 3, 1, 1), s(2, 3, 3, 2)], |_, v| v[0].add(v[1]));
}

#[test]
fn grad_unary() {
    let sh = [s(1, 2, 3, 3)];
    check("relu", &sh, |_, v| Ok(v[0].relu()));
    check("silu", &sh, |_, v| Ok(v[0].silu()));
    check("sigmoid", &sh, |_, v| Ok(v[0].sigmoid()));
    check("exp", &sh, |_, v| Ok(v[0].exp()));
    check("ln", &sh, |_, v| Ok(v[0].square().add_scalar(0.1).ln()));
    check("sqrt", &sh, |_, v| Ok(v[0].square().add_scalar(0.1).sqrt()));
    check("atan", &sh, |_, v| Ok(v[0].atan()));
    check("scale", &sh, |_, v| Ok(v[0].scale(-2.5)));
    check("clamp", &sh, |_, v| Ok(v[0].clamp(-0.5, 0.5)));
}

#[test]
fn grad_reductions_and_shapes() {
    check("sum", &[s(1, 2, 3, 3)], |_, v| Ok(v[0].sum()));
    check("mean", &[s(1, 2, 3, 3)], |_, v| Ok(v[0].mean()));
    check("sum_spatial", &[s(2, 3, 3, 2)], |_, v| Ok(v[0].sum_spatial()));
    check("reshape", &[s(2, 3, 3, 2)], |_, v| v[0].reshape([2, 1, 9, 2]));
    check("transpose", &[s(2, 1, 3, 4)], |_, v| Ok(v[0].transpose_last2()));
    check("matmul", &[s(2, 1, 3, 4), s(2, 1, 4, 2)], |_, v| v[0].matmul(v[1]));
    check("concat", &[s(1, 2, 3, 3), s(1, 1, 3, 3)], |_, v| Var::concat(&[v[0], v[1], v[0]]));
    check("slice", &[s(2, 5, 2, 2)], |_, v| v[0].slice_channels(1, 3));
    check("split", &[s(1, 6, 2, 2)], |_, v| {
        let p = v[0].split_channels(&[1, 2, 3])?;
        p[2].slice_channels(0, 1)?.add(p[0])?.mul(p[1].slice_channels(1, 1)?)
    });
    check("shuffle", &[s(1, 8, 2, 2)], |_, v| v[0].channel_shuffle(4));
    check("gather", &[s(1, 2, 3, 3)], |_, v| v[0].gather(vec![0, 4, 4, 17]));
}

#[test]
fn grad_softmax_norm_pool() {
    check("softmax_channel", &[s(2, 4, 3, 3)], |_, v| Ok(v[0].softmax(SoftmaxAxis::Channel)));
    check("softmax_spatial", &[s(2, 4, 3, 3)], |_, v| Ok(v[0].softmax(SoftmaxAxis::Spatial)));
    check("layer_norm", &[s(2, 4, 3, 3), s(1, 4, 1, 1), s(1, 4, 1, 1)], |_, v| {
        v[0].layer_norm(v[1], v[2], 1e-6)
    });
    for mode in [NormMode::Train, NormMode::Eval] {
        check("batch_norm", &[s(3, 2, 3, 3), s(1, 2, 1, 1), s(1, 2, 1, 1)], move |_, v| {
            let mut running = BatchNormStats::new(2);
            running.mean = vec![0.1, -0.2];
            running.var = vec![0.5, 1.5];
            Ok(v[0].batch_norm(v[1], v[2], &running, mode, 1e-5)?.0)
        });
    }
    check("gap", &[s(2, 3, 3, 3)], |_, v| Ok(v[0].global_pool(PoolKind::Average)));
    check("gmp", &[s(2, 3, 3, 3)], |_, v| Ok(v[0].global_pool(PoolKind::Max)));
}

#[test]
fn grad_convolutions() {
    let cases = [
        ConvSpec::standard(2, 3, 3),
        ConvSpec::dilated(2, 3, 3, 2),
        ConvSpec::depthwise(3, 5),
        ConvSpec::pointwise(3, 2),
        ConvSpec::standard(2, 2, 3).with_stride(2),
    ];
    for spec in cases {
        let geo = spec.geometry();
        let x = s(2, spec.in_channels, 5, 6);
        check("conv2d", &[x, spec.weight_shape(), s(1, spec.out_channels, 1, 1)], move |_, v| {
            v[0].conv2d(v[1], Some(v[2]), geo)
        });
    }
}

#[test]
fn grad_deformable() {
    let spec = ConvSpec::deformable(2, 3, 3);
    let geo = spec.geometry();
    let shapes = [s(1, 2, 5, 5), s(1, 18, 5, 5), spec.weight_shape(), s(1, 3, 1, 1)];
    // offsets in [-1, 1] scaled down keep most taps strictly inside cells
    check("deform_conv2d", &shapes, move |_, v| {
        v[0].deform_conv2d(v[1].scale(0.7).add_scalar(0.13), v[2], Some(v[3]), geo)
    });
}

#[test]
fn grad_fft_real_loss() {
    check("fft2d_re", &[s(1, 2, 5, 4)], |_, v| Ok(ComplexVar::real(v[0]).fft2d()?.re));
    check("fft2d_im", &[s(1, 2, 4, 4)], |_, v| Ok(ComplexVar::real(v[0]).fft2d()?.im.unwrap()));
    check("fft2d_power", &[s(1, 1, 6, 5)], |_, v| {
        let f = ComplexVar::real(v[0]).fft2d()?;
        f.re.square().add(f.im.unwrap().square())
    });
    check("ifft2d_complex", &[s(1, 2, 3, 5), s(1, 2, 3, 5)], |_, v| {
        let c = ComplexVar { re: v[0], im: Some(v[1]) };
        let r = c.ifft2d()?;
        r.re.add(r.im.unwrap().scale(0.3))
    });
    check("spectrum_product", &[s(1, 2, 4, 5), s(1, 2, 4, 5)], |_, v| {
        let a = ComplexVar::real(v[0]).fft2d()?;
        let b = ComplexVar::real(v[1]).fft2d()?;
        a.mul(&b, false)?.ifft2d()?.take_real(Some(1e-6))
    });
    check("spectrum_correlation", &[s(1, 1, 4, 4), s(1, 1, 4, 4)], |_, v| {
        let a = ComplexVar::real(v[0]).fft2d()?;
        let b = ComplexVar::real(v[1]).fft2d()?;
        a.mul(&b, true)?.ifft2d()?.take_real(Some(1e-6))
    });
    check("spectrum_chunks", &[s(1, 6, 4, 4)], |_, v| {
        let f = ComplexVar::real(v[0]).fft2d()?;
        let parts = f.split_channels(&[2, 2, 2])?;
        ComplexVar::concat(&[parts[2], parts[0], parts[1]])?.ifft2d()?.take_real(None)
    });
}

#[test]
fn grad_attention() {
    let sh = [s(2, 3, 3, 2), s(2, 3, 3, 2), s(2, 3, 3, 2)];
    check("attention", &sh, |_, v| v[0].attention(v[1], v[2], 1.0 / 3f64.sqrt()));
}

#[test]
fn attention_matches_materialized() {
    let q = weights(s(1, 2, 3, 3));
    let k = weights(s(1, 2, 3, 3)).map(|v| v * 1.7 - 0.1);
    let v = weights(s(1, 2, 3, 3)).map(|v| v.sin());
    let scale = 0.5;
    let a = attention_weights(&q, &k, scale).unwrap();
    // out(b, c, i) = sum_j A(i, j) v(c, j)
    let vt = v.reshape([1, 1, 2, 9]).unwrap().transpose_last2();
    let expect = crate::tensor::matmul_batched(&a, &vt).unwrap().transpose_last2().reshape([1, 2, 3, 3]).unwrap();
    let got = attention_forward(&q, &k, &v, scale).unwrap();
    assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn take_real_tolerance() {
    let tape = Tape::new();
    let re = tape.var(Tensor::zeros(s(1, 1, 2, 2)));
    let im = tape.var(Tensor::full(s(1, 1, 2, 2), 1e-3));
    let c = ComplexVar { re, im: Some(im) };
    assert!(matches!(c.take_real(Some(1e-6)), Err(Error::ImaginaryResidue { .. })));
    assert!(c.take_real(None).is_ok());
}

#[test]
fn kink_gap_tracks_relu() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1e-7, 2.0]).unwrap());
    let _ = x.relu();
    assert!(tape.kink_gap() <= 1e-7);
}
