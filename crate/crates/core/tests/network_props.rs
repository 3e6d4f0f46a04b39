use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpcam::autodiff::check::{check_gradients, GradCheckConfig};
use sharpcam::autodiff::{Graph, Padding, Tensor};
use sharpcam::network::{forward, Architecture, ConvBlock, ForwardTrace, ModelParams, Pooling};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Direct nested-loop convolution with "same" padding split as
/// `total / 2` before and the rest after.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, same: bool) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow, pt, pl) = if same {
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let th = ((oh - 1) * stride + kh).saturating_sub(h);
        let tw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, th / 2, tw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let xv = |b: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let i = (oi * stride + a) as isize - pt as isize;
                                let j = (oj * stride + bb) as isize - pl as isize;
                                acc += xv(b, ic, i, j) * w.data()[((oc * c + ic) * kh + a) * kw + bb];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

fn conv_graph(x: &Tensor, w: &Tensor, stride: usize, pad: Padding) -> Tensor {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(w.clone());
    let y = g.conv2d(xi, wi, stride, pad).unwrap();
    g.eval(&[y]).unwrap().remove(0)
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1),
        ([1, 2, 5, 5], [3, 2, 3, 3], 2),
        ([2, 3, 8, 7], [4, 3, 3, 3], 2),
        ([1, 1, 6, 9], [2, 1, 2, 4], 3),
        ([2, 2, 4, 4], [1, 2, 1, 1], 1),
    ];
    for (xs, ws, stride) in cases {
        let x = uniform(&mut rng, &xs, -2.0, 2.0);
        let w = uniform(&mut rng, &ws, -2.0, 2.0);
        for (pad, same) in [(Padding::Valid, false), (Padding::Same, true)] {
            let got = conv_graph(&x, &w, stride, pad);
            let want = conv_oracle(&x, &w, stride, same);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12, "{xs:?} {ws:?} s{stride} {pad:?}");
            }
        }
    }
}

#[test]
fn conv_small_examples() {
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let doubled = conv_graph(&x, &Tensor::full(&[1, 1, 1, 1], 2.0), 1, Padding::Valid);
    assert_eq!(doubled.data(), x.map(|v| 2.0 * v).data());
    let avg = conv_graph(&x, &Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0), 1, Padding::Valid);
    assert_eq!(avg.shape(), &[1, 1, 1, 1]);
    assert!((avg.data()[0] - 5.0).abs() < 1e-12);
}

#[test]
fn global_average_pool_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[3, 4, 5, 2], -2.0, 2.0);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let p = g.global_avg_pool(xi).unwrap();
    let got = g.eval(&[p]).unwrap().remove(0);
    assert_eq!(got.shape(), &[3, 4]);
    for (k, plane) in x.data().chunks(10).enumerate() {
        let want = plane.iter().sum::<f64>() / 10.0;
        assert!((got.data()[k] - want).abs() <= 1e-12);
    }
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 0.7));
    let s = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (pc, ps) = (g.global_avg_pool(c).unwrap(), g.global_avg_pool(s).unwrap());
    let v = g.eval(&[pc, ps]).unwrap();
    assert!((v[0].data()[0] - 0.7).abs() < 1e-15);
    assert_eq!(v[1].data()[0], 2.5);
}

fn images(batch: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&mut rng, &[batch, 1, size, size], 0.0, 1.0)
}

#[test]
fn batch_rows_are_independent() {
    for arch in [Architecture::desk(4, 32), Architecture { pooling: Pooling::GlobalAverage, ..Architecture::desk(3, 16) }] {
        let params = ModelParams::init(&arch, 9).unwrap();
        let x = images(5, arch.input_size, 3);
        let batched = forward(&params, &x).unwrap().logits().unwrap();
        for i in 0..5 {
            let single = forward(&params, &x.rows(i, 1).unwrap()).unwrap().logits().unwrap();
            for (a, b) in single.data().iter().zip(batched.rows(i, 1).unwrap().data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn permuting_the_batch_permutes_logits() {
    let arch = Architecture::desk(4, 32);
    let params = ModelParams::init(&arch, 2).unwrap();
    let x = images(4, 32, 5);
    let perm = [2, 0, 3, 1];
    let rows: Vec<Tensor> = perm.iter().map(|&i| x.rows(i, 1).unwrap()).collect();
    let flat: Vec<Tensor> = rows
        .iter()
        .map(|r| r.clone().reshape(vec![1, 32, 32]).unwrap())
        .collect();
    let px = Tensor::stack(&flat).unwrap();
    let a = forward(&params, &x).unwrap().logits().unwrap();
    let b = forward(&params, &px).unwrap().logits().unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.rows(k, 1).unwrap().data(), a.rows(i, 1).unwrap().data());
    }
}

fn tiny() -> Architecture {
    Architecture {
        input_channels: 1,
        input_size: 8,
        conv: vec![
            ConvBlock { channels: 3, kernel: 3, stride: 2 },
            ConvBlock { channels: 4, kernel: 3, stride: 1 },
        ],
        pooling: Pooling::Flatten,
        dense_hidden: vec![8],
        classes: 3,
        target_layer: 1,
    }
}

#[test]
fn logit_gradients_match_finite_differences() {
    let arch = tiny();
    assert!(arch.param_count() <= 2000);
    let params = ModelParams::init(&arch, 4).unwrap();
    let x = images(2, 8, 6);
    let mut trace = ForwardTrace::build(&arch, 2).unwrap();
    trace.bind_params(&params).unwrap();
    trace.bind_images(&x).unwrap();
    for (row, class) in [(0usize, 0usize), (1, 2)] {
        let g = &mut trace.graph;
        let r = g.slice(trace.logits, 0, row, row + 1).unwrap();
        let y = g.slice(r, 1, class, class + 1).unwrap();
        let y = g.sum_all(y);
        let wrt = trace.params.clone();
        let report = check_gradients(g, y, &wrt, GradCheckConfig::default()).unwrap();
        assert!(report.max_error <= 1e-6, "{:?} {}", report.worst, report.max_error);
    }
}
