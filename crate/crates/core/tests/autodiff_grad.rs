use peftsam_core::autodiff::{grad_check, GradCheckOptions, Tape, Var};
use peftsam_core::params::{Component, Init, ParamMeta, ParamStore, Role};
use peftsam_core::tensor::NdArray;
use peftsam_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(
            ParamMeta {
                name: name.to_string(),
                shape: shape.to_vec(),
                role: Role::Weight,
                attention: false,
                component: Component::Encoder,
                region: "test".into(),
                trainable: true,
            },
            Init::Uniform(1.0),
            &mut rng,
        )
        .unwrap();
    }
    s
}

fn p(t: &mut Tape<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    t.param(s, s.id(name).unwrap()).unwrap()
}

/// Contracts an arbitrary output with fixed weights so every element matters.
fn weighted_sum(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = NdArray::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
    let w = t.constant(w);
    let z = t.mul(y, w)?;
    t.sum(z)
}

fn check<F>(shapes: &[(&str, &[usize])], program: F)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    for seed in 0..2 {
        let s = store(shapes, seed);
        let r = grad_check(
            &program,
            &s,
            GradCheckOptions {
                eps: 1e-6,
                max_elems: Some(30),
                seed,
            },
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{shapes:?}: {:?}", r.per_param);
    }
}

#[test]
fn matmul_and_batch_matmul() {
    for (m, k, n) in [(1, 1, 1), (3, 4, 2), (5, 2, 7)] {
        check(&[("a", &[m, k]), ("b", &[k, n])], |t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let y = t.matmul(a, b)?;
            weighted_sum(t, y)
        });
        check(&[("a", &[2, m, k]), ("b", &[2, k, n])], |t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let y = t.batch_matmul(a, b)?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn convolutions() {
    for (c, h, o, kk, stride, pad) in [(1, 4, 1, 3, 1, 1), (2, 5, 3, 3, 2, 1), (3, 6, 2, 1, 1, 0)] {
        check(&[("x", &[c, h, h]), ("w", &[o, c, kk, kk])], move |t, s| {
            let (x, w) = (p(t, s, "x"), p(t, s, "w"));
            let y = t.conv2d(x, w, stride, pad)?;
            weighted_sum(t, y)
        });
    }
    for (c, h, o, st) in [(1, 2, 1, 2), (2, 3, 3, 2), (3, 2, 2, 3)] {
        check(&[("x", &[c, h, h]), ("w", &[c, o, st, st])], |t, s| {
            let (x, w) = (p(t, s, "x"), p(t, s, "w"));
            let y = t.conv_transpose2d(x, w)?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn normalization_and_activations() {
    for shape in [&[1usize, 4][..], &[3, 5], &[2, 3, 6]] {
        let d = *shape.last().unwrap();
        check(&[("x", shape), ("g", &[d]), ("b", &[d])], |t, s| {
            let (x, g, b) = (p(t, s, "x"), p(t, s, "g"), p(t, s, "b"));
            let y = t.layer_norm(x, g, b, 1e-6)?;
            weighted_sum(t, y)
        });
        check(&[("x", shape)], |t, s| {
            let x = p(t, s, "x");
            let y = t.softmax(x)?;
            weighted_sum(t, y)
        });
        for which in 0..5 {
            check(&[("x", shape)], move |t, s| {
                let x = p(t, s, "x");
                let y = match which {
                    0 => t.gelu(x)?,
                    1 => t.sigmoid(x)?,
                    2 => t.exp(x)?,
                    3 => {
                        let sq = t.mul(x, x)?;
                        let pos = t.add_scalar(sq, 0.5)?;
                        t.log(pos)?
                    }
                    _ => {
                        // keep away from the kink
                        let sh = t.add_scalar(x, 0.013)?;
                        t.relu(sh)?
                    }
                };
                weighted_sum(t, y)
            });
        }
    }
}

#[test]
fn broadcasting_elementwise() {
    let cases: [(&[usize], &[usize]); 3] = [(&[3, 4], &[4]), (&[2, 3, 4], &[3, 1]), (&[1], &[2, 2])];
    for (sa, sb) in cases {
        for which in 0..4 {
            check(&[("a", sa), ("b", sb)], move |t, s| {
                let (a, b) = (p(t, s, "a"), p(t, s, "b"));
                let y = match which {
                    0 => t.add(a, b)?,
                    1 => t.sub(a, b)?,
                    2 => t.mul(a, b)?,
                    _ => {
                        let bb = t.mul(b, b)?;
                        let den = t.add_scalar(bb, 1.0)?;
                        t.div(a, den)?
                    }
                };
                let y = t.scale(y, 1.7)?;
                weighted_sum(t, y)
            });
        }
    }
}

#[test]
fn shape_ops_and_reductions() {
    for shape in [&[2usize, 3, 4][..], &[4, 1, 5], &[3, 3, 2]] {
        let shape = shape.to_vec();
        let sh = shape.clone();
        check(&[("x", &shape)], move |t, s| {
            let x = p(t, s, "x");
            let a = t.permute(x, &[2, 0, 1])?;
            let b = t.reshape(a, &[sh[2], sh[0] * sh[1]])?;
            let c = t.transpose(b)?;
            let d = t.slice(c, 0, 1, sh[0] * sh[1])?;
            let e = t.concat(&[d, c], 0)?;
            weighted_sum(t, e)
        });
        for axis in 0..3 {
            check(&[("x", &shape)], move |t, s| {
                let x = p(t, s, "x");
                let a = t.sum_axis(x, axis)?;
                let b = t.mean_axis(x, axis)?;
                let c = t.max_axis(x, axis)?;
                let ab = t.add(a, b)?;
                let abc = t.add(ab, c)?;
                let m = t.mean(abc)?;
                let y = weighted_sum(t, abc)?;
                t.add(y, m)
            });
        }
    }
}

#[test]
fn resampling_and_bce() {
    for (c, h, w, oh, ow) in [(1, 2, 2, 4, 4), (2, 3, 5, 7, 4), (3, 4, 4, 16, 16)] {
        check(&[("x", &[c, h, w])], move |t, s| {
            let x = p(t, s, "x");
            let a = t.upsample_bilinear(x, oh, ow)?;
            let b = t.upsample_nearest(x, 3)?;
            let sa = weighted_sum(t, a)?;
            let sb = weighted_sum(t, b)?;
            t.add(sa, sb)
        });
        check(&[("x", &[c, h, w])], move |t, s| {
            let x = p(t, s, "x");
            let target = t.constant(NdArray::from_fn(&[c, h, w], |i| (i % 2) as f64));
            t.bce_with_logits(x, target)
        });
    }
}

#[test]
fn sum_of_squares_gradient_is_analytic() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(NdArray::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.leaf(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let s = store(&[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 9);
    let x = NdArray::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
    let r = grad_check(
        |t, s| {
            let xi = t.input(x.clone());
            let (w1, b1, w2, b2) = (p(t, s, "w1"), p(t, s, "b1"), p(t, s, "w2"), p(t, s, "b2"));
            let h = t.matmul(xi, w1)?;
            let h = t.add(h, b1)?;
            let h = t.gelu(h)?;
            let y = t.matmul(h, w2)?;
            let y = t.add(y, b2)?;
            weighted_sum(t, y)
        },
        &s,
        GradCheckOptions {
            eps: 1e-6,
            max_elems: None,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(r.per_param.len(), 4);
    assert!(r.max_rel_error() < 1e-4, "{:?}", r.per_param);
}

#[test]
fn linear_layer_is_tight() {
    let s = store(&[("w", &[6, 4]), ("b", &[4])], 2);
    let x = NdArray::from_fn(&[3, 6], |i| i as f64 * 0.1 - 0.5);
    let r = grad_check(
        |t, s| {
            let xi = t.input(x.clone());
            let (w, b) = (p(t, s, "w"), p(t, s, "b"));
            let y = t.matmul(xi, w)?;
            let y = t.add(y, b)?;
            weighted_sum(t, y)
        },
        &s,
        GradCheckOptions {
            eps: 1e-5,
            max_elems: None,
            seed: 0,
        },
    )
    .unwrap();
    assert!(r.max_rel_error() < 1e-6, "{:?}", r.per_param);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut s = store(&[("w", &[3, 3]), ("frozen", &[3, 3])], 4);
    let fid = s.id("frozen").unwrap();
    s.set_trainable(fid, false).unwrap();
    let before = s.dense(fid).unwrap().data().to_vec();
    let mut t = Tape::<f64>::new();
    let (w, f) = (p(&mut t, &s, "w"), p(&mut t, &s, "frozen"));
    let y = t.matmul(w, f).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.param(fid).is_none());
    assert!(g.param(s.id("w").unwrap()).is_some());
    assert_eq!(s.dense(fid).unwrap().data(), before.as_slice());

    let r = grad_check(
        |t, s| {
            let (w, f) = (p(t, s, "w"), p(t, s, "frozen"));
            let y = t.matmul(w, f)?;
            t.sum(y)
        },
        &s,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!r.per_param.contains_key("frozen"));
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(NdArray::full(&[2, 2], 1.0), true);
    let y = t.scale(x, 2.0).unwrap();
    assert!(t.backward(y).is_err(), "non-scalar loss");
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert!(t.backward(l).is_err(), "second backward");
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f32>::new();
    let a = t.input(NdArray::full(&[2, 3], 1.0));
    let b = t.input(NdArray::full(&[2, 3], 1.0));
    let e = t.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
}
