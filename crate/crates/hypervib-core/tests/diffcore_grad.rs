//! Finite-difference validation of every primitive's adjoint, plus the
//! determinism and linearity contracts of the graph engine.

mod common;

use std::collections::BTreeMap;

use hypervib_core::diffcore::{grad_check, Bindings, Graph, NodeId, RandomStream, Tensor};

const POINTS: usize = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn binds(pairs: Vec<(&str, Tensor)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn grad_tensor(rng: &mut RandomStream, shape: Vec<usize>) -> Tensor {
    rng.normal_tensor(shape, 1.0).with_requires_grad(true)
}

fn positive_tensor(rng: &mut RandomStream, shape: Vec<usize>) -> Tensor {
    rng.uniform_tensor(shape, 0.3, 2.5).with_requires_grad(true)
}

/// Magnitudes bounded away from zero, random sign. Multiplicative operands
/// drawn this way keep gradient entries above the noise floor of a central
/// difference with step 1e-5 (otherwise the relative-error check measures
/// floating-point cancellation, not the adjoint).
fn signed_bounded_tensor(rng: &mut RandomStream, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.uniform_in(0.3, 2.5);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap().with_requires_grad(true)
}

fn sweep(name: &str, make: impl Fn(&mut RandomStream) -> (Box<dyn Fn(&mut Graph) -> NodeId>, Bindings)) {
    let mut rng = RandomStream::new(0xD1FF ^ name.len() as u64);
    let mut worst = 0.0_f64;
    for _ in 0..POINTS {
        let (build, point) = make(&mut rng);
        let err = grad_check(|g| build(g), &point, STEP).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: worst finite-difference error {worst:.3e}");
}

#[test]
fn matmul_adjoint() {
    sweep("matmul", |rng| {
        let point = binds(vec![
            ("a", grad_tensor(rng, vec![3, 4])),
            ("b", grad_tensor(rng, vec![4, 2])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.matmul(a, b);
            let s = g.square(c);
            g.sum(s)
        };
        (Box::new(build), point)
    });
}

#[test]
fn transpose_adjoint() {
    sweep("transpose", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![3, 5]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let t = g.transpose(a);
            let s = g.square(t);
            g.sum(s)
        };
        (Box::new(build), point)
    });
}

#[test]
fn elementwise_adjoints() {
    sweep("add", |rng| {
        let point = binds(vec![
            ("a", grad_tensor(rng, vec![6])),
            ("b", grad_tensor(rng, vec![6])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.add(a, b);
            let s = g.square(c);
            g.sum(s)
        };
        (Box::new(build), point)
    });
    sweep("sub", |rng| {
        let point = binds(vec![
            ("a", grad_tensor(rng, vec![6])),
            ("b", grad_tensor(rng, vec![6])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.sub(a, b);
            let s = g.square(c);
            g.sum(s)
        };
        (Box::new(build), point)
    });
    sweep("mul", |rng| {
        let point = binds(vec![
            ("a", signed_bounded_tensor(rng, vec![6])),
            ("b", signed_bounded_tensor(rng, vec![6])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.mul(a, b);
            g.sum(c)
        };
        (Box::new(build), point)
    });
    sweep("div", |rng| {
        let point = binds(vec![
            ("a", signed_bounded_tensor(rng, vec![6])),
            ("b", positive_tensor(rng, vec![6])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.div(a, b);
            g.sum(c)
        };
        (Box::new(build), point)
    });
}

#[test]
fn scalar_broadcast_adjoints() {
    sweep("mul scalar", |rng| {
        let point = binds(vec![
            ("a", signed_bounded_tensor(rng, vec![5])),
            ("s", signed_bounded_tensor(rng, vec![1])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let s = g.input("s");
            let c = g.mul(a, s);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
    sweep("add scalar left", |rng| {
        let point = binds(vec![
            ("a", grad_tensor(rng, vec![5])),
            ("s", grad_tensor(rng, vec![1])),
        ]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let s = g.input("s");
            let c = g.add(s, a);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
}

#[test]
fn rowwise_adjoints() {
    sweep("row_add", |rng| {
        let point = binds(vec![
            ("m", grad_tensor(rng, vec![4, 3])),
            ("v", grad_tensor(rng, vec![3])),
        ]);
        let build = |g: &mut Graph| {
            let m = g.input("m");
            let v = g.input("v");
            let c = g.row_add(m, v);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
    sweep("row_mul", |rng| {
        let point = binds(vec![
            ("m", signed_bounded_tensor(rng, vec![4, 3])),
            ("v", signed_bounded_tensor(rng, vec![3])),
        ]);
        let build = |g: &mut Graph| {
            let m = g.input("m");
            let v = g.input("v");
            let c = g.row_mul(m, v);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
}

#[test]
fn block_and_conv_adjoints() {
    sweep("block_mul", |rng| {
        let point = binds(vec![
            ("k", signed_bounded_tensor(rng, vec![2, 3, 2, 2])),
            ("s", signed_bounded_tensor(rng, vec![2, 3])),
        ]);
        let build = |g: &mut Graph| {
            let k = g.input("k");
            let s = g.input("s");
            let c = g.block_mul(k, s);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
    sweep("conv2d", |rng| {
        let point = binds(vec![
            ("x", signed_bounded_tensor(rng, vec![2, 2, 4, 4])),
            ("k", signed_bounded_tensor(rng, vec![3, 2, 3, 3])),
            ("b", grad_tensor(rng, vec![3])),
        ]);
        let build = |g: &mut Graph| {
            let x = g.input("x");
            let k = g.input("k");
            let b = g.input("b");
            let c = g.conv2d(x, k, b);
            let q = g.square(c);
            g.sum(q)
        };
        (Box::new(build), point)
    });
}

#[test]
fn unary_adjoints() {
    sweep("sigmoid", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![7]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let c = g.sigmoid(a);
            g.sum(c)
        };
        (Box::new(build), point)
    });
    sweep("softplus", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![7]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let c = g.softplus(a);
            g.sum(c)
        };
        (Box::new(build), point)
    });
    sweep("log", |rng| {
        let point = binds(vec![("a", positive_tensor(rng, vec![7]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let c = g.log(a);
            g.sum(c)
        };
        (Box::new(build), point)
    });
    sweep("exp", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![7]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let c = g.exp(a);
            g.sum(c)
        };
        (Box::new(build), point)
    });
    sweep("square", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![7]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let c = g.square(a);
            g.sum(c)
        };
        (Box::new(build), point)
    });
}

#[test]
fn reduction_and_reshape_adjoints() {
    sweep("sum", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![3, 4]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let q = g.square(a);
            g.sum(q)
        };
        (Box::new(build), point)
    });
    sweep("mean", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![3, 4]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let q = g.square(a);
            g.mean(q)
        };
        (Box::new(build), point)
    });
    sweep("reshape", |rng| {
        let point = binds(vec![("a", grad_tensor(rng, vec![2, 6]))]);
        let build = |g: &mut Graph| {
            let a = g.input("a");
            let r = g.reshape(a, vec![3, 4]);
            let q = g.square(r);
            g.sum(q)
        };
        (Box::new(build), point)
    });
}

#[test]
fn loss_adjoints() {
    sweep("softmax_xent", |rng| {
        let labels: Vec<f64> = (0..4).map(|_| rng.index(5) as f64).collect();
        let point = binds(vec![
            ("z", grad_tensor(rng, vec![4, 5])),
            ("y", Tensor::vector(labels)),
        ]);
        let build = |g: &mut Graph| {
            let z = g.input("z");
            let y = g.input("y");
            g.softmax_xent(z, y)
        };
        (Box::new(build), point)
    });
    sweep("square_error", |rng| {
        let point = binds(vec![
            ("p", grad_tensor(rng, vec![4, 3])),
            ("t", grad_tensor(rng, vec![4, 3])),
        ]);
        let build = |g: &mut Graph| {
            let p = g.input("p");
            let t = g.input("t");
            g.square_error(p, t)
        };
        (Box::new(build), point)
    });
}

#[test]
fn three_layer_network_gradient_vs_finite_differences() {
    let mut rng = RandomStream::new(99);
    for _ in 0..5 {
        let point = binds(vec![
            ("x", rng.normal_tensor(vec![4, 6], 1.0)),
            ("w1", grad_tensor(&mut rng, vec![5, 6])),
            ("b1", grad_tensor(&mut rng, vec![5])),
            ("w2", grad_tensor(&mut rng, vec![4, 5])),
            ("b2", grad_tensor(&mut rng, vec![4])),
            ("w3", grad_tensor(&mut rng, vec![2, 4])),
            ("b3", grad_tensor(&mut rng, vec![2])),
            ("t", rng.normal_tensor(vec![4, 2], 1.0)),
        ]);
        let err = grad_check(
            |g| {
                let mut h = g.input("x");
                for i in 1..=3 {
                    let w = g.input(&format!("w{i}"));
                    let b = g.input(&format!("b{i}"));
                    let wt = g.transpose(w);
                    let lin = g.matmul(h, wt);
                    let linb = g.row_add(lin, b);
                    h = if i < 3 { g.sigmoid(linb) } else { linb };
                }
                let t = g.input("t");
                g.square_error(h, t)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "three-layer network gradient error {err:.3e}");
    }
}

#[test]
fn evaluate_replay_is_bitwise_identical() {
    let mut rng = RandomStream::new(5);
    let point: Bindings = BTreeMap::from([
        ("x".to_string(), rng.normal_tensor(vec![8, 8], 1.0)),
        ("w".to_string(), rng.normal_tensor(vec![8, 8], 1.0)),
    ]);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.input("w");
    let h = g.matmul(x, w);
    let s = g.sigmoid(h);
    let e = g.exp(s);
    let out = g.sum(e);
    g.evaluate(&point).unwrap();
    let a = g.value(out).unwrap().item().unwrap();
    for _ in 0..3 {
        g.evaluate(&point).unwrap();
        let b = g.value(out).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn backward_distributes_over_sums_of_graphs() {
    let mut rng = RandomStream::new(17);
    for _ in 0..20 {
        let xs = rng.normal_tensor(vec![5], 1.0).with_requires_grad(true);
        let point = binds(vec![("x", xs)]);

        let part_a = |g: &mut Graph| {
            let x = g.input("x");
            let s = g.sigmoid(x);
            let q = g.square(s);
            g.sum(q)
        };
        let part_b = |g: &mut Graph| {
            let x = g.input("x");
            let e = g.exp(x);
            g.mean(e)
        };

        let mut ga = Graph::new();
        let ra = part_a(&mut ga);
        ga.evaluate(&point).unwrap();
        let grad_a = ga.backward(ra).unwrap();

        let mut gb = Graph::new();
        let rb = part_b(&mut gb);
        gb.evaluate(&point).unwrap();
        let grad_b = gb.backward(rb).unwrap();

        let mut gsum = Graph::new();
        let ra2 = part_a(&mut gsum);
        let rb2 = part_b(&mut gsum);
        let root = gsum.add(ra2, rb2);
        gsum.evaluate(&point).unwrap();
        let grad_sum = gsum.backward(root).unwrap();

        for i in 0..5 {
            let lhs = grad_sum["x"].data()[i];
            let rhs = grad_a["x"].data()[i] + grad_b["x"].data()[i];
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }
}
