//! Central finite-difference gradient checking, plus the canonical per-op
//! check graphs shared by unit and acceptance tests.

use super::{Graph, Padding, Tensor, Var};
use crate::rng::SplitMix64;

/// Numeric gradient of a scalar function at `at`, one coordinate at a time:
/// (f(x+h) - f(x-h)) / 2h.
pub fn central_diff<F>(mut eval: F, at: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut point: Vec<Vec<f64>> = at.to_vec();
    let mut grads: Vec<Vec<f64>> = at.iter().map(|p| vec![0.0; p.len()]).collect();
    for pi in 0..point.len() {
        for i in 0..point[pi].len() {
            let orig = point[pi][i];
            point[pi][i] = orig + h;
            let fp = eval(&point);
            point[pi][i] = orig - h;
            let fm = eval(&point);
            point[pi][i] = orig;
            grads[pi][i] = (fp - fm) / (2.0 * h);
        }
    }
    grads
}

/// Worst relative disagreement between analytic and numeric gradients.
/// The denominator is floored at 1e-3 so exact zeros (dead units) compare by
/// absolute difference instead of blowing up on finite-difference noise.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(1e-3);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Standard step and tolerance used across the suite.
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Every differentiable op, each with a dedicated check graph.
pub const CHECKED_OPS: &[&str] = &[
    "conv2d_same",
    "conv2d_valid_stride2",
    "conv3d_same",
    "conv3d_valid",
    "relu",
    "add",
    "scale",
    "concat",
    "channel_affine",
    "softmax_ce",
    "weighted_sum",
];

/// Builds the op's check graph at a random point and returns the worst
/// relative error between backward and central differences.
pub fn check_op(op: &str, seed: u64) -> f64 {
    let mut rng = SplitMix64::derive(seed, 0x67726164); // op-check stream
    // keep relu inputs away from the kink so the numeric derivative is clean
    let mut draw = |n: usize, margin: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = rng.next_gaussian();
                if v.abs() < margin {
                    v + margin * v.signum().max(0.5)
                } else {
                    v
                }
            })
            .collect()
    };

    match op {
        "conv2d_same" => {
            let at = vec![draw(2 * 4 * 5, 0.0), draw(3 * 2 * 3 * 3, 0.0)];
            let w: Vec<f64> = draw(3 * 4 * 5, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![2, 4, 5], &p[0]);
                    let k = param(&mut g, vec![3, 2, 3, 3], &p[1]);
                    let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x, k], l)
                },
                at,
            )
        }
        "conv2d_valid_stride2" => {
            let at = vec![draw(2 * 5 * 7, 0.0), draw(2 * 2 * 3 * 3, 0.0)];
            let w: Vec<f64> = draw(2 * 2 * 3, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![2, 5, 7], &p[0]);
                    let k = param(&mut g, vec![2, 2, 3, 3], &p[1]);
                    let y = g.conv2d(x, k, 2, Padding::Valid).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x, k], l)
                },
                at,
            )
        }
        "conv3d_same" => {
            let at = vec![draw(2 * 3 * 4 * 4, 0.0), draw(2 * 2 * 3 * 3 * 3, 0.0)];
            let w: Vec<f64> = draw(2 * 3 * 4 * 4, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![2, 3, 4, 4], &p[0]);
                    let k = param(&mut g, vec![2, 2, 3, 3, 3], &p[1]);
                    let y = g.conv3d(x, k, 1, Padding::Same).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x, k], l)
                },
                at,
            )
        }
        "conv3d_valid" => {
            let at = vec![draw(1 * 4 * 4 * 5, 0.0), draw(2 * 1 * 2 * 3 * 3, 0.0)];
            let w: Vec<f64> = draw(2 * 3 * 2 * 3, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![1, 4, 4, 5], &p[0]);
                    let k = param(&mut g, vec![2, 1, 2, 3, 3], &p[1]);
                    let y = g.conv3d(x, k, 1, Padding::Valid).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x, k], l)
                },
                at,
            )
        }
        "relu" => {
            let at = vec![draw(40, 0.05)];
            let w: Vec<f64> = draw(40, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![40], &p[0]);
                    let y = g.relu(x);
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x], l)
                },
                at,
            )
        }
        "add" => {
            let at = vec![draw(24, 0.0), draw(24, 0.0)];
            let w: Vec<f64> = draw(24, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let a = param(&mut g, vec![4, 6], &p[0]);
                    let b = param(&mut g, vec![4, 6], &p[1]);
                    let y = g.add(a, b).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![a, b], l)
                },
                at,
            )
        }
        "scale" => {
            let at = vec![draw(15, 0.0)];
            let w: Vec<f64> = draw(15, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![15], &p[0]);
                    let y = g.scale(x, -0.37);
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x], l)
                },
                at,
            )
        }
        "concat" => {
            // both channel-axis and inner-axis concatenation
            let at = vec![draw(2 * 6, 0.0), draw(3 * 6, 0.0)];
            let w: Vec<f64> = draw(5 * 6, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let a = param(&mut g, vec![2, 6], &p[0]);
                    let b = param(&mut g, vec![3, 6], &p[1]);
                    let y = g.concat(&[a, b], 0).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![a, b], l)
                },
                at,
            )
            .max({
                let at = vec![draw(4 * 2, 0.0), draw(4 * 3, 0.0)];
                let w: Vec<f64> = draw(4 * 5, 0.0);
                run_check(
                    move |p| {
                        let mut g = Graph::new();
                        let a = param(&mut g, vec![4, 2], &p[0]);
                        let b = param(&mut g, vec![4, 3], &p[1]);
                        let y = g.concat(&[a, b], 1).unwrap();
                        let l = g.weighted_sum(y, &w).unwrap();
                        (g, vec![a, b], l)
                    },
                    at,
                )
            })
        }
        "channel_affine" => {
            let at = vec![draw(3 * 10, 0.0), draw(3, 0.0), draw(3, 0.0)];
            let w: Vec<f64> = draw(3 * 10, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![3, 10], &p[0]);
                    let s = param(&mut g, vec![3], &p[1]);
                    let b = param(&mut g, vec![3], &p[2]);
                    let y = g.channel_affine(x, s, b).unwrap();
                    let l = g.weighted_sum(y, &w).unwrap();
                    (g, vec![x, s, b], l)
                },
                at,
            )
        }
        "softmax_ce" => {
            let at = vec![draw(3 * 12, 0.0)];
            let targets: Vec<u8> = (0..12).map(|_| rng.next_range(3) as u8).collect();
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![3, 12], &p[0]);
                    let l = g.softmax_ce(x, &targets).unwrap();
                    (g, vec![x], l)
                },
                at,
            )
        }
        "weighted_sum" => {
            let at = vec![draw(20, 0.0)];
            let w: Vec<f64> = draw(20, 0.0);
            run_check(
                move |p| {
                    let mut g = Graph::new();
                    let x = param(&mut g, vec![20], &p[0]);
                    let l = g.weighted_sum(x, &w).unwrap();
                    (g, vec![x], l)
                },
                at,
            )
        }
        other => panic!("no gradient check registered for op {other:?}"),
    }
}

fn param(g: &mut Graph, shape: Vec<usize>, data: &[f64]) -> Var {
    let t = Tensor::new(shape, data.to_vec()).unwrap().into_param();
    g.param(&t)
}

fn run_check<B>(build: B, at: Vec<Vec<f64>>) -> f64
where
    B: Fn(&[Vec<f64>]) -> (Graph, Vec<Var>, Var),
{
    let (mut g, vars, loss) = build(&at);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();
    let numeric = central_diff(
        |p| {
            let (g, _, l) = build(p);
            g.value(l)[0]
        },
        &at,
        STEP,
    );
    max_rel_err(&analytic, &numeric)
}
