use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Tensors with more elements are checked on this many random coordinates.
    pub max_coords: usize,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as the
    /// denominator so that exact-zero gradients are not divided by noise.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Worst-case relative error between `backward()` and central differences.
///
/// `f` builds a scalar from the leaf it is given. Perturbed evaluations are
/// replayed with every stop-gradient node frozen at its unperturbed value, so
/// the comparison is against the severed gradient, not the full one.
pub fn finite_diff_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.wrt(&g, xv);
    let frozen = g.stop_values().to_vec();

    let coords: Vec<usize> = if x.len() <= opts.max_coords {
        (0..x.len()).collect()
    } else {
        let mut r = rng::stream(opts.seed, &[x.len() as u64]);
        let mut c = sample(&mut r, x.len(), opts.max_coords).into_vec();
        c.sort_unstable();
        c
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::with_frozen_stops(frozen.clone());
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Worst relative error of one primitive over its random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveAudit {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn rand_dims(r: &mut rng::Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(lo..=hi)).collect()
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct weight.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, &mut rng::stream(seed, &[0x5747])));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference audit of every graph primitive on `cases` random
/// shapes each. Binary primitives are checked with respect to both operands.
pub fn audit_primitives(cases: usize, seed: u64) -> Result<Vec<PrimitiveAudit>> {
    const OPS: [&str; 16] = [
        "add", "sub", "mul", "scale", "sum", "mean", "matmul", "conv2d", "group_norm", "silu", "upsample2", "avg_pool2",
        "concat", "reshape", "mse", "stop_gradient",
    ];
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    for (oi, &op) in OPS.iter().enumerate() {
        let mut worst = 0.0f64;
        for case in 0..cases {
            let cs = rng::derive_seed(seed, &[oi as u64, case as u64]);
            let mut r = rng::stream(cs, &[]);
            let mut check = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor| -> Result<()> {
                worst = worst.max(finite_diff_check(|g, v| f(g, v), x, opts)?);
                Ok(())
            };
            match op {
                "add" | "sub" | "mul" => {
                    let rank = r.random_range(1..=4);
                    let a_shape = rand_dims(&mut r, rank, 1, 4);
                    // Every other case broadcasts b over a random subset of axes.
                    let b_shape: Vec<usize> = if case % 2 == 1 {
                        a_shape.iter().map(|&d| if r.random_bool(0.5) { 1 } else { d }).collect()
                    } else {
                        a_shape.clone()
                    };
                    let a = Tensor::randn(&a_shape, &mut r);
                    let b = Tensor::randn(&b_shape, &mut r);
                    let apply = move |g: &mut Graph, x: Var, y: Var| match op {
                        "add" => g.add(x, y),
                        "sub" => g.sub(x, y),
                        _ => g.mul(x, y),
                    };
                    let bc = b.clone();
                    check(&|g, x| {
                        let y = g.constant(bc.clone());
                        let o = apply(g, x, y)?;
                        weighted(g, o, cs)
                    }, &a)?;
                    let ac = a.clone();
                    check(&|g, y| {
                        let x = g.constant(ac.clone());
                        let o = apply(g, x, y)?;
                        weighted(g, o, cs)
                    }, &b)?;
                }
                "scale" | "sum" | "mean" | "silu" | "reshape" | "stop_gradient" => {
                    let rank = r.random_range(1..=4);
                    let shape = rand_dims(&mut r, rank, 1, 5);
                    let x = Tensor::randn(&shape, &mut r).scale(2.0);
                    let s = r.random_range(-3.0..3.0);
                    let flat = vec![x.len()];
                    check(&|g, v| match op {
                        "scale" => {
                            let o = g.scale(v, s);
                            weighted(g, o, cs)
                        }
                        "sum" => {
                            let w = g.constant(Tensor::randn(g.shape(v), &mut rng::stream(cs, &[1])));
                            let p = g.mul(v, w)?;
                            let o = g.sum(p);
                            Ok(g.mul(o, o)?)
                        }
                        "mean" => {
                            let w = g.constant(Tensor::randn(g.shape(v), &mut rng::stream(cs, &[1])));
                            let p = g.mul(v, w)?;
                            let o = g.mean(p);
                            Ok(g.mul(o, o)?)
                        }
                        "silu" => {
                            let o = g.silu(v);
                            weighted(g, o, cs)
                        }
                        "stop_gradient" => {
                            let sg = g.stop_gradient(v)?;
                            let o = g.mul(v, sg)?;
                            weighted(g, o, cs)
                        }
                        _ => {
                            let o = g.reshape(v, &flat)?;
                            weighted(g, o, cs)
                        }
                    }, &x)?;
                }
                "matmul" => {
                    let (m, k, n) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5));
                    let a = Tensor::randn(&[m, k], &mut r);
                    let b = Tensor::randn(&[k, n], &mut r);
                    let bc = b.clone();
                    check(&|g, x| {
                        let y = g.constant(bc.clone());
                        let o = g.matmul(x, y)?;
                        weighted(g, o, cs)
                    }, &a)?;
                    let ac = a.clone();
                    check(&|g, y| {
                        let x = g.constant(ac.clone());
                        let o = g.matmul(x, y)?;
                        weighted(g, o, cs)
                    }, &b)?;
                }
                "conv2d" => {
                    let k = [1usize, 3, 5][r.random_range(0..3)];
                    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                    let (h, w) = (r.random_range(k.max(3)..=7), r.random_range(k.max(3)..=7));
                    let stride = r.random_range(1..=2);
                    let pad = r.random_range(0..=k / 2);
                    let input = Tensor::randn(&[n, c, h, w], &mut r);
                    let kernel = Tensor::randn(&[o, c, k, k], &mut r);
                    let kc = kernel.clone();
                    check(&|g, x| {
                        let kv = g.constant(kc.clone());
                        let y = g.conv2d(x, kv, stride, pad)?;
                        weighted(g, y, cs)
                    }, &input)?;
                    let ic = input.clone();
                    check(&|g, kv| {
                        let x = g.constant(ic.clone());
                        let y = g.conv2d(x, kv, stride, pad)?;
                        weighted(g, y, cs)
                    }, &kernel)?;
                }
                "group_norm" => {
                    let groups = r.random_range(1..=3);
                    let per = r.random_range(1..=3);
                    let (n, h, w) = (r.random_range(1..=2), r.random_range(2..=4), r.random_range(1..=4));
                    let x = Tensor::randn(&[n, groups * per, h, w], &mut r);
                    check(&|g, v| {
                        let y = g.group_norm(v, groups, 1e-5)?;
                        weighted(g, y, cs)
                    }, &x)?;
                }
                "upsample2" | "avg_pool2" => {
                    let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
                    let (h, w) = (2 * r.random_range(1..=4), 2 * r.random_range(1..=4));
                    let x = Tensor::randn(&[n, c, h, w], &mut r);
                    check(&|g, v| {
                        let y = if op == "upsample2" { g.upsample2(v)? } else { g.avg_pool2(v)? };
                        weighted(g, y, cs)
                    }, &x)?;
                }
                "concat" => {
                    let rank = r.random_range(1..=4);
                    let axis = r.random_range(0..rank);
                    let base = rand_dims(&mut r, rank, 1, 4);
                    let parts: Vec<Tensor> = (0..r.random_range(2..=3))
                        .map(|_| {
                            let mut s = base.clone();
                            s[axis] = r.random_range(1..=3);
                            Tensor::randn(&s, &mut r)
                        })
                        .collect();
                    let pick = r.random_range(0..parts.len());
                    let others = parts.clone();
                    check(&|g, v| {
                        let vars: Vec<Var> = others
                            .iter()
                            .enumerate()
                            .map(|(i, t)| if i == pick { v } else { g.constant(t.clone()) })
                            .collect();
                        let y = g.concat(&vars, axis)?;
                        weighted(g, y, cs)
                    }, &parts[pick])?;
                }
                _ => {
                    let rank = r.random_range(1..=4);
                    let shape = rand_dims(&mut r, rank, 1, 5);
                    let a = Tensor::randn(&shape, &mut r);
                    let b = Tensor::randn(&shape, &mut r);
                    check(&|g, x| {
                        let y = g.constant(b.clone());
                        g.mse(x, y)
                    }, &a)?;
                    check(&|g, y| {
                        let x = g.constant(a.clone());
                        g.mse(x, y)
                    }, &b)?;
                }
            }
        }
        out.push(PrimitiveAudit { op, cases, worst });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut r = rng::stream(1, &[]);
        let x = Tensor::randn(&[4, 5], &mut r);
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn stop_gradient_is_compared_against_the_severed_gradient() {
        // f = x * sg(x): analytic 3 at x = 3; the unsevered derivative would be 6.
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(
            |g, x| {
                let s = g.stop_gradient(x)?;
                g.mul(x, s)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        let r = finite_diff_check(|g, x| Ok(g.sum(x)), &Tensor::scalar(1.0), opts);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
