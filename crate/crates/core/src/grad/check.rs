//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::grad::{Graph, Tensor, Var};

/// Worst disagreement found by [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// True when every entry satisfies `|a - n| <= rel_tol * max(|a|, |n|)`
    /// or `|a - n| <= abs_floor`.
    pub passed: bool,
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences with step `h`, for every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, rel_tol: f64, abs_floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheck {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| inputs[i].map(|_| 0.0));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > rel_tol {
                    report.passed = false;
                }
            }
        }
    }
    Ok(report)
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// A named differentiable expression with fixed inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

fn random(rows: usize, cols: usize, rng: &mut crate::rng::Rng, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random values with magnitude in `[0.2, 2]` (away from kinks at 0).
fn away_from_zero(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.uniform_range(0.2, 2.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Contract an output against fixed pseudo-random weights so no gradient
/// entry cancels by symmetry.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let (m, n) = g.value(out).dims2();
    let w = Tensor::matrix(m, n, (0..m * n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect())?;
    let w = g.input(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// One case per differentiable operation, plus a two-layer tanh network
/// and the full masked-attention pipeline.
pub fn standard_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = crate::rng::Rng::new(seed);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            cases.push(OpCase { name: $name, inputs: vec![$($inp),*], f: Box::new($f) });
        };
    }
    case!("matmul", [random(3, 4, &mut rng, -1.0, 1.0), random(4, 2, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        project(g, o)
    });
    case!("add_broadcast_row", [random(3, 4, &mut rng, -1.0, 1.0), random(1, 4, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.add(v[0], v[1])?;
        project(g, o)
    });
    case!("sub_broadcast_col", [random(3, 4, &mut rng, -1.0, 1.0), random(3, 1, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.sub(v[0], v[1])?;
        project(g, o)
    });
    case!("mul_broadcast", [random(3, 4, &mut rng, -1.0, 1.0), random(3, 1, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.mul(v[0], v[1])?;
        project(g, o)
    });
    case!("div", [random(3, 4, &mut rng, -1.0, 1.0), random(1, 4, &mut rng, 0.5, 2.0)], |g, v| {
        let o = g.div(v[0], v[1])?;
        project(g, o)
    });
    type Unary = (&'static str, fn(&mut Graph, Var) -> Result<Var>);
    let unaries: [Unary; 7] = [
        ("neg", Graph::neg),
        ("tanh", Graph::tanh),
        ("relu", Graph::relu),
        ("sigmoid", Graph::sigmoid),
        ("softplus", Graph::softplus),
        ("exp", Graph::exp),
        ("square", Graph::square),
    ];
    for (name, op) in unaries {
        case!(name, [away_from_zero(3, 3, &mut rng)], move |g, v| {
            let o = op(g, v[0])?;
            project(g, o)
        });
    }
    case!("log", [random(3, 3, &mut rng, 0.3, 3.0)], |g, v| {
        let o = g.log(v[0])?;
        project(g, o)
    });
    case!("scale", [random(2, 3, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.scale(v[0], -2.5)?;
        project(g, o)
    });
    case!("add_scalar", [random(2, 3, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.add_scalar(v[0], 0.7)?;
        let o = g.square(o)?;
        project(g, o)
    });
    case!("sum", [random(2, 3, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.square(v[0])?;
        g.sum(o)
    });
    case!("mean", [random(2, 3, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.square(v[0])?;
        g.mean(o)
    });
    for axis in [0usize, 1] {
        case!(
            if axis == 0 { "sum_axis0" } else { "sum_axis1" },
            [random(3, 4, &mut rng, -1.0, 1.0)],
            move |g, v| {
                let o = g.sum_axis(v[0], axis)?;
                let o = g.square(o)?;
                project(g, o)
            }
        );
        case!(
            if axis == 0 { "logsumexp_axis0" } else { "logsumexp_axis1" },
            [random(3, 4, &mut rng, -3.0, 3.0)],
            move |g, v| {
                let o = g.logsumexp(v[0], axis)?;
                project(g, o)
            }
        );
    }
    case!("log_softmax", [random(3, 5, &mut rng, -3.0, 3.0)], |g, v| {
        let o = g.log_softmax(v[0])?;
        project(g, o)
    });
    case!("concat_cols", [random(3, 2, &mut rng, -1.0, 1.0), random(3, 1, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.concat(&[v[0], v[1], v[0]], 1)?;
        let o = g.square(o)?;
        project(g, o)
    });
    case!("concat_rows", [random(2, 3, &mut rng, -1.0, 1.0), random(1, 3, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.concat(&[v[0], v[1]], 0)?;
        let o = g.square(o)?;
        project(g, o)
    });
    case!("select_cols", [random(3, 4, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.select_cols(v[0], &[3, 0, 0, 2])?;
        let o = g.square(o)?;
        project(g, o)
    });
    case!("select_rows", [random(3, 4, &mut rng, -1.0, 1.0)], |g, v| {
        let o = g.select_rows(v[0], &[2, 2, 0])?;
        let o = g.square(o)?;
        project(g, o)
    });
    case!(
        "two_layer_tanh_net",
        [
            random(5, 3, &mut rng, -1.0, 1.0),
            random(3, 4, &mut rng, -1.0, 1.0),
            random(1, 4, &mut rng, -0.5, 0.5),
            random(4, 2, &mut rng, -1.0, 1.0),
            random(1, 2, &mut rng, -0.5, 0.5)
        ],
        |g, v| {
            let h = g.affine(v[0], v[1], v[2])?;
            let h = g.tanh(h)?;
            let o = g.affine(h, v[3], v[4])?;
            let o = g.tanh(o)?;
            project(g, o)
        }
    );
    // batch of 3 sets with lengths 3, 1, 0; width 4 split over 2 heads
    let layout = crate::grad::SetLayout::new(3, vec![3, 1, 0]).unwrap();
    let x = random(9, 4, &mut rng, -1.0, 1.0);
    let wq = random(4, 4, &mut rng, -1.0, 1.0);
    let wk = random(4, 4, &mut rng, -1.0, 1.0);
    let wv = random(4, 4, &mut rng, -1.0, 1.0);
    for mean in [true, false] {
        let layout = layout.clone();
        case!(
            if mean { "attention_mean_pool" } else { "attention_sum_pool" },
            [x.clone(), wq.clone(), wk.clone(), wv.clone()],
            move |g, v| {
                let q = g.matmul(v[0], v[1])?;
                let k = g.matmul(v[0], v[2])?;
                let val = g.matmul(v[0], v[3])?;
                let s = g.attn_scores(q, k, 2, &layout)?;
                let valid: Vec<usize> = (0..layout.batch() * 2 * layout.t_max)
                    .map(|r| layout.lengths[r / (2 * layout.t_max)])
                    .collect();
                let w = g.masked_softmax(s, &valid)?;
                let mixed = g.attn_mix(w, val, 2, &layout)?;
                let pooled = g.set_pool(mixed, &layout, mean)?;
                project(g, pooled)
            }
        );
    }
    cases
}
