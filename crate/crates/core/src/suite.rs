//! The gradient-check suite: every differentiable graph op, the blocks, and
//! the full tiny network of each variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Ccm, ClassActivation, Ctx, CtNet, Init, Mce, NetworkConfig, NonLocal, ParamStore, Scm, Variant};
use crate::error::TensorError;
use crate::objectives::{objective, ObjectiveConfig, IGNORE_LABEL};
use crate::tensor::gradcheck::{gradcheck, GradcheckConfig, GradcheckError, GradcheckReport};
use crate::tensor::{Graph, NormMode, PoolMode, Tensor, Var};

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

struct Instance {
    inputs: Vec<Tensor<f64>>,
    f: Forward,
    /// Non-scalar outputs are reduced with seed-dependent random weights.
    reduce: bool,
}

/// One named check, instantiated once per seed.
pub struct Case {
    pub name: String,
    /// Full networks are expensive and run on a single seed.
    pub single_seed: bool,
    build: Box<dyn Fn(u64) -> Result<Instance, TensorError>>,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Seeds per op and block case.
    pub seeds: u64,
    pub include_nets: bool,
    /// Run only cases whose name contains this substring.
    pub filter: Option<String>,
    pub check: GradcheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            include_nets: true,
            filter: None,
            check: GradcheckConfig::default(),
        }
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn op_case(
    name: &str,
    make: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Case {
    Case {
        name: name.to_string(),
        single_seed: false,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Instance {
                inputs: make(&mut rng),
                f: Box::new(f),
                reduce: true,
            })
        }),
    }
}

/// Every differentiable op on the graph.
pub fn op_cases() -> Vec<Case> {
    vec![
        op_case("matmul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        op_case(
            "matmul_t",
            |r| vec![rand_t(r, &[2, 4, 3]), rand_t(r, &[2, 2, 4])],
            |g, v| g.matmul_t(v[0], v[1], true, true),
        ),
        op_case(
            "matmul_broadcast",
            |r| vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[4, 2])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        op_case(
            "conv2d",
            |r| vec![rand_t(r, &[2, 2, 5, 5]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        op_case(
            "conv2d_asymmetric_pad",
            |r| vec![rand_t(r, &[1, 2, 6, 6]), rand_t(r, &[2, 2, 3, 3])],
            |g, v| g.conv2d_padded(v[0], v[1], None, 2, (0, 1)),
        ),
        op_case(
            "conv1d_same",
            |r| vec![rand_t(r, &[2, 7]), rand_t(r, &[5]), rand_t(r, &[1])],
            |g, v| g.conv1d_same(v[0], v[1], v[2]),
        ),
        op_case("avg_pool", |r| vec![rand_t(r, &[2, 3, 3, 2])], |g, v| g.global_pool(v[0], PoolMode::Avg)),
        op_case("max_pool", |r| vec![rand_t(r, &[2, 3, 3, 2])], |g, v| g.global_pool(v[0], PoolMode::Max)),
        op_case("softmax", |r| vec![rand_t(r, &[2, 4, 3])], |g, v| g.softmax(v[0], 1)),
        op_case(
            "batch_norm",
            |r| vec![rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[3]), rand_t(r, &[3])],
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], NormMode::Train { eps: 1e-5 })?.0),
        ),
        op_case(
            "batch_norm_eval",
            |r| vec![rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[3]), rand_t(r, &[3])],
            |g, v| {
                let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
                Ok(g.batch_norm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var, eps: 1e-5 })?.0)
            },
        ),
        op_case("add", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |g, v| g.add(v[0], v[1])),
        op_case("mul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |g, v| g.mul(v[0], v[1])),
        op_case("scale", |r| vec![rand_t(r, &[5])], |g, v| g.scale(v[0], -2.5)),
        op_case("sigmoid", |r| vec![rand_t(r, &[5]).map(|x| 4.0 * x)], |g, v| g.sigmoid(v[0])),
        op_case("relu", |r| vec![rand_t(r, &[12])], |g, v| g.relu(v[0])),
        op_case(
            "channel_mul",
            |r| vec![rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[2, 3])],
            |g, v| g.channel_mul(v[0], v[1]),
        ),
        op_case("add_bias", |r| vec![rand_t(r, &[2, 3, 2]), rand_t(r, &[3])], |g, v| g.add_bias(v[0], v[1], 1)),
        op_case(
            "concat",
            |r| vec![rand_t(r, &[2, 1, 3]), rand_t(r, &[2, 2, 3])],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        op_case("reshape", |r| vec![rand_t(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        op_case("repeat_batch", |r| vec![rand_t(r, &[1, 3, 2])], |g, v| g.repeat_batch(v[0], 3)),
        op_case("upsample", |r| vec![rand_t(r, &[1, 2, 3, 2])], |g, v| g.upsample(v[0], 4)),
        op_case("resize_bilinear", |r| vec![rand_t(r, &[1, 1, 4, 5])], |g, v| g.resize_bilinear(v[0], 3, 7)),
        op_case("sum", |r| vec![rand_t(r, &[3, 3])], |g, v| g.sum(v[0])),
        op_case("mean", |r| vec![rand_t(r, &[3, 3])], |g, v| g.mean(v[0])),
        op_case(
            "cross_entropy",
            |r| vec![rand_t(r, &[2, 4, 3, 3]).map(|x| 3.0 * x)],
            |g, v| {
                let labels: Vec<u8> = (0..18).map(|i| if i % 7 == 3 { 255 } else { (i % 4) as u8 }).collect();
                Ok(g.cross_entropy(v[0], &labels, 255)?.0)
            },
        ),
        op_case(
            "bce",
            |r| vec![rand_t(r, &[2, 5]).map(|x| 0.5 + 0.4 * x)],
            |g, v| {
                let target = Tensor::from_fn(&[2, 5], |i| (i as f64) / 10.0);
                Ok(g.bce(v[0], &target, 1.0, 1e-7)?.0)
            },
        ),
    ]
}

#[derive(Clone, Copy)]
enum BlockKind {
    Mce,
    Ccm,
    Scm,
    NonLocal,
}

const BLOCK_C: usize = 8;
const BLOCK_N: usize = 3;

fn block_case(name: &str, kind: BlockKind) -> Case {
    Case {
        name: name.to_string(),
        single_seed: false,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let (c, n) = (BLOCK_C, BLOCK_N);
            let mut init = Init { rng: &mut rng };
            // the trailing inputs after the parameters
            let (extra, f): (Vec<Vec<usize>>, Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var, TensorError>>) =
                match kind {
                    BlockKind::Mce => {
                        let b = Mce::new(&mut store, &mut init, "mce", c, &[3, 5], PoolMode::Avg)?;
                        (vec![vec![2, c, 3, 3]], Box::new(move |cx, x| b.forward(cx, x[0])))
                    }
                    BlockKind::Ccm => {
                        let b = Ccm::new(
                            &mut store,
                            &mut init,
                            "ccm",
                            c,
                            n,
                            &[3, 5],
                            PoolMode::Avg,
                            ClassActivation::Sigmoid,
                        )?;
                        (
                            vec![vec![2, c, 3, 3]],
                            Box::new(move |cx, x| {
                                let o = b.forward(cx, x[0])?;
                                // touch every output so each path is checked
                                let parts = [
                                    cx.g.reshape(o.x_c, &[2 * c * 9])?,
                                    cx.g.reshape(o.p_p, &[2 * n])?,
                                    cx.g.reshape(o.m, &[2 * c * n])?,
                                ];
                                cx.g.concat(&parts, 0)
                            }),
                        )
                    }
                    BlockKind::Scm => {
                        let b = Scm::new(&mut store, &mut init, "scm", c, 2)?;
                        (vec![vec![2, c, 3, 3], vec![2, c, n]], Box::new(move |cx, x| Ok(b.forward(cx, x[0], x[1])?.x_s)))
                    }
                    BlockKind::NonLocal => {
                        let b = NonLocal::new(&mut store, &mut init, "nonlocal", c, 2)?;
                        (vec![vec![2, c, 3, 3]], Box::new(move |cx, x| Ok(b.forward(cx, x[0])?.y)))
                    }
                };
            let n_params = store.params().count();
            let mut inputs = store.param_tensors();
            for shape in &extra {
                inputs.push(rand_t(&mut rng, shape));
            }
            Ok(Instance {
                inputs,
                f: Box::new(move |g, vars| {
                    let bound = store.bind_to(&vars[..n_params])?;
                    let mut cx = Ctx::new(g, &store, &bound, true);
                    f(&mut cx, &vars[n_params..])
                }),
                reduce: true,
            })
        }),
    }
}

/// The channel excitation, both context modules and the non-local baseline.
pub fn block_cases() -> Vec<Case> {
    vec![
        block_case("mce_block", BlockKind::Mce),
        block_case("ccm_block", BlockKind::Ccm),
        block_case("scm_block", BlockKind::Scm),
        block_case("nonlocal_block", BlockKind::NonLocal),
    ]
}

/// Full training loss of the tiny network: C=8, 16×16 input, N=4, r=2.
pub fn net_case(variant: Variant) -> Case {
    Case {
        name: format!("{variant}_full_loss"),
        single_seed: true,
        build: Box::new(move |seed| {
            let mut cfg = NetworkConfig::tiny(variant, 8, 4);
            cfg.seed = seed;
            let net = CtNet::<f64>::new(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let img = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
            let mask: Vec<u8> = (0..2 * 16 * 16)
                .map(|i| if i % 37 == 0 { IGNORE_LABEL } else { ((i / 16 % 16) / 4) as u8 % 4 })
                .collect();
            let obj = ObjectiveConfig::default();
            let inputs = net.store().param_tensors();
            Ok(Instance {
                inputs,
                f: Box::new(move |g, vars| {
                    let bound = net.store().bind_to(vars)?;
                    let x = g.constant(img.clone());
                    let out = net.forward(g, &bound, x, true)?;
                    Ok(objective(g, &out, &mask, &obj)?.total)
                }),
                reduce: false,
            })
        }),
    }
}

/// Op cases, block cases, then one full network per variant.
pub fn all_cases(include_nets: bool) -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(block_cases());
    if include_nets {
        cases.extend(Variant::ALL.iter().map(|&v| net_case(v)));
    }
    cases
}

fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let wt = rand_t(&mut rng, g.shape(y));
    let w = g.constant(wt);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Checks one case over `seeds` seeds; the report carries the worst error.
pub fn run_case(case: &Case, seeds: u64, check: GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    let seeds = if case.single_seed { 1 } else { seeds.max(1) };
    let mut worst: Option<GradcheckReport> = None;
    for seed in 0..seeds {
        let inst = (case.build)(seed).map_err(|source| GradcheckError::Tensor {
            op: case.name.clone(),
            source,
        })?;
        let rep = gradcheck(
            &case.name,
            |g, v| {
                let y = (inst.f)(g, v)?;
                if inst.reduce {
                    weighted(g, y, seed)
                } else {
                    Ok(y)
                }
            },
            &inst.inputs,
            check,
        )?;
        if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("at least one seed"))
}

/// Runs the selected cases in order, handing each report to `sink` as it
/// completes.
pub fn run(cfg: &SuiteConfig, mut sink: impl FnMut(&GradcheckReport)) -> Result<Vec<GradcheckReport>, GradcheckError> {
    let mut out = Vec::new();
    for case in all_cases(cfg.include_nets) {
        if cfg.filter.as_ref().is_some_and(|f| !case.name.contains(f.as_str())) {
            continue;
        }
        let rep = run_case(&case, cfg.seeds, cfg.check)?;
        sink(&rep);
        out.push(rep);
    }
    Ok(out)
}
