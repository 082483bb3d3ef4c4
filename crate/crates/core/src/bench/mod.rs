//! Closed-form cost counters for the spatial context module and the
//! non-local baseline, checked against instrumented runs.
//!
//! One MAC is one scalar multiplication (each is paired with an accumulate or
//! an add). Peak activation is the number of scalars a tape retains for the
//! backward pass, reshaped views excluded, at batch 1.

pub mod counted;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{Bound, Ctx, Init, NonLocal, ParamStore, Scm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub use counted::Counted;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Scm,
    NonLocal,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Scm => "scm",
            Block::NonLocal => "nonlocal",
        })
    }
}

/// Block size: channels, spatial extent, categories (ignored by the non-local
/// block) and projection ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostConfig {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub r: usize,
}

impl CostConfig {
    pub fn new(c: usize, h: usize, w: usize, n: usize, r: usize) -> Self {
        Self { c, h, w, n, r }
    }

    fn check(&self, block: Block) -> Result<()> {
        if self.r == 0 || !self.c.is_multiple_of(self.r) {
            return Err(Error::config(format!(
                "{block}: channels {} not divisible by reduction ratio {}",
                self.c, self.r
            )));
        }
        if self.c == 0 || self.h == 0 || self.w == 0 || (block == Block::Scm && self.n == 0) {
            return Err(Error::config(format!("{block}: sizes must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub block: Block,
    pub config: CostConfig,
    pub macs: u64,
    pub params: u64,
    pub peak_activation_scalars: u64,
    /// MACs per sub-op, in execution order.
    pub breakdown: Vec<(String, u64)>,
}

impl CostReport {
    fn new(block: Block, config: CostConfig, params: u64, peak: u64, breakdown: Vec<(&str, u64)>) -> Self {
        let breakdown: Vec<(String, u64)> = breakdown.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self {
            block,
            config,
            macs: breakdown.iter().map(|(_, v)| v).sum(),
            params,
            peak_activation_scalars: peak,
            breakdown,
        }
    }

    pub fn stage(&self, name: &str) -> Option<u64> {
        self.breakdown.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Affinity plus aggregation MACs.
    pub fn attention_macs(&self) -> u64 {
        self.stage("affinity").unwrap_or(0) + self.stage("aggregation").unwrap_or(0)
    }
}

/// Closed-form cost of the spatial context module.
pub fn scm_cost(cfg: CostConfig) -> Result<CostReport> {
    cfg.check(Block::Scm)?;
    let (c, n) = (cfg.c as u64, cfg.n as u64);
    let hw = (cfg.h * cfg.w) as u64;
    let i = c / cfg.r as u64;
    let breakdown = vec![
        ("proj_b", i * c * hw),
        ("proj_c", i * c * n),
        ("proj_d", i * c * n),
        ("affinity", hw * n * i),
        ("softmax", 0),
        ("aggregation", hw * n * i),
        // 1×1 conv, then normalisation: one multiply per element and two per channel
        ("rho", i * c * hw + c * hw + 2 * c),
    ];
    let params = 3 * (c * i + i) + i * c + 2 * c;
    // projections, scores, affinity, attended, then rho's conv/norm/relu outputs
    let peak = i * hw + 2 * i * n + 2 * hw * n + i * hw + 3 * c * hw;
    Ok(CostReport::new(Block::Scm, cfg, params, peak, breakdown))
}

/// Closed-form cost of the pixel-to-pixel non-local block.
pub fn nonlocal_cost(cfg: CostConfig) -> Result<CostReport> {
    cfg.check(Block::NonLocal)?;
    let c = cfg.c as u64;
    let hw = (cfg.h * cfg.w) as u64;
    let i = c / cfg.r as u64;
    let breakdown = vec![
        ("theta", i * c * hw),
        ("phi", i * c * hw),
        ("g", i * c * hw),
        ("affinity", hw * hw * i),
        ("softmax", 0),
        ("aggregation", hw * hw * i),
        ("out", c * i * hw),
        ("residual", 0),
    ];
    let params = 3 * (c * i + i) + i * c + c;
    // three projections, HW×HW scores and affinity, aggregate, output projection, sum
    let peak = 3 * i * hw + 2 * hw * hw + i * hw + 2 * c * hw;
    Ok(CostReport::new(Block::NonLocal, cfg, params, peak, breakdown))
}

pub fn cost(block: Block, cfg: CostConfig) -> Result<CostReport> {
    match block {
        Block::Scm => scm_cost(cfg),
        Block::NonLocal => nonlocal_cost(cfg),
    }
}

/// Counts observed while executing a block with [`Counted`] scalars.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observed {
    pub stages: Vec<(String, u64)>,
    pub params: u64,
    pub peak_activation_scalars: u64,
}

fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<Counted> {
    let mut init = Init { rng };
    init.uniform(shape, 1.0)
}

/// Scalars produced by graph nodes from `first` on, reshapes excluded.
fn retained(g: &Graph<Counted>, first: usize) -> u64 {
    (first..g.len())
        .map(Var::from_index)
        .filter(|&v| g.op_name(v) != "reshape")
        .map(|v| g.value(v).numel() as u64)
        .sum()
}

fn mark_tracked(store: &mut ParamStore<Counted>) {
    // eval-mode normalisation warns about never-updated statistics otherwise
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, name, _, _)| name.ends_with(".tracked"))
        .map(|(id, ..)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut()[0] = Counted(1.0);
    }
}

/// Runs one eval-mode forward pass of `block` at batch 1 and counts every
/// scalar multiplication per sub-op.
pub fn instrumented(block: Block, cfg: CostConfig) -> Result<Observed> {
    cfg.check(block)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<Counted>::new();
    let mut g = Graph::new();
    let (c, h, w, n, r) = (cfg.c, cfg.h, cfg.w, cfg.n, cfg.r);
    enum Built {
        Scm(Scm),
        NonLocal(NonLocal),
    }
    let built = {
        let mut init = Init { rng: &mut rng };
        match block {
            Block::Scm => Built::Scm(Scm::new(&mut store, &mut init, "scm", c, r)?),
            Block::NonLocal => {
                let mut nl = NonLocal::new(&mut store, &mut init, "nonlocal", c, r)?;
                nl.pixel_cap = usize::MAX;
                Built::NonLocal(nl)
            }
        }
    };
    mark_tracked(&mut store);
    let params = store.param_count() as u64;
    let bound: Bound = store.bind(&mut g);
    let x = g.constant(input(&[1, c, h, w], &mut rng));
    let m = g.constant(input(&[1, c, n.max(1)], &mut rng));
    let first = g.len();
    counted::reset();
    {
        let mut cx = Ctx::new(&mut g, &store, &bound, false);
        match &built {
            Built::Scm(s) => {
                s.forward(&mut cx, x, m)?;
            }
            Built::NonLocal(nl) => {
                nl.forward(&mut cx, x)?;
            }
        }
    }
    let stages = counted::take_stages();
    Ok(Observed {
        stages,
        params,
        peak_activation_scalars: retained(&g, first),
    })
}

/// One row of a comparison between closed-form and observed counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub item: String,
    pub analytic: Option<u64>,
    pub observed: Option<u64>,
}

impl CountRow {
    pub fn matches(&self) -> bool {
        self.analytic == self.observed
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountCheck {
    pub block: Block,
    pub config: CostConfig,
    pub rows: Vec<CountRow>,
}

impl CountCheck {
    pub fn is_exact(&self) -> bool {
        self.rows.iter().all(CountRow::matches)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &CountRow> {
        self.rows.iter().filter(|r| !r.matches())
    }
}

impl fmt::Display for CountCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "{} at C={} H={} W={} N={} r={}:",
            self.block, c.c, c.h, c.w, c.n, c.r
        )?;
        let show = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        for row in &self.rows {
            let mark = if row.matches() { "ok" } else { "MISMATCH" };
            let diff = match (row.analytic, row.observed) {
                (Some(a), Some(o)) => format!("{:+}", o as i128 - a as i128),
                _ => "n/a".to_string(),
            };
            writeln!(
                f,
                "  {:<14} analytic {:>14} observed {:>14} diff {:>10}  {mark}",
                row.item,
                show(row.analytic),
                show(row.observed),
                diff
            )?;
        }
        Ok(())
    }
}

/// Lines up a closed-form report against observed counts, sub-op by sub-op.
pub fn compare(analytic: &CostReport, observed: &Observed) -> CountCheck {
    let mut rows = Vec::new();
    let mut names: Vec<&str> = analytic.breakdown.iter().map(|(k, _)| k.as_str()).collect();
    for (k, _) in &observed.stages {
        if !names.contains(&k.as_str()) {
            names.push(k);
        }
    }
    for name in names {
        rows.push(CountRow {
            item: name.to_string(),
            analytic: analytic.stage(name),
            observed: observed.stages.iter().find(|(k, _)| k == name).map(|(_, v)| *v),
        });
    }
    let observed_total: u64 = observed.stages.iter().map(|(_, v)| v).sum();
    rows.push(CountRow {
        item: "macs".into(),
        analytic: Some(analytic.macs),
        observed: Some(observed_total),
    });
    rows.push(CountRow {
        item: "params".into(),
        analytic: Some(analytic.params),
        observed: Some(observed.params),
    });
    rows.push(CountRow {
        item: "peak".into(),
        analytic: Some(analytic.peak_activation_scalars),
        observed: Some(observed.peak_activation_scalars),
    });
    CountCheck {
        block: analytic.block,
        config: analytic.config,
        rows,
    }
}

/// Runs `block` with counting scalars and compares against the closed forms.
/// A mismatch is an error whose message is the per-sub-op table.
pub fn verify_counts(block: Block, cfg: CostConfig) -> Result<CountCheck> {
    let check = compare(&cost(block, cfg)?, &instrumented(block, cfg)?);
    if check.is_exact() {
        Ok(check)
    } else {
        Err(Error::Numerical(format!("cost counts disagree\n{check}")))
    }
}

pub const CSV_HEADER: &str = "C,H,W,N,r,scm_macs,scm_params,scm_peak,nonlocal_macs,nonlocal_params,nonlocal_peak,attn_ratio,total_ratio";

/// One CSV row comparing both blocks at `cfg`; ratios are nonlocal / scm.
pub fn csv_row(cfg: CostConfig) -> Result<String> {
    let s = scm_cost(cfg)?;
    let nl = nonlocal_cost(cfg)?;
    Ok(format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
        cfg.c,
        cfg.h,
        cfg.w,
        cfg.n,
        cfg.r,
        s.macs,
        s.params,
        s.peak_activation_scalars,
        nl.macs,
        nl.params,
        nl.peak_activation_scalars,
        nl.attention_macs() as f64 / s.attention_macs() as f64,
        nl.macs as f64 / s.macs as f64
    ))
}

/// Header plus one row per configuration.
pub fn cost_csv(configs: &[CostConfig]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for &cfg in configs {
        out.push_str(&csv_row(cfg)?);
        out.push('\n');
    }
    Ok(out)
}
