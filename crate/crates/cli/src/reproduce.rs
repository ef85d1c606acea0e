//! Monte Carlo reproductions of the simulation tables and consistency
//! figures, with the published values alongside.

use std::path::{Path, PathBuf};

use cma_core::multilevel::Method;
use cma_core::simulate::{monte_carlo, stream_seed, Block, Design, Estimator, MultilevelConfig, Quantity};
use serde::Serialize;

use crate::error::Result;
use crate::io::write_rows;
use crate::reference::{lookup, RefRow, COLUMNS, TABLE1, TABLE2, TABLE3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Table1,
    Table2,
    Table3,
    Fig5,
    Fig6,
}

impl Target {
    pub fn default_reps(self) -> usize {
        match self {
            Target::Table1 => 200,
            Target::Table2 | Target::Table3 => 50,
            Target::Fig5 | Target::Fig6 => 30,
        }
    }

    fn id(self) -> u64 {
        match self {
            Target::Table1 => 1,
            Target::Table2 => 2,
            Target::Table3 => 3,
            Target::Fig5 => 5,
            Target::Fig6 => 6,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Target::Table1 => "table1",
            Target::Table2 => "table2",
            Target::Table3 => "table3",
            Target::Fig5 => "fig5",
            Target::Fig6 => "fig6",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproduceOptions {
    pub target: Target,
    pub reps: usize,
    pub seed: u64,
    /// Subject counts for the figures.
    pub n_grid: Vec<usize>,
    /// Session counts for the figures.
    pub k_grid: Vec<usize>,
}

/// A table's estimators with the method labels used in the published table.
fn table_setup(target: Target, block: Block) -> (Design, Vec<(&'static str, Estimator)>) {
    let (_, _, _, delta) = block.truth();
    let multi = |m: Method| Estimator::Multilevel { method: m, delta: None };
    match target {
        Target::Table1 => (
            Design::Single(block.single(0)),
            vec![("CMA", Estimator::Single { delta }), ("BK", Estimator::Single { delta: 0.0 })],
        ),
        Target::Table2 => (
            Design::Multilevel(block.multilevel(0)),
            vec![
                (
                    "CMA-ts",
                    Estimator::Multilevel {
                        method: Method::Ts,
                        delta: Some(delta),
                    },
                ),
                ("KKB", multi(Method::Kkb)),
            ],
        ),
        _ => (
            Design::Multilevel(block.multilevel(0)),
            [Method::Ml, Method::H, Method::HTs, Method::Kkb]
                .into_iter()
                .map(|m| (m.label(), multi(m)))
                .collect(),
        ),
    }
}

fn columns(target: Target) -> &'static [Quantity] {
    match target {
        Target::Table1 => &COLUMNS[1..7],
        Target::Table2 => &COLUMNS[1..],
        _ => &COLUMNS[..],
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

fn column_index(q: Quantity) -> usize {
    COLUMNS.iter().position(|&c| c == q).expect("every quantity is a column")
}

fn reference(target: Target) -> &'static [RefRow] {
    match target {
        Target::Table1 => TABLE1,
        Target::Table2 => TABLE2,
        _ => TABLE3,
    }
}

/// Runs a table target; returns the written file.
fn run_table(opts: &ReproduceOptions, out_dir: &Path) -> Result<PathBuf> {
    let cols = columns(opts.target);
    let mut header = vec!["block".to_string(), "method".into(), "source".into(), "n_ok".into()];
    for q in cols {
        header.push(q.name().to_string());
        header.push(format!("{}_sd", q.name()));
    }
    let mut rows = Vec::new();
    for (b, block) in Block::ALL.into_iter().enumerate() {
        let (design, estimators) = table_setup(opts.target, block);
        let est: Vec<Estimator> = estimators.iter().map(|e| e.1).collect();
        let seed = stream_seed(opts.seed, &[opts.target.id(), b as u64]);
        let summary = monte_carlo(&design, &est, opts.reps, seed)?;
        let truth = design.truth();

        let mut t = vec![block.name().to_string(), "truth".into(), "truth".into(), String::new()];
        for q in cols {
            t.push(cell(truth.get(q).copied()));
            t.push(String::new());
        }
        rows.push(t);

        for ((label, _), s) in estimators.iter().zip(&summary.estimators) {
            let mut r = vec![block.name().to_string(), label.to_string(), "this_run".into(), s.n_ok.to_string()];
            for &q in cols {
                let v = s.get(q);
                r.push(cell(v.map(|v| v.mean)));
                r.push(cell(v.map(|v| v.sd)));
            }
            rows.push(r);
            if let Some(p) = lookup(reference(opts.target), block, label) {
                let mut r = vec![block.name().to_string(), label.to_string(), "published".into(), String::new()];
                for &q in cols {
                    let i = column_index(q);
                    r.push(cell(Some(p.mean[i])));
                    r.push(cell(Some(p.sd[i])));
                }
                rows.push(r);
            }
        }
    }
    let path = out_dir.join(format!("{}.csv", opts.target.name()));
    write_rows(&path, &header, &rows)?;
    Ok(path)
}

/// Runs a consistency figure target over the (N, K) grid.
fn run_figure(opts: &ReproduceOptions, out_dir: &Path) -> Result<PathBuf> {
    let method = match opts.target {
        Target::Fig5 => Method::Ml,
        _ => Method::HTs,
    };
    let header: Vec<String> = ["n_subjects", "n_sessions", "method", "quantity", "truth", "mean", "bias", "mse", "sd", "n_ok"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for &k in &opts.k_grid {
        for &n in &opts.n_grid {
            let cfg = MultilevelConfig {
                n_subjects: n,
                n_sessions: k,
                ..Block::Alternative.multilevel(0)
            };
            let seed = stream_seed(opts.seed, &[opts.target.id(), n as u64, k as u64]);
            let est = Estimator::Multilevel { method, delta: None };
            let summary = monte_carlo(&Design::Multilevel(cfg), &[est], opts.reps, seed)?;
            let s = &summary.estimators[0];
            for q in [Quantity::Delta, Quantity::C, Quantity::B] {
                let v = s.get(q).expect("delta, C and B are always reported");
                let truth = v.truth.unwrap_or(f64::NAN);
                rows.push(vec![
                    n.to_string(),
                    k.to_string(),
                    method.label().to_string(),
                    q.name().to_string(),
                    cell(Some(truth)),
                    cell(Some(v.mean)),
                    cell(Some(v.mean - truth)),
                    cell(v.mse),
                    cell(Some(v.sd)),
                    s.n_ok.to_string(),
                ]);
            }
        }
    }
    let path = out_dir.join(format!("{}.csv", opts.target.name()));
    write_rows(&path, &header, &rows)?;
    Ok(path)
}

pub fn run(opts: &ReproduceOptions, out_dir: &Path) -> Result<PathBuf> {
    match opts.target {
        Target::Fig5 | Target::Fig6 => run_figure(opts, out_dir),
        _ => run_table(opts, out_dir),
    }
}
