//! Branching attention against naive per-query sequences.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use viewformer_core::attention::{plan_forward, AttentionPlan};
use viewformer_core::metrics::median;
use viewformer_core::rng::{normal_tensor, seeded};
use viewformer_core::tensor::{matmul, Tensor};

use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::report::write_csv;

/// Trunk plus one branch row per task.
pub const BRANCHES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub branching_nodes: usize,
    pub naive_nodes: usize,
    pub branching_ms: f64,
    pub naive_ms: f64,
    pub ratio: f64,
}

struct Layer {
    wq: Tensor<f32>,
    wk: Tensor<f32>,
    wv: Tensor<f32>,
    wo: Tensor<f32>,
    heads: usize,
}

impl Layer {
    fn run(&self, x: &Tensor<f32>, plan: &AttentionPlan) -> Result<Tensor<f32>> {
        let q = matmul(x, &self.wq)?;
        let k = matmul(x, &self.wk)?;
        let v = matmul(x, &self.wv)?;
        let (a, _) = plan_forward(&q, &k, &v, self.heads, plan)?;
        Ok(matmul(&a, &self.wo)?)
    }
}

/// Times one attention layer per plan. Node counts are read off the plans
/// that were actually run.
pub fn bench_attention(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.heads == 0 || !cfg.d_m.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!("bad benchmark shape {cfg:?}")));
    }
    let mut rng = seeded(seed);
    let d = cfg.d_m;
    let std = 1.0 / (d as f64).sqrt();
    let layer = Layer {
        wq: normal_tensor(&[d, d], std, &mut rng),
        wk: normal_tensor(&[d, d], std, &mut rng),
        wv: normal_tensor(&[d, d], std, &mut rng),
        wo: normal_tensor(&[d, d], std, &mut rng),
        heads: cfg.heads,
    };
    let block = cfg.k * cfg.k;
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        if n <= cfg.n_min {
            return Err(Error::Config(format!(
                "n={n} leaves no query views after n_min={}",
                cfg.n_min
            )));
        }
        let tree = AttentionPlan::tree(n, block, BRANCHES);
        let naive: Vec<AttentionPlan> = (cfg.n_min + 1..=n).map(|i| AttentionPlan::causal(i, block)).collect();
        let tree_x = normal_tensor(&[tree.rows(), d], 1.0, &mut rng);
        let naive_x: Vec<Tensor<f32>> = naive
            .iter()
            .map(|p| normal_tensor(&[p.rows(), d], 1.0, &mut rng))
            .collect();
        let branching_nodes = tree.rows();
        let naive_nodes: usize = naive.iter().map(|p| p.rows()).sum();
        // small n repeats the work so each sample is long enough to time
        let inner = (64 / n).max(1);
        let mut t_tree = Vec::with_capacity(cfg.repeats);
        let mut t_naive = Vec::with_capacity(cfg.repeats);
        layer.run(&tree_x, &tree)?;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            for _ in 0..inner {
                std::hint::black_box(layer.run(&tree_x, &tree)?);
            }
            t_tree.push(start.elapsed().as_secs_f64() * 1e3 / inner as f64);
            let start = Instant::now();
            for _ in 0..inner {
                for (x, p) in naive_x.iter().zip(&naive) {
                    std::hint::black_box(layer.run(x, p)?);
                }
            }
            t_naive.push(start.elapsed().as_secs_f64() * 1e3 / inner as f64);
        }
        let (branching_ms, naive_ms) = (median(&t_tree), median(&t_naive));
        rows.push(BenchRow {
            n,
            branching_nodes,
            naive_nodes,
            branching_ms,
            naive_ms,
            ratio: naive_ms / branching_ms,
        });
    }
    Ok(rows)
}

pub fn write_bench(dir: &Path, rows: &[BenchRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_csv(&dir.join("bench_attention.csv"), rows)?;
    let path = dir.join("bench_attention.svg");
    std::fs::write(&path, plot(rows)).map_err(Error::io(&path))
}

/// Log-log plot of wall time against n.
fn plot(rows: &[BenchRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let ys = rows
        .iter()
        .flat_map(|r| [r.branching_ms, r.naive_ms])
        .filter(|v| *v > 0.0);
    let (lo, hi) = ys.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v.log10()), b.max(v.log10())));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).log2()).collect();
    let (x0, x1) = (
        xs.first().copied().unwrap_or(0.0),
        xs.last().copied().unwrap_or(1.0).max(xs[0] + 1e-9),
    );
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |v: f64| h - pad - (v.max(1e-12).log10() - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">attention layer wall time (ms, log scale)</text>"#,
        w / 2.0
    );
    for (r, &x) in rows.iter().zip(&xs) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">n={}</text>"#,
            px(x),
            h - pad + 18.0,
            r.n
        );
    }
    for (label, color, get) in [
        (
            "branching",
            "#1f77b4",
            (|r: &BenchRow| r.branching_ms) as fn(&BenchRow) -> f64,
        ),
        ("naive", "#d62728", |r: &BenchRow| r.naive_ms),
    ] {
        let pts: Vec<String> = rows
            .iter()
            .zip(&xs)
            .map(|(r, &x)| format!("{:.1},{:.1}", px(x), py(get(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        if let (Some(r), Some(&x)) = (rows.last(), xs.last()) {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{label}</text>"#,
                px(x) - 60.0,
                py(get(r)) - 6.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
