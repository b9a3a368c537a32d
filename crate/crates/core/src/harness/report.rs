use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::finetune::mean_sd;
use crate::harness::lottery::LotteryCurve;
use crate::harness::spec::Mode;
use crate::harness::sweep::CellOutcome;

pub const RESULTS_CSV: &str = "results.csv";
pub const AGGREGATED_CSV: &str = "aggregated.csv";
pub const LOTTERY_CSV: &str = "lottery.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// One seed of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: Mode,
    pub bits: Option<u8>,
    pub lambda: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub seed: u64,
    pub f1: f64,
    pub sparsity: f64,
    pub storage_bits_per_param: f64,
    pub wall_s: f64,
}

/// Mean and population SD over the seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub bits: Option<u8>,
    pub lambda: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub seeds: usize,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub sparsity: f64,
    pub storage_bits_per_param: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryRow {
    pub round: usize,
    pub sparsity: f64,
    pub target_sparsity: f64,
    pub f1: f64,
    pub rewound: bool,
}

type CellKey = (Mode, Option<u8>, Option<u64>, Option<u64>);

fn key(mode: Mode, bits: Option<u8>, lambda: Option<f64>, keep: Option<f64>) -> CellKey {
    (mode, bits, lambda.map(f64::to_bits), keep.map(f64::to_bits))
}

pub fn result_rows(outcomes: &[CellOutcome]) -> Vec<ResultRow> {
    outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .flat_map(|r| {
            r.seeds.iter().map(|s| ResultRow {
                mode: r.spec.mode,
                bits: r.spec.bits,
                lambda: r.spec.lambda,
                keep_fraction: r.spec.keep_fraction,
                seed: s.seed,
                f1: s.f1,
                sparsity: s.sparsity,
                storage_bits_per_param: s.storage_bits_per_param,
                wall_s: s.wall_s,
            })
        })
        .collect()
}

/// Groups rows by (mode, bits, lambda, keep) in order of first appearance.
pub fn aggregate_rows(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<CellKey> = Vec::new();
    let mut groups: Vec<Vec<&ResultRow>> = Vec::new();
    for r in rows {
        let k = key(r.mode, r.bits, r.lambda, r.keep_fraction);
        match keys.iter().position(|x| *x == k) {
            Some(i) => groups[i].push(r),
            None => {
                keys.push(k);
                groups.push(vec![r]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let f1: Vec<f64> = g.iter().map(|r| r.f1).collect();
            let sp: Vec<f64> = g.iter().map(|r| r.sparsity).collect();
            let (f1_mean, f1_sd) = mean_sd(&f1);
            AggregateRow {
                mode: g[0].mode,
                bits: g[0].bits,
                lambda: g[0].lambda,
                keep_fraction: g[0].keep_fraction,
                seeds: g.len(),
                f1_mean,
                f1_sd,
                sparsity: mean_sd(&sp).0,
                storage_bits_per_param: g[0].storage_bits_per_param,
                status: "ok".into(),
            }
        })
        .collect()
}

/// Aggregates of the successful cells followed by one row per failed cell.
pub fn aggregate_outcomes(outcomes: &[CellOutcome]) -> Vec<AggregateRow> {
    let mut rows = aggregate_rows(&result_rows(outcomes));
    for o in outcomes {
        if let Err(e) = &o.result {
            rows.push(AggregateRow {
                mode: o.spec.mode,
                bits: o.spec.bits,
                lambda: o.spec.lambda,
                keep_fraction: o.spec.keep_fraction,
                seeds: o.spec.seeds.len(),
                f1_mean: f64::NAN,
                f1_sd: f64::NAN,
                sparsity: f64::NAN,
                storage_bits_per_param: f64::NAN,
                status: format!("failed: {e}"),
            });
        }
    }
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn lottery_rows(curve: &LotteryCurve) -> Vec<LotteryRow> {
    curve
        .points
        .iter()
        .map(|p| LotteryRow {
            round: p.round,
            sparsity: p.sparsity,
            target_sparsity: p.target_sparsity,
            f1: p.f1,
            rewound: p.rewound(),
        })
        .collect()
}

/// A polyline with optional ± error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y, sd)`.
    pub points: Vec<(f64, f64, f64)>,
    pub dashed: bool,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A self-contained SVG line chart. `x_ticks` replaces the numeric x axis
/// labels when given.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], x_ticks: Option<&[(f64, String)]>) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(pts().map(|p| p.0).chain(x_ticks.into_iter().flatten().map(|t| t.0)));
    let (y0, y1) = bounds(pts().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{0}" y1="{1:.2}" y2="{1:.2}" stroke="#ddd"/><text x="{2}" y="{3:.2}" text-anchor="end">{4:.3}</text>"##,
            LEFT + pw,
            sy(y),
            LEFT - 6.0,
            sy(y) + 4.0,
            y
        );
    }
    let ticks: Vec<(f64, String)> = match x_ticks {
        Some(t) => t.to_vec(),
        None => (0..=4)
            .map(|i| {
                let x = x0 + (x1 - x0) * i as f64 / 4.0;
                (x, format!("{x:.3}"))
            })
            .collect(),
    };
    for (x, label) in &ticks {
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" x2="{0:.2}" y1="{1}" y2="{2}" stroke="#333"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"##,
            sx(*x),
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            esc(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 15.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        esc(y_label)
    );

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let path: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path.join(" ")
        );
        for &(x, y, sd) in &ser.points {
            if sd > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0:.2}" x2="{0:.2}" y1="{1:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                    sx(x),
                    sy(y - sd),
                    sy(y + sd)
                );
            }
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

const FULL_PRECISION_X: f64 = 16.0;

/// Structure-mode F1 against bit width, with the weights-mode mean as a
/// dashed reference.
pub fn dose_response_chart(rows: &[AggregateRow]) -> Option<String> {
    let plain = |r: &&AggregateRow| r.status == "ok" && r.lambda.is_none_or(|l| l == 0.0) && r.keep_fraction.is_none();
    let mut pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(plain)
        .filter(|r| r.mode == Mode::FinetuneStructure)
        .map(|r| (r.bits.map_or(FULL_PRECISION_X, f64::from), r.f1_mean, r.f1_sd))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut series = vec![Series {
        name: "structure".into(),
        points: pts,
        dashed: false,
    }];
    if let Some(w) = rows.iter().filter(plain).find(|r| r.mode == Mode::FinetuneWeights) {
        series.push(Series {
            name: "weights".into(),
            points: vec![(1.0, w.f1_mean, 0.0), (FULL_PRECISION_X, w.f1_mean, 0.0)],
            dashed: true,
        });
    }
    let ticks: Vec<(f64, String)> = [1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&b| (b, format!("{b}-bit")))
        .chain([(FULL_PRECISION_X, "fp64".to_string())])
        .collect();
    Some(line_chart("F1 vs. frozen-weight precision", "bits", "dev F1", &series, Some(&ticks)))
}

/// Top-k structure F1 against sparsity, plus the pruning baseline if given.
pub fn sparsity_chart(rows: &[AggregateRow], lottery: Option<&[LotteryRow]>) -> Option<String> {
    let mut pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.status == "ok" && r.mode == Mode::FinetuneStructure && r.keep_fraction.is_some())
        .map(|r| (r.sparsity, r.f1_mean, r.f1_sd))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut series = Vec::new();
    if !pts.is_empty() {
        series.push(Series {
            name: "mask search".into(),
            points: pts,
            dashed: false,
        });
    }
    if let Some(l) = lottery.filter(|l| !l.is_empty()) {
        series.push(Series {
            name: "magnitude pruning".into(),
            points: l.iter().map(|p| (p.sparsity, p.f1, 0.0)).collect(),
            dashed: true,
        });
    }
    (!series.is_empty()).then(|| line_chart("F1 vs. sparsity", "sparsity", "dev F1", &series, None))
}

/// F1 against the mixture coefficient, one series per mode, on an ordinal
/// axis.
pub fn mixture_chart(rows: &[AggregateRow]) -> Option<String> {
    let mixed: Vec<&AggregateRow> = rows
        .iter()
        .filter(|r| r.status == "ok" && r.lambda.is_some() && r.bits.is_none() && r.keep_fraction.is_none())
        .collect();
    let mut lambdas: Vec<f64> = mixed.iter().filter_map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    if lambdas.len() < 2 {
        return None;
    }
    let pos = |l: f64| lambdas.iter().position(|&x| x == l).unwrap_or(0) as f64;
    let series: Vec<Series> = [Mode::FinetuneStructure, Mode::FinetuneWeights]
        .iter()
        .filter_map(|&m| {
            let mut pts: Vec<(f64, f64, f64)> = mixed
                .iter()
                .filter(|r| r.mode == m)
                .map(|r| (pos(r.lambda.unwrap_or(0.0)), r.f1_mean, r.f1_sd))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (!pts.is_empty()).then(|| Series {
                name: m.as_str().trim_start_matches("finetune_").into(),
                points: pts,
                dashed: m == Mode::FinetuneWeights,
            })
        })
        .collect();
    let ticks: Vec<(f64, String)> = lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let label = if l > 0.0 && l < 1.0 && l.log2().fract() == 0.0 {
                format!("2^{}", l.log2())
            } else {
                format!("{l}")
            };
            (i as f64, label)
        })
        .collect();
    Some(line_chart("F1 vs. mixture toward random weights", "lambda", "dev F1", &series, Some(&ticks)))
}

/// Writes every chart the rows support; returns the file names written.
pub fn write_charts(dir: &Path, rows: &[AggregateRow], lottery: Option<&[LotteryRow]>) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let charts = [
        ("dose_response.svg", dose_response_chart(rows)),
        ("sparsity.svg", sparsity_chart(rows, lottery)),
        ("mixture.svg", mixture_chart(rows)),
    ];
    for (name, svg) in charts {
        if let Some(svg) = svg {
            let path = dir.join(name);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(name.to_string());
        }
    }
    Ok(written)
}

/// `results.csv` and `aggregated.csv` for a finished grid.
pub fn write_results(dir: &Path, outcomes: &[CellOutcome]) -> Result<Vec<AggregateRow>> {
    write_csv(&dir.join(RESULTS_CSV), &result_rows(outcomes))?;
    let agg = aggregate_outcomes(outcomes);
    write_csv(&dir.join(AGGREGATED_CSV), &agg)?;
    Ok(agg)
}
