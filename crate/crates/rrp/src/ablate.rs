//! Labeling, area-size and relation-depth sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rrp_core::data::Sample;
use rrp_core::evaluation::evaluate;
use rrp_core::labeling::LabelConfig;
use rrp_core::model::Model;
use rrp_core::training::{fit, LabelKind};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CSV_FILE: &str = "ablation.csv";
pub const REPORT_FILE: &str = "ablation_report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    DensityMap,
    CountMap,
    CountMapRram,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::DensityMap,
        Variant::CountMap,
        Variant::CountMapRram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DensityMap => "density_map",
            Variant::CountMap => "count_map",
            Variant::CountMapRram => "count_map_rram",
        }
    }

    fn label_kind(self) -> LabelKind {
        match self {
            Variant::DensityMap => LabelKind::DensityMap,
            _ => LabelKind::CountMap,
        }
    }

    fn rram(self) -> bool {
        self == Variant::CountMapRram
    }
}

/// Which table a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Labeling,
    AreaSize,
    RelationDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    #[serde(skip)]
    pub block: Block,
    pub variant: &'static str,
    pub r: usize,
    pub gcn_layers: usize,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
}

/// One training run per grid cell; identical cells are trained once.
pub fn run_grid(cfg: &RunConfig, train: &[Sample], test: &[Sample]) -> Result<Vec<Row>> {
    if test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test set".into()));
    }
    let mut cells = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for v in Variant::ALL {
            cells.push((Block::Labeling, v, cfg.label.r, cfg.rram.gcn_layers, seed));
        }
        for &r in &cfg.ablate.r_values {
            cells.push((
                Block::AreaSize,
                Variant::CountMap,
                r,
                cfg.rram.gcn_layers,
                seed,
            ));
        }
        for &l in &cfg.ablate.gcn_layers {
            cells.push((
                Block::RelationDepth,
                Variant::CountMapRram,
                cfg.label.r,
                l,
                seed,
            ));
        }
    }
    let mut cache: BTreeMap<(Variant, usize, usize, u64), (f64, f64)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (block, v, r, layers, seed) in cells {
        // gcn depth is irrelevant without the relation module
        let layers = if v.rram() { layers } else { 0 };
        let key = (v, r, layers, seed);
        let (mae, mse) = match cache.get(&key) {
            Some(&m) => m,
            None => {
                let m = train_cell(cfg, train, test, v, r, layers, seed)?;
                println!(
                    "{} r={r} gcn_layers={layers} seed={seed}: mae {:.4} mse {:.4}",
                    v.name(),
                    m.0,
                    m.1
                );
                cache.insert(key, m);
                m
            }
        };
        rows.push(Row {
            block,
            variant: v.name(),
            r,
            gcn_layers: layers,
            seed,
            mae,
            mse,
        });
    }
    Ok(rows)
}

fn train_cell(
    cfg: &RunConfig,
    train: &[Sample],
    test: &[Sample],
    v: Variant,
    r: usize,
    layers: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let label = LabelConfig {
        r,
        ..cfg.label.clone()
    };
    let mut rram = cfg.rram.clone();
    rram.gcn_layers = layers;
    let model = Model::new(cfg.model.clone(), v.rram().then_some(rram), label.clone())?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.label_kind = v.label_kind();
    tc.rram_enabled = v.rram();
    if let Some(e) = cfg.ablate.epochs {
        tc.epochs = e;
    }
    let mut params = model.init_params(seed);
    fit(
        &model,
        &tc,
        &mut params,
        train,
        &[],
        &mut || 0.0,
        &mut |_, _| {},
    )?;
    let m = evaluate(&model, &params, test, tc.label_kind.coverage(&label))?;
    Ok((m.mae, m.mse))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_where(rows: &[Row], pred: impl Fn(&Row) -> bool) -> f64 {
    let mut v: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.mae).collect();
    median(&mut v)
}

/// Median MAE tables and the expected-direction findings.
pub fn report(rows: &[Row]) -> String {
    let mut s = String::new();
    let lab = |v: Variant| {
        median_where(rows, |r| {
            r.block == Block::Labeling && r.variant == v.name()
        })
    };
    let _ = writeln!(s, "labeling (median MAE over seeds)");
    for v in Variant::ALL {
        let _ = writeln!(s, "  {:<16} {:.4}", v.name(), lab(v));
    }
    let (d, c, cr) = (
        lab(Variant::DensityMap),
        lab(Variant::CountMap),
        lab(Variant::CountMapRram),
    );
    let finding = |s: &mut String, what: &str, ok: bool, a: f64, b: f64| {
        let verdict = if ok { "as expected" } else { "DEVIATION" };
        let _ = writeln!(s, "  {what}: {verdict} ({a:.4} vs {b:.4})");
    };
    let _ = writeln!(s, "expected directions");
    finding(&mut s, "count_map <= density_map", c <= d, c, d);
    finding(&mut s, "count_map_rram <= count_map", cr <= c, cr, c);

    let mut rs: Vec<usize> = rows
        .iter()
        .filter(|r| r.block == Block::AreaSize)
        .map(|r| r.r)
        .collect();
    rs.sort_unstable();
    rs.dedup();
    let _ = writeln!(s, "area size r, count_map (median MAE)");
    for r in rs {
        let m = median_where(rows, |x| x.block == Block::AreaSize && x.r == r);
        let _ = writeln!(s, "  r={r:<3} {m:.4}");
    }
    let mut ls: Vec<usize> = rows
        .iter()
        .filter(|r| r.block == Block::RelationDepth)
        .map(|r| r.gcn_layers)
        .collect();
    ls.sort_unstable();
    ls.dedup();
    let _ = writeln!(s, "gcn layers, count_map_rram (median MAE)");
    for l in ls {
        let m = median_where(rows, |x| {
            x.block == Block::RelationDepth && x.gcn_layers == l
        });
        let _ = writeln!(s, "  layers={l} {m:.4}");
    }
    s
}

pub fn write_csv(rows: &[Row], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs the grid on the configured datasets, writes the CSV and the report,
/// and returns the report text.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(Vec<Row>, String)> {
    cfg.validate()?;
    for &r in &cfg.ablate.r_values {
        LabelConfig::with_r(r).validate()?;
    }
    let out = &cfg.paths.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.echo(out)?;
    let train = cfg.train_set()?;
    let test = cfg.test_set()?;
    let rows = run_grid(cfg, &train, &test)?;
    write_csv(&rows, &out.join(CSV_FILE))?;
    let text = report(&rows);
    fs::write(out.join(REPORT_FILE), &text).map_err(|e| Error::io(out.join(REPORT_FILE), e))?;
    Ok((rows, text))
}
