//! Resistance, gamma and intersection scans.

use std::fmt;
use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{with_threads, write_metadata, ExperimentConfig, HarnessError, Model, Result};
use crate::blocks::{
    analyze_blocks, analyze_two_trees, BlockParams, BlockReport, IntersectionRecord, TwoTreeOptions, TwoTreeOutcome,
    TwoTreeSampler,
};
use crate::branching::{TnmOptions, TnmSampler};
use crate::resistance::{effective_resistance, measure_level, Multigraph, ResistanceRow, SolverOptions};
use crate::rng;
use crate::stats::{paley_zygmund, weighted_slope, Moments, PaleyZygmund};
use crate::trace::{embed, embed_bridge_with};
use crate::walk::{BridgeSampler, Site};

fn run_replicates<T: Send>(reps: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..reps as u64).into_par_iter().map(f).collect()
}

/// Splits per-replicate results into values and a failure count, reporting
/// each failure on standard error.
fn partition<T>(label: &str, results: Vec<Result<T>>) -> (Vec<T>, usize) {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => {
                failures += 1;
                eprintln!("{label}: replicate {r} failed: {e}");
            }
        }
    }
    (ok, failures)
}

/// One row of the resistance scan. `wall_time` (seconds) goes to standard
/// error only, so that the CSV stays reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub n: usize,
    pub mean_r: f64,
    pub se_r: f64,
    pub mean_nw: f64,
    pub replicates: usize,
    pub failures: usize,
    pub wall_time: f64,
}

impl ScanRow {
    pub const CSV_HEADER: &'static str = "n,mean_R,se_R,mean_NW,mean_R_over_n,replicates,failures";
}

impl fmt::Display for ScanRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.n,
            self.mean_r,
            self.se_r,
            self.mean_nw,
            self.mean_r / self.n as f64,
            self.replicates,
            self.failures
        )
    }
}

/// Block reports of one replicate, for the JSON-lines output.
#[derive(Debug, Clone, Serialize)]
pub struct BlockRecordLine {
    pub schema: u32,
    pub n: usize,
    pub replicate: u64,
    #[serde(flatten)]
    pub report: BlockReport,
}

#[derive(Debug, Clone)]
pub struct ResistanceScan {
    pub rows: Vec<ScanRow>,
    pub block_records: Vec<BlockRecordLine>,
}

fn resistance_sampler(config: &ExperimentConfig, model: &Model, n: usize) -> Result<TnmSampler> {
    let sampler = TnmSampler::for_law(&model.progeny, n, config.m_for(n))?;
    // The cap leaves R(n) unchanged; block detectors look beyond level n.
    Ok(if config.height_cap && !config.blocks {
        sampler.with_options(TnmOptions { height_cap: Some(n as u32), ..TnmOptions::default() })
    } else {
        sampler
    })
}

fn resistance_tag(n: usize) -> u64 {
    rng::tag(&format!("scan-r/n={n}"))
}

/// Replicate `r` of the resistance scan at level `n`: sample `T(n, m)`,
/// embed it and measure `R(n)`. Block reports are added when `blocks` is set.
pub fn replicate_resistance(
    config: &ExperimentConfig,
    model: &Model,
    sampler: &TnmSampler,
    n: usize,
    r: u64,
    blocks: Option<&BlockParams>,
) -> Result<(ResistanceRow, Vec<BlockReport>)> {
    let mut stream = rng::stream(config.seed, resistance_tag(n), r);
    let tree = sampler.sample(&mut stream)?;
    let emb = embed(&tree, &model.step, Site::ORIGIN, &mut stream);
    let row = measure_level(&emb.trace, n, &config.solver.options())?;
    let reports = match blocks {
        Some(params) => analyze_blocks(&tree, &emb, &model.step, params, model.progeny.sigma_sq())?,
        None => Vec::new(),
    };
    Ok((row, reports))
}

/// Per-sample rows at level `n`, the same samples `scan_resistance` uses.
pub fn sample_resistance_rows(config: &ExperimentConfig, n: usize) -> Result<Vec<Result<ResistanceRow>>> {
    let model = config.validate()?;
    let sampler = resistance_sampler(config, &model, n)?;
    with_threads(config.threads, || {
        run_replicates(config.replicates, |r| {
            replicate_resistance(config, &model, &sampler, n, r, None).map(|(row, _)| row)
        })
    })
}

/// Mean `R(n)` and Nash-Williams bound over `replicates` samples of
/// `T(n, m)` for each configured `n`.
pub fn scan_resistance(config: &ExperimentConfig) -> Result<ResistanceScan> {
    let model = config.validate()?;
    let mut rows = Vec::new();
    let mut block_records = Vec::new();
    for &n in &config.n {
        let start = Instant::now();
        let sampler = resistance_sampler(config, &model, n)?;
        let params = if config.blocks {
            let delta_n = *config.delta_n.first().ok_or_else(|| HarnessError::Config("blocks need delta_n".into()))?;
            Some(BlockParams::new(config.k, delta_n, n, config.m_for(n), config.c0)?)
        } else {
            None
        };
        let results = with_threads(config.threads, || {
            run_replicates(config.replicates, |r| {
                replicate_resistance(config, &model, &sampler, n, r, params.as_ref()).map(|res| (r, res))
            })
        })?;
        let (samples, failures) = partition(&format!("scan-r n={n}"), results);
        let mut r_stats = Moments::new();
        let mut nw_stats = Moments::new();
        for (r, (row, reports)) in samples {
            r_stats.push(row.r);
            nw_stats.push(row.nw_bound);
            block_records.extend(reports.into_iter().map(|report| BlockRecordLine {
                schema: super::SCHEMA_VERSION,
                n,
                replicate: r,
                report,
            }));
        }
        let row = ScanRow {
            n,
            mean_r: r_stats.mean(),
            se_r: r_stats.std_error(),
            mean_nw: nw_stats.mean(),
            replicates: r_stats.count() as usize,
            failures,
            wall_time: start.elapsed().as_secs_f64(),
        };
        eprintln!("scan-r n={n}: {} replicates, {} failures, {:.2}s", row.replicates, failures, row.wall_time);
        rows.push(row);
    }
    Ok(ResistanceScan { rows, block_records })
}

pub fn write_scan_csv<W: Write>(mut out: W, config: &ExperimentConfig, rows: &[ScanRow]) -> io::Result<()> {
    write_metadata(&mut out, "scan-r", config)?;
    writeln!(out, "{}", ScanRow::CSV_HEADER)?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Estimated `gamma_m(n, x)`: mean resistance between `Phi(V_0)` and
/// `Phi(V_n)` given `Phi(V_n) = (x, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaRow {
    pub n: usize,
    pub x: Vec<i32>,
    pub norm_x: f64,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    pub failures: usize,
    pub wall_time: f64,
}

impl GammaRow {
    pub const CSV_HEADER: &'static str = "n,x,norm_x,norm_x_over_sqrt_n,mean_gamma,se_gamma,replicates,failures";
}

impl fmt::Display for GammaRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x: Vec<String> = self.x.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.n,
            x.join(";"),
            self.norm_x,
            self.norm_x / (self.n as f64).sqrt(),
            self.mean,
            self.se,
            self.replicates,
            self.failures
        )
    }
}

fn bridge_resistance(
    sampler: &TnmSampler,
    bridges: &BridgeSampler,
    x: Site,
    opts: &SolverOptions,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let tree = sampler.sample(stream)?;
    let emb = embed_bridge_with(&tree, bridges, x, stream)?;
    let g = Multigraph::from_trace(&emb.trace);
    let end = emb.point_id(tree.backbone_vertex(tree.n()));
    Ok(effective_resistance(&g, emb.point_id(0), end, opts)?.value)
}

/// `gamma` estimates for every configured `n` and every point in `xs`.
pub fn scan_gamma(config: &ExperimentConfig, xs: &[Vec<i32>]) -> Result<Vec<GammaRow>> {
    let model = config.validate()?;
    let dim = model.step.dim();
    let opts = config.solver.options();
    let mut rows = Vec::new();
    for &n in &config.n {
        let sampler = TnmSampler::for_law(&model.progeny, n, config.m_for(n))?;
        let bridges = BridgeSampler::new(&model.step, n)?;
        for coords in xs {
            let start = Instant::now();
            let x = config.site(coords, dim)?;
            if bridges.transition(n, x) <= 0.0 {
                return Err(crate::walk::WalkError::Unreachable(x.to_string(), n).into());
            }
            let tag = rng::tag(&format!("scan-gamma/n={n}/x={x}"));
            let results = with_threads(config.threads, || {
                run_replicates(config.replicates, |r| {
                    let mut stream = rng::stream(config.seed, tag, r);
                    bridge_resistance(&sampler, &bridges, x, &opts, &mut stream)
                })
            })?;
            let (values, failures) = partition(&format!("scan-gamma n={n} x={x}"), results);
            let m: Moments = values.into_iter().collect();
            let mut padded = coords.clone();
            padded.resize(dim, 0);
            rows.push(GammaRow {
                n,
                x: padded,
                norm_x: model.step.norm(x),
                mean: m.mean(),
                se: m.std_error(),
                replicates: m.count() as usize,
                failures,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn write_gamma_csv<W: Write>(mut out: W, config: &ExperimentConfig, rows: &[GammaRow]) -> io::Result<()> {
    write_metadata(&mut out, "scan-gamma", config)?;
    writeln!(out, "{}", GammaRow::CSV_HEADER)?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Moments of `|I|` in the two-tree experiment at one `delta_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionRow {
    pub delta_n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub mean_i: f64,
    pub se_i: f64,
    pub mean_i2: f64,
    pub se_i2: f64,
    pub pz: PaleyZygmund,
    pub mean_i_prime: f64,
    /// `P(|I| >= c0 sigma^4 D^-d log(delta_n))`.
    pub p_b_prime: f64,
    /// `P(|I| >= theta log(delta_n))` for each configured `theta`.
    pub p_theta: Vec<f64>,
    /// Number of `I'` pairs over all replicates.
    pub extra_pairs: usize,
    /// Mean `|I-hat|` over those pairs.
    pub mean_extra: f64,
    pub se_extra: f64,
    pub separation_ok: bool,
    pub wall_time: f64,
}

impl IntersectionRow {
    pub fn csv_header(theta: &[f64]) -> String {
        let mut h = String::from(
            "delta_n,replicates,failures,mean_I,se_I,mean_I2,se_I2,p_positive,pz_ratio,pz_combined_se,mean_I_prime,p_B_prime",
        );
        for t in theta {
            h.push_str(&format!(",p_theta_{t}"));
        }
        h.push_str(",extra_pairs,mean_extra,se_extra,separation_ok");
        h
    }
}

impl fmt::Display for IntersectionRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.delta_n,
            self.replicates,
            self.failures,
            self.mean_i,
            self.se_i,
            self.mean_i2,
            self.se_i2,
            self.pz.p_positive,
            self.pz.ratio,
            self.pz.combined_se(),
            self.mean_i_prime,
            self.p_b_prime
        )?;
        for p in &self.p_theta {
            write!(f, ",{p}")?;
        }
        write!(f, ",{},{},{},{}", self.extra_pairs, self.mean_extra, self.se_extra, self.separation_ok)
    }
}

/// One intersect-well pair, for the JSON-lines output.
#[derive(Debug, Clone, Serialize)]
pub struct IntersectionRecordLine {
    pub schema: u32,
    pub delta_n: usize,
    pub replicate: u64,
    #[serde(flatten)]
    pub record: IntersectionRecord,
}

#[derive(Debug, Clone)]
pub struct IntersectionScan {
    pub rows: Vec<IntersectionRow>,
    pub records: Vec<IntersectionRecordLine>,
}

fn summarize_intersections(
    config: &ExperimentConfig,
    model: &Model,
    delta_n: usize,
    x: Site,
    outcomes: &[TwoTreeOutcome],
    failures: usize,
) -> IntersectionRow {
    let counts: Vec<f64> = outcomes.iter().map(|o| o.i_count as f64).collect();
    let first: Moments = counts.iter().copied().collect();
    let second: Moments = counts.iter().map(|c| c * c).collect();
    let primed: Moments = outcomes.iter().map(|o| o.i_prime_count as f64).collect();
    let extra: Moments = outcomes.iter().flat_map(|o| o.extra.iter().map(|&e| e as f64)).collect();
    let total = counts.len().max(1) as f64;
    let log_dn = (delta_n as f64).ln();
    let frac_at_least = |threshold: f64| counts.iter().filter(|&&c| c >= threshold).count() as f64 / total;
    let sigma_sq = model.progeny.sigma_sq();
    let b_prime = config.c0 * sigma_sq * sigma_sq * model.step.scale().powi(-(model.step.dim() as i32)) * log_dn;
    IntersectionRow {
        delta_n,
        replicates: counts.len(),
        failures,
        mean_i: first.mean(),
        se_i: first.std_error(),
        mean_i2: second.mean(),
        se_i2: second.std_error(),
        pz: paley_zygmund(&counts),
        mean_i_prime: primed.mean(),
        p_b_prime: frac_at_least(b_prime),
        p_theta: config.theta.iter().map(|t| frac_at_least(t * log_dn)).collect(),
        extra_pairs: extra.count() as usize,
        mean_extra: extra.mean(),
        se_extra: extra.std_error(),
        separation_ok: model.step.norm_sq_within(x, delta_n as f64),
        wall_time: 0.0,
    }
}

/// Two-tree experiment over every configured `delta_n`, roots at `o` and
/// `x`. Intersection records are kept only when a records path is set.
pub fn scan_intersections(config: &ExperimentConfig) -> Result<IntersectionScan> {
    let model = config.validate()?;
    let x = config.site(&config.x, model.step.dim())?;
    let collect = config.output.records.is_some();
    let opts = TwoTreeOptions { restricted: config.restricted, n_star: config.n_star, collect_records: collect, ..TwoTreeOptions::default() };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &delta_n in &config.delta_n {
        let start = Instant::now();
        let sampler = TwoTreeSampler::new(&model.progeny, &model.step, delta_n, opts.restricted)?;
        let tag = rng::tag(&format!("scan-intersections/delta_n={delta_n}"));
        let results = with_threads(config.threads, || {
            run_replicates(config.replicates, |r| -> Result<TwoTreeOutcome> {
                let mut stream = rng::stream(config.seed, tag, r);
                let sample = sampler.sample(x, &mut stream)?;
                Ok(analyze_two_trees(&sample, &model.step, &opts)?)
            })
        })?;
        let (mut outcomes, failures) = partition(&format!("scan-intersections delta_n={delta_n}"), results);
        if collect {
            for (r, o) in outcomes.iter_mut().enumerate() {
                records.extend(o.records.drain(..).map(|record| IntersectionRecordLine {
                    schema: super::SCHEMA_VERSION,
                    delta_n,
                    replicate: r as u64,
                    record,
                }));
            }
        }
        let mut row = summarize_intersections(config, &model, delta_n, x, &outcomes, failures);
        row.wall_time = start.elapsed().as_secs_f64();
        eprintln!("scan-intersections delta_n={delta_n}: {} replicates, {:.2}s", row.replicates, row.wall_time);
        rows.push(row);
    }
    Ok(IntersectionScan { rows, records })
}

pub fn write_intersection_csv<W: Write>(
    mut out: W,
    config: &ExperimentConfig,
    rows: &[IntersectionRow],
) -> io::Result<()> {
    write_metadata(&mut out, "scan-intersections", config)?;
    writeln!(out, "{}", IntersectionRow::csv_header(&config.theta))?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Weighted slope against `log(delta_n)` and its t statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trend {
    pub slope: f64,
    pub se: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendReport {
    pub first_moment: Option<Trend>,
    pub second_moment: Option<Trend>,
    pub extra: Option<Trend>,
}

fn trend(rows: &[&IntersectionRow], value: impl Fn(&IntersectionRow) -> (f64, f64)) -> Option<Trend> {
    let x: Vec<f64> = rows.iter().map(|r| (r.delta_n as f64).ln()).collect();
    let (y, se): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| value(r)).unzip();
    let (slope, se, _) = weighted_slope(&x, &y, &se)?;
    Some(Trend { slope, se, t: slope / se })
}

/// Trends of `mean |I|`, `mean |I|^2` and `mean |I-hat|` in `log(delta_n)`.
/// A trend is `None` when some row has a zero standard error.
pub fn moment_trends(rows: &[IntersectionRow]) -> TrendReport {
    let all: Vec<&IntersectionRow> = rows.iter().collect();
    let with_extra: Vec<&IntersectionRow> = rows.iter().filter(|r| r.extra_pairs >= 2).collect();
    TrendReport {
        first_moment: trend(&all, |r| (r.mean_i, r.se_i)),
        second_moment: trend(&all, |r| (r.mean_i2, r.se_i2)),
        extra: trend(&with_extra, |r| (r.mean_extra, r.se_extra)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ProgenySpec;

    fn small(dim: usize) -> ExperimentConfig {
        ExperimentConfig { dim: Some(dim), n: vec![8, 16], replicates: 20, seed: 5, ..Default::default() }
    }

    #[test]
    fn path_progeny_gives_r_equal_n() {
        let c = ExperimentConfig { progeny: ProgenySpec::Preset("path".into()), ..small(2) };
        let scan = scan_resistance(&c).unwrap();
        for row in &scan.rows {
            assert_eq!(row.mean_r, row.n as f64);
            assert_eq!(row.se_r, 0.0);
            assert_eq!(row.replicates, 20);
            assert_eq!(row.failures, 0);
        }
        let rows = scan_gamma(&c, &[vec![0, 0], vec![2, 2]]).unwrap();
        assert!(rows.iter().all(|r| r.mean == r.n as f64));
    }

    #[test]
    fn resistance_scan_is_thread_independent() {
        let c = small(3);
        let mut out1 = Vec::new();
        write_scan_csv(&mut out1, &c, &scan_resistance(&c).unwrap().rows).unwrap();
        let c4 = ExperimentConfig { threads: 3, ..c.clone() };
        let mut out2 = Vec::new();
        write_scan_csv(&mut out2, &c4, &scan_resistance(&c4).unwrap().rows).unwrap();
        assert_eq!(out1, out2);
        let text = String::from_utf8(out1).unwrap();
        assert!(text.starts_with("# brwlab scan-r schema=1\n# config_hash="));
        assert!(text.contains("\nn,mean_R,se_R,mean_NW,mean_R_over_n,replicates,failures\n8,"));
    }

    #[test]
    fn scan_rows_respect_bounds() {
        let scan = scan_resistance(&small(2)).unwrap();
        for row in &scan.rows {
            assert!(row.mean_nw <= row.mean_r);
            assert!(row.mean_r >= 1.0 && row.mean_r <= row.n as f64);
        }
    }

    #[test]
    fn per_sample_rows_reproduce_the_scan_mean() {
        let c = small(2);
        let rows: Vec<ResistanceRow> =
            sample_resistance_rows(&c, 16).unwrap().into_iter().map(|r| r.unwrap()).collect();
        let mean = rows.iter().map(|r| r.r).sum::<f64>() / rows.len() as f64;
        let scan = scan_resistance(&c).unwrap();
        assert!((scan.rows[1].mean_r - mean).abs() < 1e-12);
    }

    #[test]
    fn gamma_is_bounded_by_n_and_rejects_unreachable_points() {
        let c = ExperimentConfig { dim: Some(1), n: vec![6], replicates: 30, ..Default::default() };
        let rows = scan_gamma(&c, &[vec![0], vec![2]]).unwrap();
        assert!(rows.iter().all(|r| r.mean <= 6.0 + 1e-9 && r.mean > 0.0));
        assert!(scan_gamma(&c, &[vec![1]]).is_err());
        assert!(scan_gamma(&c, &[vec![8]]).is_err());
    }

    #[test]
    fn blocks_enabled_scan_emits_reports() {
        let c = ExperimentConfig {
            dim: Some(2),
            n: vec![96],
            delta_n: vec![24],
            blocks: true,
            replicates: 3,
            ..Default::default()
        };
        let scan = scan_resistance(&c).unwrap();
        assert_eq!(scan.block_records.len(), 3 * BlockParams::new(2, 24, 96, 192, 1.0).unwrap().block_starts().len());
    }

    #[test]
    fn far_separation_gives_zero_moments() {
        let c = ExperimentConfig {
            dim: Some(1),
            delta_n: vec![24, 36],
            x: vec![100],
            replicates: 50,
            ..Default::default()
        };
        let scan = scan_intersections(&c).unwrap();
        for row in &scan.rows {
            assert_eq!((row.mean_i, row.mean_i2, row.pz.p_positive), (0.0, 0.0, 0.0));
            assert!(!row.separation_ok);
        }
    }

    #[test]
    fn intersection_csv_has_theta_columns() {
        let c = ExperimentConfig { dim: Some(1), delta_n: vec![24], replicates: 40, theta: vec![0.5, 1.0], ..Default::default() };
        let scan = scan_intersections(&c).unwrap();
        let mut out = Vec::new();
        write_intersection_csv(&mut out, &c, &scan.rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert!(header.contains(",p_theta_0.5,p_theta_1,"));
        let row = text.lines().last().unwrap();
        assert_eq!(row.split(',').count(), header.split(',').count());
    }
}
