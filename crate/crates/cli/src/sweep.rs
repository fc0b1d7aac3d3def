use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spandmd::experiments::{
    calibration_sweep, downstream_eval, extrapolation_sweep, fit_calibration_curves,
    headline_sweep, pca_sweep, planted_calibration, rank_sweep, render_summary, token_breakdown,
    write_points_csv, BankEntry, CalibrationConfig, CurveFit, ExtrapolationConfig,
    HeadlineConfig, Normalization, RankConfig, SpanSource, SweepResult,
};
use spandmd::operators::{fit_operator, FitConfig, Formulation, Rank, Solver};
use spandmd::stats::PowerLawForm;
use spandmd::DEFAULT_ALPHA;

use crate::output::{say, sayln};
use crate::config::List;
use crate::output::{Format, OutDir, TotalFailure};
use crate::sources::{SourceConfig, SourceFlags, SourceKind};
use crate::stats::{StatsFlags, StatsSettings};

#[derive(Debug, Clone, Subcommand)]
pub enum SweepCommand {
    /// Every formulation at every cut start and prune length
    Headline(HeadlineFlags),
    /// Rank-limited PCR and RRR fits at the endpoint
    Rank(RankFlags),
    /// Error against calibration budget, with power-law fits
    Calib(CalibFlags),
    /// Powers of a one-step operator against deeper states
    Extrap(ExtrapFlags),
    /// Local against final-layer error after running the remaining blocks (toy only)
    Downstream(HeadlineFlags),
    /// Headline operators re-evaluated on CLS and patch tokens
    Tokens(HeadlineFlags),
    /// One token's trajectory and each method's rollout in PCA coordinates
    Pca(PcaFlags),
    /// Friedman test and Nemenyi critical difference over a results CSV
    Stats(StatsFlags),
}

impl SweepCommand {
    pub fn name(&self) -> &'static str {
        match self {
            SweepCommand::Headline(_) => "headline",
            SweepCommand::Rank(_) => "rank",
            SweepCommand::Calib(_) => "calib",
            SweepCommand::Extrap(_) => "extrap",
            SweepCommand::Downstream(_) => "downstream",
            SweepCommand::Tokens(_) => "tokens",
            SweepCommand::Pca(_) => "pca",
            SweepCommand::Stats(_) => "stats",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceFlags,
    /// Worker threads (0 = one per core)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row output format
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Clip rel_l2 at this value in plot.csv (raw outputs are never clipped)
    #[arg(long)]
    pub cap_rel_l2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Common {
    #[serde(flatten)]
    pub source: SourceConfig,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub cap_rel_l2: Option<f64>,
}

impl Default for Common {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            jobs: 1,
            out: None,
            format: Format::Csv,
            cap_rel_l2: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeadlineFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonFlags,
    /// Prune lengths, e.g. `1..10` or `2,4`
    #[arg(long)]
    pub p: Option<List<usize>>,
    /// Formulations, e.g. `full,anchored`
    #[arg(long)]
    pub formulations: Option<List<Formulation>>,
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub rank: Option<Rank>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Calibration images used for fitting [default: all]
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadlineSettings {
    #[serde(flatten)]
    pub common: Common,
    pub p: List<usize>,
    pub formulations: List<Formulation>,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    pub budget: Option<usize>,
}

impl Default for HeadlineSettings {
    fn default() -> Self {
        let h = HeadlineConfig::default();
        Self {
            common: Common::default(),
            p: List(h.p_values),
            formulations: List(h.formulations),
            solver: h.solver,
            rank: h.rank,
            alpha: h.alpha,
            budget: h.budget,
        }
    }
}

impl HeadlineSettings {
    fn core(&self) -> HeadlineConfig {
        HeadlineConfig {
            p_values: self.p.0.clone(),
            formulations: self.formulations.0.clone(),
            solver: self.solver,
            rank: self.rank,
            alpha: self.alpha,
            budget: self.budget,
            jobs: self.common.jobs,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonFlags,
    /// Prune length
    #[arg(long)]
    pub p: Option<usize>,
    /// Ranks to fit; full rank is always included
    #[arg(long)]
    pub ranks: Option<List<Rank>>,
    #[arg(long)]
    pub solvers: Option<List<Solver>>,
    #[arg(long)]
    pub formulations: Option<List<Formulation>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RankSettings {
    #[serde(flatten)]
    pub common: Common,
    pub p: usize,
    pub ranks: List<Rank>,
    pub solvers: List<Solver>,
    pub formulations: List<Formulation>,
    pub alpha: f64,
    pub budget: Option<usize>,
}

impl Default for RankSettings {
    fn default() -> Self {
        let r = RankConfig::default();
        Self {
            common: Common::default(),
            p: r.p,
            ranks: List(r.ranks),
            solvers: List(r.solvers),
            formulations: List(r.formulations),
            alpha: r.alpha,
            budget: r.budget,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonFlags,
    #[arg(long)]
    pub p: Option<usize>,
    /// Ascending calibration budgets; the largest is the reference
    #[arg(long)]
    pub budgets: Option<List<usize>>,
    #[arg(long)]
    pub formulations: Option<List<Formulation>>,
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub rank: Option<Rank>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `reference` or `none`
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// `excess` (C/B^γ) or `ratio` (1 + C/B^γ)
    #[arg(long)]
    pub form: Option<PowerLawForm>,
    /// Amplitude of the planted curve
    #[arg(long)]
    pub planted_c: Option<f64>,
    /// Exponent of the planted curve
    #[arg(long)]
    pub planted_gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibSettings {
    #[serde(flatten)]
    pub common: Common,
    pub p: usize,
    pub budgets: List<usize>,
    pub formulations: List<Formulation>,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    pub normalization: Normalization,
    pub form: PowerLawForm,
    pub planted_c: f64,
    pub planted_gamma: f64,
}

impl Default for CalibSettings {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            common: Common::default(),
            p: c.p,
            budgets: List(c.budgets),
            formulations: List(c.formulations),
            solver: c.solver,
            rank: c.rank,
            alpha: c.alpha,
            normalization: c.normalization,
            form: c.form,
            planted_c: 5.0,
            planted_gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtrapFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonFlags,
    /// Cut starts [default: every start]
    #[arg(long)]
    pub starts: Option<List<usize>>,
    /// Largest power of the one-step operator
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtrapSettings {
    #[serde(flatten)]
    pub common: Common,
    pub starts: Option<List<usize>>,
    pub max_n: usize,
    pub solver: Solver,
    pub alpha: f64,
    pub budget: Option<usize>,
}

impl Default for ExtrapSettings {
    fn default() -> Self {
        let e = ExtrapolationConfig::default();
        Self {
            common: Common::default(),
            starts: None,
            max_n: e.max_n,
            solver: e.solver,
            alpha: e.alpha,
            budget: e.budget,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonFlags,
    /// Cut start [default: first available]
    #[arg(long)]
    pub cut: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Held-out image index
    #[arg(long)]
    pub image: Option<usize>,
    /// Kept-token index (0 = CLS)
    #[arg(long)]
    pub token: Option<usize>,
    /// Principal components
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub formulations: Option<List<Formulation>>,
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub rank: Option<Rank>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaSettings {
    #[serde(flatten)]
    pub common: Common,
    pub cut: Option<usize>,
    pub p: usize,
    pub image: usize,
    pub token: usize,
    pub k: usize,
    pub formulations: List<Formulation>,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    pub budget: Option<usize>,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self {
            common: Common::default(),
            cut: None,
            p: 3,
            image: 0,
            token: 0,
            k: 2,
            formulations: List(Formulation::ALL.to_vec()),
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha: DEFAULT_ALPHA,
            budget: None,
        }
    }
}

/// Settings after layering, one variant per sweep.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Settings {
    Headline(HeadlineSettings),
    Rank(RankSettings),
    Calib(CalibSettings),
    Extrap(ExtrapSettings),
    Downstream(HeadlineSettings),
    Tokens(HeadlineSettings),
    Pca(PcaSettings),
    Stats(StatsSettings),
}

impl Settings {
    fn common(&self) -> Option<&Common> {
        match self {
            Settings::Headline(s) | Settings::Downstream(s) | Settings::Tokens(s) => Some(&s.common),
            Settings::Rank(s) => Some(&s.common),
            Settings::Calib(s) => Some(&s.common),
            Settings::Extrap(s) => Some(&s.common),
            Settings::Pca(s) => Some(&s.common),
            Settings::Stats(_) => None,
        }
    }

    /// Output directory, if the sweep writes one.
    pub fn out(&self) -> Option<Option<&PathBuf>> {
        self.common().map(|c| c.out.as_ref())
    }

    /// Concrete model dimensions for the echoed config.
    pub fn normalized(mut self) -> Self {
        let common = match &mut self {
            Settings::Headline(s) | Settings::Downstream(s) | Settings::Tokens(s) => &mut s.common,
            Settings::Rank(s) => &mut s.common,
            Settings::Calib(s) => &mut s.common,
            Settings::Extrap(s) => &mut s.common,
            Settings::Pca(s) => &mut s.common,
            Settings::Stats(_) => return self,
        };
        common.source = common.source.clone().normalized();
        self
    }
}

/// Writes the row files and summary shared by every sweep.
fn emit_rows(dir: &mut OutDir, common: &Common, result: &SweepResult) -> Result<()> {
    if common.format.csv() {
        dir.write_with("results.csv", |w| Ok(result.write_csv(&mut *w)?))?;
    }
    if common.format.jsonl() {
        dir.write_with("results.jsonl", |w| Ok(result.write_jsonl(&mut *w)?))?;
    }
    if !result.fits.is_empty() {
        dir.write_with("fits.csv", |w| Ok(result.write_fits_csv(&mut *w)?))?;
    }
    if let Some(cap) = common.cap_rel_l2 {
        dir.write_with("plot.csv", |w| Ok(result.write_plot_csv(&mut *w, Some(cap))?))?;
    }
    let summary = result.summarize();
    let text = render_summary(&summary);
    dir.write_with("summary.txt", |w| {
        use std::io::Write;
        Ok(w.write_all(text.as_bytes())?)
    })?;
    let endpoints: Vec<_> = summary
        .into_iter()
        .filter(|s| s.step == s.prune_length)
        .collect();
    say!("{}", render_summary(&endpoints));
    if !result.failures.is_empty() {
        sayln!("{} configuration(s) failed; see manifest.json", result.failures.len());
    }
    Ok(())
}

fn row_extra(result: &SweepResult) -> Value {
    json!({
        "provenance": result.provenance,
        "rows": result.rows.len(),
        "failures": result.failures,
    })
}

fn finish_rows(
    mut dir: OutDir,
    sweep: &str,
    settings: &Settings,
    common: &Common,
    result: &SweepResult,
    extra: Value,
) -> Result<()> {
    emit_rows(&mut dir, common, result)?;
    let mut fields = row_extra(result);
    if let (Value::Object(a), Value::Object(b)) = (&mut fields, extra) {
        a.extend(b);
    }
    dir.finish(&format!("sweep {sweep}"), settings, fields)?;
    if result.rows.is_empty() {
        return Err(TotalFailure(format!("{sweep} sweep produced no rows")).into());
    }
    Ok(())
}

pub fn run(settings: Settings, out: Option<PathBuf>) -> Result<()> {
    match &settings {
        Settings::Stats(s) => crate::stats::run(s),
        Settings::Calib(s) if s.common.source.source == SourceKind::Planted => {
            planted(&settings, s, out)
        }
        _ => {
            let common = settings.common().expect("row sweeps carry common settings");
            let out = out.expect("row sweeps have an output directory");
            let built = common.source.build()?;
            let source = built.as_source();
            let dir = OutDir::create(&out)?;
            match &settings {
                Settings::Headline(s) => {
                    let run = headline_sweep(source, &s.core())?;
                    finish_rows(dir, "headline", &settings, common, &run.result, json!({}))
                }
                Settings::Tokens(s) => {
                    let run = headline_sweep(source, &s.core())?;
                    let mut res = token_breakdown(source, &run.bank, None, common.jobs)?;
                    res.failures.extend(run.result.failures);
                    res.failures.sort();
                    finish_rows(dir, "tokens", &settings, common, &res, json!({}))
                }
                Settings::Downstream(s) => {
                    let Some(toy) = built.toy() else {
                        return Err(spandmd::Error::Validation(
                            "downstream evaluation needs the toy source (it runs the remaining blocks)"
                                .into(),
                        )
                        .into());
                    };
                    let run = headline_sweep(source, &s.core())?;
                    let mut report = downstream_eval(toy, &run.bank, common.jobs)?;
                    report.result.failures.extend(run.result.failures);
                    report.result.failures.sort();
                    let mut dir = dir;
                    dir.write_json("orderings.json", &report.orderings)?;
                    for o in &report.orderings {
                        let names = |v: &[(String, f64)]| {
                            v.iter().map(|(m, x)| format!("{m} {x:.4}")).collect::<Vec<_>>().join(" > ")
                        };
                        sayln!(
                            "p = {:>2}  local: {}  |  downstream: {}  |  spearman {:.3}",
                            o.prune_length,
                            names(&o.local),
                            names(&o.downstream),
                            o.spearman
                        );
                    }
                    finish_rows(dir, "downstream", &settings, common, &report.result, json!({}))
                }
                Settings::Rank(s) => {
                    let cfg = RankConfig {
                        p: s.p,
                        ranks: s.ranks.0.clone(),
                        solvers: s.solvers.0.clone(),
                        formulations: s.formulations.0.clone(),
                        alpha: s.alpha,
                        budget: s.budget,
                        jobs: common.jobs,
                    };
                    let report = rank_sweep(source, &cfg)?;
                    let mut dir = dir;
                    dir.write_json("deltas.json", &report.deltas)?;
                    finish_rows(dir, "rank", &settings, common, &report.result, json!({}))
                }
                Settings::Extrap(s) => {
                    let cfg = ExtrapolationConfig {
                        starts: s.starts.clone().map(|l| l.0),
                        max_n: s.max_n,
                        solver: s.solver,
                        alpha: s.alpha,
                        budget: s.budget,
                        jobs: common.jobs,
                    };
                    let res = extrapolation_sweep(source, &cfg)?;
                    finish_rows(dir, "extrap", &settings, common, &res, json!({}))
                }
                Settings::Calib(s) => {
                    let cfg = CalibrationConfig {
                        p: s.p,
                        budgets: s.budgets.0.clone(),
                        formulations: s.formulations.0.clone(),
                        solver: s.solver,
                        rank: s.rank,
                        alpha: s.alpha,
                        normalization: s.normalization,
                        form: s.form,
                        jobs: common.jobs,
                    };
                    let report = calibration_sweep(source, &cfg)?;
                    let mut dir = dir;
                    dir.write_with("points.csv", |w| Ok(report.write_points_csv(&mut *w)?))?;
                    dir.write_json("curves.json", &report.curves)?;
                    print_curves(&report.curves);
                    finish_rows(
                        dir,
                        "calib",
                        &settings,
                        common,
                        &report.result,
                        json!({"reference_budget": report.reference_budget}),
                    )
                }
                Settings::Pca(s) => pca(dir, &settings, s, source),
                Settings::Stats(_) => unreachable!(),
            }
        }
    }
}

fn print_curves(curves: &[CurveFit]) {
    sayln!(
        "{:<10} {:>7} {:>8} {:>10} {:>7}  note",
        "method", "cut", "gamma", "C", "points"
    );
    for c in curves {
        let cut = c.cut_start.map_or("median".to_string(), |i| i.to_string());
        let (g, a) = c
            .fit
            .as_ref()
            .map_or(("-".to_string(), "-".to_string()), |f| {
                (format!("{:.3}", f.gamma), format!("{:.4}", f.c))
            });
        sayln!(
            "{:<10} {:>7} {:>8} {:>10} {:>7}  {}",
            c.formulation.to_string(),
            cut,
            g,
            a,
            c.points,
            c.note.as_deref().unwrap_or("")
        );
    }
}

fn planted(settings: &Settings, s: &CalibSettings, out: Option<PathBuf>) -> Result<()> {
    let budgets = &s.budgets.0;
    if budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(spandmd::Error::Validation("budgets must be strictly ascending".into()).into());
    }
    let reference = *budgets.last().expect("lists are non-empty");
    let points = planted_calibration(budgets, s.planted_c, s.planted_gamma);
    let curves = fit_calibration_curves(&points, Normalization::None, PowerLawForm::Ratio, reference);
    print_curves(&curves);
    if let Some(out) = out {
        let mut dir = OutDir::create(&out)?;
        dir.write_with("points.csv", |w| Ok(write_points_csv(&points, &mut *w)?))?;
        dir.write_json("curves.json", &curves)?;
        dir.finish("sweep calib", settings, json!({"reference_budget": reference}))?;
    }
    if curves.iter().all(|c| c.fit.is_none()) {
        return Err(TotalFailure("no calibration curve could be fitted".into()).into());
    }
    Ok(())
}

fn pca(mut dir: OutDir, settings: &Settings, s: &PcaSettings, source: &dyn SpanSource) -> Result<()> {
    let i = match s.cut {
        Some(i) => i,
        None => match source.cut_starts(s.p).first() {
            Some(&i) => i,
            None => {
                return Err(spandmd::Error::Validation(format!("no cut start supports p = {}", s.p)).into())
            }
        },
    };
    let budget = s.budget.unwrap_or_else(|| source.calibration_size());
    let cal = source.calibration_span(i, s.p, s.budget)?;
    let mut bank = Vec::new();
    for &f in &s.formulations.0 {
        let op = fit_operator(&cal, &FitConfig::new(f, s.solver, s.rank, s.alpha))?;
        bank.push(BankEntry {
            cut_start: i,
            prune_length: s.p,
            budget,
            op,
        });
    }
    let table = pca_sweep(source, &bank, i, s.p, s.image, s.token, s.k)?;
    dir.write_with("pca.csv", |w| Ok(table.write_csv(&mut *w)?))?;
    let explained: Vec<String> = table.explained.iter().map(|e| format!("{e:.4}")).collect();
    sayln!(
        "i = {i}, p = {}, image {}, token {}: {} components, explained variance [{}], {} rows",
        s.p,
        s.image,
        s.token,
        table.components,
        explained.join(", "),
        table.rows.len()
    );
    dir.finish(
        "sweep pca",
        settings,
        json!({"cut_start": i, "explained": table.explained, "rows": table.rows.len()}),
    )?;
    Ok(())
}
