//! Pipeline stages. Each reads its inputs from the artifact directory (or
//! raw data files), writes CSV outputs and a manifest listing the content
//! hashes of everything it read and wrote.

use anyhow::Context as _;
use chrono::Duration;
use shotcox::diagnostics::{
    common_inflow_share, decompose_contributions, dependency_measures, empirical_copula, mass_summary, pearson_residuals,
    predict, ForwardExposure,
};
use shotcox::exposure::{build_exposure, month_encoding_by_name, select_month_encoding, Calendar, CalendarDesign, TrendUnit};
use shotcox::likelihood::{draw_poisson, period_masses, CountsPanel, ExposureSeries};
use shotcox::mcem::{fit_copula, fit_marginals, merge_marginal_trajectories, shot_law, EmConfig, FitTrace};
use shotcox::levy::{decompose_rates, Clayton};
use shotcox::rjmcmc::{run_filter, FilterConfig, MoveKind};
use shotcox::rng::{self, streams};
use shotcox::shot::{simulate_trajectory, MarginalShotParams, Trajectory};
use shotcox::stats;

use crate::artifacts::{num, sha256_hex, trajectories_from_table, trajectories_table, Manifest, Store, Table};
use crate::config::Config;
use crate::failure::{fail, Category};
use crate::ingest::{aggregate, read_claims, read_policies};

pub const STAGES: &[&str] = &["simulate", "fit-glm", "fit-marginal", "fit-copula", "filter", "diagnose", "predict"];

const COUNTS: &str = "counts.csv";
const EXPOSURE: &str = "exposure_series.csv";
const MARGINAL_PARAMS: &str = "marginal_params.csv";
const COPULA_PARAMS: &str = "copula_params.csv";
const COPULA_STATE: &str = "copula_state.csv";
const POSTERIOR_SAMPLES: &str = "posterior_samples.csv";
const POSTERIOR_MASSES: &str = "posterior_masses.csv";
const TERMINAL: &str = "terminal_intensity.csv";

pub struct Pipeline {
    cfg: Config,
    store: Store,
    seed: u64,
    config_sha: String,
}

/// Bookkeeping for one stage run.
struct Run<'a> {
    p: &'a Pipeline,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn new(p: &'a Pipeline, stage: &str) -> Self {
        let manifest = Manifest {
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: p.seed,
            config_sha256: p.config_sha.clone(),
            ..Default::default()
        };
        Self { p, manifest }
    }

    fn input(&mut self, name: &str) -> anyhow::Result<Vec<u8>> {
        let bytes = self.p.store.read(name)?;
        self.manifest.inputs.insert(name.into(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn input_table(&mut self, name: &str) -> anyhow::Result<Table> {
        let bytes = self.input(name)?;
        Table::from_bytes(&bytes).with_context(|| format!("parsing {name}"))
    }

    fn output(&mut self, name: &str, table: &Table) -> anyhow::Result<()> {
        let sha = self.p.store.write(name, &table.to_bytes()?)?;
        self.manifest.outputs.insert(name.into(), sha);
        Ok(())
    }

    fn note(&mut self, s: impl Into<String>) {
        self.manifest.notes.push(s.into());
    }

    /// Records the manifest of an upstream stage by its hash.
    fn depends(&mut self, stage: &str) -> anyhow::Result<Manifest> {
        let m = self.p.store.require(stage, &self.manifest.stage)?;
        let name = Store::manifest_name(stage);
        let bytes = self.p.store.read(&name)?;
        self.manifest.inputs.insert(name, sha256_hex(&bytes));
        Ok(m)
    }

    fn finish(self) -> anyhow::Result<Manifest> {
        self.p.store.write(&Store::manifest_name(&self.manifest.stage), self.manifest.to_text().as_bytes())?;
        Ok(self.manifest)
    }
}

fn model<T>(r: shotcox::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| fail(Category::Model, e.to_string()))
}

fn trace_rows(table: &mut Table, prefix: &[String], trace: &FitTrace) {
    for r in &trace.records {
        for ((name, v), rc) in r.values.iter().zip(&r.relative_changes) {
            let mut row = prefix.to_vec();
            row.extend([
                r.iteration.to_string(),
                name.clone(),
                num(*v),
                num(*rc),
                num(r.q_previous),
                num(r.q_new),
                r.flagged.to_string(),
            ]);
            table.push(row);
        }
    }
}

impl Pipeline {
    pub fn new(cfg: Config, out_dir: &std::path::Path) -> anyhow::Result<Self> {
        let seed = cfg.get("seed")?;
        let config_sha = sha256_hex(cfg.canonical().as_bytes());
        Ok(Self { store: Store::open(out_dir)?, cfg, seed, config_sha })
    }

    pub fn run(&self, stage: &str) -> anyhow::Result<Manifest> {
        log::info!("running {stage}");
        match stage {
            "simulate" => self.simulate(),
            "fit-glm" => self.fit_glm(),
            "fit-marginal" => self.fit_marginal(),
            "fit-copula" => self.fit_copula(),
            "filter" => self.filter(),
            "diagnose" => self.diagnose(),
            "predict" => self.predict(),
            other => Err(fail(Category::Config, format!("unknown stage {other:?}"))),
        }
    }

    pub fn two_margins(&self) -> anyhow::Result<bool> {
        Ok(self.margins()?.len() == 2)
    }

    fn margins(&self) -> anyhow::Result<Vec<String>> {
        let m = self.cfg.margins()?;
        if let Some(bad) = m.iter().find(|id| !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
            return Err(fail(Category::Config, format!("margin id {bad:?} may only use letters, digits, '_' and '-'")));
        }
        if m.len() > 2 {
            return Err(fail(Category::Config, format!("{} margins given; at most two are supported", m.len())));
        }
        Ok(m)
    }

    fn em_config(&self, seed_offset: u64) -> anyhow::Result<EmConfig> {
        let c = EmConfig {
            em_iters: self.cfg.get("em_iters")?,
            mcmc_iters: self.cfg.get("mcmc_iters")?,
            samples: self.cfg.get("em_samples")?,
            burn_fraction: self.cfg.get("burn_fraction")?,
            sweep_len: self.cfg.optional("sweep_len")?,
            convergence_window: self.cfg.get("convergence_window")?,
            seed: self.seed.wrapping_add(seed_offset),
        };
        c.validate().map_err(|e| fail(Category::Config, e.to_string()))?;
        Ok(c)
    }

    fn simulate(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "simulate");
        let margins = self.margins()?;
        let (start, days) = self.cfg.window()?;
        let g = margins.len();
        let lists: Vec<Vec<f64>> = ["sim_rho", "sim_eta", "sim_kappa", "sim_daily_mean"]
            .iter()
            .map(|k| self.cfg.list(k))
            .collect::<anyhow::Result<_>>()?;
        let policies: Vec<u64> = self.cfg.list("sim_policies")?;
        if lists.iter().any(|l| l.len() < g) || policies.len() < g {
            return Err(fail(Category::Config, format!("simulation lists need {g} values each")));
        }
        let params: Vec<MarginalShotParams> =
            (0..g).map(|m| MarginalShotParams::new(lists[0][m], lists[1][m], lists[2][m])).collect::<shotcox::Result<_>>()?;
        let delta = if g == 2 { Some(self.cfg.get::<f64>("sim_delta")?) } else { None };
        let law = model(shot_law(&params, delta))?;
        let mut r = rng::stream(self.seed, streams::SIMULATION);
        let traj = model(simulate_trajectory(&params, law.as_ref(), days as f64, &mut r))?;
        let multiplier: Vec<f64> = (0..g).map(|m| lists[3][m] / params[m].stationary_mean()).collect();
        let mut cr = rng::stream(self.seed, streams::COUNTS);
        let mut claims = Table::new(&["date", "margin"]);
        let mut exposure = Table::new(&["date", "margin", "policy_count"]);
        let mut masses = Table::with_header(["day", "date"].iter().map(|s| s.to_string()).chain(margins.iter().cloned()).collect());
        let daily: Vec<Vec<f64>> = (0..g).map(|m| traj.daily_integrals(m, params[m].kappa, days)).collect::<shotcox::Result<_>>()?;
        for d in 0..days {
            let date = (start + Duration::days(d as i64)).to_string();
            let mut mrow = vec![d.to_string(), date.clone()];
            for m in 0..g {
                let mass = daily[m][d] * multiplier[m];
                mrow.push(num(mass));
                for _ in 0..draw_poisson(mass, &mut cr)? {
                    claims.push(vec![date.clone(), margins[m].clone()]);
                }
                exposure.push(vec![date.clone(), margins[m].clone(), policies[m].to_string()]);
            }
            masses.push(mrow);
        }
        let mut truth = Table::new(&["margin", "rho", "eta", "kappa", "exposure_multiplier", "delta"]);
        for m in 0..g {
            truth.push(vec![
                margins[m].clone(),
                num(params[m].rho),
                num(params[m].eta),
                num(params[m].kappa),
                num(multiplier[m]),
                delta.map(num).unwrap_or_default(),
            ]);
        }
        run.note(format!("claims={}", claims.rows.len()));
        run.output("claims.csv", &claims)?;
        run.output("exposure.csv", &exposure)?;
        run.output("truth_params.csv", &truth)?;
        run.output("truth_masses.csv", &masses)?;
        run.output("truth_state.csv", &trajectories_table(&[traj], &margins))?;
        run.finish()
    }

    fn read_raw(&self, run: &mut Run, key: &str) -> anyhow::Result<Vec<u8>> {
        let path = self.cfg.path(key);
        let bytes = std::fs::read(&path).map_err(|e| fail(Category::Input, format!("reading {}: {e}", path.display())))?;
        let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| key.to_string());
        run.manifest.inputs.insert(format!("{key}:{name}"), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn fit_glm(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "fit-glm");
        let margins = self.margins()?;
        let (start, days) = self.cfg.window()?;
        let pd: usize = self.cfg.get("period_days")?;
        let claims = read_claims(&self.read_raw(&mut run, "claims_file")?[..], start, days, &margins)?;
        let policies = read_policies(&self.read_raw(&mut run, "exposure_file")?[..], start, days, &margins)?;
        run.note(format!("accepted_claims={}", claims.accepted));
        run.note(format!("rejected_claims={}", claims.rejected));
        let mut coef = Table::new(&["margin", "encoding", "column", "estimate", "std_error"]);
        let mut sel = Table::new(&["margin", "encoding", "params", "deviance", "aic", "selected"]);
        let mut acf_t = Table::new(&["margin", "series", "lag", "acf", "band"]);
        let max_lag: usize = self.cfg.get("acf_max_lag")?;
        let mut exposure = Vec::with_capacity(margins.len());
        for (g, id) in margins.iter().enumerate() {
            let mut cal = Calendar::new(start, days);
            cal.holidays = self
                .cfg
                .raw_for("holidays", id)
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| fail(Category::Config, format!("bad holiday {s:?}"))))
                .collect::<anyhow::Result<_>>()?;
            cal.trend = match self.cfg.raw_for("trend", id) {
                "days" => TrendUnit::Days,
                "years" => TrendUnit::Years,
                other => return Err(fail(Category::Config, format!("trend must be days or years, got {other:?}"))),
            };
            let names: Vec<String> = crate::config::parse_list("month_encodings", self.cfg.raw_for("month_encodings", id))?;
            let designs = names
                .iter()
                .map(|n| {
                    let spec = match n.as_str() {
                        "grouped" => self.cfg.raw_for("month_groups", id),
                        "spline" => self.cfg.raw_for("spline_knots", id),
                        _ => "",
                    };
                    let enc = month_encoding_by_name(n, spec).map_err(|e| fail(Category::Config, e.to_string()))?;
                    CalendarDesign::build(&cal, enc.as_ref()).map_err(|e| fail(Category::Config, format!("margin {id}: {e}")))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let offset: Vec<f64> = policies[g].iter().map(|p| p.ln()).collect();
            let (best, fits) = if designs.len() == 1 {
                (0, vec![model(shotcox::exposure::fit_poisson_glm(&claims.counts[g], &offset, &designs[0]))?])
            } else {
                model(select_month_encoding(&claims.counts[g], &offset, &designs))?
            };
            for (i, f) in fits.iter().enumerate() {
                sel.push(vec![id.clone(), f.encoding.clone(), f.num_params().to_string(), num(f.deviance), num(f.aic), (i == best).to_string()]);
            }
            let fit = &fits[best];
            for ((c, e), s) in fit.columns.iter().zip(&fit.coefficients).zip(&fit.std_errors) {
                coef.push(vec![id.clone(), fit.encoding.clone(), c.clone(), num(*e), num(*s)]);
            }
            run.note(format!("{id}: selected {} encoding", fit.encoding));
            let w = model(build_exposure(&policies[g], fit, &designs[best]))?;
            for (series, denom) in [("raw", &policies[g]), ("adjusted", &w)] {
                let s: Vec<f64> = claims.counts[g].iter().zip(denom).map(|(&n, &d)| n as f64 / d).collect();
                match stats::acf(&s, max_lag) {
                    Ok(a) => {
                        for (lag, v) in a.values.iter().enumerate() {
                            acf_t.push(vec![id.clone(), series.into(), lag.to_string(), num(*v), num(a.band)]);
                        }
                    }
                    Err(e) => run.note(format!("{id}: no {series} autocorrelation ({e})")),
                }
            }
            exposure.push(w);
        }
        let periods = aggregate(&claims.counts, pd);
        let mut counts = Table::with_header(["period", "start_date"].iter().map(|s| s.to_string()).chain(margins.iter().cloned()).collect());
        for i in 0..days / pd {
            let mut row = vec![i.to_string(), (start + Duration::days((i * pd) as i64)).to_string()];
            row.extend(periods.iter().map(|r| r[i].to_string()));
            counts.push(row);
        }
        let mut ex = Table::with_header(["day", "date"].iter().map(|s| s.to_string()).chain(margins.iter().cloned()).collect());
        for d in 0..days {
            let mut row = vec![d.to_string(), (start + Duration::days(d as i64)).to_string()];
            row.extend(exposure.iter().map(|w| num(w[d])));
            ex.push(row);
        }
        run.output(COUNTS, &counts)?;
        run.output(EXPOSURE, &ex)?;
        run.output("glm_coefficients.csv", &coef)?;
        run.output("glm_selection.csv", &sel)?;
        run.output("acf_glm.csv", &acf_t)?;
        run.finish()
    }

    /// Counts panel and exposure written by `fit-glm`.
    fn data(&self, run: &mut Run, margins: &[String]) -> anyhow::Result<(CountsPanel, ExposureSeries)> {
        run.depends("fit-glm")?;
        let pd: usize = self.cfg.get("period_days")?;
        let c = run.input_table(COUNTS)?;
        let e = run.input_table(EXPOSURE)?;
        let cols_c = margins.iter().map(|m| c.column(m)).collect::<anyhow::Result<Vec<_>>>()?;
        let cols_e = margins.iter().map(|m| e.column(m)).collect::<anyhow::Result<Vec<_>>>()?;
        let counts = cols_c
            .iter()
            .map(|&j| {
                c.rows.iter().map(|r| r[j].parse::<u64>().map_err(|_| fail(Category::Input, format!("bad count {:?}", r[j])))).collect()
            })
            .collect::<anyhow::Result<Vec<Vec<u64>>>>()?;
        let w = cols_e.iter().map(|&j| (0..e.rows.len()).map(|i| e.f64_at(i, j)).collect()).collect::<anyhow::Result<Vec<Vec<f64>>>>()?;
        Ok((model(CountsPanel::new(counts, pd))?, model(ExposureSeries::new(w))?))
    }

    fn read_marginals(&self, run: &mut Run, margins: &[String]) -> anyhow::Result<Vec<MarginalShotParams>> {
        let t = run.input_table(MARGINAL_PARAMS)?;
        let (cm, cr, ce, ck) = (t.column("margin")?, t.column("rho")?, t.column("eta")?, t.column("kappa")?);
        margins
            .iter()
            .map(|id| {
                let i = t.rows.iter().position(|r| &r[cm] == id).ok_or_else(|| fail(Category::Dependency, format!("no parameters for {id}")))?;
                Ok(model(MarginalShotParams::new(t.f64_at(i, cr)?, t.f64_at(i, ce)?, t.f64_at(i, ck)?))?)
            })
            .collect()
    }

    fn read_delta(&self, run: &mut Run) -> anyhow::Result<f64> {
        let t = run.input_table(COPULA_PARAMS)?;
        let (cp, cv) = (t.column("parameter")?, t.column("value")?);
        let i = t.rows.iter().position(|r| r[cp] == "delta").ok_or_else(|| fail(Category::Dependency, "copula_params.csv has no delta"))?;
        t.f64_at(i, cv)
    }

    fn marginal_state_name(id: &str) -> String {
        format!("marginal_state_{id}.csv")
    }

    fn fit_marginal(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "fit-marginal");
        let margins = self.margins()?;
        let (panel, exposure) = self.data(&mut run, &margins)?;
        let cfg = self.em_config(0)?;
        let fits = model(fit_marginals(&panel, &exposure, &cfg))?;
        let mut params = Table::new(&["margin", "rho", "eta", "kappa", "stationary_mean"]);
        let mut trace = Table::new(&["margin", "iteration", "parameter", "value", "relative_change", "q_previous", "q_new", "flagged"]);
        for (id, f) in margins.iter().zip(&fits) {
            let p = f.params;
            params.push(vec![id.clone(), num(p.rho), num(p.eta), num(p.kappa), num(p.stationary_mean())]);
            trace_rows(&mut trace, std::slice::from_ref(id), &f.trace);
            for w in &f.warnings {
                run.note(format!("{id}: {w}"));
            }
            for name in ["rho", "eta", "kappa"] {
                if let Some(c) = f.trace.mean_relative_change(name, cfg.convergence_window) {
                    run.note(format!("{id}: mean |relative change| of {name} over last {} iterations = {c:.3e}", cfg.convergence_window));
                }
            }
            run.output(&Self::marginal_state_name(id), &trajectories_table(std::slice::from_ref(&f.final_state), std::slice::from_ref(id)))?;
        }
        run.output(MARGINAL_PARAMS, &params)?;
        run.output("marginal_trace.csv", &trace)?;
        run.finish()
    }

    fn fit_copula(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "fit-copula");
        let margins = self.margins()?;
        if margins.len() != 2 {
            return Err(fail(Category::Config, "fit-copula needs exactly two margins"));
        }
        run.depends("fit-marginal")?;
        let (panel, exposure) = self.data(&mut run, &margins)?;
        let params = self.read_marginals(&mut run, &margins)?;
        let horizon = panel.horizon();
        let states = margins
            .iter()
            .map(|id| {
                let t = run.input_table(&Self::marginal_state_name(id))?;
                trajectories_from_table(&t, horizon)?.pop().ok_or_else(|| fail(Category::Dependency, format!("empty state for {id}")))
            })
            .collect::<anyhow::Result<Vec<Trajectory>>>()?;
        let merged = model(merge_marginal_trajectories(&states, self.cfg.get("merge_threshold")?))?;
        let m = [params[0], params[1]];
        let fit = model(fit_copula(&panel, &exposure, &m, &self.em_config(2)?, None, Some(&merged)))?;
        let dec = model(decompose_rates(&model(Clayton::new(fit.delta))?, m[0].rho, m[1].rho))?;
        let mut t = Table::new(&["parameter", "value"]);
        t.push(vec!["delta".into(), num(fit.delta)]);
        t.push(vec!["rho_common".into(), num(dec.rho_common)]);
        for (id, r) in margins.iter().zip(&dec.rho_unique) {
            t.push(vec![format!("rho_unique_{id}"), num(*r)]);
        }
        let mut trace = Table::new(&["iteration", "parameter", "value", "relative_change", "q_previous", "q_new", "flagged"]);
        trace_rows(&mut trace, &[], &fit.trace);
        for w in &fit.warnings {
            run.note(w.clone());
        }
        run.output(COPULA_PARAMS, &t)?;
        run.output("copula_trace.csv", &trace)?;
        run.output(COPULA_STATE, &trajectories_table(std::slice::from_ref(&fit.final_state), &margins))?;
        run.finish()
    }

    /// Fitted parameters, dependence and the fitted final state.
    fn fitted(&self, run: &mut Run, margins: &[String], horizon: f64) -> anyhow::Result<(Vec<MarginalShotParams>, Option<f64>, Trajectory)> {
        if margins.len() == 2 {
            run.depends("fit-copula")?;
            run.depends("fit-marginal")?;
            let params = self.read_marginals(run, margins)?;
            let delta = self.read_delta(run)?;
            let t = run.input_table(COPULA_STATE)?;
            let state = trajectories_from_table(&t, horizon)?.pop().ok_or_else(|| fail(Category::Dependency, "empty copula state"))?;
            Ok((params, Some(delta), state))
        } else {
            run.depends("fit-marginal")?;
            let params = self.read_marginals(run, margins)?;
            let t = run.input_table(&Self::marginal_state_name(&margins[0]))?;
            let state = trajectories_from_table(&t, horizon)?.pop().ok_or_else(|| fail(Category::Dependency, "empty marginal state"))?;
            Ok((params, None, state))
        }
    }

    fn filter(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "filter");
        let margins = self.margins()?;
        let (panel, exposure) = self.data(&mut run, &margins)?;
        let (params, delta, state) = self.fitted(&mut run, &margins, panel.horizon())?;
        let law = model(shot_law(&params, delta))?;
        let cfg = FilterConfig {
            iterations: self.cfg.get("filter_iters")?,
            burn_fraction: self.cfg.get("burn_fraction")?,
            samples: self.cfg.get("filter_samples")?,
            sweep_len: self.cfg.optional("sweep_len")?,
            recompute_every: 10,
            seed: self.seed.wrapping_add(3),
        };
        cfg.validate().map_err(|e| fail(Category::Config, e.to_string()))?;
        let out = model(run_filter(&panel, &exposure, &params, law.as_ref(), &cfg, Some(&state)))?;
        let level: f64 = self.cfg.get("credible_level")?;
        let summary = model(mass_summary(&out.samples, &params, &exposure, panel.period_days(), panel.num_periods(), level))?;
        // Masses of the final draw: residuals against a single posterior draw
        // are distributed like residuals against the true masses.
        let last = model(period_masses(&out.final_state, &params, &exposure, panel.period_days(), panel.num_periods()))?;
        let mut masses = Table::new(&["period", "margin", "observed", "mean", "lower", "upper", "draw"]);
        for (g, id) in margins.iter().enumerate() {
            for i in 0..panel.num_periods() {
                masses.push(vec![
                    i.to_string(),
                    id.clone(),
                    panel.get(g, i).to_string(),
                    num(summary.mean[g][i]),
                    num(summary.lower[g][i]),
                    num(summary.upper[g][i]),
                    num(last[g][i]),
                ]);
            }
        }
        let mut diag = Table::new(&["move", "proposed", "accepted", "rate"]);
        for k in MoveKind::ALL {
            let s = out.diagnostics.moves[k.index()];
            diag.push(vec![k.label().to_string(), s.proposed.to_string(), s.accepted.to_string(), num(s.rate())]);
        }
        run.note(format!("non_finite_proposals={}", out.diagnostics.non_finite));
        run.note(format!("floored_proposals={}", out.diagnostics.floored));
        let kappa: Vec<f64> = params.iter().map(|p| p.kappa).collect();
        let mut term = Table::with_header(std::iter::once("sample".to_string()).chain(margins.iter().cloned()).collect());
        let mut mean = vec![0.0; margins.len()];
        for (s, t) in out.samples.iter().enumerate() {
            let v = model(t.terminal_intensity(&kappa))?;
            mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x / out.samples.len() as f64);
            term.push(std::iter::once(s.to_string()).chain(v.iter().map(|&x| num(x))).collect());
        }
        term.push(std::iter::once("mean".to_string()).chain(mean.iter().map(|&x| num(x))).collect());
        run.output(POSTERIOR_SAMPLES, &trajectories_table(&out.samples, &margins))?;
        run.output(POSTERIOR_MASSES, &masses)?;
        run.output("filter_diagnostics.csv", &diag)?;
        run.output(TERMINAL, &term)?;
        run.finish()
    }

    fn diagnose(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "diagnose");
        let margins = self.margins()?;
        let (panel, exposure) = self.data(&mut run, &margins)?;
        run.depends("filter")?;
        let (params, delta, _) = self.fitted(&mut run, &margins, panel.horizon())?;
        let mt = run.input_table(POSTERIOR_MASSES)?;
        let (cm, cdraw) = (mt.column("margin")?, mt.column("draw")?);
        let mut masses = vec![Vec::with_capacity(panel.num_periods()); margins.len()];
        for (i, row) in mt.rows.iter().enumerate() {
            let g = margins.iter().position(|m| m == &row[cm]).ok_or_else(|| fail(Category::Input, "unknown margin in masses"))?;
            masses[g].push(mt.f64_at(i, cdraw)?);
        }
        let res = model(pearson_residuals(&panel, &masses))?;
        let mut rt = Table::new(&["period", "margin", "observed", "mass", "residual"]);
        let mut st = Table::new(&["margin", "mean", "sd"]);
        for (g, id) in margins.iter().enumerate() {
            for i in 0..panel.num_periods() {
                rt.push(vec![i.to_string(), id.clone(), panel.get(g, i).to_string(), num(masses[g][i]), num(res.values[g][i])]);
            }
            st.push(vec![id.clone(), num(stats::mean(&res.values[g])), num(stats::std_dev(&res.values[g]))]);
        }
        let max_lag: usize = self.cfg.get("acf_max_lag")?;
        let pd = panel.period_days();
        let standardised: Vec<Vec<f64>> = (0..margins.len())
            .map(|g| {
                panel.margin(g).iter().enumerate().map(|(i, &n)| n as f64 / exposure.margin(g)[i * pd..(i + 1) * pd].iter().sum::<f64>()).collect()
            })
            .collect();
        let mut at = Table::new(&["margin", "series", "lag", "acf", "band"]);
        for (g, id) in margins.iter().enumerate() {
            for (series, s) in [("standardised", &standardised[g]), ("residual", &res.values[g])] {
                match stats::acf(s, max_lag) {
                    Ok(a) => {
                        for (lag, v) in a.values.iter().enumerate() {
                            at.push(vec![id.clone(), series.into(), lag.to_string(), num(*v), num(a.band)]);
                        }
                    }
                    Err(e) => run.note(format!("{id}: no {series} autocorrelation ({e})")),
                }
            }
        }
        run.output("residuals.csv", &rt)?;
        run.output("residual_summary.csv", &st)?;
        run.output("acf.csv", &at)?;
        let samples = trajectories_from_table(&run.input_table(POSTERIOR_SAMPLES)?, panel.horizon())?;
        let kappa: Vec<f64> = params.iter().map(|p| p.kappa).collect();
        let share = match delta {
            Some(d) => model(common_inflow_share(&[params[0], params[1]], &model(Clayton::new(d))?))?.to_vec(),
            None => vec![0.0],
        };
        let dec = model(decompose_contributions(&samples, &kappa, &share))?;
        let mut dt = Table::new(&["margin", "unique_pct", "common_pct"]);
        for (id, c) in margins.iter().zip(&dec) {
            dt.push(vec![id.clone(), format!("{:.2}", c.unique), format!("{:.2}", c.common)]);
        }
        run.output("decomposition.csv", &dt)?;
        if margins.len() == 2 {
            let k: usize = self.cfg.get("copula_grid")?;
            let mut ct = Table::new(&["series", "i", "j", "count"]);
            for (series, x, y) in [("counts", &standardised[0], &standardised[1]), ("residuals", &res.values[0], &res.values[1])] {
                let grid = model(empirical_copula(x, y, k))?;
                for (i, row) in grid.counts.iter().enumerate() {
                    for (j, c) in row.iter().enumerate() {
                        ct.push(vec![series.into(), i.to_string(), j.to_string(), c.to_string()]);
                    }
                }
                let v = model(grid.independence_violations(0.01))?;
                run.note(format!("{series}: {} copula cells outside independence bounds", v.len()));
            }
            run.output("copula_grid.csv", &ct)?;
        }
        run.finish()
    }

    fn predict(&self) -> anyhow::Result<Manifest> {
        let mut run = Run::new(self, "predict");
        let margins = self.margins()?;
        run.depends(if margins.len() == 2 { "fit-copula" } else { "fit-marginal" })?;
        let (panel, exposure) = self.data(&mut run, &margins)?;
        let (params, delta, state) = self.fitted(&mut run, &margins, panel.horizon())?;
        let kappa: Vec<f64> = params.iter().map(|p| p.kappa).collect();
        let initial: Vec<f64> = if self.store.has("filter") {
            run.depends("filter")?;
            let t = run.input_table(TERMINAL)?;
            let i = t.rows.iter().position(|r| r[0] == "mean").ok_or_else(|| fail(Category::Dependency, "terminal_intensity.csv has no mean"))?;
            (0..margins.len()).map(|g| t.f64_at(i, 1 + g)).collect::<anyhow::Result<_>>()?
        } else {
            run.note("no filter run; starting from the fitted final state");
            model(state.terminal_intensity(&kappa))?.to_vec()
        };
        let law = model(shot_law(&params, delta))?;
        let horizon: usize = self.cfg.get("horizon")?;
        let n_sims: usize = self.cfg.get("n_sims")?;
        let fwd = ForwardExposure::last_observed(&exposure);
        let pred = model(predict(law.as_ref(), &params, &initial, &fwd, horizon, n_sims, self.seed.wrapping_add(4)))?;
        let mut tt = Table::with_header(std::iter::once("sim".to_string()).chain(margins.iter().cloned()).collect());
        for s in 0..n_sims {
            tt.push(std::iter::once(s.to_string()).chain(pred.totals.iter().map(|t| t[s].to_string())).collect());
        }
        let mut st = Table::new(&["margin", "initial_intensity", "mean", "sd", "q05", "q50", "q95"]);
        for (g, id) in margins.iter().enumerate() {
            let mut v: Vec<f64> = pred.totals[g].iter().map(|&x| x as f64).collect();
            v.sort_by(f64::total_cmp);
            let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
            let sd = if v.len() > 1 { stats::std_dev(&v) } else { 0.0 };
            st.push(vec![id.clone(), num(initial[g]), num(stats::mean(&v)), num(sd), num(q(0.05)), num(q(0.5)), num(q(0.95))]);
        }
        run.output("prediction_totals.csv", &tt)?;
        run.output("prediction_summary.csv", &st)?;
        if margins.len() == 2 {
            let d = model(dependency_measures(&pred))?;
            let mut dt = Table::new(&["measure", "value"]);
            for (k, v) in [("pearson", d.pearson), ("kendall", d.kendall), ("spearman", d.spearman)] {
                dt.push(vec![k.into(), num(v)]);
            }
            run.output("dependency.csv", &dt)?;
        }
        run.finish()
    }
}
