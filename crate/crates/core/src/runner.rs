//! Config-driven experiment commands. Each command writes its tables and a JSON summary carrying
//! the config hash, seed and artifact version; the summary's check set fixes the exit status.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    Amplitudes, ExperimentConfig, FunctionalConfig, IdentityConfig, MeasureConfig, ThetaConfig, ARTIFACT_VERSION,
};
use crate::diagnostics::{
    decomposition_check, fourth_moment_check, lindeberg_fraction, make_partition, make_partition_with, variance_scaling,
    DiagnosticsPlan, SlabKind,
};
use crate::error::{Error, Result};
use crate::fields::{
    gibbs_smoothed_spec, sample_homogeneous, spectral_density_example, FieldState, MeasureSpec, RngStream,
    SmoothingKernel, SpectralDensity, TwoTempSpec,
};
use crate::io::{write_csv, write_fields, write_json};
use crate::lattice::{Lattice, Transform};
use crate::limits::{
    current_constant, laplacian_identity_residual, operator_pcal, periodization_correction, radial_profile, verify_radon_identity, LimitSpectra,
    RadonMethod,
};
use crate::propagate::evolve_spectral;
use crate::quadrature::SphereQuadrature;
use crate::stats::{
    estimate_char_functional, estimate_correlation, estimate_mean_current, gaussianity_metrics, local_energy_bound_check,
    spherical_identity_check, EnergyBall, EnsembleResult, EnsembleRunner, Estimate, InitialMeasure, PairProbe, ProbeSet,
};
use crate::testfn::{BumpProfile, LaplacianOf, RadialBump, TestFunction};

/// Exit status for a completed run whose enabled checks did not all pass.
pub const EXIT_CHECK_FAILED: i32 = 2;

/// A configuration resolved into lattice objects, measure, probes and limit predictions.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub transform: Transform,
    pub measure: InitialMeasure,
    pub probes: ProbeSet,
    pub limits: LimitSpectra,
    pub theta: Option<SmoothingKernel>,
}

fn build_theta(lattice: Lattice, cfg: &ThetaConfig) -> Result<SmoothingKernel> {
    match *cfg {
        ThetaConfig::RadialBump { radius, power, amplitude } => SmoothingKernel::radial_bump(lattice, radius, power, amplitude),
        ThetaConfig::BalancedBump { radius, inner, power, amplitude } => {
            SmoothingKernel::balanced_bump(lattice, radius, inner, power, amplitude)
        }
    }
}

fn example_phase(base: &SpectralDensity, amp: Amplitudes) -> Result<MeasureSpec> {
    MeasureSpec::new(base.scaled(amp.s00)?, base.scaled(amp.s11)?)
}

fn build_functional(lattice: Lattice, transform: &Transform, limits: &LimitSpectra, f: &FunctionalConfig) -> Result<TestFunction> {
    let psi = TestFunction::bump(lattice, f.center, f.radius, f.power, f.a0, f.a1)?;
    let Some(target) = f.normalize_qinf else {
        return Ok(psi);
    };
    let (a, b) = psi.spectra(transform);
    let q = limits.quadratic_form(&a, &b);
    if !(q > 0.0) || !(target > 0.0) {
        return Err(Error::Config(format!("cannot normalize functional: Q∞ = {q}, target {target}")));
    }
    let s = (target / q).sqrt();
    TestFunction::bump(lattice, f.center, f.radius, f.power, s * f.a0, s * f.a1)
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let lattice = Lattice::new(config.lattice.n, config.lattice.h)?;
        let transform = Transform::new(lattice);
        let (measure, theta) = match &config.measure {
            MeasureConfig::Example { r0, n_exp, a, profile, minus, plus } => {
                let base = spectral_density_example(*r0, *n_exp, lattice)?;
                let spec = TwoTempSpec::new(example_phase(&base, *minus)?, example_phase(&base, *plus)?, *a, *profile)?;
                (InitialMeasure::gaussian(spec), None)
            }
            MeasureConfig::GibbsSmoothed { t_minus, t_plus, a, profile, theta } => {
                let th = build_theta(lattice, theta)?;
                let spec = TwoTempSpec::new(
                    gibbs_smoothed_spec(&transform, *t_minus, &th)?,
                    gibbs_smoothed_spec(&transform, *t_plus, &th)?,
                    *a,
                    *profile,
                )?;
                (InitialMeasure::gaussian(spec), Some(th))
            }
            MeasureConfig::NonGaussian { r0, n_exp, a, profile, minus, plus, f0, f1 } => {
                let base = spectral_density_example(*r0, *n_exp, lattice)?;
                let spec = TwoTempSpec::new(example_phase(&base, *minus)?, example_phase(&base, *plus)?, *a, *profile)?;
                (InitialMeasure { spec, f0: *f0, f1: *f1 }, None)
            }
        };
        let limits = match (&config.measure, &theta) {
            (MeasureConfig::GibbsSmoothed { t_minus, t_plus, .. }, Some(th)) => LimitSpectra::gibbs(&transform, *t_minus, *t_plus, th)?,
            _ => {
                let (m, p) = measure.effective_specs(&transform)?;
                LimitSpectra::from_measures(&m, &p)?
            }
        };
        let pc = &config.probes;
        let probes = ProbeSet {
            pairs: pc.pairs.iter().map(|p| PairProbe { x: p.x, y: p.y }).collect(),
            functionals: pc
                .functionals
                .iter()
                .map(|f| build_functional(lattice, &transform, &limits, f))
                .collect::<Result<_>>()?,
            current_points: pc.current_points.clone(),
            energy_balls: pc.energy_balls.iter().map(|b| EnergyBall { center: b.center, radius: b.radius }).collect(),
            transverse_average: pc.transverse_average,
        };
        let t_max = config.schedule.times.iter().cloned().fold(0.0, f64::max);
        probes.validate(&lattice, t_max, config.measure.half_width())?;
        let hash = config.hash();
        Ok(Self { config, hash, transform, measure, probes, limits, theta })
    }

    pub fn lattice(&self) -> Lattice {
        *self.transform.lattice()
    }

    pub fn runner(&self) -> Result<EnsembleRunner> {
        EnsembleRunner::new(self.transform.clone(), self.measure.clone(), self.config.schedule.times.clone(), self.probes.clone())
    }

    /// Limit current `∇q¹⁰∞(0)`, or the Gibbs prediction at other temperatures when given.
    pub fn current_prediction(&self, temperatures: Option<[f64; 2]>) -> Result<[f64; 3]> {
        match (temperatures, &self.theta) {
            (None, _) => Ok(self.limits.current()),
            (Some([tm, tp]), Some(th)) => Ok(LimitSpectra::gibbs(&self.transform, tm, tp, th)?.current()),
            (Some(_), None) => Err(Error::Config("prediction temperatures need a smoothing kernel".into())),
        }
    }

    fn base_summary(&self, command: &str, seed: u64, samples: u64) -> Summary {
        Summary {
            artifact_version: ARTIFACT_VERSION.to_string(),
            command: command.to_string(),
            name: self.config.name.clone(),
            config_hash: self.hash.clone(),
            seed,
            samples,
            all_pass: true,
            checks: Vec::new(),
            results: serde_json::Value::Null,
        }
    }

    fn meta(&self, seed: u64) -> Vec<(&'static str, String)> {
        vec![("config", self.hash.clone()), ("seed", seed.to_string()), ("version", ARTIFACT_VERSION.to_string())]
    }
}

/// Pass/fail of one enabled check with its headline statistic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub z_score: Option<f64>,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, pass: bool, z_score: Option<f64>, detail: String) -> Self {
        Self { name: name.to_string(), pass, z_score, detail }
    }
}

/// JSON summary of one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub artifact_version: String,
    pub command: String,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub samples: u64,
    pub all_pass: bool,
    pub checks: Vec<CheckOutcome>,
    pub results: serde_json::Value,
}

impl Summary {
    fn finish(mut self, checks: Vec<CheckOutcome>, results: serde_json::Value) -> Self {
        self.all_pass = checks.iter().all(|c| c.pass);
        self.checks = checks;
        self.results = results;
        self
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// 0 when every enabled check passed, [`EXIT_CHECK_FAILED`] otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_pass {
            0
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

/// One estimator at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub t: f64,
    pub probe: String,
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub prediction: Option<f64>,
    pub z_score: Option<f64>,
}

fn z(est: f64, stderr: f64, pred: f64) -> Option<f64> {
    (stderr > 0.0).then(|| (est - pred) / stderr)
}

fn prepare_out(out: &Path, exp: &Experiment) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), exp.config.to_toml_string()?)?;
    Ok(())
}

/// Rows for every probe, component and time of an ensemble result.
pub fn result_rows(exp: &Experiment, res: &EnsembleResult, seed: u64) -> Result<Vec<ResultRow>> {
    let lattice = exp.lattice();
    let lim = exp.limits.to_correlations(&exp.transform);
    let current_pred = exp.current_prediction(exp.config.checks.current.as_ref().and_then(|c| c.prediction_temperatures))?;
    let qinf: Vec<f64> = exp
        .probes
        .functionals
        .iter()
        .map(|f| {
            let (a, b) = f.spectra(&exp.transform);
            exp.limits.quadratic_form(&a, &b)
        })
        .collect();
    let m = res.stats.count as f64;
    let mut rows = Vec::new();
    let mut push = |t: f64, probe: String, quantity: &str, e: Estimate, pred: Option<f64>| {
        rows.push(ResultRow {
            config_hash: exp.hash.clone(),
            seed,
            t,
            probe,
            quantity: quantity.to_string(),
            estimate: e.value,
            stderr: e.stderr,
            prediction: pred,
            z_score: pred.and_then(|p| z(e.value, e.stderr, p)),
        })
    };
    for (ti, &t) in res.times.iter().enumerate() {
        for (p, pair) in exp.probes.pairs.iter().enumerate() {
            let zi = lattice.point_index([pair.x[0] - pair.y[0], pair.x[1] - pair.y[1], pair.x[2] - pair.y[2]]);
            for (i, j, q) in [(0, 0, &lim.q00), (0, 1, &lim.q01), (1, 0, &lim.q10), (1, 1, &lim.q11)] {
                let e = estimate_correlation(res, ti, p, i, j)?;
                push(t, format!("pair{p}"), &format!("Q{i}{j}"), e, Some(q[zi] + 0.0));
            }
        }
        for c in 0..exp.probes.current_points.len() {
            let e = estimate_mean_current(res, ti, c)?;
            for a in 0..3 {
                push(t, format!("current{c}"), &format!("j{}", a + 1), e[a], Some(current_pred[a]));
            }
        }
        for (f, &q) in qinf.iter().enumerate() {
            let (mu, radius) = estimate_char_functional(res, ti, f)?;
            let pred = (-0.5 * q).exp();
            push(t, format!("functional{f}"), "char_re", Estimate { value: mu.re, stderr: radius }, Some(pred));
            push(t, format!("functional{f}"), "char_im", Estimate { value: mu.im, stderr: radius }, Some(0.0));
            let [_, m2, _, m4] = res.stats.central_moments(res.layout.functional(ti, f));
            let var_err = if m > 1.0 { ((m4 - m2 * m2).max(0.0) / m).sqrt() } else { 0.0 };
            push(t, format!("functional{f}"), "variance", Estimate { value: m2, stderr: var_err }, Some(q));
            let g = gaussianity_metrics(res, ti, f)?;
            push(t, format!("functional{f}"), "skewness", Estimate { value: g.skewness, stderr: g.skewness_ref_error }, Some(0.0));
            push(
                t,
                format!("functional{f}"),
                "excess_kurtosis",
                Estimate { value: g.excess_kurtosis, stderr: g.kurtosis_ref_error },
                Some(0.0),
            );
        }
        for b in 0..exp.probes.energy_balls.len() {
            let e = res.stats.estimate(res.layout.ball(ti, b))?;
            push(t, format!("ball{b}"), "local_energy", e, None);
        }
    }
    Ok(rows)
}

fn within(e: &Estimate, pred: f64, sigma: f64) -> bool {
    (e.value - pred).abs() <= sigma * e.stderr
}

/// Evaluates every enabled check of the configuration on an ensemble result.
pub fn evaluate_checks(exp: &Experiment, res: &EnsembleResult) -> Result<Vec<CheckOutcome>> {
    let checks = &exp.config.checks;
    let last = res.times.len() - 1;
    let mut out = Vec::new();
    if let Some(c) = &checks.equilibrium {
        let [i, j] = c.component;
        let lim = exp.limits.to_correlations(&exp.transform);
        let pair = exp.probes.pairs[c.pair];
        let zi = exp.lattice().point_index([pair.x[0] - pair.y[0], pair.x[1] - pair.y[1], pair.x[2] - pair.y[2]]);
        let target = [&lim.q00, &lim.q01, &lim.q10, &lim.q11][2 * i + j][zi];
        let est: Vec<Estimate> = (0..res.times.len()).map(|ti| estimate_correlation(res, ti, c.pair, i, j)).collect::<Result<_>>()?;
        let dist: Vec<f64> = est.iter().map(|e| (e.value - target).abs()).collect();
        let monotone = (1..dist.len())
            .all(|k| dist[k] <= dist[k - 1] + c.sigma * (est[k].stderr.powi(2) + est[k - 1].stderr.powi(2)).sqrt());
        let band = (c.sigma * est[last].stderr).max(c.systematic * target.abs());
        let pass = monotone && dist[last] <= band;
        out.push(CheckOutcome::new(
            "equilibrium",
            pass,
            z(est[last].value, est[last].stderr, target),
            format!("target {target:.6}, distances {dist:.5?}, final band {band:.5}, nonincreasing {monotone}"),
        ));
    }
    if let Some(c) = &checks.current {
        let pred = exp.current_prediction(c.prediction_temperatures)?;
        let e = estimate_mean_current(res, last, c.point)?;
        let tol3 = (c.sigma * e[2].stderr).max(c.rel_tol * pred[2].abs());
        let magnitude = (e[2].value - pred[2]).abs() <= tol3;
        let transverse = within(&e[0], 0.0, c.sigma) && within(&e[1], 0.0, c.sigma);
        let direction = if e[2].stderr > 0.0 { pred[2].signum() * e[2].value / e[2].stderr } else { 0.0 };
        let pass = magnitude && transverse && direction >= c.min_z;
        out.push(CheckOutcome::new(
            "current",
            pass,
            Some(direction),
            format!(
                "j = ({:.4} ± {:.4}, {:.4} ± {:.4}, {:.4} ± {:.4}), predicted j3 {:.4}, band {tol3:.4}, direction z {direction:.2}",
                e[0].value, e[0].stderr, e[1].value, e[1].stderr, e[2].value, e[2].stderr, pred[2]
            ),
        ));
    }
    if let Some(c) = &checks.equal_temperature {
        let mut worst: f64 = 0.0;
        let mut note = Vec::new();
        for p in 0..exp.probes.current_points.len() {
            for (a, e) in estimate_mean_current(res, last, p)?.iter().enumerate() {
                let zz = z(e.value, e.stderr, 0.0).unwrap_or(0.0);
                worst = worst.max(zz.abs());
                note.push(format!("current{p}.j{} z {zz:.2}", a + 1));
            }
        }
        for p in 0..exp.probes.pairs.len() {
            for (i, j) in [(1, 0), (0, 1)] {
                let e = estimate_correlation(res, last, p, i, j)?;
                let zz = z(e.value, e.stderr, 0.0).unwrap_or(0.0);
                worst = worst.max(zz.abs());
                note.push(format!("pair{p}.Q{i}{j} z {zz:.2}"));
            }
        }
        out.push(CheckOutcome::new("equal_temperature", worst <= c.sigma, Some(worst), note.join(", ")));
    }
    if let Some(c) = &checks.gaussianity {
        let m = res.stats.count as f64;
        let mut pass = true;
        let mut initial_nongaussian = false;
        let mut note = Vec::new();
        for (f, psi) in exp.probes.functionals.iter().enumerate() {
            let (a, b) = psi.spectra(&exp.transform);
            let pred = Complex64::new((-0.5 * exp.limits.quadratic_form(&a, &b)).exp(), 0.0);
            let (mu, _) = estimate_char_functional(res, last, f)?;
            let dev = (mu - pred).norm() * m.sqrt();
            let g = gaussianity_metrics(res, last, f)?;
            let g0 = gaussianity_metrics(res, 0, f)?;
            let ok = dev <= c.char_radius
                && g.skewness.abs() <= c.moment_sigma * g.skewness_ref_error
                && g.excess_kurtosis.abs() <= c.moment_sigma * g.kurtosis_ref_error;
            pass &= ok;
            let z0 = (g0.skewness / g0.skewness_ref_error).abs().max((g0.excess_kurtosis / g0.kurtosis_ref_error).abs());
            initial_nongaussian |= z0 > c.initial_sigma;
            note.push(format!(
                "f{f}: √M|μ̂−μ| {dev:.2}, skew {:.3}, kurt {:.3}, initial z {z0:.1}",
                g.skewness, g.excess_kurtosis
            ));
        }
        out.push(CheckOutcome::new("gaussianity", pass && initial_nongaussian, None, note.join("; ")));
    }
    if let Some(c) = &checks.local_energy {
        let r = local_energy_bound_check(res, c.ball)?;
        let ratio = if r.min > 0.0 { r.max / r.min } else { f64::INFINITY };
        out.push(CheckOutcome::new(
            "local_energy",
            ratio <= c.max_ratio,
            None,
            format!("max/min {ratio:.4}, slope {:.3e} ± {:.3e}, growth {}", r.slope, r.slope_stderr, r.growth),
        ));
    }
    Ok(out)
}

/// Runs the ensemble, writes `ensemble.csv` and `ensemble.json`.
pub fn cmd_ensemble(exp: &Experiment, out: &Path, workers: usize) -> Result<Summary> {
    prepare_out(out, exp)?;
    let s = &exp.config.schedule;
    let res = exp.runner()?.run(s.samples, s.seed, workers)?;
    let rows = result_rows(exp, &res, s.seed)?;
    write_csv(&out.join("ensemble.csv"), &rows)?;
    let checks = evaluate_checks(exp, &res)?;
    let summary = exp.base_summary("ensemble", s.seed, s.samples).finish(
        checks,
        json!({ "times": res.times, "rows": rows.len(), "table": "ensemble.csv" }),
    );
    write_json(&out.join("ensemble.json"), &summary)?;
    Ok(summary)
}

/// Writes one realization (stream `stream`) at every scheduled time as `sample_t<i>.bin`.
pub fn cmd_sample(exp: &Experiment, out: &Path, stream: u64) -> Result<Summary> {
    prepare_out(out, exp)?;
    let seed = exp.config.schedule.seed;
    let (u, v) = exp.runner()?.initial_fields(seed, stream);
    let y0 = FieldState::new(exp.lattice(), u, v)?;
    let mut meta = exp.meta(seed);
    meta.push(("stream", stream.to_string()));
    let mut files = Vec::new();
    for (ti, &t) in exp.config.schedule.times.iter().enumerate() {
        let y = if t == 0.0 { y0.clone() } else { evolve_spectral(&exp.transform, &y0, t)? };
        let name = format!("sample_t{ti}.bin");
        let mut m = meta.clone();
        m.push(("t", format!("{t:?}")));
        write_fields(&out.join(&name), &y.lattice, &[("u", &y.u), ("v", &y.v)], &m)?;
        files.push(json!({ "t": t, "file": name, "sup_norm": y.sup_norm() }));
    }
    let summary = exp.base_summary("sample", seed, 1).finish(Vec::new(), json!({ "stream": stream, "fields": files }));
    write_json(&out.join("sample.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct RadialCsvRow {
    config_hash: String,
    radius: f64,
    count: usize,
    q00: f64,
    q10: f64,
    q11: f64,
}

/// Writes the limit correlation matrix (`limits.bin`), its radial profile and a summary.
pub fn cmd_limits(exp: &Experiment, out: &Path) -> Result<Summary> {
    prepare_out(out, exp)?;
    let seed = exp.config.schedule.seed;
    let q = exp.limits.to_correlations(&exp.transform);
    let l = exp.lattice();
    write_fields(&out.join("limits.bin"), &l, &[("q00", &q.q00), ("q01", &q.q01), ("q10", &q.q10), ("q11", &q.q11)], &exp.meta(seed))?;
    let rows: Vec<RadialCsvRow> = radial_profile(&q)
        .into_iter()
        .map(|r| RadialCsvRow { config_hash: exp.hash.clone(), radius: r.radius, count: r.count, q00: r.q00, q10: r.q10, q11: r.q11 })
        .collect();
    write_csv(&out.join("radial_profile.csv"), &rows)?;
    let antisym = q.antisymmetry_defect();
    let lap = q.laplacian_defect(&exp.transform);
    let checks = vec![
        CheckOutcome::new("antisymmetry", antisym <= 1e-12, None, format!("max |q10 + q01| = {antisym:.3e}")),
        CheckOutcome::new("laplacian", lap <= 1e-8, None, format!("relative |q11 + Δq00| = {lap:.3e}")),
    ];
    let c_theta = match (&exp.config.measure, &exp.theta) {
        (MeasureConfig::GibbsSmoothed { t_minus, t_plus, .. }, Some(th)) => Some(current_constant(&exp.transform, th, *t_minus, *t_plus)?.c_theta),
        _ => None,
    };
    // Gibbs q00 is −T·E on the torus; report how far the torus E sits from the free-space one.
    let periodization = match &exp.config.measure {
        MeasureConfig::GibbsSmoothed { .. } => exp
            .config
            .probes
            .pairs
            .iter()
            .map(|p| {
                let z = l.position(l.point_index([p.x[0] - p.y[0], p.x[1] - p.y[1], p.x[2] - p.y[2]]));
                json!({ "x": p.x, "y": p.y, "q00_correction_per_unit_temperature": -periodization_correction(z, l.side()) })
            })
            .collect(),
        _ => Vec::new(),
    };
    let q10_sup = q.q10.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let summary = exp.base_summary("limits", seed, 0).finish(
        checks,
        json!({
            "q11_at_origin": exp.limits.q11_at_origin(),
            "current": exp.limits.current(),
            "c_theta": c_theta,
            "q10_sup": q10_sup,
            "periodization": periodization,
            "field_file": "limits.bin",
            "radial_profile": "radial_profile.csv",
        }),
    );
    write_json(&out.join("limits.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct DiagnosticsCsvRow {
    config_hash: String,
    seed: u64,
    t: f64,
    kind: SlabKind,
    k: usize,
    variance: f64,
    stderr: f64,
    width_over_t: f64,
    ratio: f64,
}

/// Residuals of the plane-integral identities on a fixed analytic bump: the full-sphere plane
/// average, the odd operator, and `R Δg = −¼ g`.
pub fn identity_residuals(cfg: &IdentityConfig) -> Result<(f64, f64, f64)> {
    let l = Lattice::new(cfg.n, cfg.h)?;
    let tr = Transform::new(l);
    let r = cfg.bump_radius;
    let a = r / 2.0;
    let g = BumpProfile::new(vec![
        RadialBump::new([0.0, 0.0, -a], r, 8, 1.0)?,
        RadialBump::new([0.0; 3], r, 8, -2.0)?,
        RadialBump::new([0.0, 0.0, a], r, 8, 1.0)?,
    ]);
    let s = (r / cfg.h) as i64;
    let sites: Vec<usize> = [[0, 0, 0], [s / 4, s / 2, 1], [0, 0, s / 2], [-s / 2, s / 4, s / 4], [s / 2, -s / 2, -s / 3], [1, 0, 2 * s]]
        .iter()
        .map(|&p| l.point_index(p))
        .collect();
    let lap_g = LaplacianOf(g.clone());
    let radon = verify_radon_identity(&tr, &lap_g, &sites, cfg.sphere_order, cfg.plane_points)?;
    let sp = operator_pcal(&tr, &lap_g, &sites, RadonMethod::Spectral)?;
    let qd = operator_pcal(
        &tr,
        &lap_g,
        &sites,
        RadonMethod::PlaneQuadrature { sphere_order: cfg.hemisphere_order, plane_points: cfg.plane_points },
    )?;
    let scale = sp.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let pcal = sp.iter().zip(&qd).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
    let lap = laplacian_identity_residual(&tr, &g.sample(&l));
    Ok((radon, pcal, lap))
}

/// Spherical identity residuals at the order-29 rule: the constant case, the largest over two
/// smooth cases, and the case with a cut-off disc around the pole.
pub fn spherical_residuals() -> Result<(f64, f64, f64)> {
    let q = SphereQuadrature::for_order(29)?;
    let t = 3.0;
    let exact = spherical_identity_check(&|_| 1.0, 0.0, t, &q);
    let linear = spherical_identity_check(&|r| r, 0.0, t, &q);
    let decaying = spherical_identity_check(&|r| (-0.25 * r * r).exp(), 0.0, t, &q);
    let cut = spherical_identity_check(&|r| (-r).exp(), t / 2.0, t, &q);
    Ok((exact, linear.max(decaying), cut))
}

/// Room–corridor ensemble diagnostics on the homogeneous `plus` measure, plus identity checks.
pub fn cmd_diagnose(exp: &Experiment, out: &Path, workers: usize) -> Result<Summary> {
    let d = exp.config.diagnostics.as_ref().ok_or_else(|| Error::Config("missing [diagnostics] section".into()))?;
    prepare_out(out, exp)?;
    let seed = exp.config.schedule.seed;
    let lattice = exp.lattice();
    let spec = exp.measure.spec.plus.clone();
    let psi = build_functional(lattice, &exp.transform, &exp.limits, &d.test_function)?;
    let partitions = d
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| match &d.rooms {
            Some(r) => make_partition_with(t, d.delta, r[i]),
            None => make_partition(t, d.delta),
        })
        .collect::<Result<Vec<_>>>()?;
    let y0 = sample_homogeneous(&exp.transform, &spec, RngStream::new(seed, u64::MAX))?;
    let residuals: Vec<f64> = partitions
        .iter()
        .map(|p| decomposition_check(&exp.transform, &y0, &psi, p, d.resolution))
        .collect::<Result<_>>()?;
    let plan = DiagnosticsPlan::new(exp.transform.clone(), spec, &psi, partitions.clone(), Some(d.truncation), d.resolution)?;
    let samples = plan.run(d.samples, seed, workers)?;
    let scaling = variance_scaling(&samples)?;
    let rows: Vec<DiagnosticsCsvRow> = scaling
        .rows
        .iter()
        .map(|r| DiagnosticsCsvRow {
            config_hash: exp.hash.clone(),
            seed,
            t: r.t,
            kind: r.kind,
            k: r.index,
            variance: r.variance,
            stderr: r.stderr,
            width_over_t: r.width_over_t,
            ratio: r.ratio,
        })
        .collect();
    write_csv(&out.join("diagnostics.csv"), &rows)?;

    let mut fourth = Vec::new();
    for ti in 0..samples.times.len() {
        let mut best: Option<crate::diagnostics::FourthMomentReport> = None;
        for (c, &(cti, slab)) in samples.columns.iter().enumerate() {
            if cti == ti && slab.kind == SlabKind::Room {
                let r = fourth_moment_check(&samples, c)?;
                if best.is_none_or(|b| r.ratio > b.ratio) {
                    best = Some(r);
                }
            }
        }
        fourth.push(best.ok_or_else(|| Error::UnknownProbe(format!("no rooms at time index {ti}")))?);
    }
    let lindeberg: Vec<Estimate> =
        (0..samples.times.len()).map(|ti| lindeberg_fraction(&samples, ti, d.epsilon)).collect::<Result<_>>()?;

    let c = &d.checks;
    let mut checks = Vec::new();
    if let Some(tol) = c.decomposition_tol {
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        checks.push(CheckOutcome::new("decomposition", worst <= tol, None, format!("max residual {worst:.3e}")));
    }
    if let Some(f) = c.width_ratio_factor {
        let pass = !scaling.corridor_room.is_empty()
            && scaling.corridor_room.iter().all(|r| r.quotient >= 1.0 / f && r.quotient <= f);
        let q: Vec<String> = scaling.corridor_room.iter().map(|r| format!("t={} {:.3}", r.t, r.quotient)).collect();
        checks.push(CheckOutcome::new("width_ratio", pass, None, format!("corridor/room over ρ/d: {}", q.join(", "))));
    }
    if let Some(g) = c.max_growth {
        checks.push(CheckOutcome::new(
            "variance_growth",
            scaling.max_growth <= g,
            None,
            format!("max growth of room ratio {:.3}", scaling.max_growth),
        ));
    }
    if let Some(f) = c.fourth_moment_factor {
        let mut r: Vec<f64> = fourth.iter().map(|x| x.ratio).collect();
        let shown = r.clone();
        r.sort_by(f64::total_cmp);
        let median = r[r.len() / 2];
        let pass = median > 0.0 && r.iter().all(|&x| x <= f * median && x >= median / f);
        checks.push(CheckOutcome::new("fourth_moment", pass, None, format!("ratios {shown:.4?}, median {median:.4}")));
    }
    if let Some(sigma) = c.lindeberg_sigma {
        let pass = lindeberg
            .windows(2)
            .all(|w| w[1].value <= w[0].value + sigma * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt());
        let v: Vec<String> = lindeberg.iter().map(|e| format!("{:.4} ± {:.4}", e.value, e.stderr)).collect();
        checks.push(CheckOutcome::new("lindeberg", pass, None, format!("tail fractions {}", v.join(", "))));
    }
    let mut identities = serde_json::Map::new();
    if c.radon_tol.is_some() || c.laplacian_identity_tol.is_some() {
        let (radon, pcal, lap) = identity_residuals(&d.identities)?;
        identities.insert("radon".into(), json!(radon));
        identities.insert("odd_radon".into(), json!(pcal));
        identities.insert("laplacian".into(), json!(lap));
        if let Some(tol) = c.radon_tol {
            checks.push(CheckOutcome::new("radon", radon.max(pcal) <= tol, None, format!("R {radon:.3e}, odd {pcal:.3e}")));
        }
        if let Some(tol) = c.laplacian_identity_tol {
            checks.push(CheckOutcome::new("laplacian_identity", lap <= tol, None, format!("residual {lap:.3e}")));
        }
    }
    if c.spherical_exact_tol.is_some() || c.spherical_smooth_tol.is_some() || c.spherical_cutoff_tol.is_some() {
        let (exact, smooth, cut) = spherical_residuals()?;
        identities.insert("spherical_exact".into(), json!(exact));
        identities.insert("spherical_smooth".into(), json!(smooth));
        identities.insert("spherical_cutoff".into(), json!(cut));
        for (name, tol, r) in [
            ("spherical_exact", c.spherical_exact_tol, exact),
            ("spherical_smooth", c.spherical_smooth_tol, smooth),
            ("spherical_cutoff", c.spherical_cutoff_tol, cut),
        ] {
            if let Some(tol) = tol {
                checks.push(CheckOutcome::new(name, r <= tol, None, format!("residual {r:.3e}")));
            }
        }
    }
    let summary = exp.base_summary("diagnose", seed, d.samples as u64).finish(
        checks,
        json!({
            "decomposition_residuals": residuals,
            "room_slope": scaling.room_slope,
            "corridor_slope": scaling.corridor_slope,
            "max_room_ratio": scaling.max_room_ratio,
            "max_corridor_ratio": scaling.max_corridor_ratio,
            "corridor_room": scaling.corridor_room,
            "fourth_moment": fourth,
            "lindeberg": lindeberg,
            "bound": samples.bound,
            "partitions": partitions.iter().map(|p| json!({ "t": p.t, "rooms": p.n_rooms, "rho": p.rho, "d": p.d, "reduced": p.reduced })).collect::<Vec<_>>(),
            "identities": identities,
            "table": "diagnostics.csv",
        }),
    );
    write_json(&out.join("diagnose.json"), &summary)?;
    Ok(summary)
}
