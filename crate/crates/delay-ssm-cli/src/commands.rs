//! Subcommand implementations: each one drives the library pipeline and
//! writes plot-ready CSVs plus a human-readable report into the output
//! directory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use ndarray::Array1;

use delay_ssm::chain::{build_chain, ChainSystem};
use delay_ssm::delay_model::{DelaySystem, InitialHistory};
use delay_ssm::rom_analysis::{
    backbone, frc_order_convergence, frc_periodic, limit_cycle_predict, limit_cycle_roots,
    rom_limit_cycles, torus_amplitude_band, torus_section_curve, write_bifurcations_csv,
    write_frc_branches_csv, write_frc_csv, write_root_report, BifurcationKind, Frc, FrcOptions,
    PredictedCycle, RomCycle, RomCycleOptions, RootClassification,
};
use delay_ssm::simulate::{
    classify_steady_state, integrate_chain, integrate_dde, poincare_section, DdeOptions,
    SdirkOptions, SteadyState, SteadyStateReport, Trajectory, STEADY_DISCARD_FRAC,
};
use delay_ssm::spectral::{
    compute_spectrum, convergence_study, exact_characteristic_roots, hopf_locus, select_master,
    write_convergence_csv, write_spectrum_csv,
};
use delay_ssm::ssm::{compute_ssm, nonauto_correction, residual_tail, SsmExpansion};
use delay_ssm::Complex64;

use crate::config::{PredictTask, RunConfig, SimulateMethod};
use crate::{Classify, CliError};

/// Default relative tolerance for the FRC order-convergence audit.
const FRC_ORDER_REL_TOL: f64 = 0.02;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<()> {
    let mut w = create(out, name)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

/// Sign-aware polynomial rendering: coefficients c_j attached to var^powers[j].
fn poly_string(coeffs: &[f64], var: &str, powers: impl Iterator<Item = u32>) -> String {
    let mut s = String::new();
    for (c, p) in coeffs.iter().zip(powers) {
        let mag = c.abs();
        let term = match p {
            0 => format!("{mag:e}"),
            1 => format!("{mag:e}*{var}"),
            _ => format!("{mag:e}*{var}^{p}"),
        };
        if s.is_empty() {
            if *c < 0.0 {
                s.push_str("-");
            }
        } else if *c < 0.0 {
            s.push_str(" - ");
        } else {
            s.push_str(" + ");
        }
        s.push_str(&term);
    }
    if s.is_empty() {
        s.push('0');
    }
    s
}

fn problem_name(cfg: &RunConfig) -> &'static str {
    match cfg.problem {
        crate::config::ProblemConfig::Duffing { .. } => "duffing",
        crate::config::ProblemConfig::Coupled { .. } => "coupled",
        crate::config::ProblemConfig::Hutchinson { .. } => "hutchinson",
    }
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

pub fn cmd_spectrum(cfg: &RunConfig, out: &Path, validate: bool) -> Result<(), CliError> {
    let sys = cfg.problem.build().config_err()?;
    let n_grid = cfg.discretization.n;
    let cs = build_chain(&sys, n_grid).config_err()?;
    let k = cfg.spectrum.as_ref().and_then(|s| s.k);
    let spectrum = compute_spectrum(&cs, k).num_err()?;

    let mut w = create(out, "spectrum.csv").num_err()?;
    write_spectrum_csv(&spectrum, &mut w).num_err()?;

    let mut report = String::new();
    let _ = writeln!(
        report,
        "problem: {} (n = {}), N = {}, chain dimension = {}",
        problem_name(cfg),
        sys.n,
        n_grid,
        cs.dim
    );
    let _ = writeln!(report, "leading eigenvalues:");
    for (j, v) in spectrum.eigenvalues.iter().take(8).enumerate() {
        let _ = writeln!(report, "  {}: {} {:+}i", j + 1, v.re, v.im);
    }
    match select_master(&cs, &spectrum) {
        Ok(m) => {
            let _ = writeln!(
                report,
                "master mode: lambda = {} {:+}i (index {})",
                m.lambda.re, m.lambda.im, m.index
            );
        }
        Err(e) => {
            let _ = writeln!(report, "master mode: unavailable ({e})");
        }
    }

    if let Some(sw) = cfg.spectrum.as_ref().and_then(|s| s.sweep.as_ref()) {
        let mut rows = Vec::new();
        for i in 0..sw.steps {
            let p = sw.from + (sw.to - sw.from) * i as f64 / (sw.steps - 1) as f64;
            let sys_p = cfg.problem.with_parameter(&sw.parameter, p).config_err()?;
            let cs_p = build_chain(&sys_p.build().config_err()?, n_grid).num_err()?;
            let spec_p = compute_spectrum(&cs_p, Some(2)).num_err()?;
            rows.push((p, spec_p.eigenvalues[0]));
        }
        let mut w = create(out, "sweep.csv").num_err()?;
        (|| -> Result<()> {
            writeln!(w, "{},re_lambda,im_lambda", sw.parameter)?;
            for (p, lam) in &rows {
                writeln!(w, "{},{},{}", p, lam.re, lam.im)?;
            }
            Ok(())
        })()
        .num_err()?;

        // Refine the first bracketed sign change of Re λ.
        let bracket = rows.windows(2).find(|w| w[0].1.re * w[1].1.re < 0.0);
        match bracket {
            Some(pair) => {
                let problem = cfg.problem.clone();
                let name = sw.parameter.clone();
                let family =
                    move |p: f64| -> Result<DelaySystem> { problem.with_parameter(&name, p)?.build() };
                let star =
                    hopf_locus(&family, (pair[0].0, pair[1].0), n_grid, None).num_err()?;
                let _ = writeln!(
                    report,
                    "Hopf crossing: {} = {} (Re lambda changes sign)",
                    sw.parameter, star
                );
            }
            None => {
                let _ = writeln!(
                    report,
                    "no sign change of Re lambda over the {} sweep [{}, {}]",
                    sw.parameter, sw.from, sw.to
                );
            }
        }
    }

    if let Some(cv) = cfg.spectrum.as_ref().and_then(|s| s.convergence.as_ref()) {
        let (rows, order, exact) = convergence_study(&sys, &cv.grids).num_err()?;
        let mut w = create(out, "convergence.csv").num_err()?;
        write_convergence_csv(&rows, &mut w).num_err()?;
        let _ = writeln!(
            report,
            "discretization convergence: exact lambda = {} {:+}i, fitted order = {}",
            exact.re, exact.im, order
        );
    }

    if validate {
        let roots = exact_characteristic_roots(&sys, 3, None).num_err()?;
        let _ = writeln!(report, "exact characteristic roots (validation):");
        for r in &roots {
            let _ = writeln!(report, "  {} {:+}i", r.re, r.im);
        }
        if let Some(r0) = roots.first() {
            let lead = spectrum.eigenvalues[0];
            let lead = if lead.im >= 0.0 { lead } else { lead.conj() };
            let _ = writeln!(report, "chain-vs-exact leading deviation: {:e}", (lead - r0).norm());
        }
    }

    write_text(out, "spectrum_report.txt", &report).num_err()?;
    println!(
        "spectrum: {} eigenvalues -> {}",
        spectrum.eigenvalues.len(),
        out.join("spectrum.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ssm
// ---------------------------------------------------------------------------

pub fn cmd_ssm(cfg: &RunConfig, out: &Path, validate: bool) -> Result<(), CliError> {
    let sys = cfg.problem.build().config_err()?;
    let cs = build_chain(&sys, cfg.discretization.n).config_err()?;
    let spectrum = compute_spectrum(&cs, Some(16.min(cs.dim))).num_err()?;
    let master = select_master(&cs, &spectrum).num_err()?;
    let exp = compute_ssm(&cs, &master, cfg.ssm.order).num_err()?;
    let rom = exp.rom(&cs);

    serde_json::to_writer_pretty(create(out, "ssm_expansion.json").num_err()?, &exp)
        .context("cannot persist the manifold expansion")
        .num_err()?;
    serde_json::to_writer_pretty(create(out, "rom.json").num_err()?, &rom)
        .context("cannot persist the reduced model")
        .num_err()?;

    let mut report = String::new();
    let _ = writeln!(
        report,
        "problem: {}, N = {}, chain dimension = {}",
        problem_name(cfg),
        cfg.discretization.n,
        cs.dim
    );
    let _ = writeln!(
        report,
        "master eigenvalue: lambda = {} {:+}i",
        master.lambda.re, master.lambda.im
    );
    let _ = writeln!(report, "reduced dynamics rho' = a(rho), theta' = b(rho):");
    let mut orders: Vec<u32> = (3..=exp.order).filter(|o| o % 2 == 1).collect();
    if exp.order % 2 == 0 {
        orders.push(exp.order);
    }
    for &o in &orders {
        let r = rom.truncated(o);
        let a = poly_string(&r.a_coeffs_s(), "rho", (1..).step_by(2));
        let b = poly_string(&r.b_coeffs_s(), "rho", (0..).step_by(2));
        let _ = writeln!(report, "  O({o}):");
        let _ = writeln!(report, "    a(rho) = {a}");
        let _ = writeln!(report, "    b(rho) = {b}");
    }
    let _ = writeln!(
        report,
        "annotations: a linear coefficient = Re lambda = {}; b constant = Im lambda = {}",
        rom.lambda.re, rom.lambda.im
    );
    let _ = writeln!(report, "largest homological-solve residual: {:e}", exp.max_solve_residual);
    if let Some(f) = &rom.forcing {
        let _ = writeln!(
            report,
            "modal forcing: f = {} {:+}i ({:?} law)",
            f.f_base.re, f.f_base.im, f.law
        );
    }

    if validate {
        let tail = residual_tail(&cs, &exp).num_err()?;
        let slope = tail.fitted_slope(0.05, 0.5, 12);
        let _ = writeln!(
            report,
            "invariance-residual tail: leading degree = {:?}, fitted log-log slope over [0.05, 0.5] = {}",
            tail.leading_degree(),
            slope
        );
    }

    write_text(out, "rom_report.txt", &report).num_err()?;
    println!(
        "ssm: order {} expansion (dim {}) -> {}",
        exp.order,
        exp.dim,
        out.join("ssm_expansion.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct AgreementRow {
    task: &'static str,
    quantity: String,
    omega: f64,
    predicted: f64,
    simulated: f64,
}

pub fn cmd_predict(cfg: &RunConfig, out: &Path, validate: bool) -> Result<(), CliError> {
    let p = cfg
        .predict
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [predict] block"))
        .config_err()?;

    let frc_eps = p.frc.as_ref().map(|f| f.epsilon.unwrap_or(cfg.problem.epsilon()));
    let torus_eps = p.torus.as_ref().map(|t| t.epsilon.unwrap_or(cfg.problem.epsilon()));
    let needs_forcing =
        p.tasks.contains(&PredictTask::Frc) || p.tasks.contains(&PredictTask::Torus);

    // The forcing template is amplitude-independent; make sure it exists when
    // a forced task is requested even if the problem block says ε = 0.
    let sys = if needs_forcing {
        let template_eps = [Some(cfg.problem.epsilon()), frc_eps, torus_eps]
            .into_iter()
            .flatten()
            .fold(0.0_f64, f64::max);
        cfg.problem.build_with(Some(template_eps), None).config_err()?
    } else {
        cfg.problem.build().config_err()?
    };
    let cs = build_chain(&sys, cfg.discretization.n).config_err()?;

    let exp: SsmExpansion = match &p.expansion {
        Some(path) => {
            let f = File::open(path)
                .with_context(|| format!("cannot open expansion file {}", path.display()))
                .config_err()?;
            let exp: SsmExpansion = serde_json::from_reader(BufReader::new(f))
                .with_context(|| format!("cannot parse expansion file {}", path.display()))
                .config_err()?;
            if exp.dim != cs.dim {
                return Err(anyhow!(
                    "expansion dimension {} does not match the chain dimension {}",
                    exp.dim,
                    cs.dim
                ))
                .config_err();
            }
            exp
        }
        None => {
            let spectrum = compute_spectrum(&cs, Some(16.min(cs.dim))).num_err()?;
            let master = select_master(&cs, &spectrum).num_err()?;
            compute_ssm(&cs, &master, cfg.ssm.order).num_err()?
        }
    };
    let rom = exp.rom(&cs);

    let rho_max = match p.rho_max {
        Some(r) => r,
        None => delay_ssm::rom_analysis::conv_radius_estimate(&rom)
            .map(|r| 1.2 * r)
            .ok_or_else(|| {
                anyhow!("no predict.rho_max given and the convergence-radius estimate is unavailable")
            })
            .num_err()?,
    };

    let mut report = String::new();
    let _ = writeln!(
        report,
        "problem: {}, N = {}, expansion order {}, rho_max = {}",
        problem_name(cfg),
        cfg.discretization.n,
        exp.order,
        rho_max
    );
    let mut agreements: Vec<AgreementRow> = Vec::new();

    // ---- backbone ----------------------------------------------------------
    if p.tasks.contains(&PredictTask::Backbone) {
        let mut w = create(out, "backbone.csv").num_err()?;
        (|| -> Result<()> {
            writeln!(w, "order,rho,omega")?;
            let mut orders: Vec<u32> = (3..=exp.order).filter(|o| o % 2 == 1).collect();
            if exp.order % 2 == 0 {
                orders.push(exp.order);
            }
            for &o in &orders {
                let r = rom.truncated(o);
                for pt in backbone(&r, rho_max, p.n_points) {
                    writeln!(w, "{},{},{}", o, pt.rho, pt.omega)?;
                }
            }
            Ok(())
        })()
        .num_err()?;
        let _ = writeln!(report, "backbone: wrote orders up to O({})", exp.order);
    }

    // ---- limit cycle -------------------------------------------------------
    let mut predicted_cycle: Option<PredictedCycle> = None;
    if p.tasks.contains(&PredictTask::LimitCycle) {
        let root_report = limit_cycle_roots(&rom);
        let mut w = create(out, "roots.txt").num_err()?;
        write_root_report(&root_report, &mut w).num_err()?;
        let best = root_report
            .roots
            .iter()
            .filter(|r| r.classification == RootClassification::Converged)
            .last();
        match best {
            Some(root) => {
                let cycle = limit_cycle_predict(&exp, &rom, root.rho, 512);
                (|| -> Result<()> {
                    let mut cw = create(out, "cycle.csv")?;
                    write!(cw, "t")?;
                    for i in 0..cycle.x[0].len() {
                        write!(cw, ",x{i}")?;
                    }
                    writeln!(cw)?;
                    for (t, row) in cycle.t.iter().zip(&cycle.x) {
                        write!(cw, "{t}")?;
                        for v in row {
                            write!(cw, ",{v}")?;
                        }
                        writeln!(cw)?;
                    }
                    Ok(())
                })()
                .num_err()?;
                let _ = writeln!(
                    report,
                    "limit cycle: rho* = {}, frequency b(rho*) = {}, period = {}, stable = {}",
                    root.rho, root.omega, cycle.period, root.stable
                );
                let _ = writeln!(
                    report,
                    "limit cycle physical amplitude (coordinate 0): {}",
                    cycle.amplitude[0]
                );
                predicted_cycle = Some(cycle);
            }
            None => {
                (|| -> Result<()> {
                    writeln!(w)?;
                    writeln!(
                        w,
                        "warning: no converged nontrivial root; the reduced model predicts \
                         no trustworthy limit cycle at this order and no orbit is emitted."
                    )?;
                    Ok(())
                })()
                .num_err()?;
                let _ = writeln!(report, "limit cycle: no converged root (see roots.txt)");
            }
        }
    }

    // ---- forced response curve ---------------------------------------------
    let mut frc_result: Option<Frc> = None;
    if p.tasks.contains(&PredictTask::Frc) {
        let f = p.frc.as_ref().unwrap();
        let eps = frc_eps.unwrap();
        let mut opts = FrcOptions::new(f.omega_min, f.omega_max);
        opts.grid_n = f.grid_n;
        opts.rho_max = Some(rho_max);
        let frc = frc_periodic(&rom, eps, &opts).num_err()?;

        let mut w = create(out, "frc.csv").num_err()?;
        write_frc_csv(&frc, &mut w).num_err()?;
        let mut w = create(out, "frc_branches.csv").num_err()?;
        write_frc_branches_csv(&frc, &mut w).num_err()?;
        let mut w = create(out, "bifurcations.csv").num_err()?;
        write_bifurcations_csv(&frc, &mut w).num_err()?;

        let n_sn = frc
            .bifurcations
            .iter()
            .filter(|b| b.kind == BifurcationKind::SaddleNode)
            .count();
        let n_hb =
            frc.bifurcations.iter().filter(|b| b.kind == BifurcationKind::Hopf).count();
        let _ = writeln!(
            report,
            "frc (eps = {}): {} sweep points, {} branches, isola = {}, SN points = {}, HB points = {}",
            eps,
            frc.points.len(),
            frc.branches.len(),
            frc.has_isola,
            n_sn,
            n_hb
        );
        for b in &frc.bifurcations {
            let kind = match b.kind {
                BifurcationKind::SaddleNode => "SN",
                BifurcationKind::Hopf => "HB",
            };
            let _ = writeln!(report, "  {kind} at omega = {}, rho = {}", b.omega, b.rho);
        }

        if f.order_check {
            let conv = frc_order_convergence(&rom, eps, &opts, FRC_ORDER_REL_TOL).num_err()?;
            let mut text = String::new();
            let _ = writeln!(
                text,
                "forced-response order convergence (relative tolerance {})",
                conv.rel_tol
            );
            for pair in &conv.per_pair {
                let _ = writeln!(
                    text,
                    "O({}) vs O({}): sup relative amplitude difference = {}, existence mismatch = {}",
                    pair.order_hi, pair.order_lo, pair.sup_rel_diff, pair.existence_mismatch
                );
            }
            let _ = writeln!(text, "converged: {}", conv.converged);
            write_text(out, "frc_convergence.txt", &text).num_err()?;
            let _ = writeln!(report, "frc order convergence: converged = {}", conv.converged);
            if !conv.converged {
                let _ = writeln!(
                    report,
                    "warning: the forced response has not converged across expansion orders; \
                     amplitudes in frc.csv are not trustworthy at this forcing level"
                );
            }
        }
        frc_result = Some(frc);
    }

    // ---- torus --------------------------------------------------------------
    let mut torus_cycles: Vec<RomCycle> = Vec::new();
    let mut torus_x0: Option<Array1<Complex64>> = None;
    if p.tasks.contains(&PredictTask::Torus) {
        let t = p.torus.as_ref().unwrap();
        let eps = torus_eps.unwrap();
        let cycles = rom_limit_cycles(&rom, eps, t.omega, Some(rho_max), &RomCycleOptions::default())
            .num_err()?;
        let corr = nonauto_correction(&cs, &exp, t.omega).num_err()?;

        let mut text = String::new();
        if cycles.is_empty() {
            let _ = writeln!(
                text,
                "no rotating-frame limit cycle at omega = {}, eps = {}; no torus predicted",
                t.omega, eps
            );
        }
        (|| -> Result<()> {
            let mut sw = create(out, "torus_section.csv")?;
            write!(sw, "cycle")?;
            for i in 0..exp.n_phys {
                write!(sw, ",x{i}")?;
            }
            writeln!(sw)?;
            let mut bw = create(out, "torus_band.csv")?;
            writeln!(bw, "cycle,coord,lo,hi")?;
            for (ci, cycle) in cycles.iter().enumerate() {
                let _ = writeln!(
                    text,
                    "cycle {}: slow period = {}, multiplier = {}, stable = {}, anchor = {} {:+}i",
                    ci, cycle.period, cycle.multiplier, cycle.stable, cycle.anchor.re, cycle.anchor.im
                );
                for row in torus_section_curve(&exp, &corr.x0, cycle) {
                    write!(sw, "{ci}")?;
                    for v in row.iter().take(exp.n_phys) {
                        write!(sw, ",{v}")?;
                    }
                    writeln!(sw)?;
                }
                for coord in 0..exp.n_phys {
                    let (lo, hi) = torus_amplitude_band(&exp, &corr.x0, cycle, coord, t.n_phase);
                    writeln!(bw, "{ci},{coord},{lo},{hi}")?;
                }
            }
            Ok(())
        })()
        .num_err()?;
        write_text(out, "torus_cycles.txt", &text).num_err()?;
        let _ = writeln!(
            report,
            "torus (omega = {}, eps = {}): {} rotating-frame cycle(s)",
            t.omega,
            eps,
            cycles.len()
        );
        torus_cycles = cycles;
        torus_x0 = Some(corr.x0);
    }

    // ---- cross-validation against reference simulations ---------------------
    if validate {
        if let Some(cycle) = &predicted_cycle {
            validate_limit_cycle(cfg, cycle, &mut agreements).num_err()?;
        }
        if let (Some(frc), Some(f)) = (&frc_result, p.frc.as_ref()) {
            let eps = f.epsilon.unwrap_or(cfg.problem.epsilon());
            validate_frc(cfg, &cs, &exp, frc, eps, &mut agreements).num_err()?;
        }
        if let (Some(x0), Some(t), [cycle, ..]) =
            (&torus_x0, p.torus.as_ref(), torus_cycles.as_slice())
        {
            let eps = t.epsilon.unwrap_or(cfg.problem.epsilon());
            validate_torus(cfg, &exp, x0, cycle, t.omega, eps, t.n_phase, &mut agreements)
                .num_err()?;
        }
        let mut w = create(out, "agreement.csv").num_err()?;
        (|| -> Result<()> {
            writeln!(w, "task,quantity,omega,predicted,simulated,rel_diff")?;
            for r in &agreements {
                let denom = r.predicted.abs().max(f64::MIN_POSITIVE);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.task,
                    r.quantity,
                    r.omega,
                    r.predicted,
                    r.simulated,
                    (r.simulated - r.predicted).abs() / denom
                )?;
            }
            Ok(())
        })()
        .num_err()?;
        let _ = writeln!(report, "validation: {} agreement rows", agreements.len());
    }

    write_text(out, "predict_report.txt", &report).num_err()?;
    println!("predict: tasks done -> {}", out.display());
    Ok(())
}

/// Wrap a predicted periodic orbit into an initial history for the delay
/// integrator (periodic extension, linear interpolation between samples).
fn history_from_cycle(t: &[f64], x: &[Vec<f64>], period: f64) -> InitialHistory {
    let (tp, xp) = (t.to_vec(), x.to_vec());
    let n_phys = xp[0].len();
    InitialHistory::from_fn(move |s| {
        let tt = s.rem_euclid(period);
        let dt = period / tp.len() as f64;
        let k = ((tt / dt).floor() as usize).min(tp.len() - 1);
        let k1 = (k + 1) % tp.len();
        let w = ((tt - tp[k]) / dt).clamp(0.0, 1.0);
        Array1::from_iter((0..n_phys).map(|i| (1.0 - w) * xp[k][i] + w * xp[k1][i]))
    })
}

fn validate_limit_cycle(
    cfg: &RunConfig,
    cycle: &PredictedCycle,
    rows: &mut Vec<AgreementRow>,
) -> Result<()> {
    let sys = cfg.problem.build()?;
    let hist = history_from_cycle(&cycle.t, &cycle.x, cycle.period);
    let horizon = (60.0 * cycle.period).max(300.0);
    let traj = integrate_dde(&sys, &hist, horizon, &DdeOptions::default())?;
    match classify_steady_state(&traj, 0).state {
        SteadyState::Periodic { amplitude, period } => {
            rows.push(AgreementRow {
                task: "limit_cycle",
                quantity: "amplitude_x0".into(),
                omega: cycle.omega,
                predicted: cycle.amplitude[0],
                simulated: amplitude,
            });
            rows.push(AgreementRow {
                task: "limit_cycle",
                quantity: "period".into(),
                omega: cycle.omega,
                predicted: cycle.period,
                simulated: period,
            });
        }
        other => eprintln!(
            "warning: reference simulation of the limit cycle settled on {other:?}, skipping"
        ),
    }
    Ok(())
}

/// Physical steady-state amplitude of coordinate `coord` predicted for one
/// forced-response point.
fn frc_physical_amplitude(
    exp: &SsmExpansion,
    x0: &Array1<Complex64>,
    rho: f64,
    psi: f64,
    eps: f64,
    coord: usize,
    n_phase: usize,
) -> f64 {
    let mut amp = 0.0_f64;
    for k in 0..n_phase {
        let phase = std::f64::consts::TAU * k as f64 / n_phase as f64;
        let p = Complex64::from_polar(rho, psi + phase);
        let x = exp.lift_forced(p, x0, eps, phase);
        amp = amp.max(x[coord].abs());
    }
    amp
}

fn validate_frc(
    cfg: &RunConfig,
    cs: &ChainSystem,
    exp: &SsmExpansion,
    frc: &Frc,
    eps: f64,
    rows: &mut Vec<AgreementRow>,
) -> Result<()> {
    // Up to 5 stable points spread across the stable part of the branches.
    let mut stable: Vec<_> = frc
        .branches
        .iter()
        .flat_map(|b| b.points.iter())
        .filter(|p| p.stable)
        .collect();
    stable.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    if stable.is_empty() {
        return Ok(());
    }
    let picks: Vec<usize> =
        (0..5).map(|i| (i * (stable.len() - 1)) / 4).collect();
    let mut seen = std::collections::BTreeSet::new();
    for idx in picks {
        if !seen.insert(idx) {
            continue;
        }
        let pt = stable[idx];
        let corr = nonauto_correction(cs, exp, pt.omega)?;
        let predicted = frc_physical_amplitude(exp, &corr.x0, pt.rho, pt.psi, eps, 0, 256);

        let sys = cfg.problem.build_with(Some(eps), Some(pt.omega))?;
        let mut hist0 = vec![0.0; sys.n];
        hist0[0] = 0.05;
        let hist = InitialHistory::constant(Array1::from_vec(hist0));
        let traj = integrate_dde(&sys, &hist, 2500.0, &DdeOptions::default())?;
        match classify_steady_state(&traj, 0).state {
            SteadyState::Periodic { amplitude, .. } => rows.push(AgreementRow {
                task: "frc",
                quantity: "amplitude_x0".into(),
                omega: pt.omega,
                predicted,
                simulated: amplitude,
            }),
            other => eprintln!(
                "warning: forced simulation at omega = {} settled on {other:?}, skipping",
                pt.omega
            ),
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn validate_torus(
    cfg: &RunConfig,
    exp: &SsmExpansion,
    x0: &Array1<Complex64>,
    cycle: &RomCycle,
    omega: f64,
    eps: f64,
    n_phase: usize,
    rows: &mut Vec<AgreementRow>,
) -> Result<()> {
    let (lo, hi) = torus_amplitude_band(exp, x0, cycle, 0, n_phase);
    let sys = cfg.problem.build_with(Some(eps), Some(omega))?;
    let mut hist0 = vec![0.0; sys.n];
    hist0[0] = 0.05;
    let hist = InitialHistory::constant(Array1::from_vec(hist0));
    let traj = integrate_dde(&sys, &hist, 3000.0, &DdeOptions::default())?;
    match classify_steady_state(&traj, 0).state {
        SteadyState::QuasiPeriodic { band, .. } => {
            rows.push(AgreementRow {
                task: "torus",
                quantity: "band_lo_x0".into(),
                omega,
                predicted: lo,
                simulated: band.0,
            });
            rows.push(AgreementRow {
                task: "torus",
                quantity: "band_hi_x0".into(),
                omega,
                predicted: hi,
                simulated: band.1,
            });
        }
        other => eprintln!(
            "warning: simulation at the torus point settled on {other:?}, skipping"
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn write_trajectory_strided(
    out: &Path,
    traj: &Trajectory,
    coords: &[usize],
    stride: usize,
) -> Result<()> {
    let mut w = create(out, "trajectory.csv")?;
    write!(w, "t")?;
    for c in coords {
        write!(w, ",x{c}")?;
    }
    writeln!(w)?;
    let mut k = 0;
    while k < traj.len() {
        write!(w, "{}", traj.t[k])?;
        for &c in coords {
            write!(w, ",{}", traj.x[k][c])?;
        }
        writeln!(w)?;
        k += stride;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SteadyStateOut<'a> {
    state: &'a SteadyState,
    window_start: f64,
    n_peaks: usize,
}

fn write_classification(out: &Path, report: &SteadyStateReport) -> Result<()> {
    let doc = SteadyStateOut {
        state: &report.state,
        window_start: report.window_start,
        n_peaks: report.peaks.len(),
    };
    serde_json::to_writer_pretty(create(out, "steady_state.json")?, &doc)?;
    let mut w = create(out, "peaks.csv")?;
    writeln!(w, "t,value")?;
    for (t, v) in &report.peaks {
        writeln!(w, "{t},{v}")?;
    }
    Ok(())
}

fn write_poincare(out: &Path, traj: &Trajectory, omega: f64, coords: &[usize]) -> Result<()> {
    let pts = poincare_section(traj, omega, STEADY_DISCARD_FRAC);
    let mut w = create(out, "poincare.csv")?;
    write!(w, "t")?;
    for c in coords {
        write!(w, ",x{c}")?;
    }
    writeln!(w)?;
    for (t, x) in &pts {
        write!(w, "{t}")?;
        for &c in coords {
            write!(w, ",{}", x[c])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, validate: bool) -> Result<(), CliError> {
    let s = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [simulate] block"))
        .config_err()?;
    let sys = cfg.problem.build().config_err()?;
    if s.history.len() != sys.n {
        return Err(anyhow!(
            "simulate.history has length {}, but the problem has {} states",
            s.history.len(),
            sys.n
        ))
        .config_err();
    }
    if s.poincare && (sys.forcing.is_none() || sys.epsilon <= 0.0) {
        return Err(anyhow!("simulate.poincare needs a forced problem (epsilon > 0)"))
            .config_err();
    }
    let hist = InitialHistory::constant(Array1::from_vec(s.history.clone()));

    let mut report = String::new();
    let (traj, coords) = match s.method {
        SimulateMethod::Dde => {
            let opts = DdeOptions { steps_per_delay: s.steps_per_delay, blowup: 1e8 };
            let traj = integrate_dde(&sys, &hist, s.t_end, &opts).num_err()?;
            let coords = s.coords.clone().unwrap_or_else(|| (0..sys.n).collect());
            if coords.iter().any(|&c| c >= sys.n) {
                return Err(anyhow!("simulate.coords out of range for {} states", sys.n))
                    .config_err();
            }
            let _ = writeln!(
                report,
                "method of steps: {} nodes over [0, {}], h = {}",
                traj.len(),
                s.t_end,
                sys.tau_d / s.steps_per_delay as f64
            );
            (traj, coords)
        }
        SimulateMethod::Chain => {
            let cs = build_chain(&sys, cfg.discretization.n).config_err()?;
            let z0 = cs.state_from_history(&hist);
            let opts = SdirkOptions { rtol: s.rtol, atol: s.atol, ..Default::default() };
            let traj = integrate_chain(&cs, z0, s.t_end, &opts).num_err()?;
            let coords = s.coords.clone().unwrap_or_else(|| (0..sys.n).collect());
            if coords.iter().any(|&c| c >= cs.dim) {
                return Err(anyhow!("simulate.coords out of range for chain dimension {}", cs.dim))
                    .config_err();
            }
            let _ = writeln!(
                report,
                "implicit chain integration: {} accepted steps over [0, {}], dim = {}",
                traj.len() - 1,
                s.t_end,
                cs.dim
            );
            (traj, coords)
        }
    };

    write_trajectory_strided(out, &traj, &coords, s.stride).num_err()?;

    if s.classify {
        let max_coord = traj.dim();
        if s.classify_coord >= max_coord {
            return Err(anyhow!("simulate.classify_coord out of range")).config_err();
        }
        let cls = classify_steady_state(&traj, s.classify_coord);
        write_classification(out, &cls).num_err()?;
        let _ = writeln!(report, "steady state (coordinate {}): {:?}", s.classify_coord, cls.state);
    }

    if s.poincare {
        write_poincare(out, &traj, sys.omega, &coords).num_err()?;
        let _ = writeln!(report, "stroboscopic section at omega = {}", sys.omega);
    }

    if validate {
        // Cross-check against the other reference formulation.
        let other = match s.method {
            SimulateMethod::Dde => {
                let cs = build_chain(&sys, cfg.discretization.n).num_err()?;
                let z0 = cs.state_from_history(&hist);
                integrate_chain(&cs, z0, s.t_end, &SdirkOptions::default()).num_err()?
            }
            SimulateMethod::Chain => {
                integrate_dde(&sys, &hist, s.t_end, &DdeOptions::default()).num_err()?
            }
        };
        let mut max_diff = 0.0_f64;
        let mut scale = 0.0_f64;
        for k in 0..=200 {
            let t = s.t_end * k as f64 / 200.0;
            let a = traj.sample(t);
            let b = other.sample(t);
            max_diff = max_diff.max((a[0] - b[0]).abs());
            scale = scale.max(a[0].abs());
        }
        let _ = writeln!(
            report,
            "cross-solver check (coordinate 0): max deviation = {:e}, relative = {:e}",
            max_diff,
            max_diff / scale.max(f64::MIN_POSITIVE)
        );
    }

    write_text(out, "simulate_report.txt", &report).num_err()?;
    println!("simulate: {} nodes -> {}", traj.len(), out.join("trajectory.csv").display());
    Ok(())
}
