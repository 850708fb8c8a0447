//! Run artifacts: ledger and pressure CSV, versioned curve and field snapshots, SVG frames,
//! the run manifest and the final checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::error::{FsiError, Result};
use crate::fluid::VecField;
use crate::geometry::BeamCurve;
use crate::pressure::pressure_observer;
use crate::stepper::{ExitStatus, LedgerRow, Simulation, WindowSummary};

/// Version of the JSON snapshot and manifest layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Curve snapshot; also accepted as a custom initial curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSnapshot {
    pub schema_version: u32,
    pub window: usize,
    pub t: f64,
    pub ell: f64,
    pub m: usize,
    pub dofs: Vec<f64>,
}

impl CurveSnapshot {
    pub fn curve(&self) -> BeamCurve {
        BeamCurve { ell: self.ell, m: self.m, dofs: self.dofs.clone() }
    }
}

/// Velocity snapshot: free stream dofs and samples on an (n+1)×(n+1) lattice, x-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub schema_version: u32,
    pub window: usize,
    pub t: f64,
    pub ell: f64,
    pub n: usize,
    pub psi: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl FieldSnapshot {
    pub fn of(sim: &Simulation) -> Self {
        let grid = &sim.model.grid;
        let u: VecField = sim.model.space.curl(&sim.state.psi);
        let n = grid.n;
        let (mut u1, mut u2) = (Vec::with_capacity((n + 1) * (n + 1)), Vec::with_capacity((n + 1) * (n + 1)));
        for j in 0..=n {
            for i in 0..=n {
                let v = u.value([grid.h * i as f64, grid.ylo() + grid.h * j as f64]);
                u1.push(v[0]);
                u2.push(v[1]);
            }
        }
        FieldSnapshot {
            schema_version: SCHEMA_VERSION,
            window: sim.state.window,
            t: sim.state.t,
            ell: grid.ell,
            n,
            psi: sim.state.psi.clone(),
            u1,
            u2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub code_version: String,
    pub exit: ExitStatus,
    pub windows: Vec<WindowSummary>,
    pub files: Vec<String>,
}

/// SHA-256 of the canonical config JSON, hex encoded.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    Sha256::digest(cfg.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_ledger_csv(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.serialize(LedgerRow::default()).map_err(csv_err)?;
        drop(w);
        // keep the header only
        let text = std::fs::read_to_string(path)?;
        std::fs::write(path, text.lines().next().map(|l| format!("{l}\n")).unwrap_or_default())?;
        return Ok(());
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger_csv(path: &Path) -> Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

/// (t, λ₀, P) for every row with a pressure value.
pub fn write_pressure_csv(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "lambda0", "pressure"]).map_err(csv_err)?;
    for r in rows.iter().filter(|r| r.pressure.is_finite()) {
        w.write_record([r.t.to_string(), r.lambda0.to_string(), r.pressure.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> FsiError {
    FsiError::Io(std::io::Error::other(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn curve_path(out: &Path, w: usize) -> PathBuf {
    out.join("curves").join(format!("curve_{w:05}.json"))
}

fn field_path(out: &Path, w: usize) -> PathBuf {
    out.join("fields").join(format!("field_{w:05}.json"))
}

fn frame_path(out: &Path, w: usize) -> PathBuf {
    out.join("frames").join(format!("frame_{w:05}.svg"))
}

/// Static frame: curve and velocity quiver over Ω, with sparklines of the elastic and fluid
/// kinetic energy columns up to the snapshot time.
pub fn render_frame(curve: &CurveSnapshot, field: &FieldSnapshot, ledger: &[LedgerRow]) -> String {
    let (w, h_box, spark) = (480.0, 480.0, 90.0);
    let ell = curve.ell;
    let sx = |x: f64| 20.0 + (w - 40.0) * x / ell;
    let sy = |y: f64| 20.0 + (h_box - 40.0) * (0.5 - y / ell);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" viewBox="0 0 {w} {}">"#,
        h_box + spark + 20.0,
        h_box + spark + 20.0
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{}" fill="#ffffff"/>"##, h_box + spark + 20.0);
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#333333"/>"##,
        sx(0.0),
        sy(0.5 * ell),
        sx(ell) - sx(0.0),
        sy(-0.5 * ell) - sy(0.5 * ell)
    );
    let n = field.n;
    let stride = n.div_ceil(16).max(1);
    let vmax = field.u1.iter().zip(&field.u2).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    if vmax > 0.0 {
        let scale = 0.9 * stride as f64 * ell / n as f64 / vmax;
        for j in (0..=n).step_by(stride) {
            for i in (0..=n).step_by(stride) {
                let k = j * (n + 1) + i;
                let (x, y) = (ell * i as f64 / n as f64, -0.5 * ell + ell * j as f64 / n as f64);
                let (x2, y2) = (x + scale * field.u1[k], y + scale * field.u2[k]);
                let _ = writeln!(
                    s,
                    r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#4a7ab5" stroke-width="1"/>"##,
                    sx(x),
                    sy(y),
                    sx(x2),
                    sy(y2)
                );
            }
        }
    }
    let c = curve.curve();
    let pts: Vec<String> = (0..=200)
        .map(|k| {
            let z = c.eval_unchecked(ell * k as f64 / 200.0, 0);
            format!("{:.2},{:.2}", sx(z[0]), sy(z[1]))
        })
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##, pts.join(" "));
    let upto: Vec<&LedgerRow> = ledger.iter().filter(|r| r.t <= curve.t + 1e-12).collect();
    let top = h_box + 10.0;
    for (col, color) in [(0usize, "#2c3e50"), (1, "#27ae60")] {
        let vals: Vec<f64> = upto.iter().map(|r| if col == 0 { r.e_total } else { r.fluid_kinetic }).collect();
        if vals.len() < 2 {
            continue;
        }
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let t1 = upto.last().map(|r| r.t).unwrap_or(1.0).max(1e-300);
        let p: Vec<String> = upto
            .iter()
            .zip(&vals)
            .map(|(r, v)| format!("{:.2},{:.2}", 20.0 + (w - 40.0) * r.t / t1, top + spark - spark * (v - lo) / span))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#, p.join(" "));
    }
    let _ = writeln!(
        s,
        r##"<text x="20" y="{:.0}" font-family="monospace" font-size="11" fill="#333333">t = {:.4}  window {}</text>"##,
        h_box + spark + 15.0,
        curve.t,
        curve.window
    );
    s.push_str("</svg>\n");
    s
}

/// Runs a configured scenario and writes every artifact into `out`.
pub fn run_to_dir(cfg: &ScenarioConfig, out: &Path, frames_every: usize) -> Result<RunManifest> {
    let scn = cfg.scenario()?;
    for sub in ["curves", "fields", "frames"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut sim = Simulation::new(&scn)?;
    let mut obs = pressure_observer(cfg.pressure_every());
    let mut files = Vec::new();
    let snapshot = |sim: &Simulation, files: &mut Vec<String>| -> Result<()> {
        let w = sim.state.window;
        let cs = CurveSnapshot {
            schema_version: SCHEMA_VERSION,
            window: w,
            t: sim.state.t,
            ell: sim.state.eta.ell,
            m: sim.state.eta.m,
            dofs: sim.state.eta.dofs.clone(),
        };
        let fs = FieldSnapshot::of(sim);
        write_json(&curve_path(out, w), &cs)?;
        write_json(&field_path(out, w), &fs)?;
        files.push(rel(out, &curve_path(out, w)));
        files.push(rel(out, &field_path(out, w)));
        if frames_every > 0 && w.is_multiple_of(frames_every) {
            std::fs::write(frame_path(out, w), render_frame(&cs, &fs, &sim.ledger))?;
            files.push(rel(out, &frame_path(out, w)));
        }
        Ok(())
    };
    snapshot(&sim, &mut files)?;
    while !sim.done() {
        match sim.run_window_with(&mut obs) {
            Ok(_) if sim.status.is_none() => snapshot(&sim, &mut files)?,
            Ok(_) => {}
            Err(_) => sim.status = Some(ExitStatus::SolverAbort),
        }
    }
    let exit = sim.status.unwrap_or(ExitStatus::Completed);
    write_ledger_csv(&out.join("ledger.csv"), &sim.ledger)?;
    write_pressure_csv(&out.join("pressure.csv"), &sim.ledger)?;
    std::fs::write(out.join("checkpoint.json"), sim.checkpoint_json()?)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    files.extend(["ledger.csv", "pressure.csv", "checkpoint.json", "config.toml"].map(String::from));
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(cfg),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        exit,
        windows: sim.windows.clone(),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Renders SVG frames for every curve snapshot in a run directory; returns the frame count.
pub fn render_dir(out: &Path, every: usize) -> Result<usize> {
    let ledger = read_ledger_csv(&out.join("ledger.csv")).unwrap_or_default();
    std::fs::create_dir_all(out.join("frames"))?;
    let mut windows: Vec<usize> = std::fs::read_dir(out.join("curves"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("curve_")?.strip_suffix(".json")?.parse().ok()
        })
        .collect();
    windows.sort_unstable();
    let every = every.max(1);
    let mut count = 0;
    for w in windows.into_iter().filter(|w| w % every == 0) {
        let cs: CurveSnapshot = read_json(&curve_path(out, w))?;
        let fs: FieldSnapshot = read_json(&field_path(out, w))?;
        if cs.schema_version != SCHEMA_VERSION || fs.schema_version != SCHEMA_VERSION {
            return Err(FsiError::InvalidParam(format!("snapshot {w} has an unsupported schema version")));
        }
        std::fs::write(frame_path(out, w), render_frame(&cs, &fs, &ledger))?;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("fsi-out-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    fn small(name: &str) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset(name).unwrap();
        cfg.fluid_field.n = 8;
        cfg.geometry.m = 8;
        cfg.mms_stepper.substeps = 2;
        cfg.mms_stepper.t_final = 0.04;
        cfg.pressure_diagnostics.every = Some(0);
        cfg
    }

    #[test]
    fn ledger_round_trips_through_csv() {
        let d = tmp("csv");
        std::fs::create_dir_all(&d).unwrap();
        let mut rows = vec![LedgerRow::default(); 2];
        rows[1].t = 0.1 + 0.2;
        rows[1].margin = -1.25e-17;
        rows[0].lambda0 = f64::NAN;
        write_ledger_csv(&d.join("l.csv"), &rows).unwrap();
        let back = read_ledger_csv(&d.join("l.csv")).unwrap();
        assert_eq!(back[1], rows[1]);
        assert!(back[0].lambda0.is_nan());
        write_ledger_csv(&d.join("e.csv"), &[]).unwrap();
        assert!(read_ledger_csv(&d.join("e.csv")).unwrap().is_empty());
        std::fs::remove_dir_all(&d).ok();
    }

    #[test]
    fn rest_run_writes_stationary_artifacts() {
        let d = tmp("rest");
        let cfg = small("rest");
        let man = run_to_dir(&cfg, &d, 1).unwrap();
        assert_eq!(man.exit, ExitStatus::Completed);
        assert_eq!(man.windows.len(), 2);
        assert_eq!(man.config_hash, config_hash(&cfg));
        let rows = read_ledger_csv(&d.join("ledger.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.fluid_kinetic == 0.0 && r.margin.abs() < 1e-12));
        for f in &man.files {
            assert!(d.join(f).exists(), "{f}");
        }
        let svg = std::fs::read_to_string(d.join("frames/frame_00001.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        let cs: CurveSnapshot = read_json(&d.join("curves/curve_00002.json")).unwrap();
        assert_eq!(cs.curve(), BeamCurve::rest(1.0, 8));
        std::fs::remove_dir_all(d.join("frames")).unwrap();
        assert_eq!(render_dir(&d, 1).unwrap(), 3);
        std::fs::remove_dir_all(&d).ok();
    }

    #[test]
    fn identical_configs_give_identical_ledgers() {
        let (a, b) = (tmp("det-a"), tmp("det-b"));
        let mut cfg = small("swirl");
        cfg.pressure_diagnostics.every = Some(2);
        cfg.fluid_field.n = 24;
        run_to_dir(&cfg, &a, 0).unwrap();
        run_to_dir(&cfg, &b, 0).unwrap();
        for f in ["ledger.csv", "pressure.csv", "manifest.json", "checkpoint.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let p = std::fs::read_to_string(a.join("pressure.csv")).unwrap();
        assert_eq!(p.lines().count(), 3);
        std::fs::remove_dir_all(&a).ok();
        std::fs::remove_dir_all(&b).ok();
    }
}
