//! Scenario configuration: a TOML file whose sections mirror the solver modules, presets,
//! field-level validation and conversion into a [`Scenario`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beam::BeamParams;
use crate::error::{FsiError, Result};
use crate::fluid::{FluidGrid, Forcing, StreamSpace};
use crate::geometry::BeamCurve;
use crate::stepper::{initial_stream, InitialVelocity, Physics, Scenario, SchemeParams};

/// Initial curve presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurvePreset {
    Rest,
    /// η = (x, A sin²(πx/ℓ)).
    Sine { amplitude: f64 },
    /// η = (x + p₁, p₂) with sin²-windowed sine modes.
    Modal {
        #[serde(default)]
        a1: Vec<f64>,
        #[serde(default)]
        a2: Vec<f64>,
    },
    /// Curve snapshot JSON (`ell`, `m`, `dofs`), relative to the config file.
    Custom { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub ell: f64,
    /// Beam elements M.
    pub m: usize,
    pub initial_curve: CurvePreset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSection {
    /// Fluid cells per side n.
    pub n: usize,
    pub rho_plus: f64,
    pub rho_minus: f64,
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub forcing: Forcing,
    pub initial_velocity: InitialVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperSection {
    pub h: f64,
    pub substeps: usize,
    pub alpha0: f64,
    /// Defaults to 0.
    #[serde(default)]
    pub eps0: f64,
    pub t_final: f64,
    /// Wall distance that counts as collision; defaults to two fluid cells.
    #[serde(default)]
    pub collision_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureSection {
    /// Differential pressure every this many substeps (0 = off); defaults to once per window.
    #[serde(default)]
    pub every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliSection {
    /// Output directory; defaults to `out` next to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// SVG frame every this many windows (0 = none); defaults to 0.
    #[serde(default)]
    pub frames_every: usize,
    /// Seed for randomized probes; defaults to 0.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub geometry: GeometrySection,
    pub beam_energy: BeamParams,
    pub fluid_field: FluidSection,
    pub mms_stepper: StepperSection,
    #[serde(default = "default_pressure")]
    pub pressure_diagnostics: PressureSection,
    #[serde(default = "default_cli")]
    pub cli: CliSection,
    /// Directory of the config file, for relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_pressure() -> PressureSection {
    PressureSection { every: None }
}

fn default_cli() -> CliSection {
    CliSection { out: None, frames_every: 0, seed: 0 }
}

fn field(name: &str, msg: impl Into<String>) -> FsiError {
    FsiError::Config { field: name.into(), msg: msg.into() }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be positive and finite, got {v}")))
    }
}

/// Named presets.
pub const PRESETS: [&str; 5] = ["rest", "sine", "vortex", "swirl", "collision"];

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let span = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
            field(&format!("line {span}"), msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Built-in scenario at desk scale: ℓ = 1, n = M = 32, h = 0.02, N = 16.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig {
            geometry: GeometrySection { ell: 1.0, m: 32, initial_curve: CurvePreset::Rest },
            beam_energy: BeamParams::default(),
            fluid_field: FluidSection {
                n: 32,
                rho_plus: 1.0,
                rho_minus: 1.0,
                mu_plus: 0.1,
                mu_minus: 0.1,
                forcing: Forcing::None,
                initial_velocity: InitialVelocity::Zero,
            },
            mms_stepper: StepperSection {
                h: 0.02,
                substeps: 16,
                alpha0: 0.5,
                eps0: 0.0,
                t_final: 0.06,
                collision_tol: None,
            },
            pressure_diagnostics: default_pressure(),
            cli: default_cli(),
            base_dir: PathBuf::new(),
        };
        match name {
            "rest" => {}
            "sine" => cfg.geometry.initial_curve = CurvePreset::Sine { amplitude: 0.1 },
            "vortex" => {
                cfg.geometry.initial_curve = CurvePreset::Sine { amplitude: 0.1 };
                cfg.fluid_field.forcing = Forcing::Vortex { a: 1e5 };
                cfg.mms_stepper.t_final = 0.2;
            }
            "swirl" => {
                cfg.fluid_field.initial_velocity = InitialVelocity::Swirl { amplitude: 1.0 };
                cfg.geometry.initial_curve = CurvePreset::Sine { amplitude: 0.1 };
            }
            "collision" => {
                cfg.geometry.m = 16;
                cfg.fluid_field.n = 16;
                cfg.beam_energy.c1 = 0.01;
                cfg.beam_energy.c2 = 0.01;
                cfg.fluid_field.forcing = Forcing::Vortex { a: 3e6 };
                cfg.mms_stepper.t_final = 0.2;
            }
            _ => return Err(field("preset", format!("unknown preset `{name}`, expected one of {PRESETS:?}"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        positive("geometry.ell", g.ell)?;
        if g.m < 2 {
            return Err(field("geometry.m", format!("need at least 2 beam elements, got {}", g.m)));
        }
        let b = &self.beam_energy;
        positive("beam_energy.c1", b.c1)?;
        positive("beam_energy.c2", b.c2)?;
        positive("beam_energy.lambda0", b.lambda0)?;
        positive("beam_energy.rho_s", b.rho_s)?;
        if !(b.alpha > 1.0 && b.alpha.is_finite()) {
            return Err(field("beam_energy.alpha", format!("must exceed 1, got {}", b.alpha)));
        }
        let f = &self.fluid_field;
        if f.n < 4 {
            return Err(field("fluid_field.n", format!("need at least 4 cells, got {}", f.n)));
        }
        positive("fluid_field.rho_plus", f.rho_plus)?;
        positive("fluid_field.rho_minus", f.rho_minus)?;
        positive("fluid_field.mu_plus", f.mu_plus)?;
        positive("fluid_field.mu_minus", f.mu_minus)?;
        f.forcing.validate().map_err(|e| field("fluid_field.forcing", e.to_string()))?;
        if let InitialVelocity::Swirl { amplitude } = f.initial_velocity {
            if !amplitude.is_finite() {
                return Err(field("fluid_field.initial_velocity.amplitude", "must be finite"));
            }
        }
        let s = &self.mms_stepper;
        positive("mms_stepper.h", s.h)?;
        if s.substeps == 0 {
            return Err(field("mms_stepper.substeps", "must be at least 1"));
        }
        if !(s.alpha0 > 0.0 && s.alpha0 < 1.0) {
            return Err(field("mms_stepper.alpha0", format!("must lie in (0, 1), got {}", s.alpha0)));
        }
        if !(s.eps0 >= 0.0 && s.eps0.is_finite()) {
            return Err(field("mms_stepper.eps0", format!("must be nonnegative, got {}", s.eps0)));
        }
        if !(s.t_final >= 0.0 && s.t_final.is_finite()) {
            return Err(field("mms_stepper.t_final", format!("must be nonnegative, got {}", s.t_final)));
        }
        if let Some(c) = s.collision_tol {
            positive("mms_stepper.collision_tol", c)?;
        }
        let curve = self.initial_curve()?;
        let limit = g.ell / 3.0;
        let h2 = curve.max_abs_eta2();
        if h2 >= limit {
            return Err(field(
                "geometry.initial_curve",
                format!("max |eta_2| = {h2:.6} must stay below l/3 = {limit:.6} (extension band)"),
            ));
        }
        curve.check_feasible().map_err(|e| field("geometry.initial_curve", e.to_string()))?;
        Ok(())
    }

    pub fn initial_curve(&self) -> Result<BeamCurve> {
        let g = &self.geometry;
        let c = match &g.initial_curve {
            CurvePreset::Rest => BeamCurve::rest(g.ell, g.m),
            CurvePreset::Sine { amplitude } => {
                if !amplitude.is_finite() {
                    return Err(field("geometry.initial_curve.amplitude", "must be finite"));
                }
                BeamCurve::sine(g.ell, g.m, *amplitude)
            }
            CurvePreset::Modal { a1, a2 } => {
                if a1.iter().chain(a2).any(|v| !v.is_finite()) {
                    return Err(field("geometry.initial_curve", "modal coefficients must be finite"));
                }
                BeamCurve::modal(g.ell, g.m, a1, a2)
            }
            CurvePreset::Custom { path } => {
                let p = self.base_dir.join(path);
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| field("geometry.initial_curve.path", format!("{}: {e}", p.display())))?;
                let c: BeamCurve = serde_json::from_str(&text)
                    .map_err(|e| field("geometry.initial_curve.path", format!("{}: {e}", p.display())))?;
                if c.m != g.m || (c.ell - g.ell).abs() > 1e-12 * g.ell || c.dofs.len() != 6 * (g.m + 1) {
                    return Err(field("geometry.initial_curve.path", "curve does not match geometry.ell and geometry.m"));
                }
                c.check_clamped(1e-12).map_err(|e| field("geometry.initial_curve.path", e.to_string()))?;
                c
            }
        };
        Ok(c)
    }

    pub fn scheme(&self) -> SchemeParams {
        let s = &self.mms_stepper;
        SchemeParams { h: s.h, substeps: s.substeps, alpha0: s.alpha0, eps0: s.eps0, t_final: s.t_final }
    }

    pub fn physics(&self) -> Physics {
        let f = &self.fluid_field;
        Physics {
            beam: self.beam_energy,
            rho_plus: f.rho_plus,
            rho_minus: f.rho_minus,
            mu_plus: f.mu_plus,
            mu_minus: f.mu_minus,
            forcing: f.forcing.clone(),
        }
    }

    /// Substeps between pressure evaluations (0 = off).
    pub fn pressure_every(&self) -> usize {
        self.pressure_diagnostics.every.unwrap_or(self.mms_stepper.substeps)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(self.cli.out.clone().unwrap_or_else(|| PathBuf::from("out")))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.validate()?;
        let g = &self.geometry;
        let n = self.fluid_field.n;
        let grid = FluidGrid::new(g.ell, n)?;
        let space = StreamSpace::new(&grid);
        let psi0 = initial_stream(&space, &self.fluid_field.initial_velocity)?;
        Ok(Scenario {
            ell: g.ell,
            n,
            m: g.m,
            phys: self.physics(),
            scheme: self.scheme(),
            eta0: self.initial_curve()?,
            psi0,
            collision_tol: self.mms_stepper.collision_tol.unwrap_or(2.0 * g.ell / n as f64),
        })
    }

    /// Canonical JSON used for hashing; independent of formatting and key order in the file.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ScenarioConfig::preset(name).unwrap();
            let back = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut text = ScenarioConfig::preset("rest").unwrap().to_toml();
        text = text.replace("[beam_energy]\n", "[beam_energy]\nstiffness = 3.0\n");
        let e = ScenarioConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("stiffness"), "{e}");
    }

    #[test]
    fn tall_sine_is_rejected_at_validation() {
        let mut cfg = ScenarioConfig::preset("rest").unwrap();
        cfg.geometry.initial_curve = CurvePreset::Sine { amplitude: 0.45 };
        match cfg.validate() {
            Err(FsiError::Config { field, .. }) => assert_eq!(field, "geometry.initial_curve"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_name_their_field() {
        let mut cfg = ScenarioConfig::preset("rest").unwrap();
        cfg.fluid_field.mu_minus = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("fluid_field.mu_minus"));
        let mut cfg = ScenarioConfig::preset("rest").unwrap();
        cfg.mms_stepper.alpha0 = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("mms_stepper.alpha0"));
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = ScenarioConfig::preset("rest").unwrap();
        let mut text = cfg.to_toml();
        let cut = text.find("[pressure_diagnostics]").unwrap();
        text.truncate(cut);
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back.pressure_every(), back.mms_stepper.substeps);
        assert_eq!(back.cli.frames_every, 0);
        let scn = back.scenario().unwrap();
        assert!((scn.collision_tol - 2.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn hash_input_ignores_formatting() {
        let cfg = ScenarioConfig::preset("vortex").unwrap();
        let text = cfg.to_toml();
        let spaced = text.replace(" = ", "   =   ");
        let a = ScenarioConfig::from_toml(&text).unwrap().canonical_json();
        let b = ScenarioConfig::from_toml(&spaced).unwrap().canonical_json();
        assert_eq!(a, b);
    }

    #[test]
    fn custom_curve_loads_relative_to_config() {
        let dir = std::env::temp_dir().join(format!("fsi-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let curve = BeamCurve::sine(1.0, 32, 0.05);
        std::fs::write(dir.join("c.json"), serde_json::to_string(&curve).unwrap()).unwrap();
        let mut cfg = ScenarioConfig::preset("rest").unwrap();
        cfg.geometry.initial_curve = CurvePreset::Custom { path: "c.json".into() };
        std::fs::write(dir.join("s.toml"), cfg.to_toml()).unwrap();
        let loaded = ScenarioConfig::load(&dir.join("s.toml")).unwrap();
        assert_eq!(loaded.initial_curve().unwrap(), curve);
        std::fs::remove_dir_all(&dir).ok();
    }
}
