//! Experiment configuration in TOML.
//!
//! Parsing never stops at the first problem: every unknown key, missing key and
//! inconsistency is collected and reported together.
//!
//! ```toml
//! kind = "sweep"
//! seed = 2024
//!
//! [model]
//! drift = "heat"
//! modes = 16
//!
//! [observation]
//! kind = "bounded-tanh"
//! saturation = 1.0
//! functionals = [1, 2]
//!
//! [numerics]
//! dt = 0.002
//! horizon = 1.0
//!
//! [ensemble]
//! sizes = [16, 32, 64, 128, 256]
//! replicates = 20
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::coupling::{CouplingSpec, MeanFieldReference, DEFAULT_ORACLE_SIZE};
use crate::enkbf::GainPolicy;
use crate::error::{Error, Result};
use crate::fpf1d::{ScalarDrift, ScalarModel, ScalarObservation};
use crate::noise::QSpectrum;
use crate::observation::{ObservationKind, ObservationModel};
use crate::signal::IntegratorConfig;
use crate::spectral::{make_basis, DiffusionModel, DriftModel, ModelSpec, SpectralField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Signal,
    Enkbf,
    KalmanBucy,
    Coupling,
    Sweep,
    ExpMoment,
    Fpf,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Signal,
        ExperimentKind::Enkbf,
        ExperimentKind::KalmanBucy,
        ExperimentKind::Coupling,
        ExperimentKind::Sweep,
        ExperimentKind::ExpMoment,
        ExperimentKind::Fpf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Signal => "signal",
            ExperimentKind::Enkbf => "enkbf",
            ExperimentKind::KalmanBucy => "kalman-bucy",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::ExpMoment => "expmoment",
            ExperimentKind::Fpf => "fpf",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn uses_ensemble(self) -> bool {
        matches!(self, ExperimentKind::Enkbf | ExperimentKind::Coupling | ExperimentKind::Sweep | ExperimentKind::ExpMoment)
    }

    fn needs_coupling(self) -> bool {
        matches!(self, ExperimentKind::Coupling | ExperimentKind::Sweep | ExperimentKind::ExpMoment)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftConfig {
    Heat,
    AllenCahn { a: f64, b: f64, c: f64 },
    /// Row-major operator on the mode coefficients.
    Linear(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub drift: DriftConfig,
    pub modes: usize,
    pub alpha: f64,
    pub tau_q: f64,
    /// Overrides the drift's default one-sided Lipschitz constant.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationConfig {
    pub kind: ObservationKind,
    /// One-based mode indices; functional `j` is the basis vector `e_{k_j}`.
    pub functionals: Vec<usize>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericsConfig {
    pub dt: f64,
    pub horizon: f64,
    pub taming: bool,
}

/// Initial law `N(mean, variance I)`; a zero variance gives a deterministic start.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub reference: MeanFieldReference,
    pub gain: GainPolicy,
    /// Moment power `p` of the sweep.
    pub moment_power: f64,
    /// Order `q` of the exponential moment.
    pub exp_order: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpfConfig {
    pub model: ScalarModel,
    pub particles: usize,
    pub bootstrap_particles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output: Option<String>,
    pub model: Option<ModelConfig>,
    pub observation: Option<ObservationConfig>,
    pub numerics: NumericsConfig,
    pub initial: InitialConfig,
    pub ensemble: Option<EnsembleConfig>,
    pub fpf: Option<FpfConfig>,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.message().to_string()))?;
    let mut errors = Vec::new();
    let config = Reader { errors: &mut errors }.experiment(&table);
    match config {
        Some(config) if errors.is_empty() => {
            config.validate()?;
            Ok(config)
        }
        _ => Err(Error::Config(errors)),
    }
}

struct Reader<'e> {
    errors: &'e mut Vec<String>,
}

impl Reader<'_> {
    fn fail(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn unknown_keys(&mut self, table: &Table, section: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.fail(format!("unknown key `{}`", qualified(section, key)));
            }
        }
    }

    fn section<'t>(&mut self, table: &'t Table, name: &str) -> Option<&'t Table> {
        match table.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.fail(format!("`{name}` must be a table"));
                None
            }
        }
    }

    fn required<'t>(&mut self, table: &'t Table, section: &str, key: &str) -> Option<&'t Value> {
        let value = table.get(key);
        if value.is_none() {
            self.fail(format!("missing required key `{}`", qualified(section, key)));
        }
        value
    }

    fn float(&mut self, value: &Value, section: &str, key: &str) -> Option<f64> {
        match value {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.fail(format!("`{}` must be a number", qualified(section, key)));
                None
            }
        }
    }

    fn float_or(&mut self, table: &Table, section: &str, key: &str, default: f64) -> Option<f64> {
        match table.get(key) {
            None => Some(default),
            Some(v) => self.float(v, section, key),
        }
    }

    fn required_float(&mut self, table: &Table, section: &str, key: &str) -> Option<f64> {
        let v = self.required(table, section, key)?;
        self.float(v, section, key)
    }

    fn count(&mut self, value: &Value, section: &str, key: &str) -> Option<usize> {
        match value {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            _ => {
                self.fail(format!("`{}` must be a non-negative integer", qualified(section, key)));
                None
            }
        }
    }

    fn count_or(&mut self, table: &Table, section: &str, key: &str, default: usize) -> Option<usize> {
        match table.get(key) {
            None => Some(default),
            Some(v) => self.count(v, section, key),
        }
    }

    fn string<'t>(&mut self, value: &'t Value, section: &str, key: &str) -> Option<&'t str> {
        match value {
            Value::String(s) => Some(s),
            _ => {
                self.fail(format!("`{}` must be a string", qualified(section, key)));
                None
            }
        }
    }

    fn array<'t>(&mut self, value: &'t Value, section: &str, key: &str) -> Option<&'t [Value]> {
        match value {
            Value::Array(a) => Some(a),
            _ => {
                self.fail(format!("`{}` must be an array", qualified(section, key)));
                None
            }
        }
    }

    fn floats(&mut self, value: &Value, section: &str, key: &str) -> Option<Vec<f64>> {
        let items = self.array(value, section, key)?;
        items.iter().map(|v| self.float(v, section, key)).collect()
    }

    fn counts(&mut self, value: &Value, section: &str, key: &str) -> Option<Vec<usize>> {
        let items = self.array(value, section, key)?;
        items.iter().map(|v| self.count(v, section, key)).collect()
    }

    fn experiment(&mut self, root: &Table) -> Option<ExperimentConfig> {
        self.unknown_keys(
            root,
            "",
            &["kind", "seed", "output", "model", "observation", "numerics", "initial", "ensemble", "fpf"],
        );
        let kind = self.required(root, "", "kind").and_then(|v| self.string(v, "", "kind")).and_then(|name| {
            let kind = ExperimentKind::from_name(name);
            if kind.is_none() {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                self.fail(format!("unknown experiment kind `{name}` (expected one of {})", names.join(", ")));
            }
            kind
        });
        let seed = self.required(root, "", "seed").and_then(|v| match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::String(s) => s.parse::<u64>().ok().or_else(|| {
                self.fail(format!("`seed` string `{s}` is not a 64-bit unsigned integer"));
                None
            }),
            _ => {
                self.fail("`seed` must be a non-negative integer".into());
                None
            }
        });
        let output = match root.get("output") {
            None => Some(None),
            Some(v) => self.string(v, "", "output").map(|s| Some(s.to_string())),
        };
        let model = self.section(root, "model").map(|t| self.model(t));
        let observation = self.section(root, "observation").map(|t| self.observation(t));
        let numerics = match self.section(root, "numerics") {
            Some(t) => self.numerics(t),
            None => {
                self.fail("missing required section `[numerics]`".into());
                None
            }
        };
        let initial = match self.section(root, "initial") {
            Some(t) => self.initial(t),
            None => Some(InitialConfig::default()),
        };
        let ensemble = self.section(root, "ensemble").map(|t| self.ensemble(t));
        let fpf = self.section(root, "fpf").map(|t| self.fpf(t));
        Some(ExperimentConfig {
            kind: kind?,
            seed: seed?,
            output: output?,
            model: model.unwrap_or(None),
            observation: observation.unwrap_or(None),
            numerics: numerics?,
            initial: initial?,
            ensemble: ensemble.unwrap_or(None),
            fpf: fpf.unwrap_or(None),
        })
    }

    fn model(&mut self, t: &Table) -> Option<ModelConfig> {
        let s = "model";
        self.unknown_keys(t, s, &["drift", "modes", "alpha", "tau_q", "lambda", "a", "b", "c", "matrix", "diagonal"]);
        let modes = self.required(t, s, "modes").and_then(|v| self.count(v, s, "modes"));
        let drift = self.required(t, s, "drift").and_then(|v| self.string(v, s, "drift")).and_then(|name| match name {
            "heat" => Some(DriftConfig::Heat),
            "allen-cahn" => {
                let a = self.float_or(t, s, "a", 1.0);
                let b = self.float_or(t, s, "b", 1.0);
                let c = self.float_or(t, s, "c", 0.0);
                Some(DriftConfig::AllenCahn { a: a?, b: b?, c: c? })
            }
            "linear" => match (t.get("matrix"), t.get("diagonal")) {
                (Some(m), None) => {
                    let rows = self.array(m, s, "matrix")?;
                    let rows: Option<Vec<Vec<f64>>> = rows.iter().map(|r| self.floats(r, s, "matrix")).collect();
                    rows.map(DriftConfig::Linear)
                }
                (None, Some(d)) => self.floats(d, s, "diagonal").map(|d| {
                    DriftConfig::Linear(
                        (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect(),
                    )
                }),
                (Some(_), Some(_)) => {
                    self.fail("`model.matrix` and `model.diagonal` are mutually exclusive".into());
                    None
                }
                (None, None) => {
                    self.fail("linear drift needs `model.matrix` or `model.diagonal`".into());
                    None
                }
            },
            other => {
                self.fail(format!("unknown drift `{other}` (expected heat, allen-cahn or linear)"));
                None
            }
        });
        if let Some(name) = t.get("drift").and_then(Value::as_str) {
            let stray: &[&str] = match name {
                "heat" => &["a", "b", "c", "matrix", "diagonal"],
                "allen-cahn" => &["matrix", "diagonal"],
                _ => &["a", "b", "c"],
            };
            for key in stray.iter().filter(|k| t.contains_key(**k)) {
                self.fail(format!("`model.{key}` does not apply to drift `{name}`"));
            }
        }
        let alpha = self.float_or(t, s, "alpha", 1.0);
        let tau_q = self.float_or(t, s, "tau_q", 1.0);
        let lambda = match t.get("lambda") {
            None => Some(None),
            Some(v) => self.float(v, s, "lambda").map(Some),
        };
        Some(ModelConfig { drift: drift?, modes: modes?, alpha: alpha?, tau_q: tau_q?, lambda: lambda? })
    }

    fn observation(&mut self, t: &Table) -> Option<ObservationConfig> {
        let s = "observation";
        self.unknown_keys(t, s, &["kind", "saturation", "functionals", "gamma"]);
        let kind = self.required(t, s, "kind").and_then(|v| self.string(v, s, "kind")).and_then(|name| match name {
            "linear" => {
                if t.contains_key("saturation") {
                    self.fail("`observation.saturation` does not apply to a linear observation".into());
                }
                Some(ObservationKind::Linear)
            }
            "bounded-tanh" => self.float_or(t, s, "saturation", 1.0).map(|saturation| ObservationKind::BoundedTanh { saturation }),
            other => {
                self.fail(format!("unknown observation kind `{other}` (expected linear or bounded-tanh)"));
                None
            }
        });
        let functionals = self.required(t, s, "functionals").and_then(|v| self.counts(v, s, "functionals"));
        let gamma = self.float_or(t, s, "gamma", 1.0);
        Some(ObservationConfig { kind: kind?, functionals: functionals?, gamma: gamma? })
    }

    fn numerics(&mut self, t: &Table) -> Option<NumericsConfig> {
        let s = "numerics";
        self.unknown_keys(t, s, &["dt", "horizon", "taming"]);
        let dt = self.required_float(t, s, "dt");
        let horizon = self.required_float(t, s, "horizon");
        let taming = match t.get("taming") {
            None => Some(false),
            Some(Value::Boolean(b)) => Some(*b),
            Some(_) => {
                self.fail("`numerics.taming` must be a boolean".into());
                None
            }
        };
        Some(NumericsConfig { dt: dt?, horizon: horizon?, taming: taming? })
    }

    fn initial(&mut self, t: &Table) -> Option<InitialConfig> {
        let s = "initial";
        self.unknown_keys(t, s, &["mean", "variance"]);
        let mean = match t.get("mean") {
            None => Some(Vec::new()),
            Some(v) => self.floats(v, s, "mean"),
        };
        let variance = self.float_or(t, s, "variance", 0.0);
        Some(InitialConfig { mean: mean?, variance: variance? })
    }

    fn ensemble(&mut self, t: &Table) -> Option<EnsembleConfig> {
        let s = "ensemble";
        self.unknown_keys(
            t,
            s,
            &["size", "sizes", "replicates", "reference", "reference_size", "gain", "clip", "moment_power", "exp_order"],
        );
        let sizes = match (t.get("size"), t.get("sizes")) {
            (Some(v), None) => self.count(v, s, "size").map(|n| vec![n]),
            (None, Some(v)) => self.counts(v, s, "sizes"),
            (Some(_), Some(_)) => {
                self.fail("`ensemble.size` and `ensemble.sizes` are mutually exclusive".into());
                None
            }
            (None, None) => {
                self.fail("missing required key `ensemble.size` (or `ensemble.sizes`)".into());
                None
            }
        };
        let replicates = self.count_or(t, s, "replicates", 1);
        let reference = match t.get("reference").map(|v| self.string(v, s, "reference")) {
            None => Some(MeanFieldReference::Oracle { size: DEFAULT_ORACLE_SIZE }),
            Some(None) => None,
            Some(Some("exact")) => {
                if t.contains_key("reference_size") {
                    self.fail("`ensemble.reference_size` does not apply to the exact reference".into());
                }
                Some(MeanFieldReference::Exact)
            }
            Some(Some("oracle")) => {
                self.count_or(t, s, "reference_size", DEFAULT_ORACLE_SIZE).map(|size| MeanFieldReference::Oracle { size })
            }
            Some(Some(other)) => {
                self.fail(format!("unknown reference `{other}` (expected exact or oracle)"));
                None
            }
        };
        let gain = match t.get("gain").map(|v| self.string(v, s, "gain")) {
            None => Some(GainPolicy::Untamed),
            Some(None) => None,
            Some(Some("untamed")) => Some(GainPolicy::Untamed),
            Some(Some("disabled")) => Some(GainPolicy::Disabled),
            Some(Some("clipped")) => self.required_float(t, s, "clip").map(GainPolicy::Clipped),
            Some(Some(other)) => {
                self.fail(format!("unknown gain policy `{other}` (expected untamed, clipped or disabled)"));
                None
            }
        };
        if t.contains_key("clip") && !matches!(t.get("gain").and_then(Value::as_str), Some("clipped")) {
            self.fail("`ensemble.clip` only applies to gain = \"clipped\"".into());
        }
        let moment_power = self.float_or(t, s, "moment_power", 1.0);
        let exp_order = self.float_or(t, s, "exp_order", 1.0);
        Some(EnsembleConfig {
            sizes: sizes?,
            replicates: replicates?,
            reference: reference?,
            gain: gain?,
            moment_power: moment_power?,
            exp_order: exp_order?,
        })
    }

    fn fpf(&mut self, t: &Table) -> Option<FpfConfig> {
        let s = "fpf";
        self.unknown_keys(
            t,
            s,
            &[
                "drift",
                "a",
                "diffusion",
                "observation",
                "h",
                "c",
                "gamma",
                "init_mean",
                "init_std",
                "particles",
                "bootstrap_particles",
            ],
        );
        let drift = self.required(t, s, "drift").and_then(|v| self.string(v, s, "drift")).and_then(|name| match name {
            "double-well" => Some(ScalarDrift::DoubleWell),
            "linear" => self.required_float(t, s, "a").map(ScalarDrift::Linear),
            other => {
                self.fail(format!("unknown scalar drift `{other}` (expected double-well or linear)"));
                None
            }
        });
        let obs = self.required(t, s, "observation").and_then(|v| self.string(v, s, "observation")).and_then(|name| match name {
            "tanh" => Some(ScalarObservation::Tanh),
            "linear" => self.required_float(t, s, "h").map(ScalarObservation::Linear),
            "constant" => self.required_float(t, s, "c").map(ScalarObservation::Constant),
            other => {
                self.fail(format!("unknown scalar observation `{other}` (expected tanh, linear or constant)"));
                None
            }
        });
        let stray = [
            ("a", !matches!(t.get("drift").and_then(Value::as_str), Some("linear"))),
            ("h", !matches!(t.get("observation").and_then(Value::as_str), Some("linear"))),
            ("c", !matches!(t.get("observation").and_then(Value::as_str), Some("constant"))),
        ];
        for (key, misplaced) in stray {
            if misplaced && t.contains_key(key) {
                self.fail(format!("`fpf.{key}` does not apply to the chosen drift or observation"));
            }
        }
        let diffusion = self.float_or(t, s, "diffusion", 1.0);
        let gamma = self.float_or(t, s, "gamma", 1.0);
        let init_mean = self.float_or(t, s, "init_mean", 0.0);
        let init_std = self.float_or(t, s, "init_std", 1.0);
        let particles = self.required(t, s, "particles").and_then(|v| self.count(v, s, "particles"));
        let bootstrap = self.required(t, s, "bootstrap_particles").and_then(|v| self.count(v, s, "bootstrap_particles"));
        Some(FpfConfig {
            model: ScalarModel {
                drift: drift?,
                diffusion: diffusion?,
                obs: obs?,
                gamma: gamma?,
                init_mean: init_mean?,
                init_std: init_std?,
            },
            particles: particles?,
            bootstrap_particles: bootstrap?,
        })
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl ExperimentConfig {
    /// Check cross-block consistency, reporting every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let kind = self.kind.name();
        let mut need = |present: bool, section: &str, wanted: bool| match (present, wanted) {
            (false, true) => errors.push(format!("kind `{kind}` requires section `[{section}]`")),
            (true, false) => errors.push(format!("section `[{section}]` is not used by kind `{kind}`")),
            _ => {}
        };
        let spde = self.kind != ExperimentKind::Fpf;
        need(self.model.is_some(), "model", spde);
        // a signal run writes observations only when asked to
        let observed = spde && (self.kind != ExperimentKind::Signal || self.observation.is_some());
        need(self.observation.is_some(), "observation", observed);
        need(self.ensemble.is_some(), "ensemble", self.kind.uses_ensemble());
        need(self.fpf.is_some(), "fpf", !spde);

        if let Err(e) = self.integrator() {
            errors.push(e.to_string());
        }
        if let Some(model) = &self.model {
            if let Err(e) = self.model_spec() {
                errors.push(e.to_string());
            }
            if self.initial.mean.len() > model.modes {
                errors.push(format!("`initial.mean` has {} entries, the model has {} modes", self.initial.mean.len(), model.modes));
            }
            if let Some(obs) = &self.observation {
                for k in &obs.functionals {
                    if *k == 0 || *k > model.modes {
                        errors.push(format!("observation functional index {k} is outside 1..={}", model.modes));
                    }
                }
                if obs.functionals.is_empty() {
                    errors.push("`observation.functionals` must not be empty".into());
                } else if let Err(e) = ObservationModel::new(obs.kind, vec![SpectralField::zeros(1)], obs.gamma) {
                    errors.push(e.to_string());
                }
                let linear = matches!(obs.kind, ObservationKind::Linear)
                    && match &model.drift {
                        DriftConfig::AllenCahn { a, c, .. } => *a == 0.0 && *c == 0.0,
                        _ => true,
                    };
                let exact = matches!(self.ensemble.as_ref().map(|e| e.reference), Some(MeanFieldReference::Exact));
                if (self.kind == ExperimentKind::KalmanBucy || exact) && !linear {
                    errors.push("Kalman-Bucy moments need a linear drift and a linear observation".into());
                }
            }
        }
        if self.initial.mean.iter().any(|x| !x.is_finite()) {
            errors.push("`initial.mean` must be finite".into());
        }
        if self.model.as_ref().and_then(|m| m.lambda).is_some_and(|l| !l.is_finite()) {
            errors.push("`model.lambda` must be finite".into());
        }
        if !(self.initial.variance >= 0.0) || !self.initial.variance.is_finite() {
            errors.push(format!("`initial.variance` must be non-negative, got {}", self.initial.variance));
        }
        if self.kind.needs_coupling() && self.initial.variance != 0.0 {
            errors.push(format!("kind `{kind}` couples from a deterministic start; `initial.variance` must be 0"));
        }
        let mut design = None;
        if let Some(ens) = &self.ensemble {
            if ens.sizes.contains(&0) {
                errors.push("ensemble sizes must be positive".into());
            }
            if ens.replicates == 0 {
                errors.push("`ensemble.replicates` must be positive".into());
            }
            if self.kind != ExperimentKind::Sweep && ens.sizes.len() != 1 {
                errors.push(format!("kind `{kind}` runs a single ensemble size, got {}", ens.sizes.len()));
            }
            if let (MeanFieldReference::Oracle { size }, Some(max)) = (ens.reference, ens.sizes.iter().max()) {
                if self.kind.needs_coupling() && size <= 4 * max {
                    errors.push(format!("oracle size {size} must exceed 4N = {}", 4 * max));
                }
            }
            if let GainPolicy::Clipped(k) = ens.gain {
                if !(k > 0.0) || !k.is_finite() {
                    errors.push(format!("`ensemble.clip` must be positive, got {k}"));
                }
            }
            if !(ens.moment_power > 0.0) || !(ens.exp_order >= 0.0) {
                errors.push("`ensemble.moment_power` must be positive and `ensemble.exp_order` non-negative".into());
            }
            if self.kind == ExperimentKind::Sweep {
                let mut distinct = ens.sizes.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() < 3 {
                    design = Some(format!("a sweep needs at least 3 distinct ensemble sizes, got {}", distinct.len()));
                } else if ens.replicates < 2 {
                    design = Some(format!("a sweep needs at least 2 replicates, got {}", ens.replicates));
                }
            }
        }
        if let Some(fpf) = &self.fpf {
            if let Err(e) = fpf.model.validate() {
                errors.push(e.to_string());
            }
            if fpf.particles < 10 {
                errors.push(format!("`fpf.particles` must be at least 10, got {}", fpf.particles));
            }
            if fpf.bootstrap_particles == 0 {
                errors.push("`fpf.bootstrap_particles` must be positive".into());
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        match design {
            Some(msg) => Err(Error::InsufficientDesign(msg)),
            None => Ok(()),
        }
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        Ok(IntegratorConfig::new(self.numerics.dt, self.numerics.horizon)?.with_taming(self.numerics.taming))
    }

    fn model_config(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| Error::Config(vec!["missing section `[model]`".into()]))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let cfg = self.model_config()?;
        let basis = make_basis(cfg.modes)?;
        let drift = match &cfg.drift {
            DriftConfig::Heat => DriftModel::heat(),
            DriftConfig::AllenCahn { a, b, c } => DriftModel::allen_cahn(*a, *b, *c)?,
            DriftConfig::Linear(rows) => {
                if rows.len() != cfg.modes || rows.iter().any(|r| r.len() != cfg.modes) {
                    return Err(Error::Config(vec![format!("linear drift must be {0}×{0}", cfg.modes)]));
                }
                DriftModel::linear(DMatrix::from_fn(cfg.modes, cfg.modes, |i, j| rows[i][j]))?
            }
        };
        let drift = match cfg.lambda {
            Some(lambda) => drift.with_lambda(lambda),
            None => drift,
        };
        let q = QSpectrum::power_law(cfg.modes, cfg.alpha, cfg.tau_q)?;
        ModelSpec::new(basis, drift, DiffusionModel::identity(q))
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        let modes = self.model_config()?.modes;
        let obs = self.observation.as_ref().ok_or_else(|| Error::Config(vec!["missing section `[observation]`".into()]))?;
        let functionals = obs.functionals.iter().map(|k| SpectralField::basis_vector(modes, *k)).collect();
        ObservationModel::new(obs.kind, functionals, obs.gamma)
    }

    pub fn initial_state(&self) -> Result<SpectralField> {
        let modes = self.model_config()?.modes;
        let mut coeffs = self.initial.mean.clone();
        coeffs.resize(modes, 0.0);
        Ok(SpectralField::from_vec(coeffs))
    }

    pub fn ensemble_config(&self) -> Result<&EnsembleConfig> {
        self.ensemble.as_ref().ok_or_else(|| Error::Config(vec!["missing section `[ensemble]`".into()]))
    }

    pub fn coupling_spec(&self) -> Result<CouplingSpec> {
        let ens = self.ensemble_config()?;
        Ok(CouplingSpec {
            model: self.model_spec()?,
            obs: self.observation_model()?,
            config: self.integrator()?,
            initial: self.initial_state()?,
            policy: ens.gain,
            reference: ens.reference,
            seed: self.seed,
        })
    }

    /// Canonical TOML: fixed key order, every default spelled out, floats in shortest
    /// round-trip form.
    pub fn to_canonical_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind = \"{}\"", self.kind.name());
        if self.seed <= i64::MAX as u64 {
            let _ = writeln!(out, "seed = {}", self.seed);
        } else {
            let _ = writeln!(out, "seed = \"{}\"", self.seed);
        }
        if let Some(output) = &self.output {
            let _ = writeln!(out, "output = {}", Value::String(output.clone()));
        }
        if let Some(m) = &self.model {
            let _ = writeln!(out, "\n[model]");
            match &m.drift {
                DriftConfig::Heat => {
                    let _ = writeln!(out, "drift = \"heat\"");
                }
                DriftConfig::AllenCahn { a, b, c } => {
                    let _ = writeln!(out, "drift = \"allen-cahn\"\na = {}\nb = {}\nc = {}", float(*a), float(*b), float(*c));
                }
                DriftConfig::Linear(rows) => {
                    let rows: Vec<String> = rows.iter().map(|r| float_list(r)).collect();
                    let _ = writeln!(out, "drift = \"linear\"\nmatrix = [{}]", rows.join(", "));
                }
            }
            let _ = writeln!(out, "modes = {}\nalpha = {}\ntau_q = {}", m.modes, float(m.alpha), float(m.tau_q));
            if let Some(lambda) = m.lambda {
                let _ = writeln!(out, "lambda = {}", float(lambda));
            }
        }
        if let Some(o) = &self.observation {
            let _ = writeln!(out, "\n[observation]");
            match o.kind {
                ObservationKind::Linear => {
                    let _ = writeln!(out, "kind = \"linear\"");
                }
                ObservationKind::BoundedTanh { saturation } => {
                    let _ = writeln!(out, "kind = \"bounded-tanh\"\nsaturation = {}", float(saturation));
                }
            }
            let idx: Vec<String> = o.functionals.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(out, "functionals = [{}]\ngamma = {}", idx.join(", "), float(o.gamma));
        }
        let n = &self.numerics;
        let _ = writeln!(out, "\n[numerics]\ndt = {}\nhorizon = {}\ntaming = {}", float(n.dt), float(n.horizon), n.taming);
        let _ = writeln!(
            out,
            "\n[initial]\nmean = {}\nvariance = {}",
            float_list(&self.initial.mean),
            float(self.initial.variance)
        );
        if let Some(e) = &self.ensemble {
            let sizes: Vec<String> = e.sizes.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(out, "\n[ensemble]\nsizes = [{}]\nreplicates = {}", sizes.join(", "), e.replicates);
            match e.reference {
                MeanFieldReference::Exact => {
                    let _ = writeln!(out, "reference = \"exact\"");
                }
                MeanFieldReference::Oracle { size } => {
                    let _ = writeln!(out, "reference = \"oracle\"\nreference_size = {size}");
                }
            }
            match e.gain {
                GainPolicy::Untamed => {
                    let _ = writeln!(out, "gain = \"untamed\"");
                }
                GainPolicy::Disabled => {
                    let _ = writeln!(out, "gain = \"disabled\"");
                }
                GainPolicy::Clipped(k) => {
                    let _ = writeln!(out, "gain = \"clipped\"\nclip = {}", float(k));
                }
            }
            let _ = writeln!(out, "moment_power = {}\nexp_order = {}", float(e.moment_power), float(e.exp_order));
        }
        if let Some(f) = &self.fpf {
            let m = &f.model;
            let _ = writeln!(out, "\n[fpf]");
            match m.drift {
                ScalarDrift::DoubleWell => {
                    let _ = writeln!(out, "drift = \"double-well\"");
                }
                ScalarDrift::Linear(a) => {
                    let _ = writeln!(out, "drift = \"linear\"\na = {}", float(a));
                }
            }
            match m.obs {
                ScalarObservation::Tanh => {
                    let _ = writeln!(out, "observation = \"tanh\"");
                }
                ScalarObservation::Linear(h) => {
                    let _ = writeln!(out, "observation = \"linear\"\nh = {}", float(h));
                }
                ScalarObservation::Constant(c) => {
                    let _ = writeln!(out, "observation = \"constant\"\nc = {}", float(c));
                }
            }
            let _ = writeln!(
                out,
                "diffusion = {}\ngamma = {}\ninit_mean = {}\ninit_std = {}\nparticles = {}\nbootstrap_particles = {}",
                float(m.diffusion),
                float(m.gamma),
                float(m.init_mean),
                float(m.init_std),
                f.particles,
                f.bootstrap_particles
            );
        }
        out
    }

    /// Hex SHA-256 of the canonical form.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_toml().as_bytes()))
    }
}

fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn float_list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|x| float(*x)).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
kind = "enkbf"
seed = 7

[model]
drift = "heat"
modes = 8

[observation]
kind = "linear"
functionals = [1]

[numerics]
dt = 0.01
horizon = 1.0

[ensemble]
size = 32
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        let model = cfg.model.as_ref().unwrap();
        assert_eq!(model.alpha, 1.0);
        assert_eq!(model.tau_q, 1.0);
        assert_eq!(cfg.observation.as_ref().unwrap().gamma, 1.0);
        assert_eq!(cfg.ensemble.as_ref().unwrap().gain, GainPolicy::Untamed);
        assert_eq!(cfg.initial, InitialConfig::default());
        assert!((cfg.model_spec().unwrap().beta() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = parse_config(MINIMAL).unwrap();
        let text = cfg.to_canonical_toml();
        let again = parse_config(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical_toml(), text);
        assert_eq!(again.config_hash(), cfg.config_hash());

        let fpf = r#"
kind = "fpf"
seed = 18446744073709551615
[numerics]
dt = 0.001
horizon = 1
[fpf]
drift = "linear"
a = -0.1
observation = "tanh"
gamma = 0.30000000000000004
particles = 100
bootstrap_particles = 1000
"#;
        // TOML integers are signed, so seeds above i64::MAX travel as strings
        assert!(matches!(parse_config(fpf), Err(Error::Parse(_))));
        let cfg = parse_config(&fpf.replace("18446744073709551615", "\"18446744073709551615\"")).unwrap();
        assert_eq!(cfg.seed, u64::MAX);
        assert_eq!(parse_config(&cfg.to_canonical_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace("modes = 8", "modes = 8\nmodez = 3").replace("seed = 7", "seed = 7\ncolour = 1");
        match parse_config(&text).unwrap_err() {
            Error::Config(errors) => {
                assert!(errors.iter().any(|e| e.contains("`model.modez`")), "{errors:?}");
                assert!(errors.iter().any(|e| e.contains("`colour`")), "{errors:?}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn all_errors_are_collected() {
        let text = MINIMAL.replace("modes = 8\n", "").replace("dt = 0.01", "dt = \"fast\"").replace("size = 32", "");
        match parse_config(&text).unwrap_err() {
            Error::Config(errors) => {
                assert!(errors.iter().any(|e| e.contains("model.modes")));
                assert!(errors.iter().any(|e| e.contains("numerics.dt")));
                assert!(errors.iter().any(|e| e.contains("ensemble.size")));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let text = MINIMAL.replace("functionals = [1]", "functionals = [1, 9]").replace("dt = 0.01", "dt = 0.3");
        match parse_config(&text).unwrap_err() {
            Error::Config(errors) => {
                assert!(errors.iter().any(|e| e.contains("index 9")), "{errors:?}");
                assert!(errors.iter().any(|e| e.contains("does not divide")), "{errors:?}");
            }
            other => panic!("{other}"),
        }
        let linear = MINIMAL.replace("drift = \"heat\"", "drift = \"linear\"\ndiagonal = [-1.0, -2.0]");
        assert!(matches!(parse_config(&linear), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_needs_three_sizes() {
        let text = MINIMAL.replace("kind = \"enkbf\"", "kind = \"sweep\"").replace("size = 32", "sizes = [16]\nreplicates = 4");
        assert!(matches!(parse_config(&text), Err(Error::InsufficientDesign(_))));
        let ok = text.replace("sizes = [16]", "sizes = [16, 32, 64]");
        assert!(parse_config(&ok).is_ok());
        let few = ok.replace("replicates = 4", "replicates = 1");
        assert!(matches!(parse_config(&few), Err(Error::InsufficientDesign(_))));
    }

    #[test]
    fn kalman_bucy_needs_linear_model() {
        let text = MINIMAL
            .replace("kind = \"enkbf\"", "kind = \"kalman-bucy\"")
            .replace("[ensemble]\nsize = 32\n", "")
            .replace("kind = \"linear\"", "kind = \"bounded-tanh\"");
        match parse_config(&text).unwrap_err() {
            Error::Config(errors) => assert!(errors.iter().any(|e| e.contains("Kalman-Bucy")), "{errors:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unused_sections_are_errors() {
        let text = format!("{MINIMAL}\n[fpf]\ndrift = \"double-well\"\nobservation = \"tanh\"\nparticles = 10\nbootstrap_particles = 10\n");
        match parse_config(&text).unwrap_err() {
            Error::Config(errors) => assert!(errors.iter().any(|e| e.contains("[fpf]")), "{errors:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_toml_is_a_parse_error() {
        assert!(matches!(parse_config("kind = "), Err(Error::Parse(_))));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn numeric_fields_round_trip(
            dt_steps in 1usize..500,
            alpha in 0.51f64..4.0,
            tau in 1e-3f64..10.0,
            gamma in 1e-3f64..5.0,
            mean in proptest::collection::vec(-1e3f64..1e3, 0..6),
            seed in proptest::num::u64::ANY,
        ) {
            let horizon = 1.0;
            let text = format!(
                "kind = \"enkbf\"\nseed = \"{seed}\"\n[model]\ndrift = \"heat\"\nmodes = 6\nalpha = {alpha:?}\ntau_q = {tau:?}\n\
                 [observation]\nkind = \"linear\"\nfunctionals = [2]\ngamma = {gamma:?}\n\
                 [numerics]\ndt = {:?}\nhorizon = {horizon:?}\n[initial]\nmean = {}\n[ensemble]\nsize = 5\n",
                horizon / dt_steps as f64,
                float_list(&mean),
            );
            let cfg = parse_config(&text).unwrap();
            let again = parse_config(&cfg.to_canonical_toml()).unwrap();
            proptest::prop_assert_eq!(again, cfg);
        }
    }
}
