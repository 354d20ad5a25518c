//! Experiment configuration: a flat key-value format with three sections.
//!
//! ```text
//! [problem]
//! family = quadratic          # quadratic | mexican_hat
//! dim_x = 200                 # generation parameters (quadratic)
//! dim_y = 100
//! null_dim = 10
//! cond = 10
//! lambda_max = 0.99
//! # seed = 0                  # pin the problem seed (else the run seed)
//! # path = problem.txt        # load a serialized problem instead
//! # hat_coeff = 0.5 0.3       # mexican_hat linear coefficient
//!
//! [solver]
//! # preset = corrected_itd    # itd | corrected_itd | truncated_itd |
//! #                           #   corrected_truncated_itd | aid
//! outer_iters = 5000          # K
//! unroll_steps = 1            # T
//! warm_start_steps = 0        # M
//! outer_step = 1.0            # upper-level step
//! inner_step = 0.9            # lower-level step
//! correction = true
//! ls_mode = cg_z              # direct_pinv | gd_z | cg_z | richardson_xi
//! ls_iters = 20               # inner solver budget N
//! # ls_step = 0.9             # Richardson/gd inner step (default derived)
//! tol_upper = 1e-9
//! tol_lower = 1e-9
//!
//! [run]
//! init = gaussian             # zeros | gaussian
//! seeds = 0 1 2               # one run per seed
//! out = fig3                  # output stem
//! closed_form_metrics = true  # fill the optional CSV columns
//! ```
//!
//! Lines starting with `#` (or trailing `# ...` after a value) are comments.
//! Unknown sections or keys are reported with their line numbers, and
//! validation collects every violation instead of stopping at the first.

use bgs_core::correction::{LsConfig, LsMode};
use bgs_core::problems::format_f64;
use bgs_core::solver::{preset, SolverConfig};

/// Parse/validation failure: every violation found, one message per line.
#[derive(Debug, Clone)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemCfg {
    pub family: String,
    pub dim_x: usize,
    pub dim_y: usize,
    pub null_dim: usize,
    pub cond: f64,
    pub lambda_max: f64,
    /// Pinned problem seed; when absent each run's seed generates its own
    /// instance.
    pub seed: Option<u64>,
    /// Load a serialized problem instead of generating one.
    pub path: Option<String>,
    pub hat_coeff: [f64; 2],
}

impl Default for ProblemCfg {
    fn default() -> Self {
        ProblemCfg {
            family: "quadratic".into(),
            dim_x: 2,
            dim_y: 2,
            null_dim: 1,
            cond: 10.0,
            lambda_max: 0.99,
            seed: None,
            path: None,
            hat_coeff: [0.5, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverCfg {
    pub preset: Option<String>,
    pub outer_iters: usize,
    pub unroll_steps: Option<usize>,
    pub warm_start_steps: Option<usize>,
    pub outer_step: f64,
    pub inner_step: f64,
    pub correction: Option<bool>,
    pub ls_mode: String,
    pub ls_iters: usize,
    pub ls_step: Option<f64>,
    pub tol_upper: f64,
    pub tol_lower: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        SolverCfg {
            preset: None,
            outer_iters: 1000,
            unroll_steps: None,
            warm_start_steps: None,
            outer_step: 0.1,
            inner_step: 0.1,
            correction: None,
            ls_mode: "cg_z".into(),
            ls_iters: 20,
            ls_step: None,
            tol_upper: 1e-10,
            tol_lower: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCfg {
    pub init: String,
    pub seeds: Vec<u64>,
    pub out: String,
    pub closed_form_metrics: bool,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg {
            init: "zeros".into(),
            seeds: vec![0],
            out: "run".into(),
            closed_form_metrics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub problem: ProblemCfg,
    pub solver: SolverCfg,
    pub run: RunCfg,
}

impl ExperimentConfig {
    /// Parse and validate; collects every violation.
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut violations = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name {
                    "problem" | "solver" | "run" => section = name.to_string(),
                    other => {
                        violations.push(format!("line {line_no}: unknown section `[{other}]`"));
                        section.clear();
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                violations.push(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                ));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                violations.push(format!(
                    "line {line_no}: key `{key}` appears before any section"
                ));
                continue;
            }
            if let Err(msg) = cfg.apply(&section, key, value) {
                violations.push(format!("line {line_no}: {msg}"));
            }
        }
        violations.extend(cfg.validate());
        if violations.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError { violations })
        }
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("cannot parse value `{value}` for key `{key}`"))
        }
        match (section, key) {
            ("problem", "family") => self.problem.family = value.to_string(),
            ("problem", "dim_x") => self.problem.dim_x = parse(key, value)?,
            ("problem", "dim_y") => self.problem.dim_y = parse(key, value)?,
            ("problem", "null_dim") => self.problem.null_dim = parse(key, value)?,
            ("problem", "cond") => self.problem.cond = parse(key, value)?,
            ("problem", "lambda_max") => self.problem.lambda_max = parse(key, value)?,
            ("problem", "seed") => self.problem.seed = Some(parse(key, value)?),
            ("problem", "path") => self.problem.path = Some(value.to_string()),
            ("problem", "hat_coeff") => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(format!("hat_coeff needs two numbers, got `{value}`"));
                }
                self.problem.hat_coeff =
                    [parse::<f64>(key, parts[0])?, parse::<f64>(key, parts[1])?];
            }
            ("solver", "preset") => self.solver.preset = Some(value.to_string()),
            ("solver", "outer_iters") => self.solver.outer_iters = parse(key, value)?,
            ("solver", "unroll_steps") => self.solver.unroll_steps = Some(parse(key, value)?),
            ("solver", "warm_start_steps") => {
                self.solver.warm_start_steps = Some(parse(key, value)?)
            }
            ("solver", "outer_step") => self.solver.outer_step = parse(key, value)?,
            ("solver", "inner_step") => self.solver.inner_step = parse(key, value)?,
            ("solver", "correction") => self.solver.correction = Some(parse(key, value)?),
            ("solver", "ls_mode") => self.solver.ls_mode = value.to_string(),
            ("solver", "ls_iters") => self.solver.ls_iters = parse(key, value)?,
            ("solver", "ls_step") => self.solver.ls_step = Some(parse(key, value)?),
            ("solver", "tol_upper") => self.solver.tol_upper = parse(key, value)?,
            ("solver", "tol_lower") => self.solver.tol_lower = parse(key, value)?,
            ("run", "init") => self.run.init = value.to_string(),
            ("run", "seeds") => {
                let mut seeds = Vec::new();
                for tok in value.split([' ', ',']).filter(|t| !t.is_empty()) {
                    seeds.push(parse::<u64>(key, tok)?);
                }
                if seeds.is_empty() {
                    return Err("seeds list is empty".into());
                }
                self.run.seeds = seeds;
            }
            ("run", "out") => self.run.out = value.to_string(),
            ("run", "closed_form_metrics") => self.run.closed_form_metrics = parse(key, value)?,
            (section, key) => {
                return Err(format!("unknown key `{key}` in section `[{section}]`"));
            }
        }
        Ok(())
    }

    /// Semantic validation; returns all violations.
    fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self.problem.family.as_str() {
            "quadratic" => {
                if self.problem.path.is_none() {
                    if self.problem.dim_x == 0 || self.problem.dim_y == 0 {
                        v.push("problem: dimensions must be positive".into());
                    }
                    if self.problem.null_dim >= self.problem.dim_y {
                        v.push(format!(
                            "problem: null_dim {} must be smaller than dim_y {}",
                            self.problem.null_dim, self.problem.dim_y
                        ));
                    }
                    if self.problem.cond.is_nan() || self.problem.cond < 1.0 {
                        v.push(format!(
                            "problem: cond must be >= 1, got {}",
                            self.problem.cond
                        ));
                    }
                    let lm = self.problem.lambda_max;
                    if lm.is_nan() || lm <= 0.0 || lm > 1.0 {
                        v.push(format!(
                            "problem: lambda_max must lie in (0, 1], got {}",
                            self.problem.lambda_max
                        ));
                    }
                }
            }
            "mexican_hat" => {}
            other => v.push(format!("problem: unknown family `{other}`")),
        }
        if !matches!(self.run.init.as_str(), "zeros" | "gaussian") {
            v.push(format!(
                "run: init must be `zeros` or `gaussian`, got `{}`",
                self.run.init
            ));
        }
        if self.run.seeds.is_empty() {
            v.push("run: at least one seed required".into());
        }
        match self.resolve_solver() {
            Ok(core_cfg) => {
                if let Err(e) = core_cfg.validate() {
                    v.push(format!("solver: {e}"));
                }
                if let Some(name) = &self.solver.preset {
                    v.extend(preset_consistency(
                        name,
                        core_cfg.unroll_steps,
                        core_cfg.warm_start_steps,
                        core_cfg.add_correction,
                    ));
                }
            }
            Err(msgs) => v.extend(msgs),
        }
        v
    }

    /// Resolve preset + overrides into a concrete core solver configuration.
    pub fn resolve_solver(&self) -> Result<SolverConfig, Vec<String>> {
        let mut violations = Vec::new();
        let fragment = match &self.solver.preset {
            Some(name) => match preset(name) {
                Ok(f) => Some(f),
                Err(e) => {
                    violations.push(format!("solver: {e}"));
                    None
                }
            },
            None => None,
        };
        let mode = match LsMode::parse(&self.solver.ls_mode) {
            Ok(m) => m,
            Err(e) => {
                violations.push(format!("solver: {e}"));
                LsMode::CgZ
            }
        };
        if !violations.is_empty() {
            return Err(violations);
        }
        let unroll_steps = self
            .solver
            .unroll_steps
            .or(fragment.map(|f| f.unroll_steps))
            .unwrap_or(1);
        let warm_start_steps = self
            .solver
            .warm_start_steps
            .or(fragment.map(|f| f.warm_start_steps))
            .unwrap_or(0);
        let add_correction = self
            .solver
            .correction
            .or(fragment.map(|f| f.add_correction))
            .unwrap_or(false);
        Ok(SolverConfig {
            outer_iters: self.solver.outer_iters,
            unroll_steps,
            warm_start_steps,
            outer_step: self.solver.outer_step,
            inner_step: self.solver.inner_step,
            add_correction,
            ls: LsConfig {
                mode,
                iters: self.solver.ls_iters,
                step: self.solver.ls_step,
                ..LsConfig::default()
            },
            tol_upper: self.solver.tol_upper,
            tol_lower: self.solver.tol_lower,
        })
    }

    /// Canonical serialization; `parse(to_text(cfg))` reproduces `cfg`
    /// exactly (floats are written with 17 significant digits).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[problem]\n");
        s.push_str(&format!("family = {}\n", self.problem.family));
        s.push_str(&format!("dim_x = {}\n", self.problem.dim_x));
        s.push_str(&format!("dim_y = {}\n", self.problem.dim_y));
        s.push_str(&format!("null_dim = {}\n", self.problem.null_dim));
        s.push_str(&format!("cond = {}\n", format_f64(self.problem.cond)));
        s.push_str(&format!(
            "lambda_max = {}\n",
            format_f64(self.problem.lambda_max)
        ));
        if let Some(seed) = self.problem.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        if let Some(path) = &self.problem.path {
            s.push_str(&format!("path = {path}\n"));
        }
        s.push_str(&format!(
            "hat_coeff = {} {}\n",
            format_f64(self.problem.hat_coeff[0]),
            format_f64(self.problem.hat_coeff[1])
        ));
        s.push_str("\n[solver]\n");
        if let Some(p) = &self.solver.preset {
            s.push_str(&format!("preset = {p}\n"));
        }
        s.push_str(&format!("outer_iters = {}\n", self.solver.outer_iters));
        if let Some(t) = self.solver.unroll_steps {
            s.push_str(&format!("unroll_steps = {t}\n"));
        }
        if let Some(m) = self.solver.warm_start_steps {
            s.push_str(&format!("warm_start_steps = {m}\n"));
        }
        s.push_str(&format!(
            "outer_step = {}\n",
            format_f64(self.solver.outer_step)
        ));
        s.push_str(&format!(
            "inner_step = {}\n",
            format_f64(self.solver.inner_step)
        ));
        if let Some(c) = self.solver.correction {
            s.push_str(&format!("correction = {c}\n"));
        }
        s.push_str(&format!("ls_mode = {}\n", self.solver.ls_mode));
        s.push_str(&format!("ls_iters = {}\n", self.solver.ls_iters));
        if let Some(b) = self.solver.ls_step {
            s.push_str(&format!("ls_step = {}\n", format_f64(b)));
        }
        s.push_str(&format!(
            "tol_upper = {}\n",
            format_f64(self.solver.tol_upper)
        ));
        s.push_str(&format!(
            "tol_lower = {}\n",
            format_f64(self.solver.tol_lower)
        ));
        s.push_str("\n[run]\n");
        s.push_str(&format!("init = {}\n", self.run.init));
        let seeds: Vec<String> = self.run.seeds.iter().map(|s| s.to_string()).collect();
        s.push_str(&format!("seeds = {}\n", seeds.join(" ")));
        s.push_str(&format!("out = {}\n", self.run.out));
        s.push_str(&format!(
            "closed_form_metrics = {}\n",
            self.run.closed_form_metrics
        ));
        s
    }

    /// The configuration with every default and preset expanded, pinned to
    /// one seed: what gets written next to a run's CSV.
    pub fn resolved_for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut out = self.clone();
        let core = self
            .resolve_solver()
            .expect("resolved_for_seed called on a validated config");
        out.solver.preset = None;
        out.solver.unroll_steps = Some(core.unroll_steps);
        out.solver.warm_start_steps = Some(core.warm_start_steps);
        out.solver.correction = Some(core.add_correction);
        out.problem.seed = Some(self.problem.seed.unwrap_or(seed));
        out.run.seeds = vec![seed];
        out
    }
}

fn preset_consistency(name: &str, t: usize, m: usize, correction: bool) -> Vec<String> {
    let mut v = Vec::new();
    let mut expect = |cond: bool, what: &str| {
        if !cond {
            v.push(format!("solver: preset `{name}` requires {what}"));
        }
    };
    match name {
        "itd" => {
            expect(t > 0, "unroll_steps > 0");
            expect(m == 0, "warm_start_steps = 0");
            expect(!correction, "correction = false");
        }
        "corrected_itd" => {
            expect(t > 0, "unroll_steps > 0");
            expect(m == 0, "warm_start_steps = 0");
            expect(correction, "correction = true");
        }
        "truncated_itd" => {
            expect(t > 0, "unroll_steps > 0");
            expect(m > 0, "warm_start_steps > 0");
            expect(!correction, "correction = false");
        }
        "corrected_truncated_itd" => {
            expect(t > 0, "unroll_steps > 0");
            expect(m > 0, "warm_start_steps > 0");
            expect(correction, "correction = true");
        }
        "aid" => {
            expect(t == 0, "unroll_steps = 0");
            expect(m > 0, "warm_start_steps > 0");
            expect(correction, "correction = true");
        }
        _ => {}
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[problem]
family = quadratic
dim_x = 1
dim_y = 1
null_dim = 0
cond = 1
lambda_max = 1.0

[solver]
preset = corrected_itd
outer_step = 0.5
inner_step = 0.25

[run]
init = zeros
";

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let core = cfg.resolve_solver().unwrap();
        assert_eq!(core.unroll_steps, 1);
        assert_eq!(core.warm_start_steps, 0);
        assert!(core.add_correction);
    }

    #[test]
    fn zero_budget_is_rejected_with_citation() {
        let text = MINIMAL.replace(
            "preset = corrected_itd",
            "unroll_steps = 0\nwarm_start_steps = 0",
        );
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(
            err.violations.iter().any(|v| v.contains("T + M > 0")),
            "{:?}",
            err.violations
        );
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let text = "[problem]\nfamily = quadratic\nwibble = 3\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(
            err.violations
                .iter()
                .any(|v| v.contains("wibble") && v.contains("line 3")),
            "{:?}",
            err.violations
        );
    }

    #[test]
    fn violations_are_collected_not_first_only() {
        let text = "[problem]\nfamily = martian\nwibble = 3\n\n[run]\ninit = sideways\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.violations.len() >= 3, "{:?}", err.violations);
    }

    #[test]
    fn figure_scale_config_is_accepted() {
        let text = "\
[problem]
family = quadratic
dim_x = 2000
dim_y = 1000
null_dim = 100
cond = 10
lambda_max = 0.99

[solver]
outer_iters = 5000
unroll_steps = 10
warm_start_steps = 0
outer_step = 1.0
inner_step = 0.9
correction = true
ls_mode = richardson_xi
ls_iters = 20
ls_step = 0.9

[run]
init = gaussian
seeds = 0
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.problem.dim_x, 2000);
        assert_eq!(cfg.solver.ls_step, Some(0.9));
        assert_eq!(cfg.solver.ls_mode, "richardson_xi");
    }

    #[test]
    fn round_trip_is_lossless() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let text = cfg.to_text();
        let cfg2 = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, cfg2);

        let resolved = cfg.resolved_for_seed(7);
        let cfg3 = ExperimentConfig::parse(&resolved.to_text()).unwrap();
        assert_eq!(resolved, cfg3);
    }

    #[test]
    fn preset_contradiction_is_rejected() {
        let text = MINIMAL.replace("preset = corrected_itd", "preset = itd\ncorrection = true");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(
            err.violations.iter().any(|v| v.contains("preset `itd`")),
            "{:?}",
            err.violations
        );
    }
}
