//! TOML experiment configuration: parsing, validation, and conversion to
//! the library config types.

use flute_core::fedrep::{FedRepConfig, HeadMode, InitMode};
use flute_core::flute::{FluteConfig, GradientMode};
use flute_core::general::GeneralConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Flute,
    Fedrep,
    FedrepRi,
    GeneralFlute,
}

impl Method {
    pub fn is_linear(self) -> bool {
        !matches!(self, Method::GeneralFlute)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Flute => "flute",
            Method::Fedrep => "fedrep",
            Method::FedrepRi => "fedrep_ri",
            Method::GeneralFlute => "general_flute",
        }
    }
}

/// Linear-problem block: dimensions and noise of the synthetic regression
/// tasks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub d: usize,
    pub k: usize,
    pub clients: usize,
    pub samples: usize,
    #[serde(default)]
    pub sigma2: f64,
}

/// Classification-corpus block for the general method.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationBlock {
    pub classes: usize,
    pub classes_per_client: usize,
    pub clients: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
}

/// Linear training block; missing fields take the analysis defaults
/// (`gamma1 = 1/4`, `gamma2 = 1/8`, `eta = 0.03`, `alpha = 1/(10 d)`).
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    pub eta: Option<f64>,
    pub eta_l: Option<f64>,
    pub eta_r: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub alpha: Option<f64>,
    /// "empirical" or "population" (flute only).
    pub mode: Option<GradientMode>,
    /// "exact_ls" or "grad_steps" (fedrep only).
    pub head_mode: Option<String>,
    pub head_grad_count: Option<usize>,
    pub head_grad_step: Option<f64>,
}

/// General-method training block.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GeneralBlock {
    pub hidden: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub local_epochs: Option<usize>,
    pub sample_ratio: Option<f64>,
    pub eta_l: Option<f64>,
    pub eta_r: Option<f64>,
    pub average_by_realized: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub method: Method,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    pub output_dir: Option<String>,
    pub problem: Option<ProblemBlock>,
    pub classification: Option<ClassificationBlock>,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub general: GeneralBlock,
}

fn default_stride() -> usize {
    1
}

/// A validated experiment ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub method: Method,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub record_stride: usize,
    pub output_dir: Option<String>,
    pub problem: Option<ProblemBlock>,
    pub classification: Option<ClassificationBlock>,
    pub training: TrainingBlock,
    pub general: GeneralBlock,
    /// Set when `k > min(d, clients)`: the run proceeds but the rank
    /// target exceeds the problem's spectrum.
    pub overparameterized: bool,
}

/// Parse and validate a TOML config document. Error messages name the
/// offending field.
pub fn parse_config(text: &str) -> Result<Experiment, String> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| format!("config parse error: {e}"))?;
    if raw.seeds.is_empty() {
        return Err("seeds: at least one seed required".into());
    }
    if raw.rounds < 1 {
        return Err("rounds: must be at least 1".into());
    }
    if raw.record_stride < 1 {
        return Err("record_stride: must be at least 1".into());
    }
    let t = &raw.training;
    for (name, v) in [
        ("training.eta", t.eta),
        ("training.eta_l", t.eta_l),
        ("training.eta_r", t.eta_r),
    ] {
        if let Some(v) = v {
            if !(v > 0.0) {
                return Err(format!("{name}: must be positive, got {v}"));
            }
        }
    }
    for (name, v) in [
        ("training.gamma1", t.gamma1),
        ("training.gamma2", t.gamma2),
        ("training.alpha", t.alpha),
    ] {
        if let Some(v) = v {
            if v < 0.0 {
                return Err(format!("{name}: must be nonnegative, got {v}"));
            }
        }
    }
    let mut overparameterized = false;
    if raw.method.is_linear() {
        let p = raw
            .problem
            .as_ref()
            .ok_or("problem: block required for linear methods")?;
        if p.d < 1 || p.clients < 1 || p.samples < 1 || p.k < 1 {
            return Err("problem: d, k, clients and samples must be at least 1".into());
        }
        if p.sigma2 < 0.0 {
            return Err(format!(
                "problem.sigma2: must be nonnegative, got {}",
                p.sigma2
            ));
        }
        overparameterized = p.k > p.d.min(p.clients);
        if let Some(mode) = &t.head_mode {
            if mode != "exact_ls" && mode != "grad_steps" {
                return Err(format!(
                    "training.head_mode: expected \"exact_ls\" or \"grad_steps\", got \"{mode}\""
                ));
            }
        }
    } else {
        let c = raw
            .classification
            .as_ref()
            .ok_or("classification: block required for general_flute")?;
        if c.classes < 2 {
            return Err("classification.classes: at least 2 classes required".into());
        }
        if c.classes_per_client < 1 || c.classes_per_client > c.classes {
            return Err(
                "classification.classes_per_client: must lie in [1, classes]".into(),
            );
        }
        if c.classes_per_client * c.clients < c.classes {
            return Err(
                "classification: classes_per_client * clients must cover all classes".into(),
            );
        }
        if let Some(r) = raw.general.sample_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(format!(
                    "general.sample_ratio: must lie in (0, 1], got {r}"
                ));
            }
        }
    }
    Ok(Experiment {
        method: raw.method,
        rounds: raw.rounds,
        seeds: raw.seeds,
        record_stride: raw.record_stride,
        output_dir: raw.output_dir,
        problem: raw.problem,
        classification: raw.classification,
        training: raw.training,
        general: raw.general,
        overparameterized,
    })
}

impl Experiment {
    /// Step size shared by the linear methods (default 0.03).
    fn eta(&self) -> f64 {
        self.training.eta.unwrap_or(0.03)
    }

    fn alpha(&self) -> f64 {
        let d = self.problem.as_ref().map_or(1, |p| p.d);
        self.training.alpha.unwrap_or(1.0 / (10.0 * d as f64))
    }

    pub fn flute_config(&self, seed: u64) -> FluteConfig {
        let t = &self.training;
        FluteConfig {
            eta_l: t.eta_l.unwrap_or_else(|| self.eta()),
            eta_r: t.eta_r.unwrap_or_else(|| self.eta()),
            gamma1: t.gamma1.unwrap_or(0.25),
            gamma2: t.gamma2.unwrap_or(0.125),
            alpha: self.alpha(),
            rounds: self.rounds,
            record_stride: self.record_stride,
            mode: t.mode.unwrap_or(GradientMode::Empirical),
            seed,
        }
    }

    pub fn fedrep_config(&self, seed: u64) -> FedRepConfig {
        let t = &self.training;
        let head_mode = match t.head_mode.as_deref() {
            Some("grad_steps") => HeadMode::GradSteps {
                count: t.head_grad_count.unwrap_or(1),
                step: t.head_grad_step.unwrap_or_else(|| self.eta()),
            },
            _ => HeadMode::ExactLs,
        };
        let init_mode = match self.method {
            Method::FedrepRi => InitMode::Random {
                alpha: self.alpha(),
            },
            _ => InitMode::Spectral,
        };
        FedRepConfig {
            eta: self.eta(),
            head_mode,
            init_mode,
            rounds: self.rounds,
            record_stride: self.record_stride,
            seed,
        }
    }

    pub fn general_config(&self, seed: u64) -> GeneralConfig {
        let c = self.classification.as_ref().expect("validated");
        let g = &self.general;
        let mut cfg = GeneralConfig::defaults(
            g.hidden.unwrap_or(16),
            c.classes,
            c.classes_per_client,
            seed,
        );
        cfg.lambda1 = g.lambda1.unwrap_or(cfg.lambda1);
        cfg.lambda2 = g.lambda2.unwrap_or(cfg.lambda2);
        cfg.lambda3 = g.lambda3.unwrap_or(cfg.lambda3);
        cfg.local_epochs = g.local_epochs.unwrap_or(cfg.local_epochs);
        cfg.sample_ratio = g.sample_ratio.unwrap_or(cfg.sample_ratio);
        cfg.eta_l = g.eta_l.unwrap_or(cfg.eta_l);
        cfg.eta_r = g.eta_r.unwrap_or(cfg.eta_r);
        cfg.average_by_realized = g.average_by_realized.unwrap_or(false);
        cfg.rounds = self.rounds;
        cfg.record_stride = self.record_stride;
        cfg
    }
}
