//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lyapctl_core::experiment::ExperimentConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub exp: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seeds: (0..10).collect(),
            exp: ExperimentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let e = &mut self.exp;
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            "pca_dim" => e.pca_dim = parse(key, value)?,
            "k_steps" => e.sgc.k_steps = parse(key, value)?,
            "sgc_lr" => e.sgc.lr = parse(key, value)?,
            "sgc_max_epochs" => e.sgc.max_epochs = parse(key, value)?,
            "sgc_patience" => e.sgc.patience = parse(key, value)?,
            "per_class_train" => e.per_class_train = parse(key, value)?,
            "val_total" => e.val_total = parse(key, value)?,
            "test_total" => e.test_total = parse(key, value)?,
            "ppr_teleport" => e.ppr_teleport = parse(key, value)?,
            "class_id" => e.class_id = parse(key, value)?,
            "node_id" => {
                e.node_id = match value {
                    "" | "none" | "random" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "hidden" => e.cegis.hidden = parse(key, value)?,
            "lr" => e.cegis.lr = parse(key, value)?,
            "eps" => e.cegis.eps = parse(key, value)?,
            "delta" => e.cegis.delta = parse(key, value)?,
            "lambda_eq" => e.cegis.lambda_eq = parse(key, value)?,
            "n_aug" => e.cegis.n_aug = parse(key, value)?,
            "max_rounds" => e.cegis.max_rounds = parse(key, value)?,
            "epochs_per_round" => e.cegis.epochs_per_round = parse(key, value)?,
            "loss_stop" => e.cegis.loss_stop = parse(key, value)?,
            "max_boxes" => e.cegis.max_boxes = parse(key, value)?,
            "max_counterexamples" => e.cegis.max_counterexamples = parse(key, value)?,
            "falsifier_restarts" => e.cegis.falsifier_restarts = parse(key, value)?,
            "falsifier_steps" => e.cegis.falsifier_steps = parse(key, value)?,
            "parallel_verifier" => e.cegis.parallel_verifier = parse(key, value)?,
            "record_wall_time" => e.cegis.record_wall_time = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.exp;
        let c = &e.cegis;
        let positive = [
            ("pca_dim", e.pca_dim as f64),
            ("k_steps", e.sgc.k_steps as f64),
            ("sgc_lr", e.sgc.lr),
            ("sgc_max_epochs", e.sgc.max_epochs as f64),
            ("per_class_train", e.per_class_train as f64),
            ("hidden", c.hidden as f64),
            ("lr", c.lr),
            ("eps", c.eps),
            ("delta", c.delta),
            ("max_boxes", c.max_boxes as f64),
            ("max_counterexamples", c.max_counterexamples as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        if !(c.lambda_eq >= 0.0) {
            return Err(CliError::Usage("lambda_eq must be nonnegative".into()));
        }
        if !(e.ppr_teleport > 0.0 && e.ppr_teleport < 1.0) {
            return Err(CliError::Usage("ppr_teleport must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must be nonempty".into()));
        }
        Ok(())
    }

    /// Text form that `apply_text` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.exp;
        let c = &e.cegis;
        let mut s = String::new();
        if let Some(d) = &self.dataset {
            let _ = writeln!(s, "dataset = {}", d.display());
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let node = e.node_id.map_or("random".to_string(), |v| v.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("seeds", seeds.join(",")),
            ("pca_dim", e.pca_dim.to_string()),
            ("k_steps", e.sgc.k_steps.to_string()),
            ("sgc_lr", format!("{:?}", e.sgc.lr)),
            ("sgc_max_epochs", e.sgc.max_epochs.to_string()),
            ("sgc_patience", e.sgc.patience.to_string()),
            ("per_class_train", e.per_class_train.to_string()),
            ("val_total", e.val_total.to_string()),
            ("test_total", e.test_total.to_string()),
            ("ppr_teleport", format!("{:?}", e.ppr_teleport)),
            ("class_id", e.class_id.to_string()),
            ("node_id", node),
            ("hidden", c.hidden.to_string()),
            ("lr", format!("{:?}", c.lr)),
            ("eps", format!("{:?}", c.eps)),
            ("delta", format!("{:?}", c.delta)),
            ("lambda_eq", format!("{:?}", c.lambda_eq)),
            ("n_aug", c.n_aug.to_string()),
            ("max_rounds", c.max_rounds.to_string()),
            ("epochs_per_round", c.epochs_per_round.to_string()),
            ("loss_stop", format!("{:?}", c.loss_stop)),
            ("max_boxes", c.max_boxes.to_string()),
            ("max_counterexamples", c.max_counterexamples.to_string()),
            ("falsifier_restarts", c.falsifier_restarts.to_string()),
            ("falsifier_steps", c.falsifier_steps.to_string()),
            ("parallel_verifier", c.parallel_verifier.to_string()),
            ("record_wall_time", c.record_wall_time.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
