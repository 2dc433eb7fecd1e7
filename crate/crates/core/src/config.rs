//! Campaign configuration, read from a small YAML document:
//!
//! ```yaml
//! Seed: 1000
//! ScalarFaultType: bitFlip-element
//! TensorFaultType: bitFlip-element
//! Ops:
//!   - ALL = 1.0
//! SkipCount: 1
//! InjectMode: "errorRate"
//! ```
//!
//! `Ops` entries may also be written as one-key maps (`- MatMul: 0.5`).

use std::fmt;
use std::str::FromStr;

use serde_yaml::Value;
use thiserror::Error;

use crate::graph::OpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultType {
    None,
    Zero,
    Rand,
    RandElement,
    BitFlipElement,
    BitFlipTensor,
}

impl FaultType {
    pub const ALL: [FaultType; 6] = [
        FaultType::None,
        FaultType::Zero,
        FaultType::Rand,
        FaultType::RandElement,
        FaultType::BitFlipElement,
        FaultType::BitFlipTensor,
    ];

    /// Canonical config spelling.
    pub fn name(self) -> &'static str {
        match self {
            FaultType::None => "None",
            FaultType::Zero => "Zero",
            FaultType::Rand => "Rand",
            FaultType::RandElement => "Rand-element",
            FaultType::BitFlipElement => "bitFlip-element",
            FaultType::BitFlipTensor => "bitFlip-tensor",
        }
    }
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Lowercase with `-`, `_` and spaces removed.
fn fold(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for FaultType {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = fold(s);
        FaultType::ALL
            .into_iter()
            .find(|t| fold(t.name()) == key)
            .ok_or_else(|| ConfigError::UnknownFaultType(s.to_string()))
    }
}

/// Serialized by config spelling.
impl serde::Serialize for FaultType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for FaultType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InjectMode {
    ErrorRate,
    DynamicInstance,
    OneFaultPerRun,
}

impl InjectMode {
    pub const ALL: [InjectMode; 3] = [
        InjectMode::ErrorRate,
        InjectMode::DynamicInstance,
        InjectMode::OneFaultPerRun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectMode::ErrorRate => "errorRate",
            InjectMode::DynamicInstance => "dynamicInstance",
            InjectMode::OneFaultPerRun => "oneFaultPerRun",
        }
    }
}

impl fmt::Display for InjectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for InjectMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = fold(s);
        InjectMode::ALL
            .into_iter()
            .find(|m| fold(m.name()) == key)
            .ok_or_else(|| ConfigError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpSelector {
    All,
    Kind(OpKind),
}

impl fmt::Display for OpSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpSelector::All => f.write_str("ALL"),
            OpSelector::Kind(k) => f.write_str(k.name()),
        }
    }
}

impl FromStr for OpSelector {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(OpSelector::All);
        }
        s.parse::<OpKind>()
            .map(OpSelector::Kind)
            .map_err(|_| ConfigError::UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpRate {
    pub selector: OpSelector,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("YAML syntax: {0}")]
    Syntax(String),
    #[error("config must be a mapping of keys to values")]
    NotAMapping,
    #[error("unknown key {0:?} (expected Seed, ScalarFaultType, TensorFaultType, Ops, SkipCount, InjectMode)")]
    UnknownKey(String),
    #[error("{key}: expected {expected}")]
    WrongType { key: &'static str, expected: &'static str },
    #[error("unknown fault type {0:?}")]
    UnknownFaultType(String),
    #[error("unknown inject mode {0:?}")]
    UnknownMode(String),
    #[error("unknown operator {0:?} in Ops")]
    UnknownOp(String),
    #[error("Ops entry {0:?}: expected \"<op> = <probability>\"")]
    BadOpEntry(String),
    #[error("Ops {selector}: probability {value} outside [0, 1]")]
    ProbabilityRange { selector: String, value: f64 },
    #[error("Ops {0}: listed more than once")]
    DuplicateSelector(String),
    #[error("Ops: ALL cannot be combined with per-operator entries")]
    AllWithPerOp,
    #[error("SkipCount must be a non-negative integer, got {0}")]
    NegativeSkipCount(String),
    #[error("Seed must be a non-negative integer, got {0}")]
    BadSeed(String),
    #[error("InjectMode is required")]
    MissingMode,
    #[error("per-operator probabilities are only defined in errorRate mode (mode is {0})")]
    WrongMode(InjectMode),
}

/// Every problem found in one document.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<ConfigError>);

#[derive(Debug, Clone, PartialEq)]
pub struct FIConfig {
    /// `None` means the campaign draws a seed from entropy and logs it.
    pub seed: Option<u64>,
    /// Used for rank-0 outputs.
    pub scalar_fault_type: FaultType,
    /// Used for outputs of rank 1 and above.
    pub tensor_fault_type: FaultType,
    pub mode: InjectMode,
    pub ops: Vec<OpRate>,
    /// Invocations of each node skipped at the start of every run.
    pub skip_count: u64,
}

impl FIConfig {
    /// Defaults for everything but the mode.
    pub fn new(mode: InjectMode) -> Self {
        FIConfig {
            seed: None,
            scalar_fault_type: FaultType::None,
            tensor_fault_type: FaultType::None,
            mode,
            ops: Vec::new(),
            skip_count: 0,
        }
    }

    /// Same fault type for scalars and tensors.
    pub fn with_fault(mut self, fault: FaultType) -> Self {
        self.scalar_fault_type = fault;
        self.tensor_fault_type = fault;
        self
    }

    pub fn with_ops(mut self, ops: &[(OpSelector, f64)]) -> Self {
        self.ops = ops
            .iter()
            .map(|&(selector, probability)| OpRate {
                selector,
                probability,
            })
            .collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn fault_for_rank(&self, rank: usize) -> FaultType {
        if rank == 0 {
            self.scalar_fault_type
        } else {
            self.tensor_fault_type
        }
    }

    /// Per-kind probability, else the ALL probability, else 0.
    pub fn effective_probability(&self, kind: OpKind) -> Result<f64, ConfigError> {
        if self.mode != InjectMode::ErrorRate {
            return Err(ConfigError::WrongMode(self.mode));
        }
        let find = |sel| self.ops.iter().find(|r| r.selector == sel);
        Ok(find(OpSelector::Kind(kind))
            .or_else(|| find(OpSelector::All))
            .map_or(0.0, |r| r.probability))
    }

    /// Non-fatal remarks about the document.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.mode != InjectMode::ErrorRate && !self.ops.is_empty() {
            w.push(format!(
                "Ops probabilities are ignored in {} mode",
                self.mode
            ));
        }
        if self.mode == InjectMode::ErrorRate && self.ops.is_empty() {
            w.push("errorRate mode with no Ops entries never injects".to_string());
        }
        w
    }

    /// Render back to the YAML schema accepted by [`parse_config`].
    pub fn to_yaml(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            s.push_str(&format!("Seed: {seed}\n"));
        }
        s.push_str(&format!("ScalarFaultType: {}\n", self.scalar_fault_type));
        s.push_str(&format!("TensorFaultType: {}\n", self.tensor_fault_type));
        if self.ops.is_empty() {
            s.push_str("Ops: []\n");
        } else {
            s.push_str("Ops:\n");
            for r in &self.ops {
                s.push_str(&format!("  - {} = {:?}\n", r.selector, r.probability));
            }
        }
        s.push_str(&format!("SkipCount: {}\n", self.skip_count));
        s.push_str(&format!("InjectMode: \"{}\"\n", self.mode));
        s
    }
}

const KEYS: [&str; 6] = [
    "Seed",
    "ScalarFaultType",
    "TensorFaultType",
    "Ops",
    "SkipCount",
    "InjectMode",
];

fn yaml_scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Null => "null".into(),
        other => serde_yaml::to_string(other)
            .unwrap_or_default()
            .trim()
            .to_string(),
    }
}

fn parse_fault(key: &'static str, v: &Value, errs: &mut Vec<ConfigError>) -> FaultType {
    match v {
        Value::String(s) => s.parse().unwrap_or_else(|e| {
            errs.push(e);
            FaultType::None
        }),
        // `None` written bare is YAML null.
        Value::Null => FaultType::None,
        _ => {
            errs.push(ConfigError::WrongType {
                key,
                expected: "a fault type name",
            });
            FaultType::None
        }
    }
}

fn parse_op_entry(v: &Value) -> Result<(OpSelector, f64), ConfigError> {
    let (sel, prob): (String, Result<f64, String>) = match v {
        Value::String(s) => {
            let Some((k, p)) = s.split_once('=') else {
                return Err(ConfigError::BadOpEntry(s.clone()));
            };
            let p = p.trim();
            (k.trim().to_string(), p.parse::<f64>().map_err(|_| s.clone()))
        }
        Value::Mapping(m) if m.len() == 1 => {
            let (k, p) = m.iter().next().unwrap();
            let k = yaml_scalar_text(k);
            let p = p.as_f64().ok_or_else(|| format!("{k}: {}", yaml_scalar_text(p)));
            (k, p)
        }
        other => return Err(ConfigError::BadOpEntry(yaml_scalar_text(other))),
    };
    let selector: OpSelector = sel.parse()?;
    let p = prob.map_err(ConfigError::BadOpEntry)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(ConfigError::ProbabilityRange {
            selector: selector.to_string(),
            value: p,
        });
    }
    Ok((selector, p))
}

/// Parse and validate a config document. All problems are reported together.
pub fn parse_config(text: &str) -> Result<FIConfig, ConfigErrors> {
    let fail = |e| ConfigErrors(vec![e]);
    let doc: Value =
        serde_yaml::from_str(text).map_err(|e| fail(ConfigError::Syntax(e.to_string())))?;
    let map = match doc {
        Value::Mapping(m) => m,
        Value::Null => serde_yaml::Mapping::new(),
        _ => return Err(fail(ConfigError::NotAMapping)),
    };

    let mut errs = Vec::new();
    let mut cfg = FIConfig::new(InjectMode::ErrorRate);
    let mut mode = None;

    for (k, v) in &map {
        let key = yaml_scalar_text(k);
        match KEYS.iter().find(|&&known| known == key) {
            Some(&"Seed") => match v {
                Value::Number(n) if n.as_u64().is_some() => cfg.seed = n.as_u64(),
                Value::Null => {}
                other => errs.push(ConfigError::BadSeed(yaml_scalar_text(other))),
            },
            Some(&"ScalarFaultType") => {
                cfg.scalar_fault_type = parse_fault("ScalarFaultType", v, &mut errs)
            }
            Some(&"TensorFaultType") => {
                cfg.tensor_fault_type = parse_fault("TensorFaultType", v, &mut errs)
            }
            Some(&"SkipCount") => match v {
                Value::Number(n) if n.as_u64().is_some() => {
                    cfg.skip_count = n.as_u64().unwrap()
                }
                other => errs.push(ConfigError::NegativeSkipCount(yaml_scalar_text(other))),
            },
            Some(&"InjectMode") => match v {
                Value::String(s) => match s.parse() {
                    Ok(m) => mode = Some(m),
                    Err(e) => errs.push(e),
                },
                _ => errs.push(ConfigError::WrongType {
                    key: "InjectMode",
                    expected: "a mode name",
                }),
            },
            Some(&"Ops") => match v {
                Value::Sequence(seq) => {
                    for entry in seq {
                        match parse_op_entry(entry) {
                            Ok((selector, probability)) => {
                                if cfg.ops.iter().any(|r| r.selector == selector) {
                                    errs.push(ConfigError::DuplicateSelector(selector.to_string()));
                                } else {
                                    cfg.ops.push(OpRate {
                                        selector,
                                        probability,
                                    });
                                }
                            }
                            Err(e) => errs.push(e),
                        }
                    }
                }
                Value::Null => {}
                _ => errs.push(ConfigError::WrongType {
                    key: "Ops",
                    expected: "a list of \"<op> = <probability>\" entries",
                }),
            },
            _ => errs.push(ConfigError::UnknownKey(key)),
        }
    }

    let has_all = cfg.ops.iter().any(|r| r.selector == OpSelector::All);
    if has_all && cfg.ops.len() > 1 {
        errs.push(ConfigError::AllWithPerOp);
    }
    match mode {
        Some(m) => cfg.mode = m,
        None => errs.push(ConfigError::MissingMode),
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_spellings_fold_case() {
        for s in ["bitFlip-element", "bitflip-Element", "BITFLIP_ELEMENT", "BitFlipElement"] {
            assert_eq!(s.parse::<FaultType>().unwrap(), FaultType::BitFlipElement);
        }
        assert_eq!("rand-element".parse::<FaultType>().unwrap(), FaultType::RandElement);
        assert!("bitflip-word".parse::<FaultType>().is_err());
        for t in FaultType::ALL {
            assert_eq!(t.name().parse::<FaultType>().unwrap(), t);
        }
    }

    #[test]
    fn probability_out_of_range() {
        let err = parse_config("InjectMode: errorRate\nOps:\n  - ALL = 1.5\n").unwrap_err();
        assert!(matches!(err.0[0], ConfigError::ProbabilityRange { value, .. } if value == 1.5));
    }

    #[test]
    fn empty_document_needs_mode() {
        assert_eq!(parse_config("").unwrap_err().0, vec![ConfigError::MissingMode]);
    }

    #[test]
    fn all_errors_reported_together() {
        let err = parse_config("SkipCount: -1\nFoo: 2\nOps:\n  - MatMul = 0.1\n  - matmul = 0.2\n")
            .unwrap_err();
        assert_eq!(err.0.len(), 4, "{err}");
        assert!(err.0.contains(&ConfigError::UnknownKey("Foo".into())));
        assert!(err.0.contains(&ConfigError::DuplicateSelector("MatMul".into())));
    }

    #[test]
    fn all_mixed_with_kinds_rejected() {
        let err = parse_config("InjectMode: errorRate\nOps:\n  - ALL = 0.1\n  - ReLU: 0.2\n")
            .unwrap_err();
        assert_eq!(err.0, vec![ConfigError::AllWithPerOp]);
    }

    #[test]
    fn effective_probability_lookup() {
        let cfg = FIConfig::new(InjectMode::ErrorRate).with_ops(&[(OpSelector::All, 0.3)]);
        assert_eq!(cfg.effective_probability(OpKind::Conv2D).unwrap(), 0.3);
        let cfg = FIConfig::new(InjectMode::ErrorRate)
            .with_ops(&[(OpSelector::Kind(OpKind::MatMul), 0.5)]);
        assert_eq!(cfg.effective_probability(OpKind::Add).unwrap(), 0.0);
        assert_eq!(cfg.effective_probability(OpKind::MatMul).unwrap(), 0.5);
        let cfg = FIConfig::new(InjectMode::OneFaultPerRun);
        assert_eq!(
            cfg.effective_probability(OpKind::Add),
            Err(ConfigError::WrongMode(InjectMode::OneFaultPerRun))
        );
    }

    #[test]
    fn ignored_probabilities_warn() {
        let cfg = parse_config("InjectMode: oneFaultPerRun\nOps:\n  - ALL = 1.0\n").unwrap();
        assert_eq!(cfg.warnings().len(), 1);
    }

    #[test]
    fn bare_none_is_null() {
        let cfg = parse_config("InjectMode: errorRate\nScalarFaultType: None\nTensorFaultType:\n")
            .unwrap();
        assert_eq!(cfg.scalar_fault_type, FaultType::None);
        assert_eq!(cfg.tensor_fault_type, FaultType::None);
    }
}
