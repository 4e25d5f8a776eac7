//! Flag-value loading: criterion and plan arguments accept either a file
//! path or an inline JSON object (detected by a leading '{'). Criterion
//! files carry the versioned schema wrapper; inline values are the bare
//! object.

use std::path::Path;

use rerand::criteria::{CriterionFile, CriterionSpec};
use rerand::engine::RandomizationPlan;
use rerand::error::{Error, Result};

pub fn load_criterion(arg: &str) -> Result<CriterionSpec> {
    if is_inline(arg) {
        let spec: CriterionSpec = serde_json::from_str(arg)?;
        spec.validate()?;
        Ok(spec)
    } else {
        CriterionFile::load(Path::new(arg))
    }
}

pub fn load_plan(arg: &str) -> Result<RandomizationPlan> {
    if is_inline(arg) {
        Ok(serde_json::from_str(arg)?)
    } else {
        RandomizationPlan::load(Path::new(arg))
    }
}

fn is_inline(arg: &str) -> bool {
    arg.trim_start().starts_with('{')
}

pub fn parse_f64_list(flag: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|item| {
            item.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidData(format!("--{flag}: '{item}' is not a number")))
        })
        .collect()
}

pub fn parse_u32_list(flag: &str, s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|item| {
            item.trim().parse::<u32>().map_err(|_| {
                Error::InvalidData(format!("--{flag}: '{item}' is not a nonnegative integer"))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_criterion_parses_and_validates() {
        let spec = load_criterion(r#"{"kind": "mahalanobis_threshold", "alpha": 1.5}"#).unwrap();
        assert!(matches!(spec, CriterionSpec::MahalanobisThreshold(_)));
        // Negative threshold fails validation, not just parsing.
        assert!(load_criterion(r#"{"kind": "mahalanobis_threshold", "alpha": -1.0}"#).is_err());
    }

    #[test]
    fn inline_plan_parses() {
        let plan = load_plan(r#"{"kind": "complete", "treated": 5}"#).unwrap();
        assert!(matches!(plan, RandomizationPlan::Complete { treated: 5 }));
    }

    #[test]
    fn lists_parse_and_reject_junk() {
        assert_eq!(parse_f64_list("w", "1, 0.5").unwrap(), vec![1.0, 0.5]);
        assert_eq!(parse_u32_list("dofs", "2,3").unwrap(), vec![2, 3]);
        assert!(parse_f64_list("w", "1,x").is_err());
        assert!(parse_u32_list("dofs", "2,-1").is_err());
    }
}
