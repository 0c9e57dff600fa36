//! Model size strings such as `TAPAS(mini)@256` or `DoT(m→256→l)@1024`.

use anyhow::{anyhow, bail, Context, Result};
use dot_core::encoder::{count_parameters, EncoderConfig};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSize {
    /// One encoder over `input` tokens.
    Single { preset: String, input: usize },
    /// Pruning encoder over `input` tokens, task encoder over `k`.
    Dot {
        pruning: String,
        k: usize,
        task: String,
        input: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub model: String,
    pub params: u64,
    pub millions: f64,
}

pub fn parse(model: &str) -> Result<ModelSize> {
    let s = model.trim();
    let (body, input) = s.rsplit_once('@').ok_or_else(|| anyhow!("`{s}` lacks an `@input_length` suffix"))?;
    let input: usize = input.trim().parse().with_context(|| format!("bad input length in `{s}`"))?;
    let open = body.find('(').ok_or_else(|| anyhow!("`{s}` lacks `(`"))?;
    let inner = body[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| anyhow!("`{s}` lacks a closing `)`"))?;
    let kind = body[..open].trim();
    let inner = inner.replace("->", "→");
    let parts: Vec<&str> = inner.split('→').map(str::trim).collect();
    match (kind.to_ascii_lowercase().as_str(), parts.as_slice()) {
        ("tapas" | "bert", [preset]) => Ok(ModelSize::Single {
            preset: preset.to_string(),
            input,
        }),
        ("dot", [pruning, k, task]) => Ok(ModelSize::Dot {
            pruning: pruning.to_string(),
            k: k.parse().with_context(|| format!("bad k in `{s}`"))?,
            task: task.to_string(),
            input,
        }),
        _ => bail!("unrecognized model string `{s}`"),
    }
}

/// Parameter count under `formula`; a DoT model sums both stages.
pub fn count_with(size: &ModelSize, formula: impl Fn(&EncoderConfig, usize) -> Result<u64>) -> Result<u64> {
    match size {
        ModelSize::Single { preset, input } => formula(&EncoderConfig::preset(preset)?, *input),
        ModelSize::Dot { pruning, k, task, input } => {
            if k > input {
                bail!("k {k} exceeds the input length {input}");
            }
            Ok(formula(&EncoderConfig::preset(pruning)?, *input)? + formula(&EncoderConfig::preset(task)?, *k)?)
        }
    }
}

pub fn count(size: &ModelSize) -> Result<u64> {
    count_with(size, |c, i| Ok(count_parameters(c, i)?))
}

pub fn table(specs: &[String]) -> Result<Vec<SizeRow>> {
    specs
        .iter()
        .map(|s| {
            let params = count(&parse(s)?)?;
            Ok(SizeRow {
                model: s.clone(),
                params,
                millions: params as f64 / 1e6,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_arrow_spellings() {
        let a = parse("DoT(m→256→l)@1024").unwrap();
        let b = parse("DoT(m->256->l)@1024").unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            ModelSize::Dot {
                pruning: "m".into(),
                k: 256,
                task: "l".into(),
                input: 1024
            }
        );
        assert!(parse("TAPAS(mini)").is_err());
        assert!(parse("DoT(m→l)@64").is_err());
        assert!(parse("Foo(m)@64").is_err());
    }

    #[test]
    fn reference_counts() {
        let c = |s: &str| count(&parse(s).unwrap()).unwrap();
        assert_eq!(c("TAPAS(mini)@256"), 11_105_280);
        assert_eq!(c("TAPAS(l)@512"), 272_670_208);
        assert_eq!(c("DoT(m→256→l)@1024"), c("TAPAS(m)@1024") + c("TAPAS(l)@256"));
        assert_eq!(c("DoT(m→256→l)@1024"), 299_880_192);
        assert!(count(&parse("DoT(m→2048→l)@1024").unwrap()).is_err());
    }
}
