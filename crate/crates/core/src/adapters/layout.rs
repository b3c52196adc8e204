use crate::error::{Error, Result};

/// The LLaMA-2-7B projection layout: 32 layers of q/k/v/o/gate/up/down.
pub const LLAMA2_7B_LAYOUT: &str = include_str!("../../data/llama2-7b.layout");

/// One adapter site: a dense weight mapping `m` inputs to `n` outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub name: String,
    pub m: usize,
    pub n: usize,
}

/// Declarative list of adapter sites.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelLayout {
    pub sites: Vec<Site>,
}

impl ModelLayout {
    /// Parses `name m n` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sites = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("layout line {}: expected `name m n`, got `{raw}`", lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let m = fields[1].parse().map_err(|_| bad())?;
            let n = fields[2].parse().map_err(|_| bad())?;
            if m == 0 || n == 0 {
                return Err(bad());
            }
            sites.push(Site {
                name: fields[0].to_string(),
                m,
                n,
            });
        }
        Ok(Self { sites })
    }

    pub fn llama2_7b() -> Self {
        Self::parse(LLAMA2_7B_LAYOUT).expect("shipped layout parses")
    }

    /// Accepts `llama2-7b` for the shipped layout, otherwise a file path.
    pub fn load(spec: &str) -> Result<Self> {
        match spec {
            "llama2-7b" | "builtin:llama2-7b" => Ok(Self::llama2_7b()),
            path => Self::parse(&std::fs::read_to_string(path)?),
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}
