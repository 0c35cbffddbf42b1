//! Constraint benchmarks: named lists of per-domain replication ranges.
//!
//! Config format, one record per line (`#` starts a comment line):
//!
//! ```text
//! benchmark = "critical"
//! description = "critical domain: shopping" domain = shopping min_replication = 0.995 max_replication = 1
//! description = "everything else" domain = DEFAULT min_replication = 0.99 max_replication = 1
//! ```
//!
//! Values are bare tokens or double-quoted strings (`\"` and `\\` escapes).
//! The bare `DEFAULT` domain applies to every domain without its own record.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};

/// Replication bounds `[c_min, c_max]` for one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bounds {
    pub c_min: f64,
    pub c_max: f64,
}

impl Bounds {
    pub const UNCONSTRAINED: Bounds = Bounds {
        c_min: 0.0,
        c_max: 1.0,
    };

    pub fn new(c_min: f64, c_max: f64) -> Result<Self> {
        let ok = c_min.is_finite() && c_max.is_finite() && 0.0 <= c_min && c_min <= c_max && c_max <= 1.0;
        if !ok {
            return Err(Error::config(format!(
                "replication bounds must satisfy 0 <= c_min <= c_max <= 1, got [{c_min}, {c_max}]"
            )));
        }
        Ok(Self { c_min, c_max })
    }

    /// Strict exterior: boundary values are feasible.
    pub fn violated_by(&self, replication: f64) -> bool {
        replication < self.c_min || replication > self.c_max
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Scope {
    Domain(String),
    Default,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConstraintSpec {
    pub description: String,
    pub scope: Scope,
    pub bounds: Bounds,
}

impl ConstraintSpec {
    fn label(&self) -> String {
        match &self.scope {
            Scope::Domain(d) => d.clone(),
            Scope::Default => "DEFAULT".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConstraintBenchmark {
    name: String,
    specs: Vec<ConstraintSpec>,
}

/// Lower-cases a domain name; domain identifiers are case-insensitive.
pub fn normalize_domain(name: &str) -> String {
    name.trim().to_ascii_lowercase()
}

fn valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl ConstraintBenchmark {
    pub fn new(name: impl Into<String>, specs: Vec<ConstraintSpec>) -> Result<Self> {
        let name = name.into();
        let mut seen: Vec<&Scope> = Vec::new();
        for spec in &specs {
            if let Scope::Domain(d) = &spec.scope {
                if !valid_identifier(d) || *d != normalize_domain(d) {
                    return Err(Error::Validation {
                        spec: spec.label(),
                        msg: "domain must be a lower-case identifier".into(),
                    });
                }
            }
            if Bounds::new(spec.bounds.c_min, spec.bounds.c_max).is_err() {
                return Err(Error::Validation {
                    spec: spec.label(),
                    msg: format!(
                        "invalid replication range [{}, {}]",
                        spec.bounds.c_min, spec.bounds.c_max
                    ),
                });
            }
            if seen.contains(&&spec.scope) {
                return Err(Error::Validation {
                    spec: spec.label(),
                    msg: "duplicate constraint for this scope".into(),
                });
            }
            seen.push(&spec.scope);
        }
        Ok(Self { name, specs })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[ConstraintSpec] {
        &self.specs
    }

    /// Exact domain match, then the DEFAULT spec, then `[0, 1]`.
    pub fn resolve(&self, domain: &str) -> Bounds {
        let key = normalize_domain(domain);
        let mut fallback = Bounds::UNCONSTRAINED;
        for spec in &self.specs {
            match &spec.scope {
                Scope::Domain(d) if *d == key => return spec.bounds,
                Scope::Default => fallback = spec.bounds,
                _ => {}
            }
        }
        fallback
    }

    /// Bounds for each domain of a dataset, indexed by domain id.
    pub fn resolve_all<S: AsRef<str>>(&self, domains: &[S]) -> DomainBounds {
        DomainBounds(domains.iter().map(|d| self.resolve(d.as_ref())).collect())
    }

    /// Config-file text; `parse_benchmark(&b.to_text()) == Ok(b)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "benchmark = {}", quote(&self.name));
        for spec in &self.specs {
            let domain = match &spec.scope {
                Scope::Domain(d) => quote(d),
                Scope::Default => "DEFAULT".into(),
            };
            let _ = writeln!(
                out,
                "description = {} domain = {} min_replication = {:?} max_replication = {:?}",
                quote(&spec.description),
                domain,
                spec.bounds.c_min,
                spec.bounds.c_max
            );
        }
        out
    }
}

/// Per-domain bounds indexed by domain id.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBounds(pub Vec<Bounds>);

impl DomainBounds {
    pub fn unconstrained(num_domains: usize) -> Self {
        Self(alloc::vec![Bounds::UNCONSTRAINED; num_domains])
    }

    pub fn uniform(num_domains: usize, bounds: Bounds) -> Self {
        Self(alloc::vec![bounds; num_domains])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, domain: usize) -> Bounds {
        self.0[domain]
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

#[derive(Debug, PartialEq)]
enum Value {
    Bare(String),
    Quoted(String),
}

impl Value {
    fn text(&self) -> &str {
        match self {
            Value::Bare(s) | Value::Quoted(s) => s,
        }
    }
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<(String, Value)>> {
    let err = |msg: &str| Error::Parse {
        line: lineno,
        msg: msg.into(),
    };
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                key.push(c);
                chars.next();
            } else {
                break;
            }
        }
        if key.is_empty() {
            return Err(err("expected a key"));
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.next() != Some('=') {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `=` after `{key}`"),
            });
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let value = if chars.peek() == Some(&'"') {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some('\\') => match chars.next() {
                        Some(c @ ('"' | '\\')) => s.push(c),
                        _ => return Err(err("invalid escape in quoted string")),
                    },
                    Some('"') => break,
                    Some(c) => s.push(c),
                    None => return Err(err("unterminated quoted string")),
                }
            }
            Value::Quoted(s)
        } else {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                s.push(c);
                chars.next();
            }
            if s.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("missing value for `{key}`"),
                });
            }
            Value::Bare(s)
        };
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate key `{key}`"),
            });
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Parses and validates a benchmark config.
pub fn parse_benchmark(source: &str) -> Result<ConstraintBenchmark> {
    let mut name: Option<String> = None;
    let mut specs = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = tokenize(line, lineno)?;
        if fields.len() == 1 && fields[0].0 == "benchmark" {
            if name.is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "benchmark name given twice".into(),
                });
            }
            name = Some(fields[0].1.text().to_string());
            continue;
        }
        let mut description = None;
        let mut domain = None;
        let mut lo = None;
        let mut hi = None;
        for (key, value) in fields {
            let number = |v: &Value| {
                v.text().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("`{key}` is not a number: {}", v.text()),
                })
            };
            match key.as_str() {
                "description" => description = Some(value.text().to_string()),
                "domain" => {
                    domain = Some(match &value {
                        Value::Bare(s) | Value::Quoted(s) if s == "DEFAULT" => Scope::Default,
                        v => Scope::Domain(normalize_domain(v.text())),
                    })
                }
                "min_replication" => lo = Some(number(&value)?),
                "max_replication" => hi = Some(number(&value)?),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        let missing = |k: &str| Error::Parse {
            line: lineno,
            msg: format!("missing `{k}`"),
        };
        specs.push(ConstraintSpec {
            description: description.ok_or_else(|| missing("description"))?,
            scope: domain.ok_or_else(|| missing("domain"))?,
            bounds: Bounds {
                c_min: lo.ok_or_else(|| missing("min_replication"))?,
                c_max: hi.ok_or_else(|| missing("max_replication"))?,
            },
        });
    }
    ConstraintBenchmark::new(name.unwrap_or_default(), specs)
}

const GLOBAL: &str = include_str!("../benchmarks/global");
const CRITICAL: &str = include_str!("../benchmarks/critical");
const EXPLORE: &str = include_str!("../benchmarks/explore");

/// The shipped `global`, `critical` and `explore` benchmarks.
pub fn builtin_benchmarks() -> Vec<ConstraintBenchmark> {
    [GLOBAL, CRITICAL, EXPLORE]
        .iter()
        .map(|src| parse_benchmark(src).expect("shipped benchmark parses"))
        .collect()
}

pub fn builtin_benchmark(name: &str) -> Option<ConstraintBenchmark> {
    builtin_benchmarks().into_iter().find(|b| b.name() == name)
}

/// Source text of a shipped benchmark.
pub fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "global" => Some(GLOBAL),
        "critical" => Some(CRITICAL),
        "explore" => Some(EXPLORE),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_spec_list_is_unconstrained() {
        let b = parse_benchmark("benchmark = \"none\"\n").unwrap();
        assert!(b.specs().is_empty());
        assert_eq!(b.resolve("music"), Bounds::UNCONSTRAINED);
        assert!(parse_benchmark("").unwrap().specs().is_empty());
    }

    #[test]
    fn duplicate_domain_rejected() {
        let src = "description = a domain = music min_replication = 0.5 max_replication = 1\n\
                   description = b domain = Music min_replication = 0.6 max_replication = 1\n";
        match parse_benchmark(src) {
            Err(Error::Validation { spec, .. }) => assert_eq!(spec, "music"),
            other => panic!("{other:?}"),
        }
        let src = "description = a domain = DEFAULT min_replication = 0.5 max_replication = 1\n\
                   description = b domain = DEFAULT min_replication = 0.6 max_replication = 1\n";
        assert!(matches!(parse_benchmark(src), Err(Error::Validation { .. })));
    }

    #[test]
    fn invalid_range_rejected() {
        let src = "description = x domain = music min_replication = 0.9 max_replication = 0.8";
        assert!(matches!(parse_benchmark(src), Err(Error::Validation { spec, .. }) if spec == "music"));
        let src = "description = x domain = music min_replication = -0.1 max_replication = 0.8";
        assert!(parse_benchmark(src).is_err());
        let src = "description = x domain = music min_replication = 0.1 max_replication = 1.5";
        assert!(parse_benchmark(src).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let src = "# header\nbenchmark = x\ndescription = \"unterminated domain = a\n";
        assert_eq!(
            parse_benchmark(src).unwrap_err(),
            Error::Parse {
                line: 3,
                msg: "unterminated quoted string".into()
            }
        );
        let src = "\n\ndescription = a domain = b min_replication = zero max_replication = 1";
        assert!(matches!(parse_benchmark(src), Err(Error::Parse { line: 3, .. })));
        let src = "description = a domain = b max_replication = 1";
        assert!(matches!(parse_benchmark(src), Err(Error::Parse { line: 1, msg }) if msg.contains("min_replication")));
        let src = "description = a colour = b";
        assert!(matches!(parse_benchmark(src), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn builtin_values() {
        let all = builtin_benchmarks();
        assert_eq!(
            all.iter().map(|b| b.name()).collect::<Vec<_>>(),
            vec!["global", "critical", "explore"]
        );
        let global = &all[0];
        assert_eq!(global.specs().len(), 1);
        assert_eq!(global.specs()[0].scope, Scope::Default);
        assert_eq!(global.specs()[0].bounds, Bounds { c_min: 0.99, c_max: 1.0 });

        let critical = &all[1];
        for d in ["home_automation", "shopping", "notifications"] {
            assert_eq!(critical.resolve(d), Bounds { c_min: 0.995, c_max: 1.0 });
        }
        assert_eq!(critical.resolve("music"), Bounds { c_min: 0.99, c_max: 1.0 });

        let explore = &all[2];
        for spec in critical.specs() {
            assert!(explore.specs().contains(spec));
        }
        for d in ["knowledge", "music"] {
            assert_eq!(explore.resolve(d).c_max, 0.95);
        }
        assert_eq!(explore.resolve("Shopping"), Bounds { c_min: 0.995, c_max: 1.0 });
    }

    #[test]
    fn resolve_fallbacks() {
        let b = ConstraintBenchmark::new(
            "t",
            vec![ConstraintSpec {
                description: "only music".into(),
                scope: Scope::Domain("music".into()),
                bounds: Bounds { c_min: 0.5, c_max: 0.9 },
            }],
        )
        .unwrap();
        assert_eq!(b.resolve("weather"), Bounds::UNCONSTRAINED);
        assert_eq!(b.resolve("MUSIC"), Bounds { c_min: 0.5, c_max: 0.9 });
        let all = b.resolve_all(&["weather", "music"]);
        assert_eq!(all.get(1), Bounds { c_min: 0.5, c_max: 0.9 });
    }

    #[test]
    fn quoted_values_roundtrip() {
        let b = ConstraintBenchmark::new(
            "quote \"test\"",
            vec![ConstraintSpec {
                description: "back\\slash and \"quotes\"".into(),
                scope: Scope::Default,
                bounds: Bounds { c_min: 0.1, c_max: 0.30000000000000004 },
            }],
        )
        .unwrap();
        assert_eq!(parse_benchmark(&b.to_text()).unwrap(), b);
    }
}
