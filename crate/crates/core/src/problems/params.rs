//! Flat `key=value` parameter override files.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key '{key}' (known: {known})")]
    UnknownKey {
        line: usize,
        key: String,
        known: String,
    },
    #[error("line {line}: '{value}' is not a number")]
    BadValue { line: usize, value: String },
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

/// A parameter set addressable by key.
pub trait Params: Sized {
    fn keys() -> &'static [&'static str];
    fn get(&self, key: &str) -> Option<f64>;
    fn set(&mut self, key: &str, value: f64) -> bool;
    fn validate(&self) -> Result<(), ParamError>;

    /// Applies every assignment in `text`, then validates.
    fn with_overrides(mut self, text: &str) -> Result<Self, ParamError> {
        for (line, key, value) in parse_overrides(text)? {
            if !self.set(&key, value) {
                return Err(ParamError::UnknownKey {
                    line,
                    key,
                    known: Self::keys().join(", "),
                });
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// `key=value` lines for every parameter.
    fn to_text(&self) -> String {
        Self::keys()
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

/// `(line, key, value)` triples; blank lines and `#` comments skipped.
pub fn parse_overrides(text: &str) -> Result<Vec<(usize, String, f64)>, ParamError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ParamError::Syntax {
                line,
                text: raw.to_string(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ParamError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        let v: f64 = value
            .parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| ParamError::BadValue {
                line,
                value: value.to_string(),
            })?;
        out.push((line, key.to_string(), v));
    }
    Ok(out)
}

macro_rules! param_struct {
    ($(#[$m:meta])* $name:ident { $($field:ident : $key:literal = $default:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name {
            $(pub $field: f64,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl $name {
            const KEYS: &'static [&'static str] = &[$($key),*];

            fn get_field(&self, key: &str) -> Option<f64> {
                match key {
                    $($key => Some(self.$field),)*
                    _ => None,
                }
            }

            fn set_field(&mut self, key: &str, value: f64) -> bool {
                match key {
                    $($key => { self.$field = value; true })*
                    _ => false,
                }
            }
        }
    };
}

pub(crate) use param_struct;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let v = parse_overrides("# header\n rho = 0.02 \n\nx_max=3.0 # trailing\n").unwrap();
        assert_eq!(v, vec![(2, "rho".into(), 0.02), (4, "x_max".into(), 3.0)]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            parse_overrides("rho"),
            Err(ParamError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_overrides("rho=abc"),
            Err(ParamError::BadValue { .. })
        ));
        assert!(matches!(
            parse_overrides("=1"),
            Err(ParamError::Syntax { .. })
        ));
        assert!(matches!(
            parse_overrides("rho=inf"),
            Err(ParamError::BadValue { .. })
        ));
    }
}
