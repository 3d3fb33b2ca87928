//! Versioned single-file JSON records shared by domains, ratio models,
//! checkpoints and manifests.
//!
//! Every record is an object with `format_version`, `kind` and `body`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a, B> {
    format_version: u32,
    kind: &'a str,
    body: &'a B,
}

#[derive(Deserialize)]
struct EnvelopeIn<B> {
    format_version: u32,
    kind: String,
    body: B,
}

pub fn to_versioned_string<B: Serialize>(kind: &str, body: &B) -> Result<String> {
    let env = EnvelopeOut {
        format_version: FORMAT_VERSION,
        kind,
        body,
    };
    let mut s = serde_json::to_string_pretty(&env).map_err(|e| Error::Json {
        context: kind.to_string(),
        source: e,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn from_versioned_str<B: DeserializeOwned>(text: &str, kind: &str) -> Result<B> {
    let env: EnvelopeIn<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Json {
        context: kind.to_string(),
        source: e,
    })?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: env.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if env.kind != kind {
        return Err(Error::invalid(format!("expected a `{kind}` record, found `{}`", env.kind)));
    }
    serde_json::from_value(env.body).map_err(|e| Error::Json {
        context: kind.to_string(),
        source: e,
    })
}

pub fn write_versioned<B: Serialize>(path: impl AsRef<Path>, kind: &str, body: &B) -> Result<()> {
    let path = path.as_ref();
    let text = to_versioned_string(kind, body)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_versioned<B: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<B> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_versioned_str(&text, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_version_and_kind() {
        let s = to_versioned_string("thing", &vec![1.5_f64, 2.0]).unwrap();
        let v: Vec<f64> = from_versioned_str(&s, "thing").unwrap();
        assert_eq!(v, vec![1.5, 2.0]);
        assert!(from_versioned_str::<Vec<f64>>(&s, "other").is_err());
        let bumped = s.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(
            from_versioned_str::<Vec<f64>>(&bumped, "thing"),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }
}
