//! Evaluator bundle files: versioned JSON with a byte-stable encoding.

use std::path::Path;

use thiserror::Error;

use crate::learners::EvaluatorBundle;
use crate::train::BUNDLE_VERSION;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("bundle version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> BundleError {
    BundleError::Parse { offset: byte_offset(text, e.line(), e.column()), message: e.to_string() }
}

pub fn bundle_to_string(bundle: &EvaluatorBundle) -> String {
    serde_json::to_string_pretty(bundle).expect("bundle serializes") + "\n"
}

/// Parses a bundle, checking the version tag before the body.
pub fn bundle_from_str(text: &str) -> Result<EvaluatorBundle, BundleError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("").to_string();
    if found != BUNDLE_VERSION {
        return Err(BundleError::Version { found, expected: BUNDLE_VERSION.to_string() });
    }
    // Re-parse from text so error offsets refer to the file.
    serde_json::from_str(text).map_err(|e| parse_error(text, e))
}

pub fn save_bundle(bundle: &EvaluatorBundle, path: &Path) -> Result<(), BundleError> {
    std::fs::write(path, bundle_to_string(bundle)).map_err(|source| BundleError::Io { path: path.display().to_string(), source })
}

pub fn load_bundle(path: &Path) -> Result<EvaluatorBundle, BundleError> {
    let text = std::fs::read_to_string(path).map_err(|source| BundleError::Io { path: path.display().to_string(), source })?;
    bundle_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_count_bytes_across_lines() {
        let text = "ab\ncde\nf";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 9), text.len());
    }

    #[test]
    fn corrupt_and_foreign_inputs_are_rejected() {
        let e = bundle_from_str("{\"version\": \"v1\", ").unwrap_err();
        assert!(matches!(e, BundleError::Parse { offset, .. } if offset == 17), "{e}");
        let e = bundle_from_str("{\"version\": \"v0\"}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("v0") && msg.contains("v1"), "{msg}");
        assert!(matches!(bundle_from_str("{\"version\": \"v1\"}"), Err(BundleError::Parse { .. })));
        assert!(matches!(load_bundle(Path::new("/nonexistent/b.json")), Err(BundleError::Io { .. })));
    }
}
