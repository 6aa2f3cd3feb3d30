//! Config files on disk: load with overrides, echo the resolved result.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use udfa_core::config::parse_config;
use udfa_core::RunConfig;

use crate::{Result, UdfaError};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Reads `path`, applies `key=value` overrides in order, fills defaults and validates.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| UdfaError::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the fully resolved config into `dir` and returns its path.
pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| UdfaError::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| UdfaError::io(&path, e))?;
    Ok(path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the serialized, resolved config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.resolve();
    sha256_hex(cfg.to_text().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_echo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "num_stages = 2\nseed = 9\n").unwrap();
        let cfg = load_config(&p, &["embed_dim=384".into(), "mhca_heads=6".into()]).unwrap();
        assert_eq!(cfg.model.num_stages, 2);
        assert_eq!(cfg.model.embed_dim, 384);
        let echoed = write_resolved(&cfg, &dir.path().join("out")).unwrap();
        let again = load_config(&echoed, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(config_hash(&again), config_hash(&cfg));
    }

    #[test]
    fn constraint_violation_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        fs::write(&p, "num_stages = 5\n").unwrap();
        let err = load_config(&p, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("L mod N != 0"), "{err}");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
