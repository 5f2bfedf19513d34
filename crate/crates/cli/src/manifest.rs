//! Run manifests written next to every output.

use std::path::{Path, PathBuf};

use rbo_core::digest::sha256_hex;
use rbo_core::kv;

use crate::exit::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_VERSION: &str = "rbo-manifest-1";

/// Echo of what a command ran with. The digest covers the resolved config
/// and every input file, so two runs with equal digests saw equal inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Resolved `key = value` config text.
    pub config: String,
    pub input_digest: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        seed: Option<u64>,
        out_dir: &Path,
        config: String,
        inputs: &[&[u8]],
    ) -> Self {
        let mut all = config.as_bytes().to_vec();
        for i in inputs {
            all.extend_from_slice(&(i.len() as u64).to_le_bytes());
            all.extend_from_slice(i);
        }
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
            input_digest: sha256_hex(&all),
            config,
        }
    }

    /// Header lines, then the config keys prefixed with `config.`.
    pub fn render(&self) -> String {
        let mut head = vec![
            ("manifest", MANIFEST_VERSION.to_string()),
            ("command", self.command.clone()),
            ("out_dir", self.out_dir.display().to_string()),
            ("input_digest", self.input_digest.clone()),
        ];
        if let Some(p) = &self.config_path {
            head.push(("config_path", p.display().to_string()));
        }
        if let Some(s) = self.seed {
            head.push(("seed", s.to_string()));
        }
        let mut out = kv::render(head);
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            out.push_str("config.");
            out.push_str(line.trim());
            out.push('\n');
        }
        out
    }

    pub fn write(&self) -> CliResult {
        write_file(&self.out_dir.join(MANIFEST_FILE), self.render())
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path, what: &str) -> CliResult<String> {
    CliError::require(path, what)?;
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_config_and_inputs() {
        let m = |cfg: &str, input: &[u8]| RunManifest::new("train", None, Some(1), Path::new("o"), cfg.into(), &[input]);
        assert_eq!(m("a = 1\n", b"x").input_digest, m("a = 1\n", b"x").input_digest);
        assert_ne!(m("a = 1\n", b"x").input_digest, m("a = 2\n", b"x").input_digest);
        assert_ne!(m("a = 1\n", b"x").input_digest, m("a = 1\n", b"y").input_digest);
        let text = m("a = 1\n", b"x").render();
        assert!(text.contains("config.a = 1"));
        assert!(text.contains("seed = 1"));
    }
}
