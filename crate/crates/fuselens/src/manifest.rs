//! Dataset manifest: a JSON file listing registered pairs by id, with paths
//! relative to a root directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ct_path: String,
    pub mr_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Directory all entry paths are relative to, itself relative to the
    /// manifest file's location.
    pub root: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses and validates a manifest: non-empty, unique ids, and every
    /// referenced file present on disk. Returns the manifest along with its
    /// resolved root directory.
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let raw = std::fs::read_to_string(path).map_err(|e| FusionError::Input {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| FusionError::Input {
            path: path.to_path_buf(),
            reason: format!("invalid manifest JSON: {e}"),
        })?;
        if manifest.entries.is_empty() {
            return Err(FusionError::Validation("empty manifest".to_string()));
        }
        let mut seen = HashSet::new();
        for entry in &manifest.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(FusionError::Validation(format!(
                    "duplicate manifest id: {}",
                    entry.id
                )));
            }
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let root = base.join(&manifest.root);
        for entry in &manifest.entries {
            let mut required = vec![&entry.ct_path, &entry.mr_path];
            if let Some(f) = &entry.fused_path {
                required.push(f);
            }
            for rel in required {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(FusionError::Validation(format!(
                        "manifest entry {}: missing file {}",
                        entry.id,
                        p.display()
                    )));
                }
            }
        }
        Ok((manifest, root))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{save_image, GrayImage};

    fn write_pair(dir: &Path, id: &str) -> (String, String) {
        let img = GrayImage::constant(8, 8, 0.5).unwrap();
        let ct = format!("{id}_ct.png");
        let mr = format!("{id}_mr.png");
        save_image(&img, &dir.join(&ct)).unwrap();
        save_image(&img, &dir.join(&mr)).unwrap();
        (ct, mr)
    }

    #[test]
    fn load_resolves_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let (ct, mr) = write_pair(dir.path(), "a");
        let manifest = Manifest {
            root: ".".to_string(),
            entries: vec![ManifestEntry {
                id: "a".to_string(),
                ct_path: ct,
                mr_path: mr,
                fused_path: None,
            }],
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let (loaded, root) = Manifest::load(&mpath).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        assert!(root.join(&loaded.entries[0].ct_path).is_file());
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, r#"{"root": ".", "entries": []}"#).unwrap();
        match Manifest::load(&mpath) {
            Err(FusionError::Validation(msg)) => assert!(msg.contains("empty manifest")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ct, mr) = write_pair(dir.path(), "a");
        let entry = ManifestEntry {
            id: "a".to_string(),
            ct_path: ct,
            mr_path: mr,
            fused_path: None,
        };
        let manifest = Manifest {
            root: ".".to_string(),
            entries: vec![entry.clone(), entry],
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(
            Manifest::load(&mpath),
            Err(FusionError::Validation(_))
        ));
    }

    #[test]
    fn missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            root: ".".to_string(),
            entries: vec![ManifestEntry {
                id: "a".to_string(),
                ct_path: "nope_ct.png".to_string(),
                mr_path: "nope_mr.png".to_string(),
                fused_path: None,
            }],
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(
            Manifest::load(&mpath),
            Err(FusionError::Validation(_))
        ));
    }
}
