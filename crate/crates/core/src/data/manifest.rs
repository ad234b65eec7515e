//! Dataset manifest: a plain-text file listing data file paths plus a role
//! line. Lines starting with `#` are comments.
//!
//! ```text
//! role: in-distribution
//! images: train-images.idx
//! labels: train-labels.idx
//! ```
//!
//! OOD manifests use `role: out-of-distribution` and list `images:` entries
//! (IDX) and/or `pgm:` entries, one path per line, resolved relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetRole {
    InDistribution,
    OutOfDistribution,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub role: DatasetRole,
    pub image_files: Vec<PathBuf>,
    pub label_file: Option<PathBuf>,
    pub pgm_files: Vec<PathBuf>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut role = None;
    let mut image_files = Vec::new();
    let mut label_file = None;
    let mut pgm_files = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::MalformedFile {
                format: "manifest",
                path: path.display().to_string(),
                reason: format!("line {}: expected `key: value`", lineno + 1),
            });
        };
        let value = value.trim();
        match key.trim() {
            "role" => {
                role = Some(match value {
                    "in-distribution" => DatasetRole::InDistribution,
                    "out-of-distribution" => DatasetRole::OutOfDistribution,
                    other => {
                        return Err(Error::MalformedFile {
                            format: "manifest",
                            path: path.display().to_string(),
                            reason: format!("unknown role {other:?}"),
                        })
                    }
                });
            }
            "images" => image_files.push(dir.join(value)),
            "labels" => label_file = Some(dir.join(value)),
            "pgm" => pgm_files.push(dir.join(value)),
            other => {
                return Err(Error::MalformedFile {
                    format: "manifest",
                    path: path.display().to_string(),
                    reason: format!("unknown key {other:?}"),
                })
            }
        }
    }

    let Some(role) = role else {
        return Err(Error::MalformedFile {
            format: "manifest",
            path: path.display().to_string(),
            reason: "missing role line".into(),
        });
    };
    if role == DatasetRole::OutOfDistribution && label_file.is_some() {
        return Err(Error::MalformedFile {
            format: "manifest",
            path: path.display().to_string(),
            reason: "out-of-distribution manifests must not list labels".into(),
        });
    }
    Ok(DatasetManifest {
        role,
        image_files,
        label_file,
        pgm_files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, contents: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("oodbench-manifest-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn parses_in_distribution_manifest() {
        let p = tmp(
            "in.txt",
            "# comment\nrole: in-distribution\nimages: a.idx\nlabels: b.idx\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.role, DatasetRole::InDistribution);
        assert_eq!(m.image_files.len(), 1);
        assert!(m.label_file.is_some());
    }

    #[test]
    fn ood_manifest_with_labels_rejected() {
        let p = tmp("bad.txt", "role: out-of-distribution\nlabels: b.idx\n");
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn missing_role_rejected() {
        let p = tmp("norole.txt", "images: a.idx\n");
        assert!(load_manifest(&p).is_err());
    }
}
