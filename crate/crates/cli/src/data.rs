use std::collections::BTreeMap;
use std::path::PathBuf;

use sharpcam::dataset::{generate_synthetic, load_image_dir, Dataset, SyntheticSpec};

use crate::CliError;

/// Where a run's data came from, recorded so `explain` can rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory { path: PathBuf, image_size: usize },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, CliError> {
        let data = match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Directory { path, image_size } => {
                let d = load_image_dir(path, *image_size)?;
                if d.skipped > 0 {
                    log::warn!("{} unreadable files skipped", d.skipped);
                }
                d
            }
        };
        Ok(data)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("data.{k}"), v);
        match self {
            DataSource::Synthetic(s) => vec![
                kv("kind", "synthetic".into()),
                kv("classes", s.n_classes.to_string()),
                kv("per_class", s.n_per_class.to_string()),
                kv("image_size", s.image_size.to_string()),
                kv("noise", s.noise_level.to_string()),
                kv("seed", s.seed.to_string()),
            ],
            DataSource::Directory { path, image_size } => vec![
                kv("kind", "directory".into()),
                kv("path", path.display().to_string()),
                kv("image_size", image_size.to_string()),
            ],
        }
    }

    pub fn from_entries(meta: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let get = |k: &str| {
            meta.get(&format!("data.{k}"))
                .ok_or_else(|| CliError::config(format!("checkpoint metadata lacks data.{k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CliError> {
            v.parse()
                .map_err(|_| CliError::config(format!("checkpoint metadata data.{k} = `{v}` is not a number")))
        }
        match get("kind")?.as_str() {
            "synthetic" => Ok(DataSource::Synthetic(SyntheticSpec {
                n_classes: num("classes", get("classes")?)?,
                n_per_class: num("per_class", get("per_class")?)?,
                image_size: num("image_size", get("image_size")?)?,
                noise_level: num("noise", get("noise")?)?,
                seed: num("seed", get("seed")?)?,
            })),
            "directory" => Ok(DataSource::Directory {
                path: PathBuf::from(get("path")?),
                image_size: num("image_size", get("image_size")?)?,
            }),
            other => Err(CliError::config(format!("unknown dataset kind `{other}` in checkpoint"))),
        }
    }
}
