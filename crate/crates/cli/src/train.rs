use std::fs;

use sharpcam::dataset::{Split, SyntheticSpec};
use sharpcam::network::checkpoint::Checkpoint;
use sharpcam::network::Architecture;
use sharpcam::trainer::{rows_to_csv, train, MetricsRow, TrainConfig};

use crate::data::DataSource;
use crate::manifest::Manifest;
use crate::{CliError, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        beta: a.beta,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        target_layer: a.target_layer,
        log_every: a.log_every,
        ..TrainConfig::default()
    }
}

fn source(a: &TrainArgs) -> Result<DataSource, CliError> {
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(CliError::config(format!("--noise must lie in [0, 1], got {}", a.noise)));
    }
    Ok(match &a.data_dir {
        Some(path) => DataSource::Directory {
            path: path.clone(),
            image_size: a.image_size,
        },
        None => DataSource::Synthetic(SyntheticSpec {
            n_classes: a.classes.unwrap_or(4),
            n_per_class: a.per_class,
            image_size: a.image_size,
            noise_level: a.noise,
            seed: a.data_seed,
        }),
    })
}

fn describe(row: &MetricsRow) -> String {
    format!(
        "final {}: step {} accuracy {:.4} ce {:.4} ca {:.4} cd {:.4} loss {:.4}",
        row.split.as_str(),
        row.step,
        row.accuracy,
        row.ce_mean,
        row.ca_mean,
        row.cd_mean,
        row.loss
    )
}

pub fn run(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = config(a);
    cfg.validate()?;
    let source = source(a)?;
    let data = source.load()?;
    if let Some(c) = a.classes {
        if c != data.classes {
            return Err(CliError::config(format!(
                "--classes {c} but the data has {} classes",
                data.classes
            )));
        }
    }
    let arch = Architecture {
        input_channels: data.channels,
        ..Architecture::desk(data.classes, data.image_size)
    };

    let mut manifest = Manifest::default();
    manifest.push("config.beta", cfg.beta);
    manifest.push("config.lr", cfg.learning_rate);
    manifest.push("config.epochs", cfg.epochs);
    manifest.push("config.batch_size", cfg.batch_size);
    manifest.push("config.seed", cfg.seed);
    manifest.push("config.log_every", cfg.log_every);
    manifest.push("config.target_layer", cfg.architecture(&arch).target_layer);
    manifest.extend(source.entries());
    let run_id = manifest.seal();

    let outcome = train(&cfg, &arch, &data)?;

    fs::create_dir_all(&a.out)?;
    let paths = [CHECKPOINT_FILE, METRICS_FILE, MANIFEST_FILE].map(|f| a.out.join(f));
    let mut ckpt = Checkpoint::new(outcome.params);
    ckpt.metadata.extend(source.entries());
    ckpt.metadata.insert("run_id".into(), run_id);
    ckpt.save(&paths[0])?;
    fs::write(&paths[1], rows_to_csv(&outcome.rows))?;
    manifest.push("output.checkpoint", paths[0].display());
    manifest.push("output.metrics", paths[1].display());
    manifest.push("output.manifest", paths[2].display());
    fs::write(&paths[2], manifest.render())?;

    for split in [Split::Train, Split::Test] {
        if let Some(row) = outcome.rows.iter().rev().find(|r| r.split == split) {
            println!("{}", describe(row));
        }
    }
    Ok(())
}
