use std::fmt::Write as _;
use std::fs;

use image::imageops::{resize, FilterType};
use image::GrayImage;
use sharpcam::autodiff::Tensor;
use sharpcam::dataset::{load_image, Split};
use sharpcam::gradcam::{cam_range_stats, gradcam_map, visual_normalize, CamMap, VisualMap};
use sharpcam::measures::measure_all;
use sharpcam::network::checkpoint::Checkpoint;
use sharpcam::network::forward;
use sharpcam::trainer::{argmax_rows, softmax_row};
use sharpcam::Error;

use crate::data::DataSource;
use crate::{CliError, ExplainArgs};

pub const GRID_FILE: &str = "cam.txt";
pub const IMAGE_FILE: &str = "cam.png";
pub const REPORT_FILE: &str = "report.txt";
pub const CONSTANT_NOTE: &str = "constant map; visual normalization degenerate";

/// The image to explain and, when it came from a dataset, its label.
fn input(a: &ExplainArgs, ckpt: &Checkpoint) -> Result<(Tensor, Option<usize>), CliError> {
    let arch = &ckpt.params.arch;
    if let Some(path) = &a.input_image {
        if arch.input_channels != 1 {
            return Err(CliError::config("--input-image needs a single-channel model"));
        }
        return Ok((load_image(path, arch.input_size)?, None));
    }
    let index = a.sample_index.expect("clap requires one of the inputs");
    let split: Split = a.split.parse().map_err(CliError::config)?;
    let data = DataSource::from_entries(&ckpt.metadata)?.load()?;
    let samples = data.split(split);
    let sample = samples.get(index).ok_or_else(|| {
        CliError::config(format!(
            "sample index {index} out of range for the {} split of {} samples",
            split.as_str(),
            samples.len()
        ))
    })?;
    Ok((sample.image.clone(), Some(sample.label)))
}

fn grid_text(map: &CamMap) -> String {
    let mut out = String::new();
    for r in 0..map.height() {
        let row: Vec<String> = (0..map.width()).map(|c| format!("{:.10e}", map.get(r, c))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// 8-bit grayscale rendering, upscaled by nearest neighbour to `size`.
fn visual_image(vis: &VisualMap, size: usize) -> GrayImage {
    let pixels = vis.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let small = GrayImage::from_raw(vis.width as u32, vis.height as u32, pixels).expect("sized buffer");
    let (w, h) = (size.max(vis.width) as u32, size.max(vis.height) as u32);
    resize(&small, w, h, FilterType::Nearest)
}

pub fn run(a: &ExplainArgs) -> Result<(), CliError> {
    if !a.checkpoint.is_file() {
        return Err(CliError::config(format!("checkpoint `{}` not found", a.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let params = &ckpt.params;
    let (image, label) = input(a, &ckpt)?;
    let x = Tensor::stack(&[image]).map_err(Error::from)?;
    let mut trace = forward(params, &x)?;
    let logits = trace.logits()?;
    let predicted = argmax_rows(&logits)[0];
    let class = a.class.unwrap_or(predicted);
    if class >= params.arch.classes {
        return Err(Error::ClassOutOfRange { class, classes: params.arch.classes }.into());
    }
    let probability = softmax_row(logits.data())[class];
    let map = gradcam_map(&mut trace, class, 0)?;
    let stats = cam_range_stats(&map);
    let m = measure_all(&map);
    let vis = visual_normalize(&map);

    let logit_max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logit_min = logits.data().iter().copied().fold(f64::INFINITY, f64::min);
    let mut report = String::new();
    if let Some(l) = label {
        let _ = write!(report, "label={l} ");
    }
    let _ = write!(
        report,
        "class={class} predicted={predicted} probability={probability:.4} logit_max={logit_max:.4} logit_min={logit_min:.4} \
         cam_max={:.4} cam_min={:.4} range_abs={:.4} range_rel={} ce={:.4} ca={:.4} cd={:.4}",
        stats.max,
        stats.min,
        stats.absolute_range,
        stats.relative_range.map_or("n/a".to_string(), |r| format!("{r:.4}")),
        m.ce,
        m.ca,
        m.cd,
    );
    if m.degenerate {
        report.push_str(" degenerate=true");
    }
    if vis.constant {
        let _ = write!(report, "; {CONSTANT_NOTE}");
    }

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(GRID_FILE), grid_text(&map))?;
    visual_image(&vis, params.arch.input_size)
        .save(a.out.join(IMAGE_FILE))
        .map_err(|e| CliError::config(format!("writing {IMAGE_FILE}: {e}")))?;
    fs::write(a.out.join(REPORT_FILE), format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}
