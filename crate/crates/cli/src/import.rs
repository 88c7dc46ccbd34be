//! Converting a folder of images into the dataset layout.
//!
//! The input directory holds one subdirectory per class (sorted by name to
//! assign labels), each containing PNG or PNM images. Every image is resized
//! to `size × size` and converted to RGB or grayscale.

use std::fs;
use std::path::Path;

use anyhow::Context;
use image::imageops::FilterType;
use tlnlab::train::Dataset;

use crate::config::config_error;

fn sorted_entries(dir: &Path) -> anyhow::Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

pub fn import_images(
    input: &Path,
    name: &str,
    size: usize,
    channels: usize,
) -> anyhow::Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(config_error(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if size == 0 {
        return Err(config_error("image size must be positive"));
    }
    let classes: Vec<_> = sorted_entries(input)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if classes.len() > 256 {
        return Err(config_error("at most 256 classes fit in a label byte"));
    }
    let mut class_names = Vec::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let side = size as u32;
    for (label, dir) in classes.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = image::open(&file)
                .with_context(|| format!("decoding {}", file.display()))?
                .resize_exact(side, side, FilterType::Triangle);
            if channels == 3 {
                let rgb = img.to_rgb8();
                for c in 0..3 {
                    pixels.extend(rgb.pixels().map(|p| p.0[c]));
                }
            } else {
                pixels.extend(img.to_luma8().into_raw());
            }
            labels.push(label as u8);
        }
    }
    if labels.is_empty() {
        return Err(config_error(format!(
            "no images found under {}",
            input.display()
        )));
    }
    Ok(Dataset::new(
        name,
        class_names,
        [channels, size, size],
        pixels,
        labels,
    )?)
}
