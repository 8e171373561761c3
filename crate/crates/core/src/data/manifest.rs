//! External corpus exchange format.
//!
//! A manifest is a UTF-8 text file whose first line declares the class
//! universe as `#classes: name0,name1,...` and whose remaining nonempty
//! lines are records of the form `relative/path.png<TAB>nameA,nameB`.
//! Paths resolve against the manifest's directory; the same path may appear
//! on several lines and each occurrence is a distinct sample.

use super::{Corpus, LabeledImage};
use crate::error::{Error, Result};
use ndarray::Array3;
use std::fs;
use std::path::Path;
use std::sync::Arc;

const HEADER_PREFIX: &str = "#classes:";

fn ingest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Loads a PNG as a CHW f64 array scaled to [0, 1].
pub fn png_to_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| ingest_err(path, format!("cannot read image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn image_to_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| (img[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| ingest_err(path, format!("cannot write image: {e}")))
}

/// Bilinear resize to (height, width); returns a clone when already sized.
pub fn resize_image(img: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (_, h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let mut buf = image::ImageBuffer::<image::Rgb<f32>, Vec<f32>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| img[(ch, y, x)] as f32);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let resized = image::imageops::resize(
        &buf,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::zeros((3, height, width));
    for (x, y, px) in resized.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = (px.0[ch] as f64).clamp(0.0, 1.0);
        }
    }
    out
}

fn write_manifest(
    manifest_path: &Path,
    classes: &[String],
    records: &[(String, Vec<String>)],
) -> Result<()> {
    let mut text = format!("{HEADER_PREFIX} {}\n", classes.join(","));
    for (rel, names) in records {
        text.push_str(rel);
        text.push('\t');
        text.push_str(&names.join(","));
        text.push('\n');
    }
    fs::write(manifest_path, text)?;
    Ok(())
}

/// Writes a corpus as `train.manifest` / `test.manifest` plus PNGs under
/// `images/`. Images are quantized to 8-bit on disk.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for name in &corpus.classes {
        if name.contains(',') || name.contains('\t') || name.trim() != name || name.is_empty() {
            return Err(Error::config(format!(
                "class name {name:?} cannot be stored in a manifest"
            )));
        }
    }
    fs::create_dir_all(dir.join("images"))?;
    for (split, samples) in [("train", &corpus.train), ("test", &corpus.test)] {
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{split}_{i:05}.png");
            image_to_png(&s.image, &dir.join(&rel))?;
            let names: Vec<String> = s
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l)
                .map(|(c, _)| corpus.classes[c].clone())
                .collect();
            if names.is_empty() {
                return Err(Error::config(format!(
                    "{split} sample {i} has no positive labels; manifests require at least one"
                )));
            }
            records.push((rel, names));
        }
        write_manifest(&dir.join(format!("{split}.manifest")), &corpus.classes, &records)?;
    }
    Ok(())
}

/// Reads a manifest and its images. Returns the declared class universe and
/// the samples in file order.
pub fn load_external_corpus(manifest_path: &Path) -> Result<(Vec<String>, Vec<LabeledImage>)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| ingest_err(manifest_path, format!("cannot read manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ingest_err(manifest_path, "empty manifest"))?;
    let classes: Vec<String> = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| {
            ingest_err(
                manifest_path,
                format!("first line must start with {HEADER_PREFIX:?}"),
            )
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(ingest_err(manifest_path, "manifest declares no classes"));
    }
    let index_of = |name: &str| classes.iter().position(|c| c == name);

    let mut samples = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label_part) = line.split_once('\t').ok_or_else(|| {
            ingest_err(
                manifest_path,
                format!("line {}: expected <path>\\t<labels>", line_no + 2),
            )
        })?;
        let mut labels = vec![false; classes.len()];
        let mut any = false;
        for name in label_part.split(',') {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            let idx = index_of(name).ok_or_else(|| {
                ingest_err(
                    manifest_path,
                    format!(
                        "line {}: label {name:?} is not in the declared class universe",
                        line_no + 2
                    ),
                )
            })?;
            labels[idx] = true;
            any = true;
        }
        if !any {
            return Err(ingest_err(
                manifest_path,
                format!("line {}: record has no labels", line_no + 2),
            ));
        }
        let image_path = base.join(rel.trim());
        let image = png_to_image(&image_path)?;
        samples.push(LabeledImage {
            image: Arc::new(image),
            labels,
        });
    }
    Ok((classes, samples))
}
