use std::path::{Path, PathBuf};

use crate::data::{labels_class_count, quantise, Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::tensor::{Image, Shape};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

pub(crate) fn load_png(path: &Path, channels: Option<usize>) -> Result<Image> {
    let img = image::open(path)?;
    let channels = channels.unwrap_or(if img.color().has_color() { 3 } else { 1 });
    let (w, h) = (img.width() as usize, img.height() as usize);
    let shape = Shape::new(h, w, channels);
    Ok(match channels {
        1 => {
            let g = img.to_luma8();
            Image::from_fn(shape, |y, x, _| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
        _ => {
            let rgb = img.to_rgb8();
            Image::from_fn(shape, |y, x, c| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }
    })
}

pub(crate) fn save_png(path: &Path, x: &Image) -> Result<()> {
    let (w, h) = (x.width() as u32, x.height() as u32);
    match x.channels() {
        1 => image::GrayImage::from_fn(w, h, |c, r| image::Luma([quantise(x.get(r as usize, c as usize, 0))]))
            .save(path)?,
        3 => image::RgbImage::from_fn(w, h, |c, r| {
            let p = x.pixel(r as usize, c as usize);
            image::Rgb([quantise(p[0]), quantise(p[1]), quantise(p[2])])
        })
        .save(path)?,
        n => return Err(Error::Unsupported(format!("cannot encode {n}-channel images"))),
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Shape> = None;
    for class_dir in sorted_entries(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let name = class_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label: usize = name
            .parse()
            .map_err(|_| Error::Config(format!("class directory `{}` is not an integer label", class_dir.display())))?;
        for file in sorted_entries(&class_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let x = load_png(&file, shape.map(|s| s.channels))?;
            match shape {
                None => shape = Some(x.shape()),
                Some(s) if s != x.shape() => {
                    return Err(Error::shape(s, format!("{} in {}", x.shape(), file.display())))
                }
                _ => {}
            }
            images.push(x);
            labels.push(label);
        }
    }
    let shape = shape.ok_or_else(|| Error::Empty(format!("no png images under {}", dir.display())))?;
    Dataset::new(shape, labels_class_count(&labels), images, labels)
}

/// Reads `root/train/<label>/*.png` and `root/test/<label>/*.png`.
pub fn read_image_directory(root: &Path) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: read_split(&root.join("train"))?,
        test: read_split(&root.join("test"))?,
    })
}

pub fn write_image_directory(root: &Path, splits: &DatasetSplits) -> Result<()> {
    for (name, d) in [("train", &splits.train), ("test", &splits.test)] {
        for (i, (x, y)) in d.iter().enumerate() {
            let dir = root.join(name).join(y.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_png(&dir.join(format!("{i:06}.png")), x)?;
        }
    }
    Ok(())
}
