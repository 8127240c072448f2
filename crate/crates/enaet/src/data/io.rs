use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use super::{DataError, FullDataset};
use crate::transforms::Image;

/// Writes `images/<split>/<id>.png` plus `labels_<split>.csv` (header
/// `id,class`) for the train and test splits. Pixels are quantized to 8-bit.
pub fn save_dataset(root: &Path, full: &FullDataset) -> Result<(), DataError> {
    for (split, items) in [("train", &full.train), ("test", &full.test)] {
        let img_dir = root.join("images").join(split);
        fs::create_dir_all(&img_dir)?;
        let mut csv = String::from("id,class\n");
        for (idx, (img, class)) in items.iter().enumerate() {
            let id = format!("{idx:06}");
            write_png(&img_dir.join(format!("{id}.png")), img)?;
            csv.push_str(&format!("{id},{class}\n"));
        }
        let mut f = fs::File::create(root.join(format!("labels_{split}.csv")))?;
        f.write_all(csv.as_bytes())?;
    }
    Ok(())
}

/// Loads a dataset directory written by `save_dataset` (or anything matching
/// its layout). `num_classes` is inferred as max class id + 1.
pub fn load_dataset(root: &Path) -> Result<FullDataset, DataError> {
    let mut splits = Vec::new();
    for split in ["train", "test"] {
        let csv = fs::read_to_string(root.join(format!("labels_{split}.csv")))?;
        let img_dir = root.join("images").join(split);
        let mut items = Vec::new();
        for (lineno, line) in csv.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "id,class" {
                    return Err(DataError::BadLabels(format!(
                        "labels_{split}.csv: expected header 'id,class', got {line:?}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (id, class) = line.split_once(',').ok_or_else(|| {
                DataError::BadLabels(format!("labels_{split}.csv line {}: {line:?}", lineno + 1))
            })?;
            let class: usize = class.trim().parse().map_err(|_| {
                DataError::BadLabels(format!("labels_{split}.csv line {}: bad class id", lineno + 1))
            })?;
            let img = read_png(&img_dir.join(format!("{}.png", id.trim())))?;
            items.push((img, class));
        }
        splits.push(items);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let num_classes = train
        .iter()
        .chain(&test)
        .map(|(_, y)| y + 1)
        .max()
        .ok_or_else(|| DataError::BadLabels("dataset is empty".into()))?;
    Ok(FullDataset { train, test, num_classes })
}

pub(crate) fn write_png(path: &Path, img: &Image) -> Result<(), DataError> {
    let (h, w, c) = img.dims();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf: Vec<u8> = img.pixels.iter().map(|&v| quant(v)).collect();
            let out = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size matches dims");
            out.save(path)?;
        }
        3 => {
            let buf: Vec<u8> = img.pixels.iter().map(|&v| quant(v)).collect();
            let out = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size matches dims");
            out.save(path)?;
        }
        other => {
            return Err(DataError::InvalidConfig(format!(
                "cannot encode {other}-channel image as png"
            )))
        }
    }
    Ok(())
}

fn read_png(path: &Path) -> Result<Image, DataError> {
    let dynimg = image::open(path)?;
    let (img, c) = match dynimg {
        image::DynamicImage::ImageLuma8(g) => (image::DynamicImage::ImageLuma8(g), 1),
        other => (image::DynamicImage::ImageRgb8(other.to_rgb8()), 3),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = img.into_bytes();
    let px = Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        bytes[(i * w + j) * c + ch] as f64 / 255.0
    });
    Ok(Image::new(px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip_preserves_quantized_pixels() {
        let cfg = SyntheticConfig {
            train_per_class: 3,
            test_per_class: 2,
            ..SyntheticConfig::default()
        };
        let full = make_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &full).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_classes, full.num_classes);
        assert_eq!(loaded.train.len(), full.train.len());
        assert_eq!(loaded.test.len(), full.test.len());
        for ((a, ya), (b, yb)) in full.train.iter().zip(&loaded.train) {
            assert_eq!(ya, yb);
            assert_eq!(a.dims(), b.dims());
            for (va, vb) in a.pixels.iter().zip(b.pixels.iter()) {
                // 8-bit quantization: loaded value is the rounded original.
                assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // A second save of the loaded dataset must reproduce byte-identical
        // image files (quantization is idempotent).
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        let a = fs::read(dir.path().join("images/train/000000.png")).unwrap();
        let b = fs::read(dir2.path().join("images/train/000000.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gray_images_roundtrip_single_channel() {
        let img = Image::new(Array3::from_shape_fn((5, 7, 1), |(i, j, _)| {
            ((i * 7 + j) % 13) as f64 / 13.0
        }));
        let full = FullDataset {
            train: vec![(img.clone(), 0), (img.clone(), 1)],
            test: vec![(img, 1)],
            num_classes: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &full).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train[0].0.dims(), (5, 7, 1));
        assert_eq!(loaded.num_classes, 2);
    }

    #[test]
    fn malformed_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images/train")).unwrap();
        fs::create_dir_all(dir.path().join("images/test")).unwrap();
        fs::write(dir.path().join("labels_train.csv"), "wrong,header\n").unwrap();
        fs::write(dir.path().join("labels_test.csv"), "id,class\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::BadLabels(_))));
    }
}
