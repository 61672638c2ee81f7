//! Dataset plumbing: YOLO-format label files, tab-separated manifests,
//! binary PPM/PGM image IO, letterbox resizing, seeded train/val splits,
//! per-class statistics and a synthetic fixture generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::WhBox;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Gray value used for letterbox padding, as a fraction of full scale.
pub const PAD_GRAY: f32 = 0.447;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoloLabel {
    pub class_id: usize,
    /// Center x/y and width/height, normalized to [0,1].
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub labels: Vec<YoloLabel>,
}

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses one YOLO label file: `class cx cy w h` per line, whitespace
/// separated, all coordinates normalized.
pub fn load_label_file(path: &Path) -> Result<Vec<YoloLabel>> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err(path, 0, format!("cannot read label file: {e}")))?;
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(data_err(
                path,
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| data_err(path, line_no, format!("bad class id {:?}", fields[0])))?;
        let mut vals = [0f32; 4];
        for (slot, field) in vals.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| data_err(path, line_no, format!("bad coordinate {field:?}")))?;
        }
        let [cx, cy, w, h] = vals;
        for v in vals {
            if !(0.0..=1.0).contains(&v) {
                return Err(data_err(
                    path,
                    line_no,
                    format!("coordinate {v} outside [0,1]"),
                ));
            }
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(data_err(path, line_no, "box width/height must be positive"));
        }
        labels.push(YoloLabel { class_id, cx, cy, w, h });
    }
    Ok(labels)
}

/// Reads a manifest of `image<TAB>label` lines and loads every label file.
/// Paths are resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledImage>> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err(path, 0, format!("cannot read manifest: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let image = parts.next().unwrap_or("");
        let label = parts.next().unwrap_or("");
        if image.is_empty() || label.is_empty() {
            return Err(data_err(
                path,
                line_no,
                "expected two tab-separated paths (image, label)",
            ));
        }
        let label_path = resolve(label);
        let labels = load_label_file(&label_path)?;
        items.push(LabeledImage {
            image_path: resolve(image),
            label_path,
            labels,
        });
    }
    Ok(items)
}

/// Raster image in [0,1], channel count 1 (PGM) or 3 (PPM).
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, interleaved channels.
    pub pixels: Vec<f32>,
}

pub fn read_netpbm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| data_err(path, 0, format!("cannot read image: {e}")))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err(path, 0, "truncated netpbm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(data_err(
                path,
                0,
                format!("unsupported netpbm magic {other:?} (want P5 or P6)"),
            ))
        }
    };
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| data_err(path, 0, "bad width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| data_err(path, 0, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| data_err(path, 0, "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(data_err(path, 0, format!("unsupported maxval {maxval}")));
    }
    let data_start = pos + 1; // single whitespace byte after maxval
    let need = width * height * channels;
    if bytes.len() < data_start + need {
        return Err(data_err(
            path,
            0,
            format!("pixel payload truncated: need {need} bytes"),
        ));
    }
    let scale = 1.0 / maxval as f32;
    let pixels = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f32 * scale)
        .collect();
    Ok(Image { width, height, channels, pixels })
}

pub fn write_netpbm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "netpbm supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Mapping from original image coordinates to the letterboxed square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_x: f32,
    pub pad_y: f32,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn invert(&self, x: f32, y: f32) -> (f32, f32) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Aspect-preserving resize onto a `target`x`target` canvas with centered
/// gray padding. Nearest-neighbor sampling; returns a 3-channel tensor in
/// [0,1] (grayscale inputs are replicated).
pub fn letterbox(img: &Image, target: usize) -> Result<(Tensor, LetterboxTransform)> {
    if img.width == 0 || img.height == 0 || target == 0 {
        return Err(Error::InvalidArgument("letterbox needs nonzero dimensions".into()));
    }
    let scale = target as f32 / img.width.max(img.height) as f32;
    let new_w = ((img.width as f32 * scale).round() as usize).clamp(1, target);
    let new_h = ((img.height as f32 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;
    let mut out = Tensor::from_vec(
        Shape::new(1, 3, target, target)?,
        vec![PAD_GRAY; 3 * target * target],
    )?;
    for oy in 0..new_h {
        let sy = (((oy as f32 + 0.5) / scale) as usize).min(img.height - 1);
        for ox in 0..new_w {
            let sx = (((ox as f32 + 0.5) / scale) as usize).min(img.width - 1);
            let base = (sy * img.width + sx) * img.channels;
            for c in 0..3 {
                let v = img.pixels[base + c.min(img.channels - 1)];
                out.set(0, c, oy + pad_y, ox + pad_x, v);
            }
        }
    }
    Ok((
        out,
        LetterboxTransform {
            scale,
            pad_x: pad_x as f32,
            pad_y: pad_y as f32,
            target,
        },
    ))
}

/// Deterministic seeded split into train/val with a fixed 7:3 ratio; the
/// train side gets `round(0.7 * n)` items.
pub fn split_dataset(items: &[LabeledImage], seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (0.7 * items.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub num_images: usize,
    pub num_boxes: usize,
    pub class_counts: BTreeMap<usize, usize>,
    /// Normalized (w, h) of every box, for anchor clustering.
    pub box_dims: Vec<WhBox>,
    pub mean_boxes_per_image: f64,
}

pub fn dataset_stats(items: &[LabeledImage]) -> DatasetStats {
    let mut class_counts = BTreeMap::new();
    let mut box_dims = Vec::new();
    let mut num_boxes = 0usize;
    for item in items {
        for l in &item.labels {
            *class_counts.entry(l.class_id).or_insert(0) += 1;
            num_boxes += 1;
            if let Ok(b) = WhBox::new(l.w, l.h) {
                box_dims.push(b);
            }
        }
    }
    DatasetStats {
        num_images: items.len(),
        num_boxes,
        class_counts,
        box_dims,
        mean_boxes_per_image: if items.is_empty() {
            0.0
        } else {
            num_boxes as f64 / items.len() as f64
        },
    }
}

/// Boxes scaled to pixel units of a square input, for anchor clustering.
pub fn stats_pixel_boxes(stats: &DatasetStats, input_size: usize) -> Vec<WhBox> {
    stats
        .box_dims
        .iter()
        .map(|b| WhBox {
            w: b.w * input_size as f32,
            h: b.h * input_size as f32,
        })
        .collect()
}

/// Synthetic detection fixture: noisy background images with colored
/// axis-aligned rectangles and exact matching labels. Byte-identical for
/// a fixed seed. Returns the manifest path.
pub fn synth_fixture_generate(
    dir: &Path,
    num_images: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<PathBuf> {
    if num_classes == 0 || num_classes > 8 {
        return Err(Error::InvalidArgument("synth supports 1..=8 classes".into()));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // one distinctive color per class
    let palette: [(f32, f32, f32); 8] = [
        (0.9, 0.1, 0.1),
        (0.1, 0.9, 0.1),
        (0.1, 0.1, 0.9),
        (0.9, 0.9, 0.1),
        (0.9, 0.1, 0.9),
        (0.1, 0.9, 0.9),
        (0.95, 0.55, 0.1),
        (0.6, 0.3, 0.8),
    ];
    let mut manifest = String::new();
    for idx in 0..num_images {
        let mut pixels = vec![0f32; image_size * image_size * 3];
        for v in pixels.iter_mut() {
            *v = rng.gen_range(0.05..0.25);
        }
        let n_boxes = rng.gen_range(1..=3usize);
        let mut labels = Vec::new();
        for _ in 0..n_boxes {
            let class_id = rng.gen_range(0..num_classes);
            let bw = rng.gen_range(image_size / 8..=image_size / 3);
            let bh = rng.gen_range(image_size / 8..=image_size / 3);
            let x0 = rng.gen_range(0..image_size - bw);
            let y0 = rng.gen_range(0..image_size - bh);
            let (r, g, b) = palette[class_id];
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let base = (y * image_size + x) * 3;
                    pixels[base] = r;
                    pixels[base + 1] = g;
                    pixels[base + 2] = b;
                }
            }
            labels.push(YoloLabel {
                class_id,
                cx: (x0 as f32 + bw as f32 / 2.0) / image_size as f32,
                cy: (y0 as f32 + bh as f32 / 2.0) / image_size as f32,
                w: bw as f32 / image_size as f32,
                h: bh as f32 / image_size as f32,
            });
        }
        let image_name = format!("img_{idx:04}.ppm");
        let label_name = format!("img_{idx:04}.txt");
        write_netpbm(
            &dir.join(&image_name),
            &Image {
                width: image_size,
                height: image_size,
                channels: 3,
                pixels,
            },
        )?;
        let mut text = String::new();
        for l in &labels {
            text.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                l.class_id, l.cx, l.cy, l.w, l.h
            ));
        }
        fs::write(dir.join(&label_name), text)?;
        manifest.push_str(&format!("{image_name}\t{label_name}\n"));
    }
    let manifest_path = dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0 0.5 0.5 0.2 0.1\n2 0.25 0.75 0.5 0.5\n\n").unwrap();
        let labels = load_label_file(&p).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[1].class_id, 2);
        assert!((labels[0].w - 0.2).abs() < 1e-6);
    }

    #[test]
    fn label_errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "0 0.5 0.5 0.2 0.1\n1 1.5 0.5 0.2 0.1\n").unwrap();
        let err = load_label_file(&p).unwrap_err().to_string();
        assert!(err.contains("bad.txt"), "{err}");
        assert!(err.contains(":2:"), "{err}");

        fs::write(&p, "0 0.5 0.5\n").unwrap();
        let err = load_label_file(&p).unwrap_err().to_string();
        assert!(err.contains("5 fields"), "{err}");
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
        fs::write(dir.path().join("a.ppm"), "").unwrap();
        let m = dir.path().join("manifest.tsv");
        fs::write(&m, "a.ppm\ta.txt\n").unwrap();
        let items = load_manifest(&m).unwrap();
        assert_eq!(items.len(), 1);
        assert!(items[0].image_path.ends_with("a.ppm"));
        assert_eq!(items[0].labels.len(), 1);
    }

    #[test]
    fn manifest_rejects_missing_tab() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.tsv");
        fs::write(&m, "a.ppm a.txt\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("tab"), "{err}");
    }

    #[test]
    fn netpbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let img = Image {
            width: 3,
            height: 2,
            channels: 3,
            pixels: (0..18).map(|v| v as f32 / 17.0).collect(),
        };
        write_netpbm(&p, &img).unwrap();
        let back = read_netpbm(&p).unwrap();
        assert_eq!((back.width, back.height, back.channels), (3, 2, 3));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_reads_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        write_netpbm(
            &p,
            &Image {
                width: 2,
                height: 2,
                channels: 1,
                pixels: vec![0.0, 1.0, 0.5, 0.25],
            },
        )
        .unwrap();
        let img = read_netpbm(&p).unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.pixels[1], 1.0);
    }

    #[test]
    fn letterbox_square_is_pure_resize() {
        let img = Image {
            width: 4,
            height: 4,
            channels: 3,
            pixels: vec![0.5; 48],
        };
        let (t, tr) = letterbox(&img, 8).unwrap();
        assert_eq!(tr.pad_x, 0.0);
        assert_eq!(tr.pad_y, 0.0);
        assert_eq!(tr.scale, 2.0);
        assert!(t.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn letterbox_pads_wide_image_vertically() {
        let img = Image {
            width: 8,
            height: 4,
            channels: 3,
            pixels: vec![1.0; 8 * 4 * 3],
        };
        let (t, tr) = letterbox(&img, 8).unwrap();
        assert_eq!(tr.pad_y, 2.0);
        assert_eq!(t.at(0, 0, 0, 0), PAD_GRAY); // top pad row
        assert_eq!(t.at(0, 0, 4, 4), 1.0); // content
        assert_eq!(t.at(0, 0, 7, 0), PAD_GRAY); // bottom pad row
        // transform round trip
        let (x, y) = tr.apply(3.0, 1.0);
        let (bx, by) = tr.invert(x, y);
        assert!((bx - 3.0).abs() < 1e-6 && (by - 1.0).abs() < 1e-6);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let items: Vec<LabeledImage> = (0..10)
            .map(|i| LabeledImage {
                image_path: PathBuf::from(format!("{i}.ppm")),
                label_path: PathBuf::from(format!("{i}.txt")),
                labels: vec![],
            })
            .collect();
        let (t1, v1) = split_dataset(&items, 42);
        let (t2, v2) = split_dataset(&items, 42);
        assert_eq!(t1.len(), 7);
        assert_eq!(v1.len(), 3);
        let names = |v: &[LabeledImage]| -> Vec<PathBuf> {
            v.iter().map(|i| i.image_path.clone()).collect()
        };
        assert_eq!(names(&t1), names(&t2));
        assert_eq!(names(&v1), names(&v2));
        let mut all: Vec<PathBuf> = names(&t1).into_iter().chain(names(&v1)).collect();
        all.sort();
        let mut expect: Vec<PathBuf> = items.iter().map(|i| i.image_path.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);
        // a different seed shuffles differently on 10 items with high odds,
        // but determinism is the contract, not difference; just check sizes
        let (t3, _) = split_dataset(&items, 43);
        assert_eq!(t3.len(), 7);
    }

    #[test]
    fn stats_counts_classes() {
        let items = vec![LabeledImage {
            image_path: "a.ppm".into(),
            label_path: "a.txt".into(),
            labels: vec![
                YoloLabel { class_id: 0, cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 },
                YoloLabel { class_id: 2, cx: 0.5, cy: 0.5, w: 0.4, h: 0.1 },
                YoloLabel { class_id: 0, cx: 0.3, cy: 0.3, w: 0.1, h: 0.1 },
            ],
        }];
        let s = dataset_stats(&items);
        assert_eq!(s.num_boxes, 3);
        assert_eq!(s.class_counts[&0], 2);
        assert_eq!(s.class_counts[&2], 1);
        assert_eq!(s.box_dims.len(), 3);
        let px = stats_pixel_boxes(&s, 100);
        assert!((px[1].w - 40.0).abs() < 1e-4);
    }

    #[test]
    fn synth_fixture_is_byte_identical_under_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_fixture_generate(d1.path(), 3, 32, 4, 7).unwrap();
        let m2 = synth_fixture_generate(d2.path(), 3, 32, 4, 7).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(d1.path().join(&name)).unwrap(),
                fs::read(d2.path().join(&name)).unwrap(),
                "{name:?} differs"
            );
        }
    }

    #[test]
    fn synth_labels_match_painted_rectangles() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_fixture_generate(dir.path(), 4, 48, 4, 11).unwrap();
        let items = load_manifest(&manifest).unwrap();
        assert_eq!(items.len(), 4);
        for item in &items {
            let img = read_netpbm(&item.image_path).unwrap();
            assert!(!item.labels.is_empty());
            for l in &item.labels {
                // sample the box center pixel: it must be bright (painted),
                // unless a later box overdrew it, in which case some box
                // claims that pixel
                let x = (l.cx * img.width as f32) as usize;
                let y = (l.cy * img.height as f32) as usize;
                let base = (y.min(img.height - 1) * img.width + x.min(img.width - 1)) * 3;
                let maxc = img.pixels[base]
                    .max(img.pixels[base + 1])
                    .max(img.pixels[base + 2]);
                assert!(maxc > 0.5, "center pixel of a labeled box is background");
            }
        }
    }
}
