use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv;
use crate::multibox::{GroundTruthBox, Rect};

use super::{generate_sample, Image, Sample, CLASS_NAMES};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses binary PPM (P6, maxval 255). Header comments are allowed.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut line = 1;
    let token = |pos: &mut usize, line: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                None => return Err(Error::data_at(*line, "truncated PPM header")),
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if *b == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                Some(_) => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos, &mut line)?;
    if magic != "P6" {
        return Err(Error::data_at(line, format!("expected PPM magic P6, got `{magic}`")));
    }
    let num = |what: &str, pos: &mut usize, line: &mut usize| -> Result<usize> {
        let t = token(pos, line)?;
        t.parse::<usize>().map_err(|_| Error::data_at(*line, format!("bad PPM {what} `{t}`")))
    };
    let width = num("width", &mut pos, &mut line)?;
    let height = num("height", &mut pos, &mut line)?;
    let maxval = num("maxval", &mut pos, &mut line)?;
    if maxval != 255 || width == 0 || height == 0 {
        return Err(Error::data_at(line, format!("unsupported PPM {width}x{height} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < need {
        return Err(Error::data(format!("truncated PPM raster: {} of {need} bytes", raster.len())));
    }
    Ok(Image { width, height, pixels: raster[..need].to_vec() })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Data { line, msg } => Error::Data { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

/// One `image_id class xmin ymin xmax ymax` line per object.
pub fn format_annotations(samples: &[Sample]) -> String {
    let mut s = String::new();
    for sample in samples {
        for b in &sample.boxes {
            let r = b.rect;
            let _ = writeln!(s, "{} {} {:.6} {:.6} {:.6} {:.6}", sample.id, b.class_id, r.xmin, r.ymin, r.xmax, r.ymax);
        }
    }
    s
}

/// Parses annotation records, rejecting malformed or invalid boxes with their line number.
pub fn parse_annotations(text: &str, num_classes: usize) -> Result<Vec<(String, GroundTruthBox)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::data_at(line, format!("expected 6 fields, found {}", f.len())));
        }
        let class: usize = f[1].parse().map_err(|_| Error::data_at(line, format!("bad class `{}`", f[1])))?;
        if class == 0 || class > num_classes {
            return Err(Error::data_at(line, format!("class {class} outside 1..={num_classes}")));
        }
        let mut c = [0f32; 4];
        for (k, v) in c.iter_mut().enumerate() {
            *v = f[2 + k].parse().map_err(|_| Error::data_at(line, format!("bad coordinate `{}`", f[2 + k])))?;
        }
        let rect = Rect::new(c[0], c[1], c[2], c[3]);
        if !rect.is_valid() || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data_at(line, format!("invalid box {c:?}: need 0 ≤ min < max ≤ 1")));
        }
        out.push((f[0].to_string(), GroundTruthBox { rect, class_id: class }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub samples: usize,
    pub size: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "classes = {}\nsamples = {}\nsize = {}\nseed = {}\n",
            self.classes.join(","),
            self.samples,
            self.size,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest { classes: Vec::new(), samples: 0, size: 0, seed: 0 };
        let as_data = |e: Error| match e {
            Error::Config(msg) => Error::data(msg),
            Error::Parse { msg, .. } => Error::data(msg),
            other => other,
        };
        for e in kv::parse(text).map_err(as_data)? {
            match e.key.as_str() {
                "classes" => m.classes = e.value.split(',').map(|s| s.trim().to_string()).collect(),
                "samples" => m.samples = e.parse_value().map_err(as_data)?,
                "size" => m.size = e.parse_value().map_err(as_data)?,
                "seed" => m.seed = e.parse_value().map_err(as_data)?,
                _ => return Err(Error::data_at(e.line, format!("unknown manifest key `{}`", e.key))),
            }
        }
        if m.classes.is_empty() || m.samples == 0 || m.size == 0 {
            return Err(Error::data("manifest needs classes, samples and size"));
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.ppm"))
}

/// Writes `n` samples to `out_dir` (`manifest.txt`, `annotations.txt`, `images/`).
pub fn generate_dataset(n: usize, num_classes: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    if !(1..=CLASS_NAMES.len()).contains(&num_classes) {
        return Err(Error::config(format!("num_classes must be 1..={}, got {num_classes}", CLASS_NAMES.len())));
    }
    if size < 32 {
        return Err(Error::config(format!("image size {size} below 32")));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let samples: Vec<Sample> = (0..n as u64).into_par_iter().map(|i| generate_sample(i, num_classes, size, seed)).collect();
    samples.par_iter().try_for_each(|s| write_ppm(&image_path(out_dir, &s.id), &s.image))?;
    let ann = out_dir.join("annotations.txt");
    fs::write(&ann, format_annotations(&samples)).map_err(|e| Error::io(&ann, e))?;
    let manifest = Manifest {
        classes: CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
        samples: n,
        size,
        seed,
    };
    let mpath = out_dir.join("manifest.txt");
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = root.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest = Manifest::parse(&read("manifest.txt")?)?;
        let records = parse_annotations(&read("annotations.txt")?, manifest.num_classes())?;
        let ids: Vec<String> = (0..manifest.samples).map(|i| format!("{i:06}")).collect();
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut boxes = vec![Vec::new(); ids.len()];
        for (n, (id, b)) in records.into_iter().enumerate() {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::data(format!("annotation record {}: unknown image `{id}`", n + 1)))?;
            boxes[i].push(b);
        }
        let samples = ids
            .into_par_iter()
            .zip(boxes)
            .map(|(id, boxes)| {
                let image = read_ppm(&image_path(root, &id))?;
                if image.width != manifest.size || image.height != manifest.size {
                    return Err(Error::data(format!("image {id} is {}x{}, manifest says {}", image.width, image.height, manifest.size)));
                }
                Ok(Sample { id, image, boxes })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_path_buf(), manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
