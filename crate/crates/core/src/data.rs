//! Synthetic shapes corpus, JSON-lines manifests, image loading and frame
//! sampling.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const RGB: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 210, 40],
    [150, 60, 190],
    [240, 140, 30],
];
const BACKGROUND: [u8; 3] = [24, 24, 24];
const POSITIONS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const NUMBER_WORDS: [&str; 5] = ["no", "one", "two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    YesNo,
    Number,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::YesNo, QuestionType::Number, QuestionType::Other];
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::YesNo => "yesno",
            QuestionType::Number => "number",
            QuestionType::Other => "other",
        })
    }
}

const YESNO_PREFIXES: [&str; 10] = ["is", "are", "does", "do", "was", "were", "can", "could", "has", "have"];

/// Prefix rule on the lower-cased question.
pub fn classify_question(question: &str) -> QuestionType {
    let q = question.trim().to_lowercase();
    let mut words = q.split_whitespace();
    let first = words.next().unwrap_or("");
    if YESNO_PREFIXES.contains(&first) {
        return QuestionType::YesNo;
    }
    if first == "how" && matches!(words.next(), Some("many" | "much")) {
        return QuestionType::Number;
    }
    QuestionType::Other
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<String>,
    pub caption: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub question_type: Option<QuestionType>,
    pub split: Split,
}

impl Record {
    pub fn qtype(&self) -> QuestionType {
        self.question_type.unwrap_or_else(|| classify_question(&self.question))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    /// Reads a manifest and checks that every referenced file exists.
    /// Missing question types are filled in by [`classify_question`].
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            rec.question_type = Some(rec.qtype());
            match (&rec.image, &rec.frames) {
                (Some(img), None) => {
                    if !root.join(img).is_file() {
                        return Err(Error::Data(format!("line {}: missing image {img}", n + 1)));
                    }
                }
                (None, Some(dir)) => {
                    if !root.join(dir).is_dir() || list_frames(&root.join(dir))?.is_empty() {
                        return Err(Error::Data(format!("line {}: no frames in {dir}", n + 1)));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "line {}: exactly one of image and frames is required",
                        n + 1
                    )))
                }
            }
            records.push(rec);
        }
        Ok(Manifest { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// `k` indices, the centre frame of each of `k` equal spans of the video.
pub fn stratified_frames(video_len: usize, k: usize) -> Result<Vec<usize>> {
    if video_len == 0 || k == 0 {
        return Err(Error::config(format!(
            "stratified sampling needs a non-empty video and k >= 1 (len {video_len}, k {k})"
        )));
    }
    Ok((0..k).map(|i| (2 * i + 1) * video_len / (2 * k)).collect())
}

/// Sorted `.ppm` files of a frame directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "ppm") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads an RGB image as `H x W x 3` with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// `(x - mean[c]) / std[c]` per channel of an `H x W x C` image.
pub fn standardize_pixels(image: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = *image.shape().last().unwrap_or(&0);
    if mean.len() != c || std.len() != c {
        return Err(Error::dim("standardize_pixels", image.shape(), &[mean.len(), std.len()]));
    }
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % c]) / std[i % c])
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
}

/// A 2 x 2 grid; cells in reading order, `None` when empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub cells: [Option<Object>; 4],
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let cells = std::array::from_fn(|_| {
                rng.gen_bool(0.75).then(|| Object {
                    shape: rng.gen_range(0..SHAPES.len()),
                    color: rng.gen_range(0..COLORS.len()),
                })
            });
            let s = Scene { cells };
            if s.objects().next().is_some() {
                return s;
            }
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = Object> + '_ {
        self.cells.iter().flatten().copied()
    }

    pub fn count_shape(&self, shape: usize) -> usize {
        self.objects().filter(|o| o.shape == shape).count()
    }

    /// e.g. "a red circle and two blue squares"
    pub fn caption(&self) -> String {
        let mut groups: Vec<(Object, usize)> = Vec::new();
        for o in self.objects() {
            match groups.iter_mut().find(|(g, _)| *g == o) {
                Some((_, n)) => *n += 1,
                None => groups.push((o, 1)),
            }
        }
        let phrases: Vec<String> = groups
            .iter()
            .map(|(o, n)| {
                let (c, s) = (COLORS[o.color], SHAPES[o.shape]);
                if *n == 1 {
                    format!("{} {c} {s}", article(c))
                } else {
                    format!("{} {c} {s}s", NUMBER_WORDS[*n])
                }
            })
            .collect();
        match phrases.split_last() {
            Some((last, [])) => last.clone(),
            Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
            None => String::new(),
        }
    }

    /// A question of the requested type and its exact answer.
    pub fn question(&self, kind: QuestionType, rng: &mut impl Rng) -> (String, String) {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        match kind {
            QuestionType::YesNo => {
                let s = rng.gen_range(0..SHAPES.len());
                if rng.gen_bool(0.5) {
                    (format!("is there a {}", SHAPES[s]), yes_no(self.count_shape(s) > 0))
                } else {
                    let c = rng.gen_range(0..COLORS.len());
                    let present = self.objects().any(|o| o.shape == s && o.color == c);
                    (
                        format!("is there {} {} {}", article(COLORS[c]), COLORS[c], SHAPES[s]),
                        yes_no(present),
                    )
                }
            }
            QuestionType::Number => {
                let s = rng.gen_range(0..SHAPES.len());
                (
                    format!("how many {}s are there", SHAPES[s]),
                    self.count_shape(s).to_string(),
                )
            }
            QuestionType::Other => {
                let filled: Vec<usize> = (0..4).filter(|&i| self.cells[i].is_some()).collect();
                let cell = *filled.choose(rng).expect("scenes are never empty");
                let o = self.cells[cell].expect("filled cell");
                if rng.gen_bool(0.5) {
                    (
                        format!("what color is the shape in the {}", POSITIONS[cell]),
                        COLORS[o.color].to_string(),
                    )
                } else {
                    (
                        format!("what shape is in the {}", POSITIONS[cell]),
                        SHAPES[o.shape].to_string(),
                    )
                }
            }
        }
    }

    /// Renders the grid. `moving = (cell, shift)` moves that cell's object
    /// horizontally by `shift` cell widths.
    pub fn render(&self, side: usize, moving: Option<(usize, f64)>) -> RgbImage {
        let cell = side as f64 / 2.0;
        let r = 0.35 * cell;
        let mut img = RgbImage::from_pixel(side as u32, side as u32, image::Rgb(BACKGROUND));
        for (i, o) in self.cells.iter().enumerate() {
            let Some(o) = o else { continue };
            let shift = match moving {
                Some((m, j)) if m == i => j * cell,
                _ => 0.0,
            };
            let cx = (i % 2) as f64 * cell + cell / 2.0 + shift;
            let cy = (i / 2) as f64 * cell + cell / 2.0;
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if inside(o.shape, dx, dy, r) {
                        img.put_pixel(x as u32, y as u32, image::Rgb(RGB[o.color]));
                    }
                }
            }
        }
        img
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // apex up, base at +r
        _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Settings of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenSettings {
    pub seed: u64,
    pub n: usize,
    pub image_side: usize,
    pub patch_size: usize,
    /// Every `val_every`-th record goes to the validation split (0 = none).
    pub val_every: usize,
    /// `Some(frames)` writes frame directories with one moving shape.
    pub video_frames: Option<usize>,
}

impl GenSettings {
    pub fn new(seed: u64, n: usize, image_side: usize) -> Self {
        GenSettings {
            seed,
            n,
            image_side,
            patch_size: 4,
            val_every: 4,
            video_frames: None,
        }
    }
}

/// Writes images (or frame directories) and `manifest.jsonl` into `out`.
/// Question types cycle so all three are equally represented.
pub fn gen_synthetic_vqa(settings: &GenSettings, out: &Path) -> Result<Manifest> {
    let s = settings;
    if s.patch_size == 0 || s.image_side % s.patch_size != 0 || s.image_side < 2 {
        return Err(Error::config(format!(
            "image_side {} not divisible by patch size {}",
            s.image_side, s.patch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let media = if s.video_frames.is_some() { "videos" } else { "images" };
    fs::create_dir_all(out.join(media))?;
    let mut records = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let scene = Scene::random(&mut rng);
        let kind = QuestionType::ALL[i % 3];
        let (question, answer) = scene.question(kind, &mut rng);
        let split = if s.val_every > 0 && i % s.val_every == s.val_every - 1 {
            Split::Val
        } else {
            Split::Train
        };
        let (image, frames) = match s.video_frames {
            None => {
                let rel = format!("images/{i:06}.ppm");
                write_ppm(&out.join(&rel), &scene.render(s.image_side, None))?;
                (Some(rel), None)
            }
            Some(len) => {
                let rel = format!("videos/{i:06}");
                let dir = out.join(&rel);
                fs::create_dir_all(&dir)?;
                let filled: Vec<usize> = (0..4).filter(|&c| scene.cells[c].is_some()).collect();
                let moving = *filled.choose(&mut rng).expect("scenes are never empty");
                for f in 0..len {
                    let phase = f as f64 / len.max(1) as f64 * std::f64::consts::TAU;
                    let img = scene.render(s.image_side, Some((moving, 0.12 * phase.sin())));
                    write_ppm(&dir.join(format!("frame_{f:04}.ppm")), &img)?;
                }
                (None, Some(rel))
            }
        };
        records.push(Record {
            image,
            frames,
            caption: scene.caption(),
            question,
            answer,
            question_type: Some(kind),
            split,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}
