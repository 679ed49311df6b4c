//! Synthetic text images with controllable degradation.
//!
//! Glyphs come from a committed 7×5 bitmap atlas, so renders are exact on
//! every platform. Each sample draws from its own RNG stream derived from the
//! dataset seed and the sample index.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, RenderConfig, WordSplit};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

const GLYPH_SOURCE: &str = include_str!("../data/glyphs.txt");
const WORD_SOURCE: &str = include_str!("../data/words.txt");

pub const GLYPH_ROWS: usize = 7;
pub const GLYPH_COLS: usize = 5;
/// Rendered glyphs are stretched vertically by this factor.
pub const GLYPH_Y_SCALE: usize = 2;
/// Blank columns left of the first glyph in a clean render.
pub const LEFT_MARGIN: usize = 2;
/// Horizontal advance per character in pixels.
pub const GLYPH_ADVANCE: usize = GLYPH_COLS + 1;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const CHECKSUM_NAME: &str = "manifest.sha";
pub const MANIFEST_HEADER: &str = "filename\tlabel\tseverity\tseed";

/// Ordered character set. Class 0 is the end token; character `k` of the
/// list is class `k + 1`. Padding has no class and is masked from the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            chars: ('a'..='z').chain('0'..='9').collect(),
        }
    }
}

impl Vocab {
    pub fn new(chars: &[char]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &c in chars {
            if !(c.is_ascii_lowercase() || c.is_ascii_digit()) {
                return Err(Error::arg(format!("vocab character {c:?} is not lowercase alphanumeric")));
            }
            if !seen.insert(c) {
                return Err(Error::arg(format!("duplicate vocab character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::arg("empty vocab"));
        }
        Ok(Vocab { chars: chars.to_vec() })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn end_index(&self) -> usize {
        0
    }

    /// Number of classes `D`, including the end token.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|i| self.chars.get(i)).copied()
    }

    /// Checks that `text` is non-empty, fits `max_len` characters and uses
    /// only vocab characters.
    pub fn check_text(&self, text: &str, max_len: usize) -> Result<()> {
        let n = text.chars().count();
        if n == 0 || n > max_len {
            return Err(Error::arg(format!("text {text:?} must have 1..={max_len} characters")));
        }
        if let Some(c) = text.chars().find(|&c| self.index_of(c).is_none()) {
            return Err(Error::arg(format!("text {text:?} contains {c:?}, not in vocab")));
        }
        Ok(())
    }
}

/// Lowercases and keeps only ASCII alphanumerics, the comparison form used
/// for accuracy.
pub fn normalize_text(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// `GLYPH_ROWS×GLYPH_COLS` binary bitmaps keyed by character.
#[derive(Clone, Debug)]
pub struct GlyphAtlas {
    glyphs: HashMap<char, [[bool; GLYPH_COLS]; GLYPH_ROWS]>,
}

impl GlyphAtlas {
    /// The committed atlas.
    pub fn builtin() -> &'static GlyphAtlas {
        static ATLAS: std::sync::OnceLock<GlyphAtlas> = std::sync::OnceLock::new();
        ATLAS.get_or_init(|| Self::parse(GLYPH_SOURCE).expect("committed glyph atlas parses"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("glyphs.txt", msg);
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with("# "))
            .collect();
        if !lines.len().is_multiple_of(GLYPH_ROWS + 1) {
            return Err(bad(format!("{} lines is not a whole number of glyph blocks", lines.len())));
        }
        let mut glyphs = HashMap::new();
        for block in lines.chunks(GLYPH_ROWS + 1) {
            let mut head = block[0].chars();
            let c = match (head.next(), head.next()) {
                (Some(c), None) => c,
                _ => return Err(bad(format!("bad glyph header {:?}", block[0]))),
            };
            let mut bitmap = [[false; GLYPH_COLS]; GLYPH_ROWS];
            for (r, line) in block[1..].iter().enumerate() {
                if line.len() != GLYPH_COLS || !line.chars().all(|ch| ch == '#' || ch == '.') {
                    return Err(bad(format!("glyph {c:?} row {r} is {line:?}")));
                }
                for (k, ch) in line.chars().enumerate() {
                    bitmap[r][k] = ch == '#';
                }
            }
            if glyphs.insert(c, bitmap).is_some() {
                return Err(bad(format!("glyph {c:?} defined twice")));
            }
        }
        Ok(GlyphAtlas { glyphs })
    }

    pub fn glyph(&self, c: char) -> Option<&[[bool; GLYPH_COLS]; GLYPH_ROWS]> {
        self.glyphs.get(&c)
    }

    pub fn hamming(&self, a: char, b: char) -> Option<usize> {
        let (ga, gb) = (self.glyph(a)?, self.glyph(b)?);
        Some(
            ga.iter()
                .flatten()
                .zip(gb.iter().flatten())
                .filter(|(x, y)| x != y)
                .count(),
        )
    }

    pub fn covers(&self, vocab: &Vocab) -> bool {
        vocab.chars().iter().all(|c| self.glyphs.contains_key(c))
    }
}

/// The committed word list.
pub fn word_list() -> Vec<&'static str> {
    WORD_SOURCE.lines().map(str::trim).filter(|w| !w.is_empty()).collect()
}

/// Words in `split` with length in `[min_len, max_len]`. Every fifth word of
/// the committed list (by position) belongs to the test split.
pub fn words_for(split: WordSplit, min_len: usize, max_len: usize) -> Vec<&'static str> {
    word_list()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| match split {
            WordSplit::All => true,
            WordSplit::Train => i % 5 != 4,
            WordSplit::Test => i % 5 == 4,
        })
        .map(|(_, w)| w)
        .filter(|w| (min_len..=max_len).contains(&w.len()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×h×w`, values in `[0, 1]`.
    pub image: Tensor,
    pub text: String,
    pub severity: f64,
    pub seed: u64,
}

/// Renders `text` dark-on-light, then applies corruption scaled by
/// `severity`. Text starts `LEFT_MARGIN` pixels from the left edge; severity 0
/// draws nothing from `rng` and yields the clean render.
pub fn render(text: &str, cfg: &RenderConfig, severity: f64, rng: &mut RngState) -> Result<Sample> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::arg(format!("severity {severity} outside [0, 1]")));
    }
    let vocab = Vocab::default();
    let (h, w) = (cfg.height, cfg.width);
    let max_chars = (w.saturating_sub(LEFT_MARGIN) + 1) / GLYPH_ADVANCE;
    vocab.check_text(text, max_chars)?;
    let atlas = GlyphAtlas::builtin();
    let seed = rng.seed();
    let s = severity;
    let clean = s == 0.0;

    let (mut bg, mut ink) = ([1.0; 3], [0.0; 3]);
    if !clean {
        let ground = 1.0 - rng.uniform(0.0, 0.2 * s);
        let dark = rng.uniform(0.0, 0.35 * s);
        for ch in 0..3 {
            bg[ch] = ground + rng.uniform(-0.05 * s, 0.05 * s);
            ink[ch] = dark + rng.uniform(-0.05 * s, 0.05 * s);
        }
    }
    let mut img = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        img[ch * h * w..(ch + 1) * h * w].fill(bg[ch]);
    }

    let n = text.chars().count();
    let text_w = n * GLYPH_ADVANCE - 1;
    let glyph_h = GLYPH_ROWS * GLYPH_Y_SCALE;
    let base_x = LEFT_MARGIN.min(w - text_w) as i64;
    let base_y = (h.saturating_sub(glyph_h)) as i64 / 2;
    let shift = ((3.0 * s).round() as i64).min((w - text_w) as i64 - base_x);
    let glyph_jitter = (1.5 * s).round() as i64;
    let x0 = if clean { base_x } else { base_x + rng.range_inclusive(0, shift) };
    for (k, c) in text.chars().enumerate() {
        let bitmap = atlas.glyph(c).expect("vocab characters have glyphs");
        let (dx, dy) = if clean {
            (0, 0)
        } else {
            (
                rng.range_inclusive(-glyph_jitter, glyph_jitter),
                rng.range_inclusive(-glyph_jitter, glyph_jitter),
            )
        };
        let gx = x0 + (k * GLYPH_ADVANCE) as i64 + dx;
        let gy = base_y + dy;
        for (r, row) in bitmap.iter().enumerate() {
            for (col, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                let x = gx + col as i64;
                for sy in 0..GLYPH_Y_SCALE {
                    let y = gy + (r * GLYPH_Y_SCALE + sy) as i64;
                    if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                        for (ch, &v) in ink.iter().enumerate() {
                            img[ch * h * w + y as usize * w + x as usize] = v;
                        }
                    }
                }
            }
        }
    }

    if !clean {
        let blur_weight = 0.8 * s;
        box_blur_blend(&mut img, h, w, 1, blur_weight);

        let occlusions = (2.0 * s).floor() as usize;
        for _ in 0..occlusions {
            let ow = 1 + rng.below(2);
            let oh = 3 + rng.below(4);
            let ox = x0 + rng.range_inclusive(0, text_w as i64 - ow as i64);
            let oy = rng.range_inclusive(0, (h - oh) as i64);
            let shade = rng.uniform(0.0, 1.0);
            for y in oy..oy + oh as i64 {
                for x in ox..ox + ow as i64 {
                    if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                        for ch in 0..3 {
                            img[ch * h * w + y as usize * w + x as usize] = shade;
                        }
                    }
                }
            }
        }

        let brightness = rng.uniform(-0.1 * s, 0.1 * s);
        let sigma = 0.15 * s;
        for v in img.iter_mut() {
            *v += brightness + sigma * rng.normal();
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], img)?,
        text: text.to_string(),
        severity,
        seed,
    })
}

/// Blends each channel with its `(2r+1)²` box average (edge-clamped) by
/// `weight`.
fn box_blur_blend(img: &mut [f64], h: usize, w: usize, r: usize, weight: f64) {
    let plane = h * w;
    let src = img.to_vec();
    let r = r as i64;
    for ch in 0..img.len() / plane {
        let p = &src[ch * plane..(ch + 1) * plane];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                        acc += p[yy * w + xx];
                    }
                }
                let avg = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
                let i = y as usize * w + x as usize;
                img[ch * plane + i] = (1.0 - weight) * p[i] + weight * avg;
            }
        }
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub label: String,
    pub severity: f64,
    pub seed: u64,
}

/// Label, severity and render seed for sample `index` of a dataset.
pub fn sample_spec(cfg: &DatasetConfig, index: usize) -> Result<(String, f64, u64)> {
    let mut rng = RngState::derive(cfg.seed, index as u64);
    let vocab = Vocab::default();
    let words = words_for(cfg.word_split, cfg.min_len, cfg.max_len);
    let use_word = rng.uniform(0.0, 1.0) < cfg.word_fraction;
    let label = if use_word {
        if words.is_empty() {
            return Err(Error::Config(format!(
                "no {:?} words with length {}..={}",
                cfg.word_split, cfg.min_len, cfg.max_len
            )));
        }
        words[rng.below(words.len())].to_string()
    } else {
        let len = rng.range_inclusive(cfg.min_len as i64, cfg.max_len as i64) as usize;
        (0..len).map(|_| vocab.chars()[rng.below(vocab.chars().len())]).collect()
    };
    let severity = cfg.severities[rng.below(cfg.severities.len())];
    Ok((label, severity, rng.next_u64()))
}

/// Renders sample `index` in memory.
pub fn generate_sample(cfg: &DatasetConfig, render_cfg: &RenderConfig, index: usize) -> Result<Sample> {
    let (label, severity, seed) = sample_spec(cfg, index)?;
    render(&label, render_cfg, severity, &mut RngState::new(seed))
}

pub fn sample_filename(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Writes `cfg.n` samples plus `manifest.tsv` and `manifest.sha` into `dir`.
pub fn generate_dataset(cfg: &DatasetConfig, render_cfg: &RenderConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    render_cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rendered: Vec<(ManifestEntry, Vec<u8>)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(cfg, render_cfg, i)?;
            let entry = ManifestEntry {
                filename: sample_filename(i),
                label: sample.text.clone(),
                severity: sample.severity,
                seed: sample.seed,
            };
            Ok((entry, encode_ppm(&sample.image)?))
        })
        .collect::<Result<_>>()?;

    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut sums = String::new();
    let mut entries = Vec::with_capacity(rendered.len());
    for (entry, bytes) in rendered {
        let path = dir.join(&entry.filename);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", entry.filename, entry.label, entry.severity, entry.seed));
        sums.push_str(&format!("{}  {}\n", sha256_hex(&bytes), entry.filename));
        entries.push(entry);
    }
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let spath = dir.join(CHECKSUM_NAME);
    fs::write(&spath, sums).map_err(|e| Error::io(&spath, e))?;
    Ok(entries)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary `P6` PPM with maxval 255; values are rounded to the nearest level.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape(format!("PPM image must be 3×h×w, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("PPM image must have 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    if fields[3] != "255" {
        return Err(bad("PPM maxval must be 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("truncated PPM header"));
    }
    let pixels = &bytes[pos + 1..];
    if pixels.len() != 3 * h * w {
        return Err(bad(&format!(
            "expected {} pixel bytes for {w}x{h}, found {}",
            3 * h * w,
            pixels.len()
        )));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = pixels[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(&path, "missing or wrong header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::format(&path, format!("line {}: expected 4 columns", i + 2)));
        }
        let severity = cols[2]
            .parse()
            .map_err(|_| Error::format(&path, format!("line {}: bad severity", i + 2)))?;
        let seed = cols[3]
            .parse()
            .map_err(|_| Error::format(&path, format!("line {}: bad seed", i + 2)))?;
        out.push(ManifestEntry {
            filename: cols[0].to_string(),
            label: cols[1].to_string(),
            severity,
            seed,
        });
    }
    Ok(out)
}

fn read_checksums(dir: &Path) -> Result<Option<HashMap<String, String>>> {
    let path = dir.join(CHECKSUM_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::format(&path, format!("bad checksum line {line:?}")))?;
        map.insert(name.to_string(), hash.to_string());
    }
    Ok(Some(map))
}

/// A loaded sample and the file it came from.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub path: PathBuf,
    pub sample: Sample,
}

/// Loads every sample in manifest order, verifying checksums when
/// `manifest.sha` is present.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let entries = read_manifest(dir)?;
    let sums = read_checksums(dir)?;
    entries
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.filename);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if let Some(sums) = &sums {
                match sums.get(&e.filename) {
                    Some(h) if *h == sha256_hex(&bytes) => {}
                    Some(_) => return Err(Error::format(&path, "checksum mismatch")),
                    None => return Err(Error::format(&path, "no checksum entry")),
                }
            }
            let image = decode_ppm(&bytes, &path)?;
            Ok(LoadedSample {
                path,
                sample: Sample {
                    image,
                    text: e.label,
                    severity: e.severity,
                    seed: e.seed,
                },
            })
        })
        .collect()
}
