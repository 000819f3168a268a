//! On-disk datasets: binary PGM slices plus one stats CSV.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! stats.csv                      sample_id,slice,present,area,eccentricity,laterality,location[,extra...]
//! {sample_id}_{slice}.img.pgm    P5, maxval 255
//! {sample_id}_{slice}.mask.pgm   P5, 0 or 255
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{Laterality, Location, RegionStats, SegmentationSample};

pub const STATS_FILE: &str = "stats.csv";
const BASE_COLUMNS: [&str; 7] = [
    "sample_id",
    "slice",
    "present",
    "area",
    "eccentricity",
    "laterality",
    "location",
];

/// 8-bit grayscale image as read from a PGM file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary (P5) PGM with maxval 255; `file` only labels errors.
pub fn decode_pgm(bytes: &[u8], file: &Path) -> Result<Gray> {
    let mut pos = 0usize;
    let err = |at: usize, msg: &str| Error::parse(file, at as u64, msg);
    if bytes.get(..2) != Some(b"P5") {
        return Err(err(0, "missing P5 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a header integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, "header integer out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, "only maxval 255 is supported"));
    }
    let need = width * height;
    if bytes.len() - pos != need {
        return Err(err(
            pos,
            &format!("expected {} pixel bytes, found {}", need, bytes.len() - pos),
        ));
    }
    Ok(Gray {
        width,
        height,
        pixels: bytes[pos..].to_vec(),
    })
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn image_file(key: &str) -> String {
    format!("{key}.img.pgm")
}

pub fn mask_file(key: &str) -> String {
    format!("{key}.mask.pgm")
}

fn extra_columns(samples: &[SegmentationSample]) -> Vec<String> {
    let mut cols: Vec<String> = samples
        .iter()
        .flat_map(|s| s.stats.extra.keys().cloned())
        .collect();
    cols.sort();
    cols.dedup();
    cols
}

fn check_field(v: &str) -> Result<()> {
    if v.is_empty() || v.contains([',', '\n', '\r', '"']) {
        return Err(Error::InvalidArgument(format!(
            "value {v:?} cannot be stored in a stats CSV field"
        )));
    }
    Ok(())
}

pub fn stats_csv(samples: &[SegmentationSample]) -> Result<String> {
    let extras = extra_columns(samples);
    let mut out = BASE_COLUMNS.join(",");
    for c in &extras {
        check_field(c)?;
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for s in samples {
        check_field(&s.sample_id)?;
        let st = &s.stats;
        write!(
            out,
            "{},{},{},{},{},{},{}",
            s.sample_id,
            s.slice_index,
            u8::from(st.present),
            st.area,
            st.eccentricity,
            st.laterality.as_str(),
            st.location.as_str()
        )
        .expect("string write");
        for c in &extras {
            let v = st.extra.get(c).map(String::as_str).unwrap_or("none");
            check_field(v)?;
            out.push(',');
            out.push_str(v);
        }
        out.push('\n');
    }
    Ok(out)
}

/// One parsed stats row.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub sample_id: String,
    pub slice_index: u32,
    pub stats: RegionStats,
}

pub fn parse_stats_csv(text: &str, file: &Path) -> Result<Vec<StatsRow>> {
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| Error::parse(file, 0, "empty stats file"))?;
    let cols: Vec<&str> = header.trim_end_matches(['\n', '\r']).split(',').collect();
    if cols.len() < BASE_COLUMNS.len() || cols[..BASE_COLUMNS.len()] != BASE_COLUMNS {
        return Err(Error::parse(file, 0, format!("header must start with {}", BASE_COLUMNS.join(","))));
    }
    let extras = &cols[BASE_COLUMNS.len()..];
    offset += header.len();
    let mut rows = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::parse(file, at as u64, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let bad = |what: &str| Error::parse(file, at as u64, format!("invalid {what}"));
        let present = match f[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("present flag")),
        };
        let mut stats = RegionStats {
            present,
            area: f[3].parse().map_err(|_| bad("area"))?,
            eccentricity: f[4].parse().map_err(|_| bad("eccentricity"))?,
            laterality: Laterality::parse(f[5]).ok_or_else(|| bad("laterality"))?,
            location: Location::parse(f[6]).ok_or_else(|| bad("location"))?,
            extra: BTreeMap::new(),
        };
        for (name, v) in extras.iter().zip(&f[BASE_COLUMNS.len()..]) {
            stats.extra.insert((*name).to_owned(), (*v).to_owned());
        }
        rows.push(StatsRow {
            sample_id: f[0].to_owned(),
            slice_index: f[1].parse().map_err(|_| bad("slice"))?,
            stats,
        });
    }
    Ok(rows)
}

pub fn read_stats(path: &Path) -> Result<Vec<StatsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stats_csv(&text, path)
}

/// Writes every sample's image and mask plus `stats.csv` into `dir`.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = stats_csv(samples)?;
    for s in samples {
        let key = s.key();
        let img = Gray {
            width: s.width,
            height: s.height,
            pixels: quantize(&s.image),
        };
        write_pgm(&dir.join(image_file(&key)), &img)?;
        let mask = Gray {
            width: s.width,
            height: s.height,
            pixels: s.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect(),
        };
        write_pgm(&dir.join(mask_file(&key)), &mask)?;
    }
    let path = dir.join(STATS_FILE);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    load_inner(dir, true).map(|v| v.into_iter().map(|(s, _)| s).collect())
}

/// Like [`load_dataset`], but a missing mask file yields an all-background
/// mask and `false` in the second slot.
pub fn load_dataset_masks_optional(dir: &Path) -> Result<Vec<(SegmentationSample, bool)>> {
    load_inner(dir, false)
}

fn load_inner(dir: &Path, require_masks: bool) -> Result<Vec<(SegmentationSample, bool)>> {
    let rows = read_stats(&dir.join(STATS_FILE))?;
    rows.into_iter()
        .map(|row| {
            let key = format!("{}_{}", row.sample_id, row.slice_index);
            let img_path = dir.join(image_file(&key));
            let img = read_pgm(&img_path)?;
            let mask_path = dir.join(mask_file(&key));
            let mask = if require_masks || mask_path.exists() {
                let mask = read_pgm(&mask_path)?;
                if (mask.width, mask.height) != (img.width, img.height) {
                    return Err(Error::parse(mask_path, 0, "mask size differs from image size"));
                }
                Some(mask.pixels.iter().map(|&p| u8::from(p > 127)).collect())
            } else {
                None
            };
            let has_mask = mask.is_some();
            Ok((
                SegmentationSample {
                    sample_id: row.sample_id,
                    slice_index: row.slice_index,
                    height: img.height,
                    width: img.width,
                    image: img.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
                    mask: mask.unwrap_or_else(|| vec![0; img.pixels.len()]),
                    stats: row.stats,
                },
                has_mask,
            ))
        })
        .collect()
}
