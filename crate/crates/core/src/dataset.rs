//! Datasets on disk.
//!
//! A dataset directory holds
//!
//! ```text
//! config.txt          resolved configuration that generated it
//! terrain.gfd         elevation and prevailing winds
//! mask.gfd            land mask
//! norm_stats.txt      normalization fitted on the train split
//! samples/NNNNN_in.gfd, samples/NNNNN_hHH.gfd
//! manifest.txt        written last
//! ```
//!
//! Each manifest line is
//! `input targets horizons seed hour doy split`, with target paths and
//! horizons comma-separated and paths relative to the directory. A
//! directory without a manifest is incomplete and is refused.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{Field, LandMask, NormStats, Sample, Timestamp};
use crate::gfd::{read_grid, read_mask, write_grid, write_mask};
use crate::synthdata::TerrainWind;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";
pub const NORM_STATS: &str = "norm_stats.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

/// Contiguous index ranges for train, validation and test. Validation gets
/// at least one sample; train must keep at least one.
pub fn split_ranges(n: usize, val_fraction: f64, test_fraction: f64) -> Result<[Range<usize>; 3]> {
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_val + n_test >= n {
        return Err(Error::Input(format!(
            "{n} samples cannot be split into {n_val} validation and {n_test} test samples with a nonempty train split"
        )));
    }
    let n_train = n - n_val - n_test;
    Ok([0..n_train, n_train..n_train + n_val, n_train + n_val..n])
}

pub fn split_of(index: usize, ranges: &[Range<usize>; 3]) -> Split {
    if ranges[0].contains(&index) {
        Split::Train
    } else if ranges[1].contains(&index) {
        Split::Val
    } else {
        Split::Test
    }
}

/// A dataset loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub mask: LandMask,
    pub stats: NormStats,
}

impl Dataset {
    /// Split the samples and fit normalization on the train part.
    pub fn new(samples: Vec<Sample>, mask: LandMask, val_fraction: f64, test_fraction: f64) -> Result<Self> {
        let ranges = split_ranges(samples.len(), val_fraction, test_fraction)?;
        let stats = NormStats::fit(samples[ranges[0].clone()].iter().map(|s| &s.input))?;
        let splits = (0..samples.len()).map(|i| split_of(i, &ranges)).collect();
        Ok(Dataset {
            samples,
            splits,
            mask,
            stats,
        })
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }
}

fn terrain_field(tw: &TerrainWind) -> Result<Field> {
    let mut data = tw.elevation.clone();
    data.extend_from_slice(&tw.u);
    data.extend_from_slice(&tw.v);
    Field::new(
        tw.spec,
        vec!["elevation".into(), "u".into(), "v".into()],
        vec!["m".into(), "m/s".into(), "m/s".into()],
        data,
    )
}

fn input_name(i: usize) -> String {
    format!("samples/{i:05}_in.gfd")
}

fn target_name(i: usize, hour: u32) -> String {
    format!("samples/{i:05}_h{hour:02}.gfd")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `data` into `dir`, creating it if needed. Any earlier manifest is
/// removed first so a crash midway never leaves a stale complete marker.
pub fn write_dataset(dir: &Path, data: &Dataset, terrain: &TerrainWind, echo: &str) -> Result<()> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
    }
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    write_text(&dir.join(CONFIG_ECHO), echo)?;
    write_grid(&terrain_field(terrain)?, dir.join("terrain.gfd"))?;
    write_mask(&data.mask, dir.join("mask.gfd"))?;
    write_text(&dir.join(NORM_STATS), &data.stats.to_text())?;
    let mut text = String::from("# input targets horizons seed hour doy split\n");
    for (i, (s, split)) in data.samples.iter().zip(&data.splits).enumerate() {
        write_grid(&s.input, dir.join(input_name(i)))?;
        let mut targets = Vec::with_capacity(s.targets.len());
        for (t, &h) in s.targets.iter().zip(&s.lead_times) {
            let name = target_name(i, h);
            write_grid(t, dir.join(&name))?;
            targets.push(name);
        }
        let horizons: Vec<String> = s.lead_times.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            text,
            "{} {} {} {} {} {} {}",
            input_name(i),
            targets.join(","),
            horizons.join(","),
            s.seed,
            s.timestamp.hour,
            s.timestamp.doy,
            split.as_str()
        );
    }
    write_text(&manifest, &text)
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub input: String,
    pub targets: Vec<String>,
    pub horizons: Vec<u32>,
    pub seed: u64,
    pub timestamp: Timestamp,
    pub split: Split,
}

pub fn parse_manifest(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Input(format!("manifest line {}: {what}", lineno + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 7 {
            return Err(bad(&format!("expected 7 columns, found {}", cols.len())));
        }
        let targets: Vec<String> = cols[1].split(',').map(str::to_string).collect();
        let horizons = cols[2]
            .split(',')
            .map(|h| h.parse().map_err(|_| bad("bad horizon")))
            .collect::<Result<Vec<u32>>>()?;
        if targets.len() != horizons.len() {
            return Err(bad("target and horizon counts differ"));
        }
        out.push(Entry {
            input: cols[0].to_string(),
            targets,
            horizons,
            seed: cols[3].parse().map_err(|_| bad("bad seed"))?,
            timestamp: Timestamp {
                hour: cols[4].parse().map_err(|_| bad("bad hour"))?,
                doy: cols[5].parse().map_err(|_| bad("bad day of year"))?,
            },
            split: Split::parse(cols[6])?,
        });
    }
    if out.is_empty() {
        return Err(Error::Input("manifest lists no samples".into()));
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Input(format!(
            "{} has no {MANIFEST}; the dataset is missing or incomplete",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

pub fn read_stats(dir: &Path) -> Result<NormStats> {
    let path = dir.join(NORM_STATS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    NormStats::from_text(&text)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut splits = Vec::with_capacity(entries.len());
    for e in entries {
        let input = read_grid(dir.join(&e.input))?;
        let targets = e
            .targets
            .iter()
            .map(|t| read_grid(dir.join(t)))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample::new(input, targets, e.horizons, e.timestamp, e.seed)?);
        splits.push(e.split);
    }
    Ok(Dataset {
        samples,
        splits,
        mask: read_mask(dir.join("mask.gfd"))?,
        stats: read_stats(dir)?,
    })
}

pub fn read_terrain(dir: &Path) -> Result<Field> {
    read_grid(dir.join("terrain.gfd"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ranges_are_contiguous_and_cover() {
        let [a, b, c] = split_ranges(100, 0.1, 0.1).unwrap();
        assert_eq!((a, b, c), (0..80, 80..90, 90..100));
        let [a, b, c] = split_ranges(3, 0.1, 0.0).unwrap();
        assert_eq!((a, b, c), (0..2, 2..3, 3..3));
        assert!(split_ranges(1, 0.1, 0.0).is_err());
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let e = parse_manifest("# header\na b 12 1 2 3 train\nx y,z 12 1 2 3 val\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(parse_manifest("# only a header\n").is_err());
        assert!(parse_manifest("a b 12 1 2 3 holdout").is_err());
    }
}
