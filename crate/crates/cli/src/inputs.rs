//! Dataset arguments shared by several commands.

use std::path::{Path, PathBuf};

use clap::Args;
use prunas_core::data::{load_csv, load_idx, Dataset, SynthSpec};

use crate::run::InputFile;
use crate::Fail;

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Dataset: a saved dataset file, a CSV file, or a directory holding
    /// IDX image and label files.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// JSON spec of a synthetic planted-difficulty dataset.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Number of classes, when it cannot be read from the data.
    #[arg(long)]
    pub classes: Option<usize>,
}

fn idx_pair(dir: &Path) -> Result<(PathBuf, PathBuf), Fail> {
    let entries = std::fs::read_dir(dir).map_err(|e| Fail::input(format!("{}: {e}", dir.display())))?;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    let pick = |needle: &str| {
        // prefer the training split when several are present
        let matches: Vec<&PathBuf> = names
            .iter()
            .filter(|p| {
                p.file_name()
                    .map_or(false, |n| n.to_string_lossy().contains(needle))
            })
            .collect();
        matches
            .iter()
            .find(|p| p.to_string_lossy().contains("train"))
            .or(matches.first())
            .map(|p| (*p).clone())
    };
    match (pick("images"), pick("labels")) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(Fail::input(format!(
            "{}: expected IDX files named *images* and *labels*",
            dir.display()
        ))),
    }
}

impl DataArgs {
    pub fn is_set(&self) -> bool {
        self.data.is_some() || self.synth.is_some()
    }

    /// Loads the dataset and returns it with the files it came from.
    pub fn load(&self) -> Result<(Dataset, Vec<InputFile>), Fail> {
        if let Some(spec) = &self.synth {
            let s = SynthSpec::load(spec).map_err(|e| Fail::input(format!("{}: {e}", spec.display())))?;
            let d = s.generate().map_err(Fail::from)?;
            return Ok((d, vec![InputFile::hash(spec)?]));
        }
        let Some(path) = &self.data else {
            return Err(Fail::input("no dataset given; use --data or --synth"));
        };
        if !path.exists() {
            return Err(Fail::input(format!(
                "{}: no such file or directory",
                path.display()
            )));
        }
        let wrap = |e: prunas_core::Error| Fail::input(format!("{}: {e}", path.display()));
        if path.is_dir() {
            let (images, labels) = idx_pair(path)?;
            let d = load_idx(&images, &labels, self.classes).map_err(wrap)?;
            return Ok((d, vec![InputFile::hash(&images)?, InputFile::hash(&labels)?]));
        }
        let d = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => load_csv(path, self.classes).map_err(wrap)?,
            _ => Dataset::load(path).map_err(wrap)?,
        };
        Ok((d, vec![InputFile::hash(path)?]))
    }
}

/// Parses `1,2,3` or `0..4` into seeds.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a
            .trim()
            .parse()
            .map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad seed range end: {e}"))?;
        if b <= a {
            return Err("empty seed range".into());
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed `{v}`: {e}"))
        })
        .collect()
}

/// A parsed seed list, kept as one clap value.
#[derive(Clone, Debug)]
pub struct Seeds(pub Vec<u64>);

pub fn seed_list(s: &str) -> Result<Seeds, String> {
    parse_seeds(s).map(Seeds)
}

/// Parses `C,H,W`.
pub fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension `{x}`: {e}"))
        })
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected C,H,W".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_and_shapes() {
        assert_eq!(parse_seeds("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
        assert_eq!(parse_shape("1,16,16").unwrap(), [1, 16, 16]);
        assert!(parse_shape("1,16").is_err());
    }
}
