use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::config::GenConfig;
use super::task::{Episode, EpisodeRecord};
use crate::error::{Error, Result};

/// Writes one JSON record per line.
pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut out, &ep.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file and regenerates each episode's scene.
pub fn read_jsonl(path: &Path, cfg: &GenConfig) -> Result<Vec<Episode>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        episodes.push(
            Episode::from_record(rec, cfg)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(episodes)
}
