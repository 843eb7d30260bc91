use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{QueryDataError, QueryRecord};

/// Reads one JSON record per line. Blank lines are skipped; every other
/// problem is reported with its 1-based line number.
pub fn read_dataset_from<R: Read>(reader: R) -> Result<Vec<QueryRecord>, QueryDataError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| QueryDataError::Line { line: i + 1, message };
        let record: QueryRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        record.validate().map_err(|e| at(e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, QueryDataError> {
    read_dataset_from(File::open(path)?)
}

pub fn write_dataset_to<W: Write>(records: &[QueryRecord], writer: W) -> Result<(), QueryDataError> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| QueryDataError::InvalidRecord(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(records: &[QueryRecord], path: impl AsRef<Path>) -> Result<(), QueryDataError> {
    write_dataset_to(records, File::create(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<QueryRecord>,
    pub val: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

/// Shuffles record indices with `seed` and cuts them by `ratio`
/// (train:val:test). Each record lands in exactly one split.
pub fn split_records(records: &[QueryRecord], ratio: [u32; 3], seed: u64) -> Result<Splits, QueryDataError> {
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(QueryDataError::InvalidConfig("split ratio sums to zero".into()));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = records.len();
    let n_train = n * ratio[0] as usize / total as usize;
    let n_val = n * ratio[1] as usize / total as usize;
    let pick = |range: &[usize]| range.iter().map(|&i| records[i].clone()).collect();
    Ok(Splits {
        train: pick(&idx[..n_train]),
        val: pick(&idx[n_train..n_train + n_val]),
        test: pick(&idx[n_train + n_val..]),
    })
}
