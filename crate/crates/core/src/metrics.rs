//! CSV emission and parsing for run histories and quantization sweeps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::QuantRow;
use crate::train::RunHistory;

pub const HISTORY_HEADER: [&str; 6] = ["scenario", "trial", "epoch", "train_loss", "train_acc", "val_acc"];
pub const QUANT_HEADER: [&str; 3] = ["bits", "accuracy", "total_param_bits"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub scenario: String,
    pub trial: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn history_rows(histories: &[RunHistory]) -> Vec<HistoryRow> {
    histories
        .iter()
        .flat_map(|h| {
            h.epochs.iter().map(move |e| HistoryRow {
                scenario: h.scenario.clone(),
                trial: h.trial,
                epoch: e.epoch,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                val_acc: e.val_acc,
            })
        })
        .collect()
}

/// Writes a header row followed by one record per item, even when `rows`
/// is empty.
pub fn write_csv<W: Write, T: Serialize>(out: W, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: DeserializeOwned>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn emit_history(histories: &[RunHistory], path: &Path) -> Result<()> {
    write_csv(fs::File::create(path)?, &HISTORY_HEADER, &history_rows(histories))
}

pub fn emit_quant(rows: &[QuantRow], path: &Path) -> Result<()> {
    write_csv(fs::File::create(path)?, &QUANT_HEADER, rows)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    read_csv(fs::File::open(path)?)
}

pub fn read_quant(path: &Path) -> Result<Vec<QuantRow>> {
    read_csv(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn history(trial: usize, epochs: usize) -> RunHistory {
        RunHistory {
            scenario: "original".into(),
            trial,
            seed: 7,
            epochs: (0..epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / (e as f64 + 3.0),
                    train_acc: 0.1 * e as f64,
                    val_acc: (e as f64).sqrt() / 7.0,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_history_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &HISTORY_HEADER, &history_rows(&[])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "scenario,trial,epoch,train_loss,train_acc,val_acc\n");
    }

    #[test]
    fn history_round_trip() {
        let rows = history_rows(&[history(0, 3), history(1, 4)]);
        assert_eq!(rows.len(), 7);
        let mut buf = Vec::new();
        write_csv(&mut buf, &HISTORY_HEADER, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(!text.contains('\r'));
        let back: Vec<HistoryRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn quant_round_trip() {
        let rows = vec![
            QuantRow { bits: 4, accuracy: 0.3, total_param_bits: 100 },
            QuantRow { bits: 32, accuracy: 1.0 / 3.0, total_param_bits: 800 },
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &QUANT_HEADER, &rows).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("bits,accuracy,total_param_bits\n4,"));
        let back: Vec<QuantRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }
}
