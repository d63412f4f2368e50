//! Destinations for loss rows, preview grids and checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::encode_image;
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::tensor::Tensor;

use super::checkpoint::{save_checkpoint, to_bytes};
use super::TrainState;

/// Header of the per-iteration loss log. `epoch` is zero-based,
/// `iteration` counts completed iterations before this one.
pub fn loss_csv_header() -> String {
    format!("epoch,iteration,lr,{}", LossReport::CSV_HEADER)
}

pub fn loss_csv_row(epoch: usize, iteration: u64, lr: f64, report: &LossReport) -> String {
    format!("{epoch},{iteration},{lr},{}", report.csv_fields())
}

pub trait ProgressSink {
    fn loss_row(&mut self, epoch: usize, iteration: u64, lr: f64, report: &LossReport) -> Result<()>;
    fn grid(&mut self, epoch: usize, grid: &Tensor<f32>) -> Result<()>;
    fn checkpoint(&mut self, epoch: usize, state: &TrainState) -> Result<()>;
}

/// Writes `loss.csv`, `grids/epoch_NNNN.png` and
/// `checkpoints/epoch_NNNN.ckpt` (plus `checkpoints/latest.ckpt`) under one
/// directory. Epoch numbers in file names are one-based.
pub struct DirSink {
    out: PathBuf,
    csv_path: PathBuf,
    csv: BufWriter<File>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl DirSink {
    /// Starts a fresh log, or when `resume_from` is given keeps the rows of
    /// iterations before it and appends after them.
    pub fn new(out: &Path, resume_from: Option<u64>) -> Result<Self> {
        create_dir(out)?;
        create_dir(&out.join("grids"))?;
        create_dir(&out.join("checkpoints"))?;
        let csv_path = out.join("loss.csv");
        let mut kept = Vec::new();
        if let (Some(limit), true) = (resume_from, csv_path.is_file()) {
            let f = File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&csv_path, e))?;
                let iter: Option<u64> = line.split(',').nth(1).and_then(|v| v.parse().ok());
                if iter.is_some_and(|i| i < limit) {
                    kept.push(line);
                }
            }
        }
        let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = BufWriter::new(file);
        let mut write = |l: &str| writeln!(csv, "{l}");
        write(&loss_csv_header()).map_err(|e| Error::io(&csv_path, e))?;
        for l in &kept {
            write(l).map_err(|e| Error::io(&csv_path, e))?;
        }
        Ok(Self {
            out: out.to_path_buf(),
            csv_path,
            csv,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.out.join("checkpoints").join(format!("epoch_{:04}.ckpt", epoch + 1))
    }
}

impl ProgressSink for DirSink {
    fn loss_row(&mut self, epoch: usize, iteration: u64, lr: f64, report: &LossReport) -> Result<()> {
        writeln!(self.csv, "{}", loss_csv_row(epoch, iteration, lr, report)).map_err(|e| Error::io(&self.csv_path, e))
    }

    fn grid(&mut self, epoch: usize, grid: &Tensor<f32>) -> Result<()> {
        self.flush()?;
        encode_image(grid, &self.out.join("grids").join(format!("epoch_{:04}.png", epoch + 1)))
    }

    fn checkpoint(&mut self, epoch: usize, state: &TrainState) -> Result<()> {
        self.flush()?;
        let path = self.checkpoint_path(epoch);
        save_checkpoint(state, &path)?;
        let latest = self.out.join("checkpoints").join("latest.ckpt");
        std::fs::copy(&path, &latest).map_err(|e| Error::io(&latest, e))?;
        log::info!("checkpoint {}", path.display());
        Ok(())
    }
}

/// Keeps everything in memory; checkpoints are stored serialized.
#[derive(Default)]
pub struct MemorySink {
    pub rows: Vec<String>,
    pub reports: Vec<LossReport>,
    pub grids: Vec<Tensor<f32>>,
    pub checkpoints: Vec<(usize, Vec<u8>)>,
}

impl ProgressSink for MemorySink {
    fn loss_row(&mut self, epoch: usize, iteration: u64, lr: f64, report: &LossReport) -> Result<()> {
        self.rows.push(loss_csv_row(epoch, iteration, lr, report));
        self.reports.push(*report);
        Ok(())
    }

    fn grid(&mut self, _epoch: usize, grid: &Tensor<f32>) -> Result<()> {
        self.grids.push(grid.clone());
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, state: &TrainState) -> Result<()> {
        self.checkpoints.push((epoch, to_bytes(state)?));
        Ok(())
    }
}
