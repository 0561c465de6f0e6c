use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,total_loss,adv_ce,nat_ce,style_adv,style_nat,nat_val_acc,rob_val_acc,lr,seconds";

/// One completed epoch: mean training loss terms and validation accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub total_loss: f64,
    pub adv_ce: f64,
    pub nat_ce: f64,
    pub style_adv: f64,
    pub style_nat: f64,
    pub nat_val_acc: f64,
    pub rob_val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; epochs must strictly increase.
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Invalid(format!("epoch {} after {}", row.epoch, last.epoch)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("{CSV_HEADER}\n{}", String::from_utf8(body).expect("csv output is UTF-8")))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Format(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Format(format!("unexpected metrics header {header:?}")));
        }
        let mut log = MetricLog::new();
        for row in r.deserialize() {
            log.push(row.map_err(|e| Error::Format(e.to_string()))?)?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
