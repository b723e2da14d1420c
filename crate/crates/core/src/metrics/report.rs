use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{
    bits_to_mb, count_operations, energy_from_counts, model_bits, record_trace, trace_synops,
};
use crate::arch::Network;
use crate::data::{Dataset, Encoding};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::train::{evaluate, PipelineResult};

pub const REPORT_CSV_HEADER: &str =
    "model,acc,model_size_mb,synops,bit_synops,adds,mults,energy_mj,timesteps";
pub const COMPARISON_CSV_HEADER: &str = "pipeline,acc,model_size_mb,bit_synops,design_seconds";

const CHUNK: usize = 100;

/// Accuracy and resource figures of one deployed network. Operation counts
/// are per sample, averaged over the measured dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceReport {
    pub model: String,
    pub accuracy: f64,
    pub model_size_mb: f64,
    pub dense_size_mb: f64,
    pub synops: f64,
    pub bit_synops: f64,
    pub adds: f64,
    pub mults: f64,
    pub synaptic_adds: f64,
    pub energy_mj: f64,
    pub timesteps: usize,
    pub cell_bits: Vec<u32>,
    pub pruning_rate: f64,
    pub config_hash: String,
}

impl ResourceReport {
    /// Runs `net` over `data` in evaluation mode and fills every column.
    pub fn measure<T: Scalar>(
        model: &str,
        net: &Network<T>,
        data: &Dataset<T>,
        enc: Encoding,
        config_hash: &str,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(SnasError::Dataset(
                "cannot report on an empty dataset".into(),
            ));
        }
        let steps = net.steps();
        let (mut synops, mut bit_synops) = (0.0, 0.0);
        let (mut adds, mut mults, mut syn) = (0u64, 0u64, 0u64);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let batch = data.batch(chunk, steps, enc)?;
            let trace = record_trace(net, &batch)?;
            let (s, bs) = trace_synops(&trace);
            synops += s * chunk.len() as f64;
            bit_synops += bs * chunk.len() as f64;
            let ops = count_operations(net, &trace)?;
            adds += ops.adds();
            mults += ops.mults();
            syn += ops.synaptic_adds();
        }
        let n = data.len() as f64;
        let (adds, mults) = (adds as f64 / n, mults as f64 / n);
        let (bits, dense) = model_bits(net);
        Ok(ResourceReport {
            model: model.to_string(),
            accuracy: evaluate(net, data, enc, None)?,
            model_size_mb: bits_to_mb(bits),
            dense_size_mb: bits_to_mb(dense),
            synops: synops / n,
            bit_synops: bit_synops / n,
            adds,
            mults,
            synaptic_adds: syn as f64 / n,
            energy_mj: energy_from_counts(adds, mults),
            timesteps: steps,
            cell_bits: net
                .cells
                .iter()
                .map(|c| super::cell_bitwidth(net, c.bits))
                .collect(),
            pruning_rate: net.space.pruning_rate,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3},{:.6e},{}",
            self.model,
            self.accuracy,
            self.model_size_mb,
            self.synops,
            self.bit_synops,
            self.adds,
            self.mults,
            self.energy_mj,
            self.timesteps
        )
    }

    /// Header and row, preceded by a `# config <hash>` comment line.
    pub fn csv(&self) -> String {
        format!(
            "# config {}\n{REPORT_CSV_HEADER}\n{}\n",
            self.config_hash,
            self.csv_row()
        )
    }

    /// Human-readable summary, ending with the producing config hash.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let bits: Vec<String> = self.cell_bits.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "model          {}", self.model);
        let _ = writeln!(s, "accuracy       {:.2}%", 100.0 * self.accuracy);
        let _ = writeln!(
            s,
            "size           {:.6} MB ({:.2}% of {:.6} MB dense)",
            self.model_size_mb,
            100.0 * self.model_size_mb / self.dense_size_mb,
            self.dense_size_mb
        );
        let _ = writeln!(s, "cell bits      {}", bits.join(" "));
        let _ = writeln!(s, "pruning rate   {}%", self.pruning_rate);
        let _ = writeln!(s, "timesteps      {}", self.timesteps);
        let _ = writeln!(s, "SynOps         {:.1}", self.synops);
        let _ = writeln!(s, "bit-SynOps     {:.1}", self.bit_synops);
        let _ = writeln!(
            s,
            "adds / mults   {:.1} / {:.1} ({:.1} synaptic)",
            self.adds, self.mults, self.synaptic_adds
        );
        let _ = writeln!(s, "energy         {:.6e} mJ", self.energy_mj);
        let _ = writeln!(s, "config         {}", self.config_hash);
        s
    }
}

/// Measures `net` on `data` and, given `out_dir`, writes `report.csv` and
/// `report.txt` there.
pub fn emit_report<T: Scalar>(
    model: &str,
    net: &Network<T>,
    data: &Dataset<T>,
    enc: Encoding,
    config_hash: &str,
    out_dir: Option<&Path>,
) -> Result<ResourceReport> {
    let report = ResourceReport::measure(model, net, data, enc, config_hash)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), report.csv())?;
        fs::write(dir.join("report.txt"), report.to_text())?;
    }
    Ok(report)
}

/// One row of a pipeline comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub pipeline: String,
    pub report: ResourceReport,
    pub design_seconds: f64,
}

impl ComparisonRow {
    /// Measures a finished pipeline on `test`.
    pub fn from_pipeline<T: Scalar>(
        result: &PipelineResult<T>,
        test: &Dataset<T>,
        enc: Encoding,
        config_hash: &str,
    ) -> Result<Self> {
        Ok(ComparisonRow {
            pipeline: result.name.clone(),
            report: ResourceReport::measure(&result.name, &result.net, test, enc, config_hash)?,
            design_seconds: result.design_seconds,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.3},{:.3}",
            self.pipeline,
            self.report.accuracy,
            self.report.model_size_mb,
            self.report.bit_synops,
            self.design_seconds
        )
    }
}

pub fn comparison_csv(rows: &[ComparisonRow], config_hash: &str) -> String {
    let mut s = format!("# config {config_hash}\n{COMPARISON_CSV_HEADER}");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
