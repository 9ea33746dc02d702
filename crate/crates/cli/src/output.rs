use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ge_sched::simulator::ExperimentResult;

use crate::{CliError, ExperimentConfig};

/// Output directory plus the resolved config that heads every file.
pub(crate) struct Artifacts {
    dir: PathBuf,
    config: serde_json::Value,
    seed: u64,
}

#[derive(Serialize)]
struct Wrapped<'a, T> {
    config: &'a serde_json::Value,
    seed: u64,
    result: &'a T,
}

impl Artifacts {
    pub(crate) fn new(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let config = serde_json::to_value(cfg).map_err(|e| CliError::Parse(e.to_string()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            seed: cfg.seed,
        })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        log::info!("writing {}", path.display());
        Ok(BufWriter::new(f))
    }

    pub(crate) fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<(), CliError> {
        let mut f = self.create(name)?;
        let w = Wrapped {
            config: &self.config,
            seed: self.seed,
            result,
        };
        serde_json::to_writer_pretty(&mut f, &w).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    /// CSV writer whose file starts with `# config:` and `# seed:` lines.
    pub(crate) fn csv(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
        let mut f = self.create(name)?;
        writeln!(f, "# config: {}", self.config)?;
        writeln!(f, "# seed: {}", self.seed)?;
        Ok(csv::Writer::from_writer(f))
    }
}

const SUMMARY_HEADER: [&str; 16] = [
    "row",
    "rep_id",
    "seed",
    "weighted_throughput",
    "total_throughput_belief",
    "total_throughput_realized",
    "mean_active_count",
    "mean_candidates",
    "overflow_fraction",
    "broadcast_fraction",
    "mean_total_queue",
    "quarter1_total_queue",
    "quarter2_total_queue",
    "quarter3_total_queue",
    "quarter4_total_queue",
    "final_total_queue",
];

pub(crate) fn write_summary(art: &Artifacts, res: &ExperimentResult) -> Result<(), CliError> {
    let mut w = art.csv("summary.csv")?;
    w.write_record(SUMMARY_HEADER)?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); SUMMARY_HEADER.len() - 3];
    for r in &res.records {
        let vals = [
            r.weighted_throughput,
            r.total_throughput_belief,
            r.total_throughput_realized,
            r.mean_active_count,
            r.mean_candidates,
            r.overflow_fraction,
            r.broadcast_fraction,
            r.queue_time_averages.iter().sum(),
            r.quarter_queue_means[0],
            r.quarter_queue_means[1],
            r.quarter_queue_means[2],
            r.quarter_queue_means[3],
            r.final_queues.iter().sum::<u64>() as f64,
        ];
        let mut rec = vec!["replication".to_string(), r.rep_id.to_string(), r.seed.to_string()];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec)?;
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    let stats: Vec<_> = cols.iter().map(|c| ge_sched::simulator::Stat::from_samples(c)).collect();
    for (name, pick) in [("mean", 0), ("std", 1), ("ci95", 2)] {
        let mut rec = vec![name.to_string(), String::new(), String::new()];
        rec.extend(stats.iter().map(|s| [s.mean, s.std, s.ci95][pick].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_per_user(art: &Artifacts, res: &ExperimentResult) -> Result<(), CliError> {
    let mut w = art.csv("per_user.csv")?;
    w.write_record(["rep_id", "user", "throughput_belief", "throughput_realized", "mean_queue", "final_queue"])?;
    for r in &res.records {
        for u in 0..r.throughput_belief.len() {
            w.write_record([
                r.rep_id.to_string(),
                u.to_string(),
                r.throughput_belief[u].to_string(),
                r.throughput_realized[u].to_string(),
                r.queue_time_averages.get(u).copied().unwrap_or(0.0).to_string(),
                r.final_queues.get(u).copied().unwrap_or(0).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_frames(art: &Artifacts, res: &ExperimentResult) -> Result<(), CliError> {
    let mut w = art.csv("frames.csv")?;
    w.write_record(["rep_id", "frame", "t", "total_queue", "lyapunov", "drift_per_slot"])?;
    for r in &res.records {
        for (i, f) in r.frames.iter().enumerate() {
            let drift = r
                .frames
                .get(i + 1)
                .filter(|n| n.t > f.t)
                .map(|n| ((n.lyapunov - f.lyapunov) / (n.t - f.t) as f64).to_string())
                .unwrap_or_default();
            w.write_record([
                r.rep_id.to_string(),
                f.frame.to_string(),
                f.t.to_string(),
                f.total_queue.to_string(),
                f.lyapunov.to_string(),
                drift,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_trace(art: &Artifacts, res: &ExperimentResult) -> Result<(), CliError> {
    let mut w = art.csv("trace.csv")?;
    w.write_record(["rep_id", "t", "mode", "num_candidates", "num_scheduled", "served_users"])?;
    for r in &res.records {
        for row in &r.trace {
            let served: Vec<String> = row.served_users.iter().map(usize::to_string).collect();
            w.write_record([
                r.rep_id.to_string(),
                row.t.to_string(),
                row.mode.as_str().to_string(),
                row.num_candidates.to_string(),
                row.num_scheduled.to_string(),
                served.join(";"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
