//! CSV reports and the plain-text summary table.

use std::path::Path;

use crate::experiments::EvalReport;

pub const CSV_HEADER: &str = "method,w,L,s,auprc,ceil_dice,best_threshold,seed,norm,ddim_steps,data_hash,elapsed_secs,error";

fn field(v: Option<String>) -> String {
    v.unwrap_or_default()
}

/// One row per report, in order. Sampler columns are empty for non-sampling methods.
pub fn csv_text(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let s = r.meta.sampler.as_ref();
        let cols = [
            r.meta.method.replace([',', '\n'], " "),
            field(s.map(|c| c.guidance_scale.to_string())),
            field(s.map(|c| c.encode_steps.to_string())),
            field(s.map(|c| c.percentile.to_string())),
            r.auprc.to_string(),
            r.ceil_dice.to_string(),
            r.best_threshold.to_string(),
            r.meta.seed.to_string(),
            field(s.map(|c| c.normalization().tag().to_string())),
            field(s.map(|c| c.ddim_steps.to_string())),
            format!("{:016x}", r.meta.data_hash),
            format!("{:.3}", r.elapsed_secs),
            field(r.error.as_ref().map(|e| e.replace([',', '\n'], ";"))),
        ];
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Fixed-width summary with Dice and AUPRC in percent.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>5} {:>6} {:>8} {:>8} {:>10}\n",
        "method", "w", "L", "s", "AUPRC", "Dice", "threshold"
    );
    for r in reports {
        let s = r.meta.sampler.as_ref();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        if let Some(e) = &r.error {
            out.push_str(&format!("{:<14} failed: {e}\n", r.meta.method));
            continue;
        }
        out.push_str(&format!(
            "{:<14} {:>6} {:>5} {:>6} {:>8.1} {:>8.1} {:>10.4}\n",
            r.meta.method,
            opt(s.map(|c| c.guidance_scale.to_string())),
            opt(s.map(|c| c.encode_steps.to_string())),
            opt(s.map(|c| c.percentile.to_string())),
            100.0 * r.auprc,
            100.0 * r.ceil_dice,
            r.best_threshold
        ));
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` next to each other.
pub fn write_reports(dir: &Path, stem: &str, reports: &[EvalReport]) -> std::io::Result<()> {
    super::write_atomic(&dir.join(format!("{stem}.csv")), csv_text(reports).as_bytes())?;
    super::write_atomic(&dir.join(format!("{stem}.txt")), summary_table(reports).as_bytes())
}
